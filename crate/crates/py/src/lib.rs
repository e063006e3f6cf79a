//! Python bindings. Scalars go in and out directly; structured results come
//! back as JSON text for `json.loads`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tierplan::analytic::{self, CostTable};
use tierplan::des::{self, PopOrder, SimOptions, SingleTierStages, TwoTierStages};
use tierplan::model;
use tierplan::optimizer::{self, ClusterSpec, Goal, Objective, SearchOptions};
use tierplan::profiles::ProfileSet;
use tierplan::{Error, Nanos, TransformerSpec};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn spec_from(model_json: Option<&str>) -> PyResult<TransformerSpec> {
    match model_json {
        None => Ok(TransformerSpec::llama2_70b()),
        Some(text) => TransformerSpec::from_json_str(text, "<model>").map_err(py_err),
    }
}

fn pop_order(name: &str) -> PyResult<PopOrder> {
    match name {
        "latest" => Ok(PopOrder::LatestStage),
        "earliest" => Ok(PopOrder::EarliestStage),
        other => Err(PyValueError::new_err(format!("pop order `{other}`: expected latest or earliest"))),
    }
}

/// KV-cache bytes for one prompt; the built-in Llama2-70B when no model JSON is given.
#[pyfunction]
#[pyo3(signature = (seq_len, model_json=None))]
fn kv_bytes_per_prompt(seq_len: u64, model_json: Option<&str>) -> PyResult<u64> {
    model::kv_bytes_per_prompt(&spec_from(model_json)?, seq_len).map_err(py_err)
}

#[pyfunction]
fn if_pp(k: u32, n_layers: u32, t_c_ns: u64, t_n_ns: u64) -> PyResult<u64> {
    analytic::if_pp(k, n_layers, Nanos(t_c_ns), Nanos(t_n_ns)).map_err(py_err)
}

#[pyfunction]
fn if_tp(k: u32, t_c_min_ns: u64, t_n_ns: u64) -> PyResult<u64> {
    analytic::if_tp(k, Nanos(t_c_min_ns), Nanos(t_n_ns)).map_err(py_err)
}

#[pyfunction]
fn if_gh(t_att_ns: u64, t_roundtrip_ns: u64, t_noatt_ns: u64) -> PyResult<u64> {
    analytic::if_gh(Nanos(t_att_ns), Nanos(t_roundtrip_ns), Nanos(t_noatt_ns)).map_err(py_err)
}

/// Simulates a two-tier cluster from fixed per-layer latencies (ns).
#[pyfunction]
#[pyo3(signature = (
    n_layers, k, k_prime, batch, inflight, nonattention_ns, attention_ns,
    to_tier2_ns=0, rtt_ns=0, to_tier1_ns=0, classifier_ns=0,
    warmup=2, iterations=8, pop="latest"
))]
#[allow(clippy::too_many_arguments)]
fn simulate_two_tier(
    n_layers: u32,
    k: u32,
    k_prime: u32,
    batch: u64,
    inflight: u32,
    nonattention_ns: u64,
    attention_ns: u64,
    to_tier2_ns: u64,
    rtt_ns: u64,
    to_tier1_ns: u64,
    classifier_ns: u64,
    warmup: u32,
    iterations: u32,
    pop: &str,
) -> PyResult<String> {
    let stages = TwoTierStages {
        n_layers,
        k,
        nonattention: Nanos(nonattention_ns),
        to_tier2: Nanos(to_tier2_ns),
        rtt: Nanos(rtt_ns),
        attention: Nanos(attention_ns),
        to_tier1: Nanos(to_tier1_ns),
        classifier: Nanos(classifier_ns),
    };
    let opts = SimOptions {
        warmup,
        iterations,
        pop_order: pop_order(pop)?,
        ..SimOptions::default()
    };
    to_json(&des::simulate_two_tier(&stages, k_prime, batch, inflight, opts).map_err(py_err)?)
}

/// Simulates a GPU-only pipeline from fixed per-layer latencies (ns).
#[pyfunction]
#[pyo3(signature = (n_layers, k, batch, inflight, compute_ns, link_ns=0, rtt_ns=0, classifier_ns=0, warmup=2, iterations=8))]
#[allow(clippy::too_many_arguments)]
fn simulate_single_tier(
    n_layers: u32,
    k: u32,
    batch: u64,
    inflight: u32,
    compute_ns: u64,
    link_ns: u64,
    rtt_ns: u64,
    classifier_ns: u64,
    warmup: u32,
    iterations: u32,
) -> PyResult<String> {
    let stages = SingleTierStages {
        n_layers,
        k,
        compute: Nanos(compute_ns),
        link: Nanos(link_ns),
        rtt: Nanos(rtt_ns),
        classifier: Nanos(classifier_ns),
    };
    let opts = SimOptions {
        warmup,
        iterations,
        ..SimOptions::default()
    };
    to_json(&des::simulate_single_tier(&stages, batch, inflight, opts).map_err(py_err)?)
}

/// Searches every configuration. Inputs are file contents, not paths.
#[pyfunction]
#[pyo3(signature = (cluster_json, profiles_csv, model_json=None, objective="throughput", costs_csv=None))]
fn optimize(
    cluster_json: &str,
    profiles_csv: &str,
    model_json: Option<&str>,
    objective: &str,
    costs_csv: Option<&str>,
) -> PyResult<String> {
    let spec = spec_from(model_json)?;
    let cluster = ClusterSpec::from_json_str(cluster_json, "<cluster>").map_err(py_err)?;
    let profiles = ProfileSet::from_csv_str(profiles_csv, "<profiles>").map_err(py_err)?;
    let costs = match costs_csv {
        Some(text) => CostTable::from_csv_reader(text.as_bytes(), "<costs>").map_err(py_err)?,
        None => CostTable::default(),
    };
    let goal = match objective {
        "throughput" => Goal::MaxThroughput,
        "cost" => Goal::MinCostPerThroughput,
        other => return Err(PyValueError::new_err(format!("objective `{other}`: expected throughput or cost"))),
    };
    let objective = Objective {
        goal,
        ..Objective::default()
    };
    let out = optimizer::optimize(&cluster, &spec, &profiles, &costs, &objective, &SearchOptions::default())
        .map_err(py_err)?;
    to_json(&serde_json::json!({
        "best": out.best,
        "evaluated": out.evaluated,
        "ranked": out.ranked,
    }))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    tierplan::cli::run(std::iter::once("tierplan".to_string()).chain(args))
}

#[pymodule]
fn tierplan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kv_bytes_per_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(if_pp, m)?)?;
    m.add_function(wrap_pyfunction!(if_tp, m)?)?;
    m.add_function(wrap_pyfunction!(if_gh, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_two_tier, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_single_tier, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
