//! The `tierplan` command line.

pub mod manifest;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analytic::{
    if_gh, if_pp, if_tp, max_batch_gh, max_batch_pp, max_batch_tp, single_tier_capacity,
    two_tier_capacity, CostTable, TierTiming, TwoTierTimes,
};
use crate::des::{write_event_log, PopOrder, SimOptions};
use crate::error::{Error, Result};
use crate::model::{kv_bytes_per_prompt, weights_bytes, TransformerSpec};
use crate::netmodel::{tier1_total_egress, tier2_total_egress};
use crate::optimizer::{
    evaluate_with_report, inflight_bounds, optimize, ClusterSpec, Config, Goal, InflightPolicy,
    Objective, SearchOptions,
};
use crate::profiles::{ProfileSet, PROFILE_HEADER};
use crate::units::{parse_duration, Nanos};

use manifest::{result_args, RunManifest};
use report::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

/// Name accepted by `--model` for the built-in Llama2-70B dimensions.
pub const BUILTIN_MODEL: &str = "builtin:llama2-70b";

#[derive(Parser, Debug)]
#[command(name = "tierplan", version, about = "Capacity planner for two-tier LLM inference clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form memory, in-flight and bandwidth figures.
    Analyze(AnalyzeArgs),
    /// Simulate one (K, K', B) configuration.
    Simulate(SimulateArgs),
    /// Search all configurations for the best one.
    Optimize(OptimizeArgs),
    /// Check model, cluster, profile and price files.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct Outputs {
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the CSV output here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record the wall-clock time in the manifest.
    #[arg(long)]
    timestamp: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Model JSON, or `builtin:llama2-70b`.
    #[arg(long)]
    model: String,
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Kernel profile CSV files (merged).
    #[arg(long = "profiles", num_args = 1..)]
    profiles: Vec<PathBuf>,
    /// Context length (defaults to the cluster's, then the model's maximum).
    #[arg(long)]
    seq_len: Option<u64>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long = "k-prime", default_value_t = 0)]
    k_prime: u32,
    #[arg(long, default_value_t = 1)]
    batch: u32,
    /// Smallest compute step between tensor-parallel barriers, for IF_tp.
    #[arg(long = "tc-min", value_parser = parse_duration)]
    tc_min: Option<Nanos>,
    /// Aggregate tokens per second for the egress table.
    #[arg(long)]
    throughput: Option<f64>,
    #[command(flatten)]
    out: Outputs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PopArg {
    Latest,
    Earliest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Max,
    Min,
}

impl From<PolicyArg> for InflightPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Max => InflightPolicy::MaxAvailable,
            PolicyArg::Min => InflightPolicy::AnalyticMinimum,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long = "profiles", num_args = 1.., required = true)]
    profiles: Vec<PathBuf>,
    #[arg(long)]
    k: u32,
    #[arg(long = "k-prime", default_value_t = 0)]
    k_prime: u32,
    #[arg(long)]
    batch: u32,
    /// In-flight batches; defaults to what the inflight policy picks.
    #[arg(long)]
    inflight: Option<u64>,
    #[arg(long = "inflight-policy", value_enum, default_value = "max")]
    inflight_policy: PolicyArg,
    #[arg(long, default_value_t = 2)]
    warmup: u32,
    #[arg(long, default_value_t = 8)]
    iterations: u32,
    #[arg(long = "pop-order", value_enum, default_value = "latest")]
    pop_order: PopArg,
    /// Write every processed event as CSV.
    #[arg(long = "event-log")]
    event_log: Option<PathBuf>,
    /// Inter-tier RTT sweep `start:end[:step]`, e.g. `2ms:200ms:20ms`.
    #[arg(long = "rtt-sweep")]
    rtt_sweep: Option<String>,
    /// Raise IF at each sweep point to the closed-form minimum, as memory allows.
    #[arg(long = "scale-if")]
    scale_if: bool,
    /// Context-length sweep `start:end[:step]`.
    #[arg(long = "seq-len-sweep")]
    seq_len_sweep: Option<String>,
    #[arg(long = "costs")]
    costs: Option<PathBuf>,
    #[command(flatten)]
    out: Outputs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Throughput,
    Cost,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long = "profiles", num_args = 1.., required = true)]
    profiles: Vec<PathBuf>,
    #[arg(long = "costs")]
    costs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "throughput")]
    objective: ObjectiveArg,
    #[arg(long = "max-nodes")]
    max_nodes: Option<u64>,
    #[arg(long = "max-cost")]
    max_cost: Option<f64>,
    #[arg(long = "inflight-policy", value_enum, default_value = "max")]
    inflight_policy: PolicyArg,
    /// Simulate every available in-flight batch instead of capping at
    /// `--if-cap-factor` times the saturating count.
    #[arg(long = "no-if-cap")]
    no_if_cap: bool,
    #[arg(long = "if-cap-factor", default_value_t = 2.0)]
    if_cap_factor: f64,
    /// Try every batch size between the grid neighbours of the best one.
    #[arg(long)]
    refine: bool,
    #[arg(long, default_value_t = 1)]
    warmup: u32,
    #[arg(long, default_value_t = 4)]
    iterations: u32,
    #[arg(long = "pop-order", value_enum, default_value = "latest")]
    pop_order: PopArg,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Rows of the ranking printed to standard output.
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[command(flatten)]
    out: Outputs,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let flags = result_args(args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()));
    let outcome = match cli.command {
        Command::Analyze(a) => cmd_analyze(a, flags),
        Command::Simulate(a) => cmd_simulate(a, flags),
        Command::Optimize(a) => cmd_optimize(a, flags),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::MissingStage { .. }
        | Error::MissingPrice(_)
        | Error::Config(_)
        | Error::Io { .. } => EXIT_INPUT,
        Error::Unavailable(_) | Error::InsufficientData(_) => EXIT_INTERNAL,
    }
}

fn load_model(arg: &str, manifest: &mut RunManifest) -> Result<TransformerSpec> {
    if arg == BUILTIN_MODEL {
        return Ok(TransformerSpec::llama2_70b());
    }
    let path = Path::new(arg);
    manifest.add_input("model", path)?;
    TransformerSpec::load(path)
}

fn load_profiles(paths: &[PathBuf], manifest: &mut RunManifest) -> Result<ProfileSet> {
    let mut set = ProfileSet::new();
    for p in paths {
        manifest.add_input("profile", p)?;
        set.merge(ProfileSet::load(p)?)?;
    }
    for prof in set.devices() {
        for w in prof.warnings() {
            log::warn!("{}: {w}", prof.device_name);
        }
    }
    Ok(set)
}

fn load_costs(path: Option<&Path>, manifest: &mut RunManifest) -> Result<CostTable> {
    match path {
        Some(p) => {
            manifest.add_input("costs", p)?;
            CostTable::load(p)
        }
        None => Ok(CostTable::retail_2024()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn emit<T: Serialize>(out: &Outputs, mut manifest: RunManifest, body: T, csv: Option<String>) -> Result<()> {
    if out.timestamp {
        manifest.stamp_now();
    }
    if let Some(p) = &out.json {
        write_json(p, &Envelope { manifest, report: body })?;
    }
    if let (Some(p), Some(text)) = (&out.csv, csv) {
        write_text(p, &text)?;
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, flags: Vec<String>) -> Result<i32> {
    let mut manifest = RunManifest::new("analyze", flags);
    let spec = load_model(&a.model, &mut manifest)?;
    let cluster = match &a.cluster {
        Some(p) => {
            manifest.add_input("cluster", p)?;
            Some(ClusterSpec::load(p)?)
        }
        None => None,
    };
    let profiles = load_profiles(&a.profiles, &mut manifest)?;
    let seq_len = a
        .seq_len
        .or(cluster.as_ref().and_then(|c| c.seq_len))
        .unwrap_or(spec.max_seq_len);
    let mut report = AnalyzeReport {
        model: spec.name.clone(),
        seq_len,
        kv_bytes_per_prompt: kv_bytes_per_prompt(&spec, seq_len)?,
        weights_bytes: weights_bytes(&spec),
        layer_weight_bytes: spec.layer_weight_bytes(),
        config: None,
        stage_times: None,
        inflight: None,
        max_batch: None,
        egress: None,
        warnings: Vec::new(),
    };
    if let Some(k) = a.k {
        if k == 0 || k > spec.n_layers {
            return Err(Error::invalid(format!("--k must be in 1..={}", spec.n_layers)));
        }
        report.config = Some(ConfigKey {
            k,
            k_prime: a.k_prime,
            batch: a.batch,
        });
        if let Some(thr) = a.throughput {
            let t1 = tier1_total_egress(k, spec.n_layers, &spec, thr)? / 1e9;
            let t2 = tier2_total_egress(k, spec.n_layers, &spec, thr)? / 1e9;
            let tier2_nodes = k as u64 * a.k_prime as u64;
            report.egress = Some(EgressRow {
                k,
                k_prime: a.k_prime,
                tokens_per_sec: thr,
                tier1_total_gbps: t1,
                tier2_total_gbps: t2,
                tier1_per_node_gbps: t1 / k as f64,
                tier2_per_node_gbps: (tier2_nodes > 0).then(|| t2 / tier2_nodes as f64),
            });
        }
        if let Some(cluster) = &cluster {
            analyze_timing(&a, k, &spec, cluster, &profiles, seq_len, &mut report)?;
        }
    }
    print!("{}", analyze_text(&report));
    emit(&a.out, manifest, report, None)?;
    Ok(EXIT_OK)
}

fn analyze_timing(
    a: &AnalyzeArgs,
    k: u32,
    spec: &TransformerSpec,
    cluster: &ClusterSpec,
    profiles: &ProfileSet,
    seq_len: u64,
    report: &mut AnalyzeReport,
) -> Result<()> {
    let tier1 = profiles.get(&cluster.tier1.device_name)?;
    let tier2 = if a.k_prime > 0 {
        Some(profiles.get(&cluster.tier2.device_name)?)
    } else {
        None
    };
    let timing = TierTiming {
        spec,
        tier1,
        tier2,
        links: cluster.links,
        seq_len: Some(seq_len),
    };
    let kp = a.k_prime.max(1) as u64;
    let b1 = a.batch as u64 * kp;
    let t_noatt = timing.tier1_nonattention(b1)?;
    let t_layer = timing.tier1_layer(b1).ok();
    let hop = timing.intra_hop(b1);
    let t_att2 = if a.k_prime > 0 { Some(timing.tier2_attention(a.batch as u64)?) } else { None };
    let rt = (a.k_prime > 0).then(|| timing.inter_round_trip(b1));
    report.stage_times = Some(StageTimes {
        tier1_layer: t_layer.unwrap_or(t_noatt),
        tier1_nonattention: t_noatt,
        tier2_attention: t_att2,
        intra_hop: hop,
        inter_round_trip: rt,
    });
    let t_c = t_layer.unwrap_or(t_noatt);
    let gh = match (t_att2, rt) {
        (Some(att), Some(rt)) => Some(if_gh(att, rt, t_noatt)?),
        _ => None,
    };
    report.inflight = Some(InflightSummary {
        if_pp: if_pp(k, spec.n_layers, t_c, hop)?,
        if_tp: a.tc_min.map(|t| if_tp(k, t, hop)).transpose()?,
        if_gh: gh,
        two_tier_minimum: gh.map(|g| g * k as u64),
    });
    report.warnings.extend(timing.coverage_notes(b1, t_att2.map(|_| a.batch as u64)));

    let mut mb = MaxBatchSummary {
        single_tier_slots: None,
        pipeline: None,
        tensor: None,
        two_tier_slots: None,
        two_tier: None,
    };
    match single_tier_capacity(spec, k, cluster.tier1.memory_bytes_per_node, seq_len) {
        Ok(cap) if t_layer.is_some() => {
            mb.single_tier_slots = Some(cap.slots);
            match max_batch_pp(k, spec.n_layers, cap.slots, |b| timing.tier1_layer(b), |b| Ok(timing.intra_hop(b))) {
                Ok(p) => mb.pipeline = Some(p),
                Err(e) => report.warnings.push(format!("pipeline: {e}")),
            }
            if let Some(tc) = a.tc_min {
                // tensor shards split every layer, so all K nodes pool their free memory
                let slots = cap.slots.saturating_mul(k as u64);
                let scale = |b: u64| -> Result<Nanos> {
                    let base = timing.tier1_layer(1)?;
                    let at_b = timing.tier1_layer(b)?;
                    Ok(Nanos((tc.0 as u128 * at_b.0 as u128 / base.0.max(1) as u128) as u64))
                };
                match max_batch_tp(k, slots, scale, |b| Ok(timing.intra_hop(b))) {
                    Ok(p) => mb.tensor = Some(p),
                    Err(e) => report.warnings.push(format!("tensor: {e}")),
                }
            }
        }
        Ok(_) => {}
        Err(e) => report.warnings.push(format!("single tier: {e}")),
    }
    if a.k_prime > 0 {
        let cap = two_tier_capacity(spec, k, a.k_prime, cluster.tier2_context_bytes(), seq_len);
        mb.two_tier_slots = Some(cap.slots);
        let times = TwoTierTimes {
            t_att: |b: u64| timing.tier2_attention(b),
            t_roundtrip: |b: u64| Ok(timing.inter_round_trip(b)),
            t_noatt: |b: u64| timing.tier1_nonattention(b),
            t_pipeline_hop: |b: u64| Ok(timing.intra_hop(b)),
        };
        match max_batch_gh(k, a.k_prime, spec.n_layers, cap.slots, &times) {
            Ok(p) => mb.two_tier = Some(p),
            Err(e) => report.warnings.push(format!("two tier: {e}")),
        }
    }
    report.max_batch = Some(mb);
    Ok(())
}

fn parse_range<T, F>(text: &str, parse: F, default_points: u64) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
    T: Copy + Into<u64> + From<u64>,
{
    let parts: Vec<&str> = text.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(Error::invalid(format!("range `{text}` must be start:end[:step]")));
    }
    let start: u64 = parse(parts[0])?.into();
    let end: u64 = parse(parts[1])?.into();
    if end < start {
        return Err(Error::invalid(format!("range `{text}` ends before it starts")));
    }
    let step: u64 = match parts.get(2) {
        Some(s) => parse(s)?.into(),
        None => ((end - start) / default_points).max(1),
    };
    if step == 0 {
        return Err(Error::invalid(format!("range `{text}` has a zero step")));
    }
    let mut out = Vec::new();
    let mut v = start;
    while v <= end {
        out.push(T::from(v));
        v += step;
    }
    if out.last().map(|&x| x.into()) != Some(end) {
        out.push(T::from(end));
    }
    Ok(out)
}

impl From<Nanos> for u64 {
    fn from(n: Nanos) -> u64 {
        n.0
    }
}

impl From<u64> for Nanos {
    fn from(v: u64) -> Nanos {
        Nanos(v)
    }
}

fn pop(p: PopArg) -> PopOrder {
    match p {
        PopArg::Latest => PopOrder::LatestStage,
        PopArg::Earliest => PopOrder::EarliestStage,
    }
}

fn cmd_simulate(a: SimulateArgs, flags: Vec<String>) -> Result<i32> {
    let mut manifest = RunManifest::new("simulate", flags);
    let spec = load_model(&a.model, &mut manifest)?;
    manifest.add_input("cluster", &a.cluster)?;
    let cluster = ClusterSpec::load(&a.cluster)?;
    let profiles = load_profiles(&a.profiles, &mut manifest)?;
    let costs = load_costs(a.costs.as_deref(), &mut manifest)?;
    let config = Config {
        k: a.k,
        k_prime: a.k_prime,
        batch: a.batch,
    };
    if a.k == 0 || a.batch == 0 {
        return Err(Error::invalid("--k and --batch must be positive"));
    }
    let options = SearchOptions {
        inflight_policy: a.inflight_policy.into(),
        sim: SimOptions {
            warmup: a.warmup,
            iterations: a.iterations,
            pop_order: pop(a.pop_order),
            keep_log: a.event_log.is_some(),
            ..SimOptions::default()
        },
        inflight_cap_factor: None,
        refine: false,
        inflight_override: a.inflight,
    };
    let (result, sim) = evaluate_with_report(config, &cluster, &spec, &profiles, &costs, &options)?;
    let Some(sim) = sim.filter(|_| result.feasible) else {
        return Err(Error::Infeasible {
            constraint: result.binding_constraint,
            detail: format!("K={} K'={} B={}: {}", a.k, a.k_prime, a.batch, result.note),
        });
    };
    if let (Some(path), Some(log)) = (&a.event_log, &sim.event_log) {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        write_event_log(log, std::io::BufWriter::new(file))?;
    }
    let mut sweep = Vec::new();
    let sweep_opts = SearchOptions {
        sim: SimOptions {
            keep_log: false,
            ..options.sim
        },
        ..options
    };
    if let Some(text) = &a.rtt_sweep {
        for rtt in parse_range(text, parse_duration, 10)? {
            let mut c = cluster.clone();
            if a.k_prime > 0 {
                c.links.inter_tier.rtt = rtt;
            } else {
                c.links.intra_tier1.rtt = rtt;
            }
            let (available, minimum) = inflight_bounds(config, &c, &spec, &profiles)?;
            let mut inflight = result.inflight;
            if a.scale_if {
                inflight = inflight.max(minimum.min(available));
            }
            let o = SearchOptions {
                inflight_override: Some(inflight),
                ..sweep_opts
            };
            let (r, _) = evaluate_with_report(config, &c, &spec, &profiles, &costs, &o)?;
            sweep.push(SweepPoint {
                rtt_ns: Some(rtt),
                seq_len: None,
                inflight,
                inflight_available: available,
                tbt_ns: r.tbt_ns,
                throughput: r.throughput,
                tier1_utilization: r.tier1_utilization,
            });
        }
    }
    if let Some(text) = &a.seq_len_sweep {
        let parse_u64 = |s: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad sequence length `{s}`")))
        };
        for seq in parse_range(text, parse_u64, 10)? {
            let mut c = cluster.clone();
            c.seq_len = Some(seq);
            let (r, _) = evaluate_with_report(config, &c, &spec, &profiles, &costs, &sweep_opts)?;
            sweep.push(SweepPoint {
                rtt_ns: None,
                seq_len: Some(seq),
                inflight: r.inflight,
                inflight_available: r.inflight_available,
                tbt_ns: r.tbt_ns,
                throughput: r.throughput,
                tier1_utilization: r.tier1_utilization,
            });
        }
    }
    let csv = if sweep.is_empty() {
        sweep_csv(&[SweepPoint {
            rtt_ns: Some(if a.k_prime > 0 { cluster.links.inter_tier.rtt } else { cluster.links.intra_tier1.rtt }),
            seq_len: Some(cluster.seq_len_for(&spec)),
            inflight: result.inflight,
            inflight_available: result.inflight_available,
            tbt_ns: result.tbt_ns,
            throughput: result.throughput,
            tier1_utilization: result.tier1_utilization,
        }])
    } else {
        sweep_csv(&sweep)
    };
    let mut warnings = Vec::new();
    for p in profiles.devices() {
        warnings.extend(p.warnings().iter().map(|w| format!("{}: {w}", p.device_name)));
    }
    let body = SimulateReport {
        result,
        simulation: sim,
        sweep,
        warnings,
    };
    print!("{}", simulate_text(&body));
    emit(&a.out, manifest, body, Some(csv))?;
    Ok(EXIT_OK)
}

fn cmd_optimize(a: OptimizeArgs, flags: Vec<String>) -> Result<i32> {
    let mut manifest = RunManifest::new("optimize", flags);
    let spec = load_model(&a.model, &mut manifest)?;
    manifest.add_input("cluster", &a.cluster)?;
    let cluster = ClusterSpec::load(&a.cluster)?;
    let profiles = load_profiles(&a.profiles, &mut manifest)?;
    let costs = load_costs(a.costs.as_deref(), &mut manifest)?;
    if !(a.if_cap_factor.is_finite() && a.if_cap_factor >= 1.0) {
        return Err(Error::invalid("--if-cap-factor must be at least 1"));
    }
    let objective = Objective {
        goal: match a.objective {
            ObjectiveArg::Throughput => Goal::MaxThroughput,
            ObjectiveArg::Cost => Goal::MinCostPerThroughput,
        },
        max_nodes: a.max_nodes,
        max_cost: a.max_cost,
    };
    let options = SearchOptions {
        inflight_policy: a.inflight_policy.into(),
        sim: SimOptions {
            warmup: a.warmup,
            iterations: a.iterations,
            pop_order: pop(a.pop_order),
            ..SimOptions::default()
        },
        inflight_cap_factor: (!a.no_if_cap).then_some(a.if_cap_factor),
        refine: a.refine,
        inflight_override: None,
    };
    let run = || optimize(&cluster, &spec, &profiles, &costs, &objective, &options);
    let outcome = match a.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let body = OptimizeReport {
        goal: objective.goal,
        best: outcome.best,
        evaluated: outcome.evaluated,
        feasible: outcome.ranked.len(),
        ranked: outcome.ranked,
    };
    print!("{}", optimize_text(&body, a.top));
    let csv = ranked_csv(&body.ranked);
    emit(&a.out, manifest, body, Some(csv))?;
    Ok(EXIT_OK)
}

fn diag(file: &Path, kind: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        file: file.display().to_string(),
        kind: kind.into(),
        message: message.into(),
    }
}

/// Checks one file, guessing its kind from extension and content.
pub fn validate_file(path: &Path) -> Vec<Diagnostic> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return vec![diag(path, "io", e.to_string())],
    };
    let origin = path.display().to_string();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("json") {
        let value: serde_json::Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                return vec![diag(path, "json", format!("{origin}:{}:{}: {e}", e.line(), e.column()))]
            }
        };
        if value.get("tier1").is_some() {
            return match ClusterSpec::from_json_str(&text, &origin) {
                Ok(_) => Vec::new(),
                Err(e) => vec![diag(path, "cluster", e.to_string())],
            };
        }
        return match serde_json::from_str::<TransformerSpec>(&text) {
            Ok(spec) => spec.violations().into_iter().map(|v| diag(path, "model", v)).collect(),
            Err(e) => vec![diag(path, "model", format!("{origin}:{}:{}: {e}", e.line(), e.column()))],
        };
    }
    let header = text.lines().next().unwrap_or("");
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns == PROFILE_HEADER {
        match ProfileSet::from_csv_str(&text, &origin) {
            Ok(_) => Vec::new(),
            Err(e) => vec![diag(path, "profile", e.to_string())],
        }
    } else if columns == ["device", "unit_price_usd"] {
        match CostTable::from_csv_reader(text.as_bytes(), &origin) {
            Ok(_) => Vec::new(),
            Err(e) => vec![diag(path, "costs", e.to_string())],
        }
    } else {
        vec![diag(
            path,
            "unknown",
            format!("{origin}:1: not a model/cluster JSON, profile CSV or price CSV"),
        )]
    }
}

fn cmd_validate(a: ValidateArgs) -> Result<i32> {
    let mut report = ValidateReport {
        checked: Vec::new(),
        diagnostics: Vec::new(),
    };
    for f in &a.files {
        report.checked.push(f.display().to_string());
        report.diagnostics.extend(validate_file(f));
    }
    print!("{}", validate_text(&report));
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(if report.diagnostics.is_empty() { EXIT_OK } else { EXIT_INPUT })
}
