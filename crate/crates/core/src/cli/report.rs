use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::manifest::RunManifest;
use crate::analytic::{BatchPlan, TwoTierPlan};
use crate::des::SimReport;
use crate::optimizer::{ConfigResult, Goal};
use crate::units::Nanos;

/// A report body together with the manifest that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub manifest: RunManifest,
    pub report: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigKey {
    pub k: u32,
    pub k_prime: u32,
    pub batch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimes {
    pub tier1_layer: Nanos,
    pub tier1_nonattention: Nanos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier2_attention: Option<Nanos>,
    pub intra_hop: Nanos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_round_trip: Option<Nanos>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InflightSummary {
    pub if_pp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub if_tp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub if_gh: Option<u64>,
    /// `K * IF_gh` for the two-tier pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_tier_minimum: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxBatchSummary {
    pub single_tier_slots: Option<u64>,
    pub pipeline: Option<BatchPlan>,
    pub tensor: Option<BatchPlan>,
    pub two_tier_slots: Option<u64>,
    pub two_tier: Option<TwoTierPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgressRow {
    pub k: u32,
    pub k_prime: u32,
    pub tokens_per_sec: f64,
    pub tier1_total_gbps: f64,
    pub tier2_total_gbps: f64,
    pub tier1_per_node_gbps: f64,
    pub tier2_per_node_gbps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub model: String,
    pub seq_len: u64,
    pub kv_bytes_per_prompt: u64,
    pub weights_bytes: u64,
    pub layer_weight_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_times: Option<StageTimes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflight: Option<InflightSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch: Option<MaxBatchSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub egress: Option<EgressRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rtt_ns: Option<Nanos>,
    pub seq_len: Option<u64>,
    pub inflight: u64,
    pub inflight_available: u64,
    pub tbt_ns: f64,
    pub throughput: f64,
    pub tier1_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub result: ConfigResult,
    pub simulation: SimReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub goal: Goal,
    pub best: ConfigResult,
    pub evaluated: usize,
    pub feasible: usize,
    pub ranked: Vec<ConfigResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub checked: Vec<String>,
    pub diagnostics: Vec<Diagnostic>,
}

pub const RANKED_HEADER: [&str; 8] = [
    "K",
    "K'",
    "B",
    "IF",
    "throughput",
    "cost",
    "cost_per_thr",
    "binding_constraint",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn ranked_csv(rows: &[ConfigResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RANKED_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.k_prime.to_string(),
            r.batch.to_string(),
            r.inflight.to_string(),
            r.throughput.to_string(),
            opt(r.cost),
            opt(r.cost_per_throughput),
            r.binding_constraint.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rtt_ms",
        "seq_len",
        "inflight",
        "inflight_available",
        "tbt_ms",
        "throughput_tok_s",
        "tier1_utilization",
    ])
    .expect("in-memory write");
    for p in points {
        w.write_record([
            p.rtt_ns.map_or(String::new(), |r| r.as_ms_f64().to_string()),
            p.seq_len.map_or(String::new(), |s| s.to_string()),
            p.inflight.to_string(),
            p.inflight_available.to_string(),
            (p.tbt_ns / 1e6).to_string(),
            p.throughput.to_string(),
            p.tier1_utilization.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn gib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

pub fn analyze_text(r: &AnalyzeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {} at seq_len {}", r.model, r.seq_len);
    let _ = writeln!(
        s,
        "  kv per prompt   {} bytes ({:.3} MiB)",
        r.kv_bytes_per_prompt,
        r.kv_bytes_per_prompt as f64 / (1u64 << 20) as f64
    );
    let _ = writeln!(s, "  weights         {} bytes ({:.2} GiB)", r.weights_bytes, gib(r.weights_bytes));
    if let Some(c) = r.config {
        let _ = writeln!(s, "config K={} K'={} B={}", c.k, c.k_prime, c.batch);
    }
    if let Some(t) = r.stage_times {
        let _ = writeln!(s, "  tier-1 layer    {}", t.tier1_layer);
        let _ = writeln!(s, "  tier-1 non-att  {}", t.tier1_nonattention);
        if let Some(a) = t.tier2_attention {
            let _ = writeln!(s, "  tier-2 att      {a}");
        }
        let _ = writeln!(s, "  intra hop       {}", t.intra_hop);
        if let Some(rt) = t.inter_round_trip {
            let _ = writeln!(s, "  inter round trip {rt}");
        }
    }
    if let Some(i) = r.inflight {
        let _ = writeln!(s, "  IF_pp {}", i.if_pp);
        if let Some(v) = i.if_tp {
            let _ = writeln!(s, "  IF_tp {v}");
        }
        if let (Some(g), Some(m)) = (i.if_gh, i.two_tier_minimum) {
            let _ = writeln!(s, "  IF_gh {g} per Tier-1 node, {m} in total");
        }
    }
    if let Some(m) = r.max_batch {
        if let Some(p) = m.pipeline {
            let _ = writeln!(s, "  max batch (pipeline)  B={} IF={}", p.batch, p.inflight);
        }
        if let Some(p) = m.tensor {
            let _ = writeln!(s, "  max batch (tensor)    B={} IF={}", p.batch, p.inflight);
        }
        if let Some(p) = m.two_tier {
            let _ = writeln!(
                s,
                "  max batch (two-tier)  B={} per shard, {} on Tier 1, IF_gh={} IF_pp={}",
                p.shard_batch, p.tier1_batch, p.if_gh, p.if_pp
            );
        }
    }
    if let Some(e) = r.egress {
        let _ = writeln!(s, "egress at {} tok/s", e.tokens_per_sec);
        let _ = writeln!(
            s,
            "  tier-1 {:.2} Gbps total, {:.2} Gbps per node",
            e.tier1_total_gbps, e.tier1_per_node_gbps
        );
        let _ = write!(s, "  tier-2 {:.2} Gbps total", e.tier2_total_gbps);
        if let Some(p) = e.tier2_per_node_gbps {
            let _ = write!(s, ", {p:.2} Gbps per node");
        }
        s.push('\n');
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn result_line(r: &ConfigResult) -> String {
    let cost = r.cost.map_or("n/a".to_string(), |c| format!("${c:.0}"));
    format!(
        "K={} K'={} B={} IF={} ({} available, {} minimum)  {:.2} tok/s  tbt {:.3} ms  util {:.3}  cost {}  bound by {}",
        r.k,
        r.k_prime,
        r.batch,
        r.inflight,
        r.inflight_available,
        r.inflight_minimum,
        r.throughput,
        r.tbt_ns / 1e6,
        r.tier1_utilization,
        cost,
        r.binding_constraint
    )
}

pub fn simulate_text(r: &SimulateReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", result_line(&r.result));
    let b = &r.simulation.breakdown;
    if b.passes > 0 {
        let per = |n: Nanos| n.as_ms_f64() / b.passes as f64;
        let _ = writeln!(
            s,
            "per token: compute {:.3} ms, link {:.3} ms, delay {:.3} ms, queue {:.3} ms",
            per(b.compute),
            per(b.link),
            per(b.static_delay),
            per(b.queue)
        );
    }
    if !r.sweep.is_empty() {
        s.push_str(&sweep_csv(&r.sweep));
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    if !r.result.note.is_empty() {
        let _ = writeln!(s, "note: {}", r.result.note);
    }
    s
}

pub fn optimize_text(r: &OptimizeReport, top: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "best: {}", result_line(&r.best));
    let _ = writeln!(s, "{} configurations evaluated, {} feasible", r.evaluated, r.feasible);
    for (i, c) in r.ranked.iter().take(top).enumerate() {
        let _ = writeln!(s, "{:>4}. {}", i + 1, result_line(c));
    }
    s
}

pub fn validate_text(r: &ValidateReport) -> String {
    let mut s = String::new();
    for d in &r.diagnostics {
        let _ = writeln!(s, "{}: [{}] {}", d.file, d.kind, d.message);
    }
    let _ = writeln!(
        s,
        "{} file(s) checked, {} problem(s)",
        r.checked.len(),
        r.diagnostics.len()
    );
    s
}
