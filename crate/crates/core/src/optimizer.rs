//! Exhaustive search over Tier-1 node count `K`, Tier-2 nodes per Tier-1 node
//! `K'` and per-shard batch `B`. `K' = 0` is the single-tier baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    if_gh, if_pp, node_weight_bytes, single_tier_capacity, two_tier_capacity, CostTable, TierTiming,
};
use crate::des::{
    simulate, ConfigEcho, PipeKind, SimOptions, SimReport, SingleTierStages, Topology, TwoTierStages,
};
use crate::error::{BindingConstraint, Error, Result};
use crate::model::{weights_bytes, TransformerSpec};
use crate::netmodel::ClusterLinks;
use crate::profiles::{batch_grid, ProfileSet, StageKind};
use crate::units::Nanos;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub device_name: String,
    pub node_count_max: u32,
    pub memory_bytes_per_node: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oversubscription {
    #[serde(default = "default_two_tier")]
    pub two_tier: f64,
    #[serde(default = "default_single_tier")]
    pub single_tier: f64,
}

fn default_two_tier() -> f64 {
    3.0
}

fn default_single_tier() -> f64 {
    2.0
}

impl Default for Oversubscription {
    fn default() -> Self {
        Oversubscription {
            two_tier: default_two_tier(),
            single_tier: default_single_tier(),
        }
    }
}

fn default_max_batch() -> u32 {
    4096
}

fn default_reserve() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub tier1: TierSpec,
    pub tier2: TierSpec,
    pub links: ClusterLinks,
    #[serde(default)]
    pub oversubscription: Oversubscription,
    /// Context length used for memory and attention lookups; the model's
    /// maximum when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[serde(default = "default_max_batch")]
    pub max_batch: u32,
    /// Share of Tier-2 memory kept back from the context pool.
    #[serde(default = "default_reserve")]
    pub tier2_reserve_fraction: f64,
}

impl ClusterSpec {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let spec: ClusterSpec = serde_json::from_str(text).map_err(|e| {
            Error::parse(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string())
        })?;
        let v = spec.violations();
        if v.is_empty() {
            Ok(spec)
        } else {
            Err(Error::parse(origin, v.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, o) in [
            ("oversubscription.two_tier", self.oversubscription.two_tier),
            ("oversubscription.single_tier", self.oversubscription.single_tier),
        ] {
            if !(o.is_finite() && o >= 1.0) {
                out.push(format!("{name} must be at least 1.0 (got {o})"));
            }
        }
        if self.tier1.node_count_max == 0 {
            out.push("tier1.node_count_max must be positive".into());
        }
        if self.tier1.memory_bytes_per_node == 0 {
            out.push("tier1.memory_bytes_per_node must be positive".into());
        }
        for (name, t) in [("tier1", &self.tier1), ("tier2", &self.tier2)] {
            if let Some(c) = t.unit_cost {
                if !(c.is_finite() && c >= 0.0) {
                    out.push(format!("{name}.unit_cost must be non-negative (got {c})"));
                }
            }
        }
        if self.max_batch == 0 {
            out.push("max_batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.tier2_reserve_fraction) {
            out.push(format!(
                "tier2_reserve_fraction must be in [0, 1) (got {})",
                self.tier2_reserve_fraction
            ));
        }
        out
    }

    pub fn seq_len_for(&self, spec: &TransformerSpec) -> u64 {
        self.seq_len.unwrap_or(spec.max_seq_len)
    }

    /// Tier-2 bytes per node available for context.
    pub fn tier2_context_bytes(&self) -> u64 {
        (self.tier2.memory_bytes_per_node as f64 * (1.0 - self.tier2_reserve_fraction)).floor() as u64
    }

    fn unit_price(&self, tier: &TierSpec, table: &CostTable) -> Option<f64> {
        tier.unit_cost.or_else(|| table.price(&tier.device_name).ok())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    #[default]
    MaxThroughput,
    MinCostPerThroughput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub goal: Goal,
    /// Upper bound on `K + K*K'`.
    pub max_nodes: Option<u64>,
    pub max_cost: Option<f64>,
}

/// Which in-flight count the simulator is run with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflightPolicy {
    /// Everything the (oversubscribed) context memory allows.
    #[default]
    MaxAvailable,
    /// The closed-form minimum, if memory allows it.
    AnalyticMinimum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub inflight_policy: InflightPolicy,
    pub sim: SimOptions,
    /// Simulate at most `factor * IF_sat` batches, where `IF_sat` is the
    /// count that saturates the bottleneck pipe. `None` simulates every
    /// available batch.
    pub inflight_cap_factor: Option<f64>,
    /// Also try every batch between the neighbours of the best grid point.
    pub refine: bool,
    /// Simulate exactly this many batches, ignoring policy and cap.
    pub inflight_override: Option<u64>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            inflight_policy: InflightPolicy::MaxAvailable,
            sim: SimOptions {
                warmup: 1,
                iterations: 4,
                ..SimOptions::default()
            },
            inflight_cap_factor: Some(2.0),
            refine: false,
            inflight_override: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Config {
    pub k: u32,
    pub k_prime: u32,
    pub batch: u32,
}

impl Config {
    pub fn tier1_batch(&self) -> u64 {
        self.batch as u64 * self.k_prime.max(1) as u64
    }

    pub fn nodes(&self) -> u64 {
        self.k as u64 * (1 + self.k_prime as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub k: u32,
    pub k_prime: u32,
    pub batch: u32,
    pub tier1_batch: u64,
    /// Batches simulated.
    pub inflight: u64,
    /// Batches the context memory can hold.
    pub inflight_available: u64,
    /// Closed-form minimum to keep Tier 1 busy.
    pub inflight_minimum: u64,
    pub throughput: f64,
    pub tbt_ns: f64,
    pub tier1_utilization: f64,
    pub cost: Option<f64>,
    pub cost_per_throughput: Option<f64>,
    pub feasible: bool,
    pub binding_constraint: BindingConstraint,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl ConfigResult {
    pub fn config(&self) -> Config {
        Config {
            k: self.k,
            k_prime: self.k_prime,
            batch: self.batch,
        }
    }

    fn infeasible(c: Config, constraint: BindingConstraint, note: String) -> Self {
        ConfigResult {
            k: c.k,
            k_prime: c.k_prime,
            batch: c.batch,
            tier1_batch: c.tier1_batch(),
            inflight: 0,
            inflight_available: 0,
            inflight_minimum: 0,
            throughput: 0.0,
            tbt_ns: 0.0,
            tier1_utilization: 0.0,
            cost: None,
            cost_per_throughput: None,
            feasible: false,
            binding_constraint: constraint,
            note,
        }
    }
}

/// `floor(oversubscription * slots / tier1_batch)`.
pub fn inflight_count(slots: u64, tier1_batch: u64, oversubscription: f64) -> Result<u64> {
    if tier1_batch == 0 {
        return Err(Error::invalid("tier-1 batch must be positive"));
    }
    if !(oversubscription.is_finite() && oversubscription >= 1.0) {
        return Err(Error::invalid(format!(
            "oversubscription must be at least 1.0 (got {oversubscription})"
        )));
    }
    let n = (oversubscription * slots as f64 / tier1_batch as f64).floor() as u64;
    if n == 0 {
        return Err(Error::infeasible(
            BindingConstraint::Memory,
            format!("{slots} context slots cannot hold one batch of {tier1_batch}"),
        ));
    }
    Ok(n)
}

/// Smallest K whose per-node share of the weights fits Tier-1 memory.
fn weights_fit(spec: &TransformerSpec, cluster: &ClusterSpec, k: u32) -> bool {
    k <= spec.n_layers
        && weights_bytes(spec).div_ceil(k as u64) <= cluster.tier1.memory_bytes_per_node
}

fn within_objective(c: &Config, cluster: &ClusterSpec, objective: &Objective, table: &CostTable) -> bool {
    if objective.max_nodes.is_some_and(|m| c.nodes() > m) {
        return false;
    }
    if let Some(limit) = objective.max_cost {
        match config_cost(c, cluster, table) {
            Some(cost) if cost <= limit => {}
            _ => return false,
        }
    }
    true
}

fn config_cost(c: &Config, cluster: &ClusterSpec, table: &CostTable) -> Option<f64> {
    let p1 = cluster.unit_price(&cluster.tier1, table)?;
    let tier2_nodes = c.k as u64 * c.k_prime as u64;
    let p2 = if tier2_nodes == 0 {
        0.0
    } else {
        cluster.unit_price(&cluster.tier2, table)?
    };
    Some(c.k as f64 * p1 + tier2_nodes as f64 * p2)
}

/// Every `(K, K', B)` the search visits, in lexicographic order.
pub fn enumerate_configs(cluster: &ClusterSpec, spec: &TransformerSpec) -> Vec<Config> {
    let grid = batch_grid(cluster.max_batch);
    let mut out = Vec::new();
    for k in 1..=cluster.tier1.node_count_max {
        if !weights_fit(spec, cluster, k) {
            continue;
        }
        for k_prime in 0..=cluster.tier2.node_count_max / k {
            for &b in &grid {
                if b as u64 * k_prime.max(1) as u64 > cluster.max_batch as u64 {
                    break;
                }
                out.push(Config { k, k_prime, batch: b });
            }
        }
    }
    out
}

/// Topology, in-flight counts and echo for one configuration.
struct Prepared {
    topology: Topology,
    available: u64,
    minimum: u64,
}

fn prepare(
    c: Config,
    cluster: &ClusterSpec,
    spec: &TransformerSpec,
    profiles: &ProfileSet,
) -> Result<Prepared> {
    let seq_len = cluster.seq_len_for(spec);
    let tier1 = profiles.get(&cluster.tier1.device_name)?;
    let tier2 = if c.k_prime > 0 {
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
    let b1 = c.tier1_batch();
    if c.k_prime == 0 {
        let cap = single_tier_capacity(spec, c.k, cluster.tier1.memory_bytes_per_node, seq_len)?;
        let available = inflight_count(cap.slots, b1, cluster.oversubscription.single_tier)?;
        let compute = timing.tier1_layer(b1)?;
        // one node never sends to itself
        let (link, rtt) = if c.k == 1 {
            (Nanos::ZERO, Nanos::ZERO)
        } else {
            (timing.intra_serialization(b1), cluster.links.intra_tier1.rtt)
        };
        let minimum = if_pp(c.k, spec.n_layers, compute, rtt.half() + link)?;
        let topology = Topology::single_tier(&SingleTierStages {
            n_layers: spec.n_layers,
            k: c.k,
            compute,
            link,
            rtt,
            classifier: timing.classifier(b1)?,
        })?;
        Ok(Prepared {
            topology,
            available,
            minimum,
        })
    } else {
        let cap = two_tier_capacity(spec, c.k, c.k_prime, cluster.tier2_context_bytes(), seq_len);
        for i in 0..cap.layers.len() {
            let weights = node_weight_bytes(spec, &cap.layers, i);
            if weights > cluster.tier1.memory_bytes_per_node {
                return Err(Error::infeasible(
                    BindingConstraint::Memory,
                    format!("Tier-1 node {i} needs {weights} bytes of weights"),
                ));
            }
        }
        let available = inflight_count(cap.slots, b1, cluster.oversubscription.two_tier)?;
        let nonattention = timing.tier1_nonattention(b1)?;
        let attention = timing.tier2_attention(c.batch as u64)?;
        let minimum = c.k as u64 * if_gh(attention, timing.inter_round_trip(b1), nonattention)?;
        let topology = Topology::two_tier(&TwoTierStages {
            n_layers: spec.n_layers,
            k: c.k,
            nonattention,
            to_tier2: timing.to_tier2_serialization(b1),
            rtt: cluster.links.inter_tier.rtt,
            attention,
            to_tier1: timing.to_tier1_serialization(b1),
            classifier: timing.classifier(b1)?,
        })?;
        Ok(Prepared {
            topology,
            available,
            minimum,
        })
    }
}

/// In-flight batches that fit in memory and the closed-form minimum, as
/// `(available, minimum)`.
pub fn inflight_bounds(
    c: Config,
    cluster: &ClusterSpec,
    spec: &TransformerSpec,
    profiles: &ProfileSet,
) -> Result<(u64, u64)> {
    let p = prepare(c, cluster, spec, profiles)?;
    Ok((p.available, p.minimum))
}

fn binding(topology: &Topology, simulated: u64) -> BindingConstraint {
    if simulated < topology.saturation_inflight() {
        return BindingConstraint::Memory;
    }
    match topology.bottleneck() {
        Some((p, _)) if topology.pipes()[p].kind == PipeKind::Link => BindingConstraint::Bandwidth,
        Some(_) => BindingConstraint::Compute,
        None => BindingConstraint::None,
    }
}

/// Simulates one configuration. Memory-infeasible configurations come back
/// with `feasible == false`; other failures are errors.
pub fn evaluate(
    c: Config,
    cluster: &ClusterSpec,
    spec: &TransformerSpec,
    profiles: &ProfileSet,
    table: &CostTable,
    options: &SearchOptions,
) -> Result<ConfigResult> {
    evaluate_with_report(c, cluster, spec, profiles, table, options).map(|(r, _)| r)
}

/// As [`evaluate`], also returning the simulation report when one was run.
pub fn evaluate_with_report(
    c: Config,
    cluster: &ClusterSpec,
    spec: &TransformerSpec,
    profiles: &ProfileSet,
    table: &CostTable,
    options: &SearchOptions,
) -> Result<(ConfigResult, Option<SimReport>)> {
    let context = |e: Error| match e {
        Error::Infeasible { .. } => e,
        other => Error::Config(format!(
            "evaluating K={} K'={} B={}: {other}",
            c.k, c.k_prime, c.batch
        )),
    };
    let prepared = match prepare(c, cluster, spec, profiles) {
        Ok(p) => p,
        Err(Error::Infeasible { constraint, detail }) => {
            return Ok((ConfigResult::infeasible(c, constraint, detail), None))
        }
        Err(e) => return Err(context(e)),
    };
    let mut simulated = match options.inflight_policy {
        InflightPolicy::MaxAvailable => prepared.available,
        InflightPolicy::AnalyticMinimum => prepared.minimum.min(prepared.available),
    };
    let mut note = String::new();
    if let Some(n) = options.inflight_override {
        if n > prepared.available {
            note = format!("{n} in-flight batches exceed the {} that fit in memory", prepared.available);
        }
        simulated = n;
    } else if let Some(factor) = options.inflight_cap_factor {
        let cap = ((prepared.topology.saturation_inflight() as f64 * factor).ceil() as u64).max(1);
        if simulated > cap {
            note = format!("simulated {cap} of {simulated} available in-flight batches");
            simulated = cap;
        }
    }
    let inflight = u32::try_from(simulated)
        .map_err(|_| context(Error::invalid(format!("{simulated} in-flight batches is too many"))))?;
    let echo = ConfigEcho {
        n_layers: spec.n_layers,
        k: c.k,
        k_prime: c.k_prime,
        batch: c.batch as u64,
        tokens_per_batch: c.tier1_batch(),
        inflight,
    };
    let report = simulate(&prepared.topology, echo, options.sim).map_err(context)?;
    let cost = config_cost(&c, cluster, table);
    let result = ConfigResult {
        k: c.k,
        k_prime: c.k_prime,
        batch: c.batch,
        tier1_batch: c.tier1_batch(),
        inflight: simulated,
        inflight_available: prepared.available,
        inflight_minimum: prepared.minimum,
        throughput: report.throughput,
        tbt_ns: report.tbt_ns,
        tier1_utilization: report.tier1_utilization_mean,
        cost,
        cost_per_throughput: cost.map(|v| v / report.throughput),
        feasible: true,
        binding_constraint: binding(&prepared.topology, simulated),
        note,
    };
    Ok((result, Some(report)))
}

/// Total order used for ranking: best first.
pub fn rank_order(goal: Goal, a: &ConfigResult, b: &ConfigResult) -> Ordering {
    let primary = match goal {
        Goal::MaxThroughput => b.throughput.total_cmp(&a.throughput),
        Goal::MinCostPerThroughput => {
            let x = a.cost_per_throughput.unwrap_or(f64::INFINITY);
            let y = b.cost_per_throughput.unwrap_or(f64::INFINITY);
            x.total_cmp(&y)
        }
    };
    let cost = |r: &ConfigResult| r.cost.unwrap_or(f64::INFINITY);
    primary
        .then_with(|| cost(a).total_cmp(&cost(b)))
        .then_with(|| a.config().cmp(&b.config()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: ConfigResult,
    /// Feasible configurations, best first.
    pub ranked: Vec<ConfigResult>,
    /// Configurations rejected for memory, in enumeration order.
    pub infeasible: Vec<ConfigResult>,
    pub evaluated: usize,
}

/// Evaluates every enumerated configuration and returns the argmax.
pub fn optimize(
    cluster: &ClusterSpec,
    spec: &TransformerSpec,
    profiles: &ProfileSet,
    table: &CostTable,
    objective: &Objective,
    options: &SearchOptions,
) -> Result<SearchOutcome> {
    let tier1 = profiles.get(&cluster.tier1.device_name)?;
    let single_ok = tier1.has_stage(StageKind::Attention);
    if !single_ok {
        log::warn!(
            "{} has no attention profile; skipping single-tier configurations",
            tier1.device_name
        );
    }
    if objective.goal == Goal::MinCostPerThroughput && cluster.unit_price(&cluster.tier1, table).is_none() {
        return Err(Error::MissingPrice(cluster.tier1.device_name.clone()));
    }
    let configs: Vec<Config> = enumerate_configs(cluster, spec)
        .into_iter()
        .filter(|c| c.k_prime > 0 || single_ok)
        .filter(|c| within_objective(c, cluster, objective, table))
        .collect();
    let mut results = evaluate_all(&configs, cluster, spec, profiles, table, options)?;

    if options.refine {
        if let Some(best) = results.iter().filter(|r| r.feasible).min_by(|a, b| rank_order(objective.goal, a, b)) {
            let extra = refinement(best.config(), cluster);
            let extra: Vec<Config> = extra
                .into_iter()
                .filter(|c| within_objective(c, cluster, objective, table))
                .collect();
            results.extend(evaluate_all(&extra, cluster, spec, profiles, table, options)?);
        }
    }

    let evaluated = results.len();
    let (mut ranked, infeasible): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.feasible);
    ranked.sort_by(|a, b| rank_order(objective.goal, a, b));
    match ranked.first() {
        Some(best) => Ok(SearchOutcome {
            best: best.clone(),
            ranked,
            infeasible,
            evaluated,
        }),
        None => Err(no_feasible(&infeasible, evaluated)),
    }
}

fn evaluate_all(
    configs: &[Config],
    cluster: &ClusterSpec,
    spec: &TransformerSpec,
    profiles: &ProfileSet,
    table: &CostTable,
    options: &SearchOptions,
) -> Result<Vec<ConfigResult>> {
    // collect() keeps input order, so the merge is deterministic
    configs
        .par_iter()
        .map(|&c| evaluate(c, cluster, spec, profiles, table, options))
        .collect()
}

/// Integer batches strictly between the grid neighbours of `best.batch`.
fn refinement(best: Config, cluster: &ClusterSpec) -> Vec<Config> {
    let grid = batch_grid(cluster.max_batch);
    let i = grid.iter().position(|&b| b == best.batch).unwrap_or(0);
    let lo = if i > 0 { grid[i - 1] } else { best.batch };
    let hi = grid.get(i + 1).copied().unwrap_or(best.batch);
    let limit = cluster.max_batch as u64 / best.k_prime.max(1) as u64;
    (lo + 1..hi)
        .filter(|b| !grid.contains(b) && (*b as u64) <= limit)
        .map(|batch| Config { batch, ..best })
        .collect()
}

fn no_feasible(infeasible: &[ConfigResult], evaluated: usize) -> Error {
    let mut by_constraint: BTreeMap<BindingConstraint, usize> = BTreeMap::new();
    for r in infeasible {
        *by_constraint.entry(r.binding_constraint).or_default() += 1;
    }
    let constraint = by_constraint
        .iter()
        .max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c)))
        .map_or(BindingConstraint::Memory, |(c, _)| *c);
    let mut detail = format!("none of {evaluated} configurations is feasible");
    for (c, n) in &by_constraint {
        detail.push_str(&format!("; {n} bound by {c}"));
    }
    for r in infeasible.iter().take(5) {
        detail.push_str(&format!(
            "\n  K={} K'={} B={}: {} ({})",
            r.k, r.k_prime, r.batch, r.binding_constraint, r.note
        ));
    }
    Error::Infeasible { constraint, detail }
}
