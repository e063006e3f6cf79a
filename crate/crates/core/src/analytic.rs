//! Closed-form in-flight batch counts, maximum batch sizes and cost metrics.
//!
//! Every in-flight count is computed in exact integer arithmetic over
//! nanoseconds, so ceilings never suffer from float noise.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BindingConstraint, Error, Result};
use crate::model::{layers_per_node, TransformerSpec};
use crate::netmodel::{one_way_transfer_time, round_trip_transfer_time, ClusterLinks, PayloadModel};
use crate::profiles::{Coverage, KernelProfile, StageKind};
use crate::units::Nanos;

fn ceil_div(num: u128, den: u128) -> u128 {
    num.div_ceil(den)
}

/// Durations feeding the in-flight formulas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelismTimes {
    pub t_c: Nanos,
    pub t_c_min: Nanos,
    pub t_att: Nanos,
    pub t_noatt: Nanos,
    pub t_n: Nanos,
}

/// Pipeline parallelism: `ceil(1 + K*t_n / (N*t_c)) * K`.
pub fn if_pp(k: u32, n_layers: u32, t_c: Nanos, t_n: Nanos) -> Result<u64> {
    if t_c.is_zero() {
        return Err(Error::invalid("if_pp: per-layer compute time must be positive"));
    }
    if k == 0 || n_layers < k {
        return Err(Error::invalid(format!(
            "if_pp: need 1 <= K <= N (K={k}, N={n_layers})"
        )));
    }
    let extra = ceil_div(k as u128 * t_n.0 as u128, n_layers as u128 * t_c.0 as u128);
    Ok(((1 + extra) * k as u128) as u64)
}

/// Tensor parallelism: `ceil(1 + t_n / (t_c_min / K))`.
pub fn if_tp(k: u32, t_c_min: Nanos, t_n: Nanos) -> Result<u64> {
    if t_c_min.is_zero() {
        return Err(Error::invalid("if_tp: t_c_min must be positive"));
    }
    if k == 0 {
        return Err(Error::invalid("if_tp: K must be at least 1"));
    }
    Ok((1 + ceil_div(k as u128 * t_n.0 as u128, t_c_min.0 as u128)) as u64)
}

/// Two-tier: `ceil(1 + (t_att + t_n) / t_noatt)` batches hide the Tier-2
/// round trip from one Tier-1 node.
pub fn if_gh(t_att: Nanos, t_n_roundtrip: Nanos, t_noatt: Nanos) -> Result<u64> {
    if t_noatt.is_zero() {
        return Err(Error::invalid("if_gh: Tier-1 non-attention time must be positive"));
    }
    let away = t_att.0 as u128 + t_n_roundtrip.0 as u128;
    Ok((1 + ceil_div(away, t_noatt.0 as u128)) as u64)
}

/// A batch size together with the in-flight count it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch: u64,
    pub inflight: u64,
}

/// Largest `B` with `B <= floor(slots / IF(B))`.
fn max_batch_by<F>(slots: u64, label: &str, mut inflight: F) -> Result<BatchPlan>
where
    F: FnMut(u64) -> Result<u64>,
{
    if slots == 0 {
        return Err(Error::infeasible(
            BindingConstraint::Memory,
            format!("{label}: no context slots"),
        ));
    }
    let mut best = None;
    let mut smallest_need = u64::MAX;
    for b in 1..=slots {
        let f = inflight(b)?;
        smallest_need = smallest_need.min(f);
        if b * f <= slots {
            best = Some(BatchPlan { batch: b, inflight: f });
        }
    }
    best.ok_or_else(|| {
        Error::infeasible(
            BindingConstraint::Memory,
            format!("{label}: {slots} context slots cannot hold {smallest_need} in-flight batches"),
        )
    })
}

/// Maximum pipeline-parallel batch. `t_c(B)` is the per-layer compute time and
/// `t_n(B)` the one-way hop between consecutive nodes.
pub fn max_batch_pp<C, T>(k: u32, n_layers: u32, slots: u64, t_c: C, t_n: T) -> Result<BatchPlan>
where
    C: Fn(u64) -> Result<Nanos>,
    T: Fn(u64) -> Result<Nanos>,
{
    max_batch_by(slots, "pipeline", |b| if_pp(k, n_layers, t_c(b)?, t_n(b)?))
}

/// Maximum tensor-parallel batch.
pub fn max_batch_tp<C, T>(k: u32, slots: u64, t_c_min: C, t_n: T) -> Result<BatchPlan>
where
    C: Fn(u64) -> Result<Nanos>,
    T: Fn(u64) -> Result<Nanos>,
{
    max_batch_by(slots, "tensor", |b| if_tp(k, t_c_min(b)?, t_n(b)?))
}

/// Result of the two-tier batch search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoTierPlan {
    /// Batch handled by each Tier-2 node.
    pub shard_batch: u64,
    /// Batch processed by a Tier-1 node, `shard_batch * K'`.
    pub tier1_batch: u64,
    pub if_gh: u64,
    pub if_pp: u64,
}

/// Closures describing per-layer two-tier timings as functions of batch size.
pub struct TwoTierTimes<A, R, C, P> {
    /// Tier-2 attention at shard batch `B`.
    pub t_att: A,
    /// Inter-tier round trip for Tier-1 batch `B*K'`.
    pub t_roundtrip: R,
    /// Tier-1 non-attention at `B*K'`.
    pub t_noatt: C,
    /// Tier-1 to Tier-1 hop at `B*K'`.
    pub t_pipeline_hop: P,
}

/// Largest `B*K'` with `B*K' <= floor(slots / (IF_gh(B,K') * IF_pp(B*K')))`.
pub fn max_batch_gh<A, R, C, P>(
    k: u32,
    k_prime: u32,
    n_layers: u32,
    slots: u64,
    times: &TwoTierTimes<A, R, C, P>,
) -> Result<TwoTierPlan>
where
    A: Fn(u64) -> Result<Nanos>,
    R: Fn(u64) -> Result<Nanos>,
    C: Fn(u64) -> Result<Nanos>,
    P: Fn(u64) -> Result<Nanos>,
{
    if k_prime == 0 {
        return Err(Error::invalid("max_batch_gh: K' must be at least 1"));
    }
    let kp = k_prime as u64;
    let mut best = None;
    let mut b = 1;
    while b * kp <= slots {
        let total = b * kp;
        let noatt = (times.t_noatt)(total)?;
        let gh = if_gh((times.t_att)(b)?, (times.t_roundtrip)(total)?, noatt)?;
        let pp = if_pp(k, n_layers, noatt, (times.t_pipeline_hop)(total)?)?;
        if total as u128 * gh as u128 * pp as u128 <= slots as u128 {
            best = Some(TwoTierPlan {
                shard_batch: b,
                tier1_batch: total,
                if_gh: gh,
                if_pp: pp,
            });
        }
        b += 1;
    }
    best.ok_or_else(|| {
        Error::infeasible(
            BindingConstraint::Memory,
            format!("two-tier: {slots} context slots too few for K'={k_prime}"),
        )
    })
}

/// Splits `total` prompts over `parts` shards whose sizes differ by at most one.
pub fn split_shards(total: u64, parts: u32) -> Vec<u64> {
    assert!(parts > 0, "at least one shard");
    let p = parts as u64;
    (0..p).map(|i| total / p + u64::from(i < total % p)).collect()
}

/// Profile- and link-derived per-layer timings for one cluster.
#[derive(Debug, Clone, Copy)]
pub struct TierTiming<'a> {
    pub spec: &'a TransformerSpec,
    pub tier1: &'a KernelProfile,
    pub tier2: Option<&'a KernelProfile>,
    pub links: ClusterLinks,
    /// Sequence length used for attention lookups; `None` means the largest profiled.
    pub seq_len: Option<u64>,
}

fn to_u32(batch: u64) -> Result<u32> {
    u32::try_from(batch).map_err(|_| Error::invalid(format!("batch {batch} is too large")))
}

impl<'a> TierTiming<'a> {
    pub fn payloads(&self) -> PayloadModel {
        PayloadModel::for_model(self.spec)
    }

    fn lookup(&self, profile: &KernelProfile, stage: StageKind, batch: u64) -> Result<(Nanos, Coverage)> {
        let seq = if stage == StageKind::Attention { self.seq_len } else { None };
        profile.latency_at(stage, to_u32(batch)?, seq)
    }

    pub fn tier1_nonattention(&self, batch: u64) -> Result<Nanos> {
        Ok(self.lookup(self.tier1, StageKind::NonAttention, batch)?.0)
    }

    /// Non-attention plus attention on Tier 1, the single-tier per-layer cost.
    pub fn tier1_layer(&self, batch: u64) -> Result<Nanos> {
        Ok(self.tier1_nonattention(batch)? + self.lookup(self.tier1, StageKind::Attention, batch)?.0)
    }

    pub fn tier2_attention(&self, shard: u64) -> Result<Nanos> {
        let tier2 = self
            .tier2
            .ok_or_else(|| Error::Config("two-tier timing needs a Tier-2 profile".into()))?;
        Ok(self.lookup(tier2, StageKind::Attention, shard)?.0)
    }

    /// Classifier latency on Tier 1, zero when the profile has none.
    pub fn classifier(&self, batch: u64) -> Result<Nanos> {
        if self.tier1.has_stage(StageKind::Classifier) {
            Ok(self.lookup(self.tier1, StageKind::Classifier, batch)?.0)
        } else {
            Ok(Nanos::ZERO)
        }
    }

    pub fn intra_hop(&self, batch: u64) -> Nanos {
        let bytes = batch * self.payloads().intra_tier1_bytes_per_token;
        one_way_transfer_time(&self.links.intra_tier1, bytes)
    }

    pub fn intra_serialization(&self, batch: u64) -> Nanos {
        let bytes = batch * self.payloads().intra_tier1_bytes_per_token;
        self.links.intra_tier1.serialization_time(bytes)
    }

    pub fn inter_round_trip(&self, tier1_batch: u64) -> Nanos {
        let p = self.payloads();
        round_trip_transfer_time(
            &self.links.inter_tier,
            tier1_batch * p.tier1_to_tier2_bytes_per_token,
            tier1_batch * p.tier2_to_tier1_bytes_per_token,
        )
    }

    pub fn to_tier2_serialization(&self, tier1_batch: u64) -> Nanos {
        let bytes = tier1_batch * self.payloads().tier1_to_tier2_bytes_per_token;
        self.links.inter_tier.serialization_time(bytes)
    }

    pub fn to_tier1_serialization(&self, tier1_batch: u64) -> Nanos {
        let bytes = tier1_batch * self.payloads().tier2_to_tier1_bytes_per_token;
        self.links.inter_tier.serialization_time(bytes)
    }

    /// Warnings for lookups that leave the profiled batch range.
    pub fn coverage_notes(&self, tier1_batch: u64, shard: Option<u64>) -> Vec<String> {
        let mut notes = Vec::new();
        let mut check = |profile: &KernelProfile, stage: StageKind, batch: u64| {
            if let Ok((_, cov)) = self.lookup(profile, stage, batch) {
                match cov {
                    Coverage::Extrapolated => notes.push(format!(
                        "{} {stage} latency at batch {batch} extrapolated above the profiled range",
                        profile.device_name
                    )),
                    Coverage::Clamped => notes.push(format!(
                        "{} {stage} latency at batch {batch} clamped to the smallest profiled batch",
                        profile.device_name
                    )),
                    _ => {}
                }
            }
        };
        check(self.tier1, StageKind::NonAttention, tier1_batch);
        match (shard, self.tier2) {
            (Some(s), Some(t2)) => check(t2, StageKind::Attention, s),
            _ => check(self.tier1, StageKind::Attention, tier1_batch),
        }
        notes
    }
}

/// Prompt capacity of a deployment, in whole prompts, and the per-node
/// numbers it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    pub slots: u64,
    pub layers: Vec<u32>,
}

/// Single-tier capacity: each node's memory after its weights holds the cache
/// slices of its own layers; the tightest node sets the prompt count.
pub fn single_tier_capacity(
    spec: &TransformerSpec,
    k: u32,
    memory_per_node: u64,
    seq_len: u64,
) -> Result<Capacity> {
    let layers = layers_per_node(spec.n_layers, k);
    let per_token_layer = spec.kv_bytes_per_token_layer() * seq_len;
    let mut slots = u64::MAX;
    for (i, &l) in layers.iter().enumerate() {
        let weights = node_weight_bytes(spec, &layers, i);
        let free = memory_per_node.checked_sub(weights).ok_or_else(|| {
            Error::infeasible(
                BindingConstraint::Memory,
                format!("node {i} needs {weights} bytes of weights but has {memory_per_node}"),
            )
        })?;
        if let Some(n) = free.checked_div(per_token_layer * l as u64) {
            slots = slots.min(n);
        }
    }
    Ok(Capacity { slots, layers })
}

/// Two-tier capacity: the `K'` Tier-2 nodes behind each Tier-1 node hold the
/// slices for that node's layers.
pub fn two_tier_capacity(
    spec: &TransformerSpec,
    k: u32,
    k_prime: u32,
    context_bytes_per_tier2_node: u64,
    seq_len: u64,
) -> Capacity {
    let layers = layers_per_node(spec.n_layers, k);
    let per_token_layer = spec.kv_bytes_per_token_layer() * seq_len;
    let pool = context_bytes_per_tier2_node as u128 * k_prime as u128;
    let slots = layers
        .iter()
        .map(|&l| per_token_layer as u128 * l as u128)
        .filter(|&s| s > 0)
        .map(|slice| (pool / slice).min(u64::MAX as u128) as u64)
        .min()
        .unwrap_or(u64::MAX);
    Capacity { slots, layers }
}

/// Weight bytes on pipeline node `i`; the embedding lives on the first node
/// and the classifier on the node hosting the last layer.
pub fn node_weight_bytes(spec: &TransformerSpec, layers: &[u32], i: usize) -> u64 {
    let mut bytes = layers[i] as u64 * spec.layer_weight_bytes();
    if i == 0 {
        bytes += spec.embedding_bytes();
    }
    if i == layers.len() - 1 {
        bytes += spec.embedding_bytes();
    }
    bytes
}

/// Unit prices by device name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub prices: BTreeMap<String, f64>,
}

impl CostTable {
    /// Retail prices from September 2024.
    pub fn retail_2024() -> Self {
        let prices = [
            ("DDR5-128GiB", 211.0),
            ("AMD EPYC 7H12", 2078.0),
            ("NVIDIA T4", 1780.0),
            ("NVIDIA RTX 6000", 2280.0),
            ("NVIDIA A6000", 4820.0),
            ("NVIDIA A100", 8798.0),
            ("NVIDIA H100", 30979.0),
        ];
        CostTable {
            prices: prices.iter().map(|&(d, p)| (d.to_string(), p)).collect(),
        }
    }

    pub fn price(&self, device: &str) -> Result<f64> {
        self.prices
            .get(device)
            .copied()
            .ok_or_else(|| Error::MissingPrice(device.to_string()))
    }

    pub fn insert(&mut self, device: impl Into<String>, price: f64) -> Result<()> {
        if !(price.is_finite() && price > 0.0) {
            return Err(Error::invalid(format!("price must be positive (got {price})")));
        }
        self.prices.insert(device.into(), price);
        Ok(())
    }

    pub fn from_csv_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse(format!("{origin}:1"), e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["device", "unit_price_usd"] {
            return Err(Error::parse(
                format!("{origin}:1"),
                "expected header `device,unit_price_usd`",
            ));
        }
        let mut table = CostTable::default();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::parse(origin, e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            let loc = format!("{origin}:{line}");
            let device = record.get(0).unwrap_or("").to_string();
            let price: f64 = record
                .get(1)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::parse(&loc, "bad unit_price_usd"))?;
            if table.prices.contains_key(&device) {
                return Err(Error::parse(&loc, format!("duplicate device `{device}`")));
            }
            table
                .insert(device, price)
                .map_err(|e| Error::parse(&loc, e.to_string()))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_csv_reader(file, &path.display().to_string())
    }
}

/// Capital cost of `nodes` (device, count) divided by throughput in tokens/s.
pub fn cost_per_throughput(nodes: &[(&str, u64)], table: &CostTable, throughput: f64) -> Result<f64> {
    if !(throughput.is_finite() && throughput > 0.0) {
        return Err(Error::invalid("throughput must be positive"));
    }
    let mut total = 0.0;
    for &(device, count) in nodes {
        total += table.price(device)? * count as f64;
    }
    Ok(total / throughput)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: f64) -> Nanos {
        Nanos::from_ms_f64(v)
    }

    #[test]
    fn pipeline_examples() {
        assert_eq!(if_pp(10, 80, ms(5.6), Nanos(1_016_384)).unwrap(), 20);
        assert_eq!(if_pp(10, 80, ms(5.6), Nanos::ZERO).unwrap(), 10);
        assert_eq!(if_pp(1, 80, ms(5.6), ms(3.0)).unwrap(), 2);
        assert_eq!(if_pp(1, 80, ms(5.6), Nanos::ZERO).unwrap(), 1);
        assert!(if_pp(10, 80, Nanos::ZERO, ms(1.0)).is_err());
    }

    #[test]
    fn tensor_examples() {
        assert_eq!(if_tp(10, ms(0.48), ms(1.0)).unwrap(), 22);
        assert_eq!(if_tp(10, ms(0.48), Nanos::ZERO).unwrap(), 1);
        assert_eq!(if_tp(10, Nanos(480_000), Nanos(48_000)).unwrap(), 2);
        assert!(if_tp(10, Nanos::ZERO, ms(1.0)).is_err());
    }

    #[test]
    fn two_tier_examples() {
        assert_eq!(if_gh(Nanos::ZERO, Nanos::ZERO, ms(1.0)).unwrap(), 1);
        assert_eq!(if_gh(ms(1.5), ms(0.5), ms(1.0)).unwrap(), 3);
        assert!(if_gh(ms(1.0), ms(1.0), Nanos::ZERO).is_err());
    }

    #[test]
    fn pipeline_worked_example() {
        let link_ns = |b: u64| Ok(Nanos(1_000_000 + b * 16_384));
        let plan = max_batch_pp(10, 80, 32, |_| Ok(ms(5.6)), link_ns).unwrap();
        assert_eq!(plan, BatchPlan { batch: 1, inflight: 20 });
        let plan = max_batch_pp(10, 80, 32, |_| Ok(ms(5.6)), |_| Ok(Nanos::ZERO)).unwrap();
        assert_eq!(plan, BatchPlan { batch: 3, inflight: 10 });
        let err = max_batch_pp(10, 80, 9, |_| Ok(ms(5.6)), |_| Ok(Nanos::ZERO)).unwrap_err();
        assert!(matches!(err, Error::Infeasible { constraint: BindingConstraint::Memory, .. }));
    }

    #[test]
    fn tensor_worked_example() {
        let plan = max_batch_tp(10, 32, |_| Ok(ms(0.48)), |_| Ok(Nanos::ZERO)).unwrap();
        assert_eq!(plan, BatchPlan { batch: 32, inflight: 1 });
        let plan = max_batch_tp(10, 32, |_| Ok(ms(0.48)), |_| Ok(ms(1.0))).unwrap();
        assert_eq!(plan, BatchPlan { batch: 1, inflight: 22 });
        assert!(max_batch_tp(10, 0, |_| Ok(ms(0.48)), |_| Ok(ms(1.0))).is_err());
    }

    #[test]
    fn two_tier_reduces_to_capacity_when_free() {
        let times = TwoTierTimes {
            t_att: |_| Ok(Nanos::ZERO),
            t_roundtrip: |_| Ok(Nanos::ZERO),
            t_noatt: |_| Ok(ms(1.0)),
            t_pipeline_hop: |_| Ok(Nanos::ZERO),
        };
        let plan = max_batch_gh(1, 4, 80, 400, &times).unwrap();
        assert_eq!(plan.tier1_batch, 400);
        assert_eq!(plan.shard_batch, 100);
        assert_eq!((plan.if_gh, plan.if_pp), (1, 1));
    }

    #[test]
    fn shards_are_balanced() {
        assert_eq!(split_shards(7, 2), vec![4, 3]);
        assert_eq!(split_shards(8, 4), vec![2, 2, 2, 2]);
        let s = split_shards(1001, 7);
        assert_eq!(s.iter().sum::<u64>(), 1001);
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }

    #[test]
    fn cost_examples() {
        let mut table = CostTable::default();
        table.insert("box", 100.0).unwrap();
        assert_eq!(cost_per_throughput(&[("box", 1)], &table, 10.0).unwrap(), 10.0);
        assert_eq!(cost_per_throughput(&[("box", 2)], &table, 10.0).unwrap(), 20.0);
        assert!(matches!(
            cost_per_throughput(&[("gpu", 1)], &table, 10.0),
            Err(Error::MissingPrice(_))
        ));
        let retail = CostTable::retail_2024();
        assert_eq!(retail.price("NVIDIA T4").unwrap(), 1780.0);
        assert_eq!(retail.price("NVIDIA H100").unwrap(), 30979.0);
    }

    #[test]
    fn cost_csv() {
        let t = CostTable::from_csv_str_for_test("device,unit_price_usd\nNVIDIA T4,1780\ncpu,2289\n");
        assert_eq!(t.price("cpu").unwrap(), 2289.0);
        assert!(CostTable::from_csv_reader("device,unit_price_usd\nx,-1\n".as_bytes(), "c.csv").is_err());
    }

    impl CostTable {
        fn from_csv_str_for_test(s: &str) -> Self {
            CostTable::from_csv_reader(s.as_bytes(), "c.csv").unwrap()
        }
    }

    #[test]
    fn capacity_accounting() {
        let spec = TransformerSpec::llama2_70b();
        let mem = 110 * crate::units::GIB;
        let cap = two_tier_capacity(&spec, 10, 1, mem, 2048);
        // 8 layers per node: 64 MiB per prompt slice
        assert_eq!(cap.slots, mem / (64 * crate::units::MIB));
        let cap2 = two_tier_capacity(&spec, 10, 2, mem, 2048);
        assert_eq!(cap2.slots, 2 * cap.slots);
        assert!(single_tier_capacity(&spec, 4, 16 * crate::units::GIB, 2048).is_err());
    }
}
