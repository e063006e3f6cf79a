#![allow(dead_code)]

use std::path::PathBuf;

use tierplan::des::PopOrder;
use tierplan::netmodel::{ClusterLinks, LinkSpec};
use tierplan::optimizer::{ClusterSpec, Oversubscription, TierSpec};
use tierplan::profiles::{synthesize_profile, KernelProfile, ProfileSet, StageKind, SyntheticStage};
use tierplan::units::{Nanos, GIB};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn tier(name: &str, max: u32, mem_gib: u64) -> TierSpec {
    TierSpec {
        device_name: name.into(),
        node_count_max: max,
        memory_bytes_per_node: mem_gib * GIB,
        unit_cost: None,
    }
}

pub fn links(inter_gbps: f64, inter_rtt: Nanos, intra_gbps: f64, intra_rtt: Nanos) -> ClusterLinks {
    ClusterLinks {
        inter_tier: LinkSpec::gbps(inter_gbps, inter_rtt),
        intra_tier1: LinkSpec::gbps(intra_gbps, intra_rtt),
    }
}

pub fn cluster(tier1: TierSpec, tier2: TierSpec, links: ClusterLinks, seq_len: u64, max_batch: u32) -> ClusterSpec {
    ClusterSpec {
        tier1,
        tier2,
        links,
        oversubscription: Oversubscription::default(),
        seq_len: Some(seq_len),
        max_batch,
        tier2_reserve_fraction: 0.05,
    }
}

pub fn profile(device: &str, stages: &[SyntheticStage], max_batch: u32, seq_len: u64) -> KernelProfile {
    synthesize_profile(device, stages, max_batch, seq_len).expect("synthetic profile")
}

pub fn profile_set(profiles: Vec<KernelProfile>) -> ProfileSet {
    let mut set = ProfileSet::new();
    for p in profiles {
        set.insert(p).expect("distinct devices");
    }
    set
}

pub fn saturating(stage: StageKind, fixed: Nanos, per_item_ns: f64) -> SyntheticStage {
    SyntheticStage::saturating(stage, fixed, per_item_ns)
}

pub fn linear(stage: StageKind, base: Nanos, per_item_ns: f64) -> SyntheticStage {
    SyntheticStage::linear(stage, base, per_item_ns)
}

// ---------------------------------------------------------------------------
// Brute-force scheduler.
//
// Walks simulated time one nanosecond at a time. At every tick it first
// retires finished work, then lets each idle server pick its best waiting
// batch. Nothing is shared with the library's event engine.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Server {
    Gpu,
    Wire,
    Delay,
}

#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub server: usize,
    pub kind: Server,
    pub latency: u64,
}

fn layer_owner(n_layers: u32, k: u32) -> Vec<usize> {
    let mut owner = Vec::new();
    for node in 0..k {
        let count = n_layers / k + u32::from(node < n_layers % k);
        owner.extend(std::iter::repeat_n(node as usize, count as usize));
    }
    owner
}

/// Per-layer constant latencies of a two-tier instance.
#[derive(Debug, Clone, Copy)]
pub struct TwoTierCase {
    pub n_layers: u32,
    pub k: u32,
    pub nonattention: u64,
    pub to_tier2: u64,
    pub rtt: u64,
    pub attention: u64,
    pub to_tier1: u64,
    pub classifier: u64,
}

pub fn two_tier_steps(c: &TwoTierCase) -> Vec<Step> {
    let owner = layer_owner(c.n_layers, c.k);
    let mut steps = Vec::new();
    for (layer, &node) in owner.iter().enumerate() {
        let last = layer + 1 == owner.len();
        let base = node * 6;
        let out_half = c.rtt / 2;
        let back_half = c.rtt - out_half;
        steps.push(Step { server: base, kind: Server::Gpu, latency: c.nonattention + if last { c.classifier } else { 0 } });
        steps.push(Step { server: base + 1, kind: Server::Wire, latency: c.to_tier2 });
        steps.push(Step { server: base + 2, kind: Server::Delay, latency: out_half });
        steps.push(Step { server: base + 3, kind: Server::Gpu, latency: c.attention });
        steps.push(Step { server: base + 4, kind: Server::Wire, latency: c.to_tier1 });
        steps.push(Step { server: base + 5, kind: Server::Delay, latency: back_half });
    }
    steps
}

#[derive(Debug, Clone, Copy)]
pub struct SingleTierCase {
    pub n_layers: u32,
    pub k: u32,
    pub compute: u64,
    pub link: u64,
    pub rtt: u64,
    pub classifier: u64,
}

pub fn single_tier_steps(c: &SingleTierCase) -> Vec<Step> {
    let owner = layer_owner(c.n_layers, c.k);
    let mut steps = Vec::new();
    for (layer, &node) in owner.iter().enumerate() {
        let last = layer + 1 == owner.len();
        let leaves_node = owner.get(layer + 1).is_none_or(|&next| next != node);
        let base = node * 3;
        steps.push(Step { server: base, kind: Server::Gpu, latency: c.compute + if last { c.classifier } else { 0 } });
        if leaves_node {
            steps.push(Step { server: base + 1, kind: Server::Wire, latency: c.link });
            steps.push(Step { server: base + 2, kind: Server::Delay, latency: c.rtt / 2 });
        } else {
            steps.push(Step { server: base + 2, kind: Server::Delay, latency: 0 });
            steps.push(Step { server: base + 2, kind: Server::Delay, latency: 0 });
        }
    }
    steps
}

#[derive(Debug, Clone, Copy)]
struct Waiting {
    arrival: u64,
    id: u32,
    step: usize,
}

/// Generation times of batch 0 (a generation is batch 0 finishing the last
/// step of the cycle), until `gens` of them have been seen.
///
/// Every occupying step must take at least one nanosecond.
pub fn brute_force_gen_ts(steps: &[Step], inflight: u32, order: PopOrder, gens: usize) -> Vec<u64> {
    assert!(steps.iter().all(|s| s.kind == Server::Delay || s.latency >= 1));
    let servers = steps.iter().map(|s| s.server).max().unwrap() + 1;
    let mut waiting: Vec<Vec<Waiting>> = vec![Vec::new(); servers];
    let mut busy: Vec<Option<(u64, u32, usize)>> = vec![None; servers];
    let mut out = Vec::new();

    // Moves a batch that is at `step` at time `t` through any pure delays and
    // parks it in front of the next server that must serve it.
    let arrive = |waiting: &mut Vec<Vec<Waiting>>, out: &mut Vec<u64>, mut step: usize, id: u32, mut t: u64| loop {
        let s = steps[step];
        if s.kind != Server::Delay {
            waiting[s.server].push(Waiting { arrival: t, id, step });
            return;
        }
        t += s.latency;
        step = (step + 1) % steps.len();
        if step == 0 && id == 0 {
            out.push(t);
        }
    };

    for id in 0..inflight {
        arrive(&mut waiting, &mut out, 0, id, 0);
    }
    let mut t = 0u64;
    while out.len() < gens {
        for slot in busy.iter_mut() {
            if let Some((finish, id, step)) = *slot {
                if finish == t {
                    *slot = None;
                    let next = (step + 1) % steps.len();
                    if next == 0 && id == 0 {
                        out.push(t);
                    }
                    arrive(&mut waiting, &mut out, next, id, t);
                }
            }
        }
        for srv in 0..servers {
            if busy[srv].is_some() {
                continue;
            }
            let mut best: Option<usize> = None;
            for (i, w) in waiting[srv].iter().enumerate() {
                if w.arrival > t {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => prefer(&waiting[srv][b], w, steps[w.step].kind, order),
                };
                if better {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                let w = waiting[srv].swap_remove(i);
                busy[srv] = Some((t + steps[w.step].latency, w.id, w.step));
            }
        }
        t += 1;
        assert!(t < 50_000_000, "brute force did not converge");
    }
    out.sort_unstable();
    out.truncate(gens);
    out
}

/// Whether `cand` should be served before `cur`.
fn prefer(cur: &Waiting, cand: &Waiting, kind: Server, order: PopOrder) -> bool {
    if kind == Server::Gpu && cand.step != cur.step {
        return match order {
            PopOrder::LatestStage => cand.step > cur.step,
            PopOrder::EarliestStage => cand.step < cur.step,
        };
    }
    (cand.arrival, cand.id) < (cur.arrival, cur.id)
}
