use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers_per_node;
use crate::units::Nanos;

/// What a pipe models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipeKind {
    /// Processes one batch at a time, highest-priority ready batch first.
    Compute,
    /// One batch at a time in arrival order.
    Link,
    /// Fixed additive delay with no occupancy.
    StaticDelay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipeInfo {
    pub kind: PipeKind,
    /// Compute pipe on a Tier-1 accelerator.
    pub tier1: bool,
    pub label: String,
}

impl PipeInfo {
    fn new(kind: PipeKind, tier1: bool, label: String) -> Self {
        PipeInfo { kind, tier1, label }
    }
}

/// Pipes plus the stage cycle a batch walks through for one generated token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pipes: Vec<PipeInfo>,
    stage_pipe: Vec<usize>,
    stage_latency: Vec<Nanos>,
    stages_per_layer: usize,
}

/// Per-layer latencies of a two-tier pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoTierStages {
    pub n_layers: u32,
    pub k: u32,
    pub nonattention: Nanos,
    pub to_tier2: Nanos,
    pub rtt: Nanos,
    pub attention: Nanos,
    pub to_tier1: Nanos,
    /// Extra Tier-1 time after the last layer.
    pub classifier: Nanos,
}

/// Per-layer latencies of a single-tier pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleTierStages {
    pub n_layers: u32,
    pub k: u32,
    /// Attention and non-attention of one layer.
    pub compute: Nanos,
    /// Link occupancy of one node-to-node hop.
    pub link: Nanos,
    pub rtt: Nanos,
    pub classifier: Nanos,
}

fn check_nodes(n_layers: u32, k: u32) -> Result<()> {
    if k == 0 || n_layers == 0 || k > n_layers {
        return Err(Error::Config(format!(
            "need 1 <= K <= N layers (K={k}, N={n_layers})"
        )));
    }
    Ok(())
}

fn owners(n_layers: u32, k: u32) -> (Vec<usize>, Vec<bool>) {
    let counts = layers_per_node(n_layers, k);
    let mut owner = Vec::with_capacity(n_layers as usize);
    let mut last_of_block = Vec::with_capacity(n_layers as usize);
    for (node, &c) in counts.iter().enumerate() {
        for i in 0..c {
            owner.push(node);
            last_of_block.push(i + 1 == c);
        }
    }
    (owner, last_of_block)
}

impl Topology {
    /// Builds an arbitrary topology; every stage must name an existing pipe.
    pub fn custom(
        pipes: Vec<PipeInfo>,
        stage_pipe: Vec<usize>,
        stage_latency: Vec<Nanos>,
        stages_per_layer: usize,
    ) -> Result<Self> {
        if stage_pipe.is_empty() {
            return Err(Error::Config("topology has no stages".into()));
        }
        if stage_pipe.len() != stage_latency.len() {
            return Err(Error::Config(format!(
                "{} stages mapped but {} latencies given",
                stage_pipe.len(),
                stage_latency.len()
            )));
        }
        if let Some((stage, &p)) = stage_pipe.iter().enumerate().find(|(_, &p)| p >= pipes.len()) {
            return Err(Error::Config(format!(
                "stage {stage} is mapped to pipe {p}, but only {} pipes exist",
                pipes.len()
            )));
        }
        if stages_per_layer == 0 || !stage_pipe.len().is_multiple_of(stages_per_layer) {
            return Err(Error::Config("stage count is not a whole number of layers".into()));
        }
        Ok(Topology {
            pipes,
            stage_pipe,
            stage_latency,
            stages_per_layer,
        })
    }

    /// Six stages per layer: Tier-1 non-attention, Tier-1 to Tier-2 link, half
    /// RTT, Tier-2 attention, Tier-2 to Tier-1 link, half RTT. Each Tier-1 node
    /// owns six pipes; its `K'` Tier-2 nodes act as one attention pipe.
    pub fn two_tier(s: &TwoTierStages) -> Result<Self> {
        check_nodes(s.n_layers, s.k)?;
        let mut pipes = Vec::with_capacity(6 * s.k as usize);
        for node in 0..s.k {
            pipes.push(PipeInfo::new(PipeKind::Compute, true, format!("t1[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::Link, false, format!("link12[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::StaticDelay, false, format!("rtt12[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::Compute, false, format!("t2[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::Link, false, format!("link21[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::StaticDelay, false, format!("rtt21[{node}]")));
        }
        let (owner, _) = owners(s.n_layers, s.k);
        let half = s.rtt.half();
        let other_half = s.rtt - half;
        let mut stage_pipe = Vec::with_capacity(6 * s.n_layers as usize);
        let mut stage_latency = Vec::with_capacity(6 * s.n_layers as usize);
        for (layer, &node) in owner.iter().enumerate() {
            let last = layer + 1 == owner.len();
            let lat = [
                s.nonattention + if last { s.classifier } else { Nanos::ZERO },
                s.to_tier2,
                half,
                s.attention,
                s.to_tier1,
                other_half,
            ];
            for (j, l) in lat.into_iter().enumerate() {
                stage_pipe.push(6 * node + j);
                stage_latency.push(l);
            }
        }
        Topology::custom(pipes, stage_pipe, stage_latency, 6)
    }

    /// Three stages per layer: Tier-1 compute, node-to-node link, half RTT.
    /// The link and delay stages only cost time on the last layer a node
    /// hosts; inside a node they are zero-delay hops.
    pub fn single_tier(s: &SingleTierStages) -> Result<Self> {
        check_nodes(s.n_layers, s.k)?;
        let mut pipes = Vec::with_capacity(3 * s.k as usize);
        for node in 0..s.k {
            pipes.push(PipeInfo::new(PipeKind::Compute, true, format!("t1[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::Link, false, format!("link[{node}]")));
            pipes.push(PipeInfo::new(PipeKind::StaticDelay, false, format!("rtt[{node}]")));
        }
        let (owner, last_of_block) = owners(s.n_layers, s.k);
        let mut stage_pipe = Vec::with_capacity(3 * s.n_layers as usize);
        let mut stage_latency = Vec::with_capacity(3 * s.n_layers as usize);
        for (layer, &node) in owner.iter().enumerate() {
            let last = layer + 1 == owner.len();
            stage_pipe.push(3 * node);
            stage_latency.push(s.compute + if last { s.classifier } else { Nanos::ZERO });
            if last_of_block[layer] {
                stage_pipe.push(3 * node + 1);
                stage_latency.push(s.link);
                stage_pipe.push(3 * node + 2);
                stage_latency.push(s.rtt.half());
            } else {
                stage_pipe.push(3 * node + 2);
                stage_latency.push(Nanos::ZERO);
                stage_pipe.push(3 * node + 2);
                stage_latency.push(Nanos::ZERO);
            }
        }
        Topology::custom(pipes, stage_pipe, stage_latency, 3)
    }

    /// `barriers` synchronous compute steps per token on a `K`-way
    /// tensor-parallel group: each step runs `t_c_min / K` on the group and is
    /// followed by an all-gather of `t_n` that does not occupy the GPUs.
    pub fn tensor_parallel(barriers: u32, k: u32, t_c_min: Nanos, t_n: Nanos) -> Result<Self> {
        if barriers == 0 || k == 0 {
            return Err(Error::Config("tensor-parallel topology needs barriers >= 1 and K >= 1".into()));
        }
        let pipes = vec![
            PipeInfo::new(PipeKind::Compute, true, "tp-group".into()),
            PipeInfo::new(PipeKind::StaticDelay, false, "all-gather".into()),
        ];
        let step = Nanos(t_c_min.0 / k as u64);
        let mut stage_pipe = Vec::new();
        let mut stage_latency = Vec::new();
        for _ in 0..barriers {
            stage_pipe.extend([0, 1]);
            stage_latency.extend([step, t_n]);
        }
        Topology::custom(pipes, stage_pipe, stage_latency, 2)
    }

    pub fn pipes(&self) -> &[PipeInfo] {
        &self.pipes
    }

    pub fn stage_count(&self) -> usize {
        self.stage_pipe.len()
    }

    pub fn stages_per_layer(&self) -> usize {
        self.stages_per_layer
    }

    pub fn stage_pipe(&self, stage: usize) -> usize {
        self.stage_pipe[stage]
    }

    pub fn stage_latency(&self, stage: usize) -> Nanos {
        self.stage_latency[stage]
    }

    /// Time for one batch to complete a pass with no queueing.
    pub fn unloaded_pass(&self) -> Nanos {
        self.stage_latency.iter().copied().sum()
    }

    /// Busy time each pipe spends on one batch per pass (zero for delays).
    pub fn busy_per_pass(&self) -> Vec<Nanos> {
        let mut busy = vec![Nanos::ZERO; self.pipes.len()];
        for (stage, &p) in self.stage_pipe.iter().enumerate() {
            if self.pipes[p].kind != PipeKind::StaticDelay {
                busy[p] += self.stage_latency[stage];
            }
        }
        busy
    }

    /// Pipe with the largest per-pass busy time.
    pub fn bottleneck(&self) -> Option<(usize, Nanos)> {
        self.busy_per_pass()
            .into_iter()
            .enumerate()
            .filter(|(_, b)| !b.is_zero())
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
    }

    /// Smallest in-flight count whose total work covers one unloaded pass on
    /// the bottleneck pipe.
    pub fn saturation_inflight(&self) -> u64 {
        match self.bottleneck() {
            Some((_, busy)) => self.unloaded_pass().0.div_ceil(busy.0).max(1),
            None => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tier_layout() {
        let t = Topology::two_tier(&TwoTierStages {
            n_layers: 4,
            k: 2,
            nonattention: Nanos(10),
            to_tier2: Nanos(1),
            rtt: Nanos(5),
            attention: Nanos(7),
            to_tier1: Nanos(2),
            classifier: Nanos(3),
        })
        .unwrap();
        assert_eq!(t.pipes().len(), 12);
        assert_eq!(t.stage_count(), 24);
        // layer 2 belongs to node 1
        assert_eq!(t.stage_pipe(12), 6);
        assert_eq!(t.stage_latency(2) + t.stage_latency(5), Nanos(5));
        assert_eq!(t.stage_latency(18), Nanos(13));
        assert_eq!(t.unloaded_pass(), Nanos(4 * (10 + 1 + 5 + 7 + 2) + 3));
    }

    #[test]
    fn single_tier_hops_only_between_nodes() {
        let t = Topology::single_tier(&SingleTierStages {
            n_layers: 5,
            k: 2,
            compute: Nanos(10),
            link: Nanos(4),
            rtt: Nanos(6),
            classifier: Nanos::ZERO,
        })
        .unwrap();
        // node 0 hosts layers 0..3, node 1 layers 3..5
        assert_eq!(t.unloaded_pass(), Nanos(5 * 10 + 2 * (4 + 3)));
        assert_eq!(t.busy_per_pass()[0], Nanos(30));
        assert_eq!(t.busy_per_pass()[3], Nanos(20));
        assert_eq!(t.bottleneck(), Some((0, Nanos(30))));
    }

    #[test]
    fn unmapped_stage_rejected() {
        let pipes = vec![PipeInfo::new(PipeKind::Compute, true, "x".into())];
        let err = Topology::custom(pipes, vec![0, 3], vec![Nanos(1), Nanos(1)], 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(Topology::single_tier(&SingleTierStages {
            n_layers: 2,
            k: 3,
            compute: Nanos(1),
            link: Nanos(1),
            rtt: Nanos(1),
            classifier: Nanos::ZERO,
        })
        .is_err());
    }

    #[test]
    fn saturation_count() {
        let t = Topology::tensor_parallel(3, 10, Nanos(480_000), Nanos(1_000_000)).unwrap();
        // one step is 48us of compute followed by 1ms of all-gather
        assert_eq!(t.saturation_inflight(), 22);
    }
}
