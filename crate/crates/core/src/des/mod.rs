//! Discrete-event pipeline simulator.
//!
//! A batch walks a fixed cycle of stages, one per hop of a generated token.
//! Each stage is served by a pipe: compute and link pipes hold one batch at a
//! time, fixed-delay pipes only add latency. Time is integer nanoseconds and
//! every tie is broken by (priority, timestamp, batch id), so runs are
//! bit-for-bit reproducible.

mod engine;
mod topology;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{Nanos, NS_PER_S};

pub use engine::{LatencyBreakdown, LogEntry, PopOrder, SimOptions, EVENT_LOG_HEADER, MAX_ITERATIONS};
pub use topology::{PipeInfo, PipeKind, SingleTierStages, Topology, TwoTierStages};

/// The configuration a report was produced for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub n_layers: u32,
    pub k: u32,
    pub k_prime: u32,
    /// Batch per Tier-2 shard (equal to the Tier-1 batch when `k_prime` is 0).
    pub batch: u64,
    pub tokens_per_batch: u64,
    pub inflight: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: ConfigEcho,
    pub warmup: u32,
    pub iterations: u32,
    pub pop_order: PopOrder,
    /// Every generation of batch 0, warm-up included.
    pub gen_ts: Vec<Nanos>,
    /// Start of the measurement window.
    pub window_start: Nanos,
    /// Mean time between generations over the window, in nanoseconds.
    pub tbt_ns: f64,
    /// Tokens per second.
    pub throughput: f64,
    pub breakdown: LatencyBreakdown,
    pub tier1_utilization_mean: f64,
    pub tier1_utilization_min: f64,
    pub pipe_utilization: Vec<f64>,
    pub events_processed: u64,
    #[serde(skip)]
    pub event_log: Option<Vec<LogEntry>>,
}

impl SimReport {
    /// Generation timestamps inside the measurement window, its start included.
    pub fn measured_gen_ts(&self) -> Vec<Nanos> {
        let mut out = vec![self.window_start];
        out.extend_from_slice(&self.gen_ts[self.warmup as usize..]);
        out
    }

    pub fn tbt(&self) -> Nanos {
        Nanos(self.tbt_ns.round() as u64)
    }
}

/// Runs `inflight` batches of `config.tokens_per_batch` tokens on `topo`.
pub fn simulate(topo: &Topology, config: ConfigEcho, opts: SimOptions) -> Result<SimReport> {
    let out = engine::run(topo, config.inflight, opts)?;
    let mut measured = vec![out.window_start];
    measured.extend_from_slice(&out.gen_ts[opts.warmup as usize..]);
    let span = measured.last().expect("non-empty").0 - out.window_start.0;
    let tbt_ns = span as f64 / opts.iterations as f64;
    let throughput = throughput_from(&measured, config.tokens_per_batch, config.inflight as u64)?;
    let tier1: Vec<f64> = topo
        .pipes()
        .iter()
        .zip(&out.pipe_utilization)
        .filter(|(p, _)| p.tier1)
        .map(|(_, &u)| u)
        .collect();
    let (mean, min) = if tier1.is_empty() {
        (0.0, 0.0)
    } else {
        (
            tier1.iter().sum::<f64>() / tier1.len() as f64,
            tier1.iter().copied().fold(f64::INFINITY, f64::min),
        )
    };
    Ok(SimReport {
        config,
        warmup: opts.warmup,
        iterations: opts.iterations,
        pop_order: opts.pop_order,
        gen_ts: out.gen_ts,
        window_start: out.window_start,
        tbt_ns,
        throughput,
        breakdown: out.breakdown,
        tier1_utilization_mean: mean,
        tier1_utilization_min: min,
        pipe_utilization: out.pipe_utilization,
        events_processed: out.events,
        event_log: out.log,
    })
}

/// Two-tier pipeline with `k_prime` Tier-2 nodes per Tier-1 node, each
/// holding a shard of `batch` prompts.
pub fn simulate_two_tier(
    stages: &TwoTierStages,
    k_prime: u32,
    batch: u64,
    inflight: u32,
    opts: SimOptions,
) -> Result<SimReport> {
    if k_prime == 0 {
        return Err(Error::invalid("two-tier simulation needs K' >= 1"));
    }
    let topo = Topology::two_tier(stages)?;
    let config = ConfigEcho {
        n_layers: stages.n_layers,
        k: stages.k,
        k_prime,
        batch,
        tokens_per_batch: batch * k_prime as u64,
        inflight,
    };
    simulate(&topo, config, opts)
}

/// Single-tier pipeline over `K` Tier-1 nodes.
pub fn simulate_single_tier(
    stages: &SingleTierStages,
    batch: u64,
    inflight: u32,
    opts: SimOptions,
) -> Result<SimReport> {
    let topo = Topology::single_tier(stages)?;
    let config = ConfigEcho {
        n_layers: stages.n_layers,
        k: stages.k,
        k_prime: 0,
        batch,
        tokens_per_batch: batch,
        inflight,
    };
    simulate(&topo, config, opts)
}

/// `B_total * IF / mean(diff(gen_ts))` in tokens per second.
pub fn throughput_from(gen_ts: &[Nanos], tokens_per_batch: u64, inflight: u64) -> Result<f64> {
    if gen_ts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "throughput needs at least 2 timestamps, got {}",
            gen_ts.len()
        )));
    }
    let first = gen_ts[0].0;
    let last = gen_ts[gen_ts.len() - 1].0;
    if last <= first {
        return Err(Error::InsufficientData("generation timestamps do not advance".into()));
    }
    let intervals = (gen_ts.len() - 1) as f64;
    let mean_ns = (last - first) as f64 / intervals;
    Ok(tokens_per_batch as f64 * inflight as f64 * NS_PER_S as f64 / mean_ns)
}

/// Recomputes the measured-pass breakdown of batch 0 from a retained log.
pub fn latency_breakdown(report: &SimReport) -> Result<LatencyBreakdown> {
    let log = report.event_log.as_ref().ok_or_else(|| {
        Error::Unavailable("event log was not retained; rerun with the log enabled".into())
    })?;
    let first = report.warmup as usize;
    let last = first + report.iterations as usize;
    let mut pass = 0usize;
    let mut prev_stage: Option<u32> = None;
    let mut total = LatencyBreakdown::default();
    let mut seen = None;
    for e in log.iter().filter(|e| e.batch_id == 0) {
        if prev_stage.is_some_and(|s| e.stage <= s) {
            pass += 1;
        }
        prev_stage = Some(e.stage);
        if pass < first || pass >= last {
            continue;
        }
        seen = Some(pass);
        let queue = Nanos(e.start_ts_ns - e.enqueue_ts_ns);
        let service = Nanos(e.finish_ts_ns - e.start_ts_ns);
        total.queue += queue;
        match e.kind {
            Some(PipeKind::Compute) => total.compute += service,
            Some(PipeKind::Link) => total.link += service,
            Some(PipeKind::StaticDelay) => total.static_delay += service,
            None => return Err(Error::Unavailable("log entry carries no pipe kind".into())),
        }
    }
    total.passes = seen.map_or(0, |p| (p + 1 - first) as u32);
    Ok(total)
}

/// Writes the log as CSV with [`EVENT_LOG_HEADER`].
pub fn write_event_log<W: Write>(log: &[LogEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing event log: {e}"));
    w.write_record(EVENT_LOG_HEADER).map_err(io)?;
    for e in log {
        w.write_record([
            e.event_seq.to_string(),
            e.pipe_id.to_string(),
            e.batch_id.to_string(),
            e.stage.to_string(),
            e.enqueue_ts_ns.to_string(),
            e.start_ts_ns.to_string(),
            e.finish_ts_ns.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::io("flushing event log", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SimOptions {
        SimOptions {
            keep_log: true,
            ..SimOptions::default()
        }
    }

    #[test]
    fn single_batch_gens_are_multiples_of_the_stage_sum() {
        let stages = TwoTierStages {
            n_layers: 1,
            k: 1,
            nonattention: Nanos(11),
            to_tier2: Nanos(3),
            rtt: Nanos(8),
            attention: Nanos(7),
            to_tier1: Nanos(2),
            classifier: Nanos::ZERO,
        };
        let r = simulate_two_tier(&stages, 1, 1, 1, opts()).unwrap();
        let sum = 11 + 3 + 8 + 7 + 2;
        for (i, g) in r.gen_ts.iter().enumerate() {
            assert_eq!(g.0, (i as u64 + 1) * sum);
        }
        assert_eq!(r.breakdown.queue, Nanos::ZERO);
        assert_eq!(r.breakdown.static_delay, Nanos(8 * 8));
        assert_eq!(r.breakdown.total().0, 8 * sum);
    }

    #[test]
    fn two_layers_two_batches_hand_schedule() {
        // tier-1 and tier-2 alternate: every pass takes 4a with no idle time
        let a = 100;
        let stages = TwoTierStages {
            n_layers: 2,
            k: 1,
            nonattention: Nanos(a),
            to_tier2: Nanos::ZERO,
            rtt: Nanos::ZERO,
            attention: Nanos(a),
            to_tier1: Nanos::ZERO,
            classifier: Nanos::ZERO,
        };
        let r = simulate_two_tier(&stages, 1, 1, 2, opts()).unwrap();
        assert_eq!(r.tbt(), Nanos(4 * a));
        assert_eq!(r.gen_ts[0], Nanos(4 * a));
        assert!((r.tier1_utilization_min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn textbook_pipeline() {
        let t = 1_000;
        let stages = SingleTierStages {
            n_layers: 4,
            k: 4,
            compute: Nanos(t),
            link: Nanos::ZERO,
            rtt: Nanos::ZERO,
            classifier: Nanos::ZERO,
        };
        let r = simulate_single_tier(&stages, 3, 4, opts()).unwrap();
        assert_eq!(r.tbt(), Nanos(4 * t));
        let expect = 3.0 * 4.0 / (4.0 * t as f64 * 1e-9);
        assert!((r.throughput - expect).abs() / expect < 1e-12);
        assert!((r.tier1_utilization_min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_from_log_matches_online() {
        let stages = SingleTierStages {
            n_layers: 5,
            k: 2,
            compute: Nanos(700),
            link: Nanos(90),
            rtt: Nanos(300),
            classifier: Nanos(50),
        };
        let r = simulate_single_tier(&stages, 1, 9, opts()).unwrap();
        let from_log = latency_breakdown(&r).unwrap();
        assert_eq!(from_log, r.breakdown);
        let window = r.gen_ts.last().unwrap().0 - r.window_start.0;
        assert_eq!(r.breakdown.total().0, window);
        assert!(r.breakdown.queue > Nanos::ZERO);
    }

    #[test]
    fn breakdown_needs_log() {
        let stages = SingleTierStages {
            n_layers: 1,
            k: 1,
            compute: Nanos(5),
            link: Nanos(1),
            rtt: Nanos(2),
            classifier: Nanos::ZERO,
        };
        let r = simulate_single_tier(&stages, 1, 1, SimOptions::default()).unwrap();
        assert!(matches!(latency_breakdown(&r), Err(Error::Unavailable(_))));
    }

    #[test]
    fn throughput_examples() {
        let s = |v: u64| Nanos(v * NS_PER_S);
        assert_eq!(throughput_from(&[s(0), s(1), s(2)], 4, 3).unwrap(), 12.0);
        assert!(matches!(
            throughput_from(&[s(1)], 4, 3),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn guards() {
        let stages = SingleTierStages {
            n_layers: 1,
            k: 1,
            compute: Nanos(5),
            link: Nanos(1),
            rtt: Nanos(2),
            classifier: Nanos::ZERO,
        };
        let mut o = SimOptions::default();
        assert!(simulate_single_tier(&stages, 1, 0, o).is_err());
        o.iterations = MAX_ITERATIONS + 1;
        assert!(simulate_single_tier(&stages, 1, 1, o).is_err());
        o.iterations = 0;
        assert!(simulate_single_tier(&stages, 1, 1, o).is_err());
    }

    #[test]
    fn event_log_csv_header() {
        let stages = SingleTierStages {
            n_layers: 1,
            k: 1,
            compute: Nanos(5),
            link: Nanos(1),
            rtt: Nanos(2),
            classifier: Nanos::ZERO,
        };
        let r = simulate_single_tier(&stages, 1, 1, opts()).unwrap();
        let mut buf = Vec::new();
        write_event_log(r.event_log.as_ref().unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("event_seq,pipe_id,batch_id,stage,enqueue_ts_ns,start_ts_ns,finish_ts_ns\n"));
        assert_eq!(text.lines().count(), 1 + r.event_log.unwrap().len());
    }
}
