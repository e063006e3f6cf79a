use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::topology::{PipeKind, Topology};
use crate::error::{Error, Result};
use crate::units::Nanos;

/// Largest accepted number of measured generations.
pub const MAX_ITERATIONS: u32 = 100_000;

/// Order in which a compute pipe picks among batches that are ready.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopOrder {
    /// Later stages first, draining batches that are furthest along.
    #[default]
    LatestStage,
    /// Earliest stage, then earliest timestamp.
    EarliestStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Full passes of batch 0 discarded before measuring.
    pub warmup: u32,
    /// Measured generations of batch 0 (`E`).
    pub iterations: u32,
    pub pop_order: PopOrder,
    pub keep_log: bool,
    /// Abort once this many queued events have been processed.
    pub max_events: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            warmup: 2,
            iterations: 8,
            pop_order: PopOrder::LatestStage,
            keep_log: false,
            max_events: 1_000_000_000,
        }
    }
}

/// One processed event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub event_seq: u64,
    pub pipe_id: u32,
    pub batch_id: u32,
    pub stage: u32,
    pub enqueue_ts_ns: u64,
    pub start_ts_ns: u64,
    pub finish_ts_ns: u64,
    #[serde(skip)]
    pub kind: Option<PipeKind>,
}

pub const EVENT_LOG_HEADER: [&str; 7] = [
    "event_seq",
    "pipe_id",
    "batch_id",
    "stage",
    "enqueue_ts_ns",
    "start_ts_ns",
    "finish_ts_ns",
];

/// Where batch 0 spent its time over the measured passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub compute: Nanos,
    pub link: Nanos,
    pub static_delay: Nanos,
    pub queue: Nanos,
    pub passes: u32,
}

impl LatencyBreakdown {
    pub fn total(&self) -> Nanos {
        self.compute + self.link + self.static_delay + self.queue
    }

    /// Link occupancy plus fixed delays.
    pub fn transit(&self) -> Nanos {
        self.link + self.static_delay
    }

    fn add(&mut self, kind: PipeKind, queue: u64, service: u64) {
        self.queue += Nanos(queue);
        match kind {
            PipeKind::Compute => self.compute += Nanos(service),
            PipeKind::Link => self.link += Nanos(service),
            PipeKind::StaticDelay => self.static_delay += Nanos(service),
        }
    }

    fn absorb(&mut self, other: &LatencyBreakdown) {
        self.compute += other.compute;
        self.link += other.link;
        self.static_delay += other.static_delay;
        self.queue += other.queue;
        self.passes += other.passes;
    }
}

/// Raw result of one run over a topology.
#[derive(Debug, Clone)]
pub(crate) struct RunOutput {
    pub gen_ts: Vec<Nanos>,
    pub window_start: Nanos,
    pub pipe_utilization: Vec<f64>,
    pub breakdown: LatencyBreakdown,
    pub events: u64,
    pub log: Option<Vec<LogEntry>>,
}

const IDLE: u64 = u64::MAX;

// Max-heap key: priority class, then earlier timestamp, then lower batch id.
type ReadyKey = (u32, Reverse<u64>, Reverse<u32>, u32);

struct PipeState {
    kind: PipeKind,
    busy_till: u64,
    arrivals: BinaryHeap<Reverse<(u64, u32, u32)>>,
    ready: BinaryHeap<ReadyKey>,
    scheduled: u64,
    version: u32,
    last: (u64, u64),
    window_busy: u64,
}

fn overlap_from(interval: (u64, u64), from: u64) -> u64 {
    interval.1.saturating_sub(interval.0.max(from))
}

struct Engine<'a> {
    topo: &'a Topology,
    opts: SimOptions,
    pipes: Vec<PipeState>,
    schedule: BinaryHeap<Reverse<(u64, u32, u32)>>,
    gen_ts: Vec<Nanos>,
    target_gens: usize,
    window_start: Option<u64>,
    pass: LatencyBreakdown,
    measured: LatencyBreakdown,
    log: Option<Vec<LogEntry>>,
    seq: u64,
    events: u64,
}

impl<'a> Engine<'a> {
    fn new(topo: &'a Topology, opts: SimOptions) -> Self {
        let pipes = topo
            .pipes()
            .iter()
            .map(|p| PipeState {
                kind: p.kind,
                busy_till: 0,
                arrivals: BinaryHeap::new(),
                ready: BinaryHeap::new(),
                scheduled: IDLE,
                version: 0,
                last: (0, 0),
                window_busy: 0,
            })
            .collect();
        Engine {
            topo,
            opts,
            pipes,
            schedule: BinaryHeap::new(),
            gen_ts: Vec::new(),
            target_gens: (opts.warmup + opts.iterations) as usize,
            window_start: if opts.warmup == 0 { Some(0) } else { None },
            pass: LatencyBreakdown::default(),
            measured: LatencyBreakdown::default(),
            log: if opts.keep_log { Some(Vec::new()) } else { None },
            seq: 0,
            events: 0,
        }
    }

    fn priority(&self, kind: PipeKind, stage: u32) -> u32 {
        match (kind, self.opts.pop_order) {
            (PipeKind::Compute, PopOrder::LatestStage) => stage,
            (PipeKind::Compute, PopOrder::EarliestStage) => u32::MAX - stage,
            _ => 0,
        }
    }

    fn refresh(&mut self, p: usize) {
        let pipe = &mut self.pipes[p];
        let next = if !pipe.ready.is_empty() {
            pipe.busy_till
        } else if let Some(Reverse((ts, _, _))) = pipe.arrivals.peek() {
            pipe.busy_till.max(*ts)
        } else {
            IDLE
        };
        if next != pipe.scheduled {
            pipe.scheduled = next;
            pipe.version = pipe.version.wrapping_add(1);
            if next != IDLE {
                self.schedule.push(Reverse((next, p as u32, pipe.version)));
            }
        }
    }

    fn record(&mut self, p: usize, id: u32, stage: usize, enq: u64, start: u64, finish: u64) {
        if let Some(log) = self.log.as_mut() {
            log.push(LogEntry {
                event_seq: self.seq,
                pipe_id: p as u32,
                batch_id: id,
                stage: stage as u32,
                enqueue_ts_ns: enq,
                start_ts_ns: start,
                finish_ts_ns: finish,
                kind: Some(self.pipes[p].kind),
            });
        }
        self.seq += 1;
        if id == 0 {
            self.pass.add(self.pipes[p].kind, start - enq, finish - start);
        }
    }

    /// Batch `id` finished `stage` at `ts`; returns the next stage.
    fn advance(&mut self, stage: usize, id: u32, ts: u64) -> usize {
        let next = (stage + 1) % self.topo.stage_count();
        if next == 0 && id == 0 {
            let index = self.gen_ts.len();
            if index >= self.opts.warmup as usize {
                self.pass.passes = 1;
                let pass = self.pass;
                self.measured.absorb(&pass);
            }
            self.pass = LatencyBreakdown::default();
            self.gen_ts.push(Nanos(ts));
            if index + 1 == self.opts.warmup as usize {
                self.open_window(ts);
            }
        }
        next
    }

    fn open_window(&mut self, from: u64) {
        self.window_start = Some(from);
        for pipe in &mut self.pipes {
            pipe.window_busy = overlap_from(pipe.last, from);
        }
    }

    /// Batch `id` reaches `stage` at `ts`. Fixed delays are applied at once.
    fn deliver(&mut self, mut stage: usize, id: u32, mut ts: u64) {
        loop {
            let p = self.topo.stage_pipe(stage);
            if self.pipes[p].kind != PipeKind::StaticDelay {
                self.pipes[p].arrivals.push(Reverse((ts, id, stage as u32)));
                self.refresh(p);
                return;
            }
            let finish = ts + self.topo.stage_latency(stage).0;
            self.record(p, id, stage, ts, ts, finish);
            stage = self.advance(stage, id, finish);
            ts = finish;
        }
    }

    fn process(&mut self, p: usize, start: u64) {
        let kind = self.pipes[p].kind;
        while let Some(&Reverse((ts, id, stage))) = self.pipes[p].arrivals.peek() {
            if ts > start {
                break;
            }
            self.pipes[p].arrivals.pop();
            let key = (self.priority(kind, stage), Reverse(ts), Reverse(id), stage);
            self.pipes[p].ready.push(key);
        }
        let (_, Reverse(enq), Reverse(id), stage) =
            self.pipes[p].ready.pop().expect("scheduled pipe has a ready event");
        let stage = stage as usize;
        let finish = start + self.topo.stage_latency(stage).0;
        {
            let pipe = &mut self.pipes[p];
            pipe.busy_till = finish;
            pipe.scheduled = IDLE;
            pipe.last = (start, finish);
            if let Some(w) = self.window_start {
                pipe.window_busy += overlap_from((start, finish), w);
            }
        }
        self.events += 1;
        self.record(p, id, stage, enq, start, finish);
        let next = self.advance(stage, id, finish);
        self.deliver(next, id, finish);
        self.refresh(p);
    }

    fn run(mut self, inflight: u32) -> Result<RunOutput> {
        for id in 0..inflight {
            self.deliver(0, id, 0);
        }
        loop {
            let stop_at = (self.gen_ts.len() >= self.target_gens)
                .then(|| self.gen_ts[self.target_gens - 1].0);
            let Some(&Reverse((start, p, version))) = self.schedule.peek() else {
                if stop_at.is_some() {
                    break;
                }
                return Err(Error::Config("simulation stalled with no pending events".into()));
            };
            if stop_at.is_some_and(|g| start >= g) {
                break;
            }
            self.schedule.pop();
            if self.pipes[p as usize].version != version {
                continue;
            }
            if self.events >= self.opts.max_events {
                return Err(Error::Config(format!(
                    "simulation exceeded the event cap of {}",
                    self.opts.max_events
                )));
            }
            self.process(p as usize, start);
        }
        self.gen_ts.truncate(self.target_gens);
        let end = self.gen_ts[self.target_gens - 1].0;
        let window_start = self.window_start.unwrap_or(0);
        let span = end - window_start;
        let pipe_utilization = self
            .pipes
            .iter()
            .map(|pipe| {
                if pipe.kind == PipeKind::StaticDelay || span == 0 {
                    0.0
                } else {
                    let busy = pipe.window_busy - overlap_from(pipe.last, end).min(pipe.window_busy);
                    busy as f64 / span as f64
                }
            })
            .collect();
        Ok(RunOutput {
            gen_ts: self.gen_ts,
            window_start: Nanos(window_start),
            pipe_utilization,
            breakdown: self.measured,
            events: self.events,
            log: self.log,
        })
    }
}

pub(crate) fn run(topo: &Topology, inflight: u32, opts: SimOptions) -> Result<RunOutput> {
    if inflight == 0 {
        return Err(Error::invalid("in-flight batch count must be at least 1"));
    }
    if opts.iterations == 0 {
        return Err(Error::invalid("iteration count E must be at least 1"));
    }
    if opts.iterations > MAX_ITERATIONS {
        return Err(Error::invalid(format!(
            "iteration count {} exceeds the cap of {MAX_ITERATIONS}",
            opts.iterations
        )));
    }
    let occupying = (0..topo.stage_count())
        .any(|s| topo.pipes()[topo.stage_pipe(s)].kind != PipeKind::StaticDelay);
    if !occupying {
        return Err(Error::Config("topology has no compute or link stage".into()));
    }
    if topo.unloaded_pass().is_zero() {
        return Err(Error::Config("every stage latency is zero".into()));
    }
    Engine::new(topo, opts).run(inflight)
}
