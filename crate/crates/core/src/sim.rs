//! Discrete-event scheduling engine with EASY backfilling.
//!
//! Time advances over arrival and completion events. At each event time
//! completions are applied first (ties by job id), then arrivals, then one
//! scheduling pass: the head job (by policy rank, or chosen by a
//! [`Decider`]) starts if a placement exists; otherwise it is reserved and
//! later jobs may backfill around the reservation. A reserved job stays the
//! head until it starts.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{choose_plan, DEFAULT_LOOKAHEAD};
use crate::cluster::{build_cluster, ClusterError, ClusterSpec, ClusterState, PlacementPlan};
use crate::features::{build_state, FeatureMode, StateMatrix};
use crate::metrics::{summarize, JobOutcome, MetricError, MetricSummary, UtilizationTimeline, DEFAULT_TAU};
use crate::policies::{rank, PolicyKind, PriorityContext, PriorityTable};
use crate::trace::{JobRecord, RuntimeSource};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("episode needs at least one job")]
    EmptyBatch,
    #[error("job {job_id} requests {requested} GPUs and can never be placed on this cluster")]
    Unschedulable { job_id: String, requested: u32 },
    #[error("duplicate job id {0} in batch")]
    DuplicateJob(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("decider failed: {0}")]
    Decider(String),
    #[error("lookahead size must be at least 1")]
    ZeroLookahead,
}

/// How the RL pipeline turns a chosen job into a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AllocMode {
    /// Spread/pack optimizer with look-ahead.
    #[default]
    Optimized,
    /// First canonical candidate (pack before spread).
    FirstFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Runtime values policies and features observe.
    pub feature_runtime_source: RuntimeSource,
    /// Runtime estimates used for reservations and backfill decisions.
    pub reservation_runtime_source: RuntimeSource,
    pub backfill: bool,
    pub lookahead: usize,
    pub alloc_mode: AllocMode,
    pub feature_mode: FeatureMode,
    pub tau: f64,
    pub record_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            feature_runtime_source: RuntimeSource::Requested,
            reservation_runtime_source: RuntimeSource::Requested,
            backfill: true,
            lookahead: DEFAULT_LOOKAHEAD,
            alloc_mode: AllocMode::Optimized,
            feature_mode: FeatureMode::Engineered,
            tau: DEFAULT_TAU,
            record_log: false,
        }
    }
}

/// Picks the next job from the state matrix.
pub trait Decider {
    /// Returns the chosen row and a priority per valid row (higher first);
    /// the priorities order the look-ahead jobs.
    fn decide(&mut self, sm: &StateMatrix) -> Result<(usize, Vec<f64>), String>;
}

/// Who orders the queue.
pub enum Scheduler<'a> {
    Policy(PolicyKind),
    Table(&'a PriorityTable, PolicyKind),
    Agent(&'a mut dyn Decider),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEntry {
    Start {
        time: u64,
        job_id: String,
        plan: PlacementPlan,
        queue_len: usize,
        backfilled: bool,
        digest: String,
    },
    Complete {
        time: u64,
        job_id: String,
    },
    Reserve {
        time: u64,
        job_id: String,
        until: u64,
        queue_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcomes: Vec<JobOutcome>,
    pub timeline: UtilizationTimeline,
    pub summary: MetricSummary,
    pub decisions: usize,
    pub solver_calls: usize,
    pub backfilled: usize,
    pub log: Option<Vec<LogEntry>>,
}

struct Running {
    est_end: u64,
}

/// Step-wise engine; [`run_episode`] drives it to completion.
pub struct Engine<'s> {
    jobs: Vec<JobRecord>,
    cfg: SimConfig,
    scheduler: Scheduler<'s>,
    state: ClusterState,
    now: u64,
    next_arrival: usize,
    queue: Vec<usize>,
    completions: BinaryHeap<Reverse<(u64, String, usize)>>,
    running: BTreeMap<usize, Running>,
    reserved: Option<usize>,
    starts: Vec<Option<u64>>,
    usage: HashMap<String, f64>,
    timeline: UtilizationTimeline,
    log: Vec<LogEntry>,
    decisions: usize,
    solver_calls: usize,
    backfilled: usize,
}

impl<'s> Engine<'s> {
    pub fn new(batch: &[JobRecord], spec: &ClusterSpec, cfg: SimConfig, scheduler: Scheduler<'s>) -> Result<Self, SimError> {
        if batch.is_empty() {
            return Err(SimError::EmptyBatch);
        }
        if cfg.lookahead == 0 {
            return Err(SimError::ZeroLookahead);
        }
        let state = build_cluster(spec.clone())?;
        let mut jobs = batch.to_vec();
        jobs.sort_by(|a, b| a.submit_time.cmp(&b.submit_time).then_with(|| a.job_id.cmp(&b.job_id)));
        let mut seen = std::collections::HashSet::new();
        for j in &jobs {
            if !seen.insert(j.job_id.as_str()) {
                return Err(SimError::DuplicateJob(j.job_id.clone()));
            }
            if !state.can_schedule_now(j) {
                return Err(SimError::Unschedulable {
                    job_id: j.job_id.clone(),
                    requested: j.requested_gpus,
                });
            }
        }
        let mut timeline = UtilizationTimeline::new(spec.total_gpus());
        timeline.record(jobs[0].submit_time, 0);
        Ok(Engine {
            starts: vec![None; jobs.len()],
            now: jobs[0].submit_time,
            jobs,
            cfg,
            scheduler,
            state,
            next_arrival: 0,
            queue: Vec::new(),
            completions: BinaryHeap::new(),
            running: BTreeMap::new(),
            reserved: None,
            usage: HashMap::new(),
            timeline,
            log: Vec::new(),
            decisions: 0,
            solver_calls: 0,
            backfilled: 0,
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    /// Queued jobs in arrival order.
    pub fn queue(&self) -> Vec<&JobRecord> {
        self.queue.iter().map(|&i| &self.jobs[i]).collect()
    }

    pub fn reserved_job(&self) -> Option<&JobRecord> {
        self.reserved.map(|i| &self.jobs[i])
    }

    pub fn is_done(&self) -> bool {
        self.next_arrival == self.jobs.len() && self.queue.is_empty() && self.running.is_empty()
    }

    pub fn next_event_time(&self) -> Option<u64> {
        let arrival = self.jobs.get(self.next_arrival).map(|j| j.submit_time);
        let completion = self.completions.peek().map(|Reverse((t, _, _))| *t);
        match (arrival, completion) {
            (Some(a), Some(c)) => Some(a.min(c)),
            (a, c) => a.or(c),
        }
    }

    /// Process every event at the next event time, then schedule.
    /// Returns `false` once the episode is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(t) = self.next_event_time() else {
            return Ok(false);
        };
        self.now = t;
        while let Some(Reverse((end, _, _))) = self.completions.peek() {
            if *end != t {
                break;
            }
            let Reverse((_, job_id, idx)) = self.completions.pop().expect("peeked");
            self.state.release(&job_id)?;
            self.running.remove(&idx);
            let j = &self.jobs[idx];
            *self.usage.entry(j.user_id.clone()).or_insert(0.0) += (j.requested_gpus as u64 * j.actual_runtime) as f64;
            if self.cfg.record_log {
                self.log.push(LogEntry::Complete { time: t, job_id });
            }
        }
        while self.next_arrival < self.jobs.len() && self.jobs[self.next_arrival].submit_time == t {
            self.queue.push(self.next_arrival);
            self.next_arrival += 1;
        }
        self.schedule()?;
        self.timeline.record(t, self.state.allocated_gpus());
        Ok(!self.is_done())
    }

    fn start(&mut self, idx: usize, plan: PlacementPlan, backfilled: bool) -> Result<(), SimError> {
        let job = &self.jobs[idx];
        self.state.allocate(job, &plan)?;
        let end = self.now + job.actual_runtime;
        let est_end = self.now + job.runtime(self.cfg.reservation_runtime_source);
        self.completions.push(Reverse((end, job.job_id.clone(), idx)));
        self.running.insert(idx, Running { est_end });
        self.starts[idx] = Some(self.now);
        self.queue.retain(|&q| q != idx);
        if self.reserved == Some(idx) {
            self.reserved = None;
        }
        if backfilled {
            self.backfilled += 1;
        }
        if self.cfg.record_log {
            let digest = digest(&self.state);
            self.log.push(LogEntry::Start {
                time: self.now,
                job_id: self.jobs[idx].job_id.clone(),
                plan,
                queue_len: self.queue.len(),
                backfilled,
                digest,
            });
        }
        Ok(())
    }

    fn policy_order(&self) -> Vec<usize> {
        let queue: Vec<&JobRecord> = self.queue.iter().map(|&i| &self.jobs[i]).collect();
        let src = self.cfg.feature_runtime_source;
        let order = match &self.scheduler {
            Scheduler::Policy(kind) | Scheduler::Table(_, kind) => {
                let usage = if *kind == PolicyKind::SlurmMf { self.usage.clone() } else { HashMap::new() };
                let ctx = PriorityContext::for_queue(self.now, src, &queue, usage, self.state.spec().total_gpus());
                match &self.scheduler {
                    Scheduler::Table(table, kind) => table.rank(*kind, &queue, &ctx),
                    _ => rank(*kind, &queue, &ctx),
                }
            }
            // backfill order for the agent pipeline: arrival order
            Scheduler::Agent(_) => (0..queue.len()).collect(),
        };
        order.into_iter().map(|p| self.queue[p]).collect()
    }

    fn plan_for(&mut self, idx: usize, lookahead: &[usize]) -> Option<PlacementPlan> {
        let job = &self.jobs[idx];
        let optimized = matches!(self.scheduler, Scheduler::Agent(_)) && self.cfg.alloc_mode == AllocMode::Optimized;
        if !optimized {
            return self.state.first_fit_plan(job);
        }
        let look: Vec<&JobRecord> = lookahead.iter().map(|&i| &self.jobs[i]).collect();
        let (plan, sol) = choose_plan(&self.state, job, &look)?;
        if sol.is_some() {
            self.solver_calls += 1;
        }
        Some(plan)
    }

    /// Head selection by the agent; returns the job and the look-ahead jobs.
    fn agent_head(&mut self) -> Result<(usize, Vec<usize>), SimError> {
        let queue: Vec<&JobRecord> = self.queue.iter().map(|&i| &self.jobs[i]).collect();
        let sm = build_state(
            &queue,
            &self.state,
            self.now,
            self.cfg.feature_runtime_source,
            self.cfg.feature_mode,
        );
        let Scheduler::Agent(decider) = &mut self.scheduler else {
            unreachable!("agent_head only runs for the agent scheduler");
        };
        let (row, prios) = decider.decide(&sm).map_err(SimError::Decider)?;
        if row >= sm.valid_rows {
            return Err(SimError::Decider(format!("row {row} outside {} valid rows", sm.valid_rows)));
        }
        self.decisions += 1;
        let mut rows: Vec<usize> = (0..sm.valid_rows).filter(|&r| r != row).collect();
        rows.sort_by(|&a, &b| prios[b].total_cmp(&prios[a]).then(a.cmp(&b)));
        let k = self.cfg.lookahead;
        let look = rows
            .into_iter()
            .take(k - 1)
            .map(|r| self.queue[sm.row_queue_index[r]])
            .collect();
        Ok((self.queue[sm.row_queue_index[row]], look))
    }

    fn schedule(&mut self) -> Result<(), SimError> {
        let agent = matches!(self.scheduler, Scheduler::Agent(_));
        let mut order = if agent { Vec::new() } else { self.policy_order() };
        let mut cursor = 0;
        loop {
            if self.queue.is_empty() {
                return Ok(());
            }
            let (head, look) = if let Some(r) = self.reserved {
                (r, Vec::new())
            } else if agent {
                self.agent_head()?
            } else {
                while cursor < order.len() && self.starts[order[cursor]].is_some() {
                    cursor += 1;
                }
                (order[cursor], Vec::new())
            };
            match self.plan_for(head, &look) {
                Some(plan) => {
                    self.start(head, plan, false)?;
                }
                None => {
                    self.reserved = Some(head);
                    if self.cfg.backfill {
                        if agent {
                            order = self.policy_order();
                        }
                        self.backfill(head, &order)?;
                    }
                    return Ok(());
                }
            }
        }
    }

    /// Earliest time the reserved job fits, releasing running jobs in
    /// estimated-end order; also returns the shadow state at that time.
    fn reservation(&self, head: usize) -> (u64, ClusterState) {
        let mut by_end: Vec<(u64, &str)> = self
            .running
            .iter()
            .map(|(&i, r)| (r.est_end.max(self.now), self.jobs[i].job_id.as_str()))
            .collect();
        by_end.sort();
        let mut shadow = self.state.clone();
        let job = &self.jobs[head];
        let mut k = 0;
        while k < by_end.len() {
            let t = by_end[k].0;
            while k < by_end.len() && by_end[k].0 == t {
                shadow.release(by_end[k].1).expect("running jobs hold allocations");
                k += 1;
            }
            if shadow.can_schedule_now(job) {
                return (t, shadow);
            }
        }
        // cannot happen: the job fits an idle cluster
        (u64::MAX, shadow)
    }

    fn backfill(&mut self, head: usize, order: &[usize]) -> Result<Vec<usize>, SimError> {
        let (until, mut shadow) = self.reservation(head);
        if self.cfg.record_log {
            self.log.push(LogEntry::Reserve {
                time: self.now,
                job_id: self.jobs[head].job_id.clone(),
                until,
                queue_len: self.queue.len(),
            });
        }
        let mut started = Vec::new();
        for &idx in order {
            if idx == head || self.starts[idx].is_some() {
                continue;
            }
            let job = &self.jobs[idx];
            if job.requested_gpus > self.state.total_free_gpus() {
                continue;
            }
            let Some(plan) = self.plan_for(idx, &[]) else { continue };
            let job = &self.jobs[idx];
            let est_end = self.now + job.runtime(self.cfg.reservation_runtime_source);
            // jobs running past the reservation must leave room for the head
            if est_end > until {
                let mut trial = shadow.clone();
                if trial.allocate(job, &plan).is_err() || !trial.can_schedule_now(&self.jobs[head]) {
                    continue;
                }
                shadow = trial;
            }
            self.start(idx, plan, true)?;
            started.push(idx);
            if self.queue.len() == 1 {
                break;
            }
        }
        Ok(started)
    }

    /// Finish the episode and collect results.
    pub fn finish(mut self) -> Result<EpisodeResult, SimError> {
        while self.step()? {}
        let outcomes: Vec<JobOutcome> = self
            .jobs
            .iter()
            .zip(&self.starts)
            .map(|(j, s)| {
                let start = s.expect("every job starts before the episode ends");
                JobOutcome {
                    job_id: j.job_id.clone(),
                    submit_time: j.submit_time,
                    start_time: start,
                    end_time: start + j.actual_runtime,
                    gpus_used: j.requested_gpus,
                }
            })
            .collect();
        let summary = summarize(&outcomes, &self.timeline, self.cfg.tau)?;
        Ok(EpisodeResult {
            outcomes,
            timeline: self.timeline,
            summary,
            decisions: self.decisions,
            solver_calls: self.solver_calls,
            backfilled: self.backfilled,
            log: self.cfg.record_log.then_some(self.log),
        })
    }
}

fn digest(state: &ClusterState) -> String {
    let mut h = Sha256::new();
    for (g, (c, m)) in state.free_gpus().iter().zip(state.free_cpus().iter().zip(state.free_mem_mb())) {
        h.update(g.to_le_bytes());
        h.update(c.to_le_bytes());
        h.update(m.to_le_bytes());
    }
    let out = h.finalize();
    out[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Simulate `batch` from an idle cluster until every job completes.
pub fn run_episode(
    batch: &[JobRecord],
    spec: &ClusterSpec,
    cfg: &SimConfig,
    scheduler: Scheduler<'_>,
) -> Result<EpisodeResult, SimError> {
    Engine::new(batch, spec, cfg.clone(), scheduler)?.finish()
}

/// Findings of [`replay_log`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub starts: usize,
    pub completions: usize,
    pub conservation_violations: usize,
    pub reservation_violations: usize,
    pub timing_violations: usize,
}

/// Re-apply a decision log to a fresh cluster and check conservation after
/// every event, that each job starts once after submission and runs its
/// actual runtime, and that no reserved job starts after any reservation
/// recorded for it.
pub fn replay_log(log: &[LogEntry], batch: &[JobRecord], spec: &ClusterSpec) -> Result<ReplayReport, SimError> {
    let mut state = build_cluster(spec.clone())?;
    let jobs: HashMap<&str, &JobRecord> = batch.iter().map(|j| (j.job_id.as_str(), j)).collect();
    let mut started: HashMap<&str, u64> = HashMap::new();
    let mut reservations: HashMap<&str, u64> = HashMap::new();
    let mut report = ReplayReport::default();
    for e in log {
        match e {
            LogEntry::Start { time, job_id, plan, .. } => {
                report.starts += 1;
                let Some(job) = jobs.get(job_id.as_str()) else {
                    report.timing_violations += 1;
                    continue;
                };
                if *time < job.submit_time || started.insert(job_id, *time).is_some() {
                    report.timing_violations += 1;
                }
                if let Some(&until) = reservations.get(job_id.as_str()) {
                    if *time > until {
                        report.reservation_violations += 1;
                    }
                }
                if state.allocate(job, plan).is_err() {
                    report.conservation_violations += 1;
                }
            }
            LogEntry::Complete { time, job_id } => {
                report.completions += 1;
                match (started.get(job_id.as_str()), jobs.get(job_id.as_str())) {
                    (Some(&s), Some(j)) if s + j.actual_runtime == *time => {}
                    _ => report.timing_violations += 1,
                }
                if state.release(job_id).is_err() {
                    report.conservation_violations += 1;
                }
            }
            LogEntry::Reserve { job_id, until, .. } => {
                let r = reservations.entry(job_id).or_insert(*until);
                *r = (*r).min(*until);
            }
        }
        if state.check_conservation().is_err() {
            report.conservation_violations += 1;
        }
    }
    if started.len() != batch.len() {
        report.timing_violations += batch.len().abs_diff(started.len());
    }
    Ok(report)
}

/// JSON-lines rendering of a decision log.
pub fn log_jsonl(log: &[LogEntry]) -> serde_json::Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Latency of one scheduling decision at a given queue size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub queue_size: usize,
    pub decisions: usize,
    pub median_decision_wall_clock_s: f64,
    pub mean_decision_wall_clock_s: f64,
    pub batch_wall_clock_s: f64,
}

/// Time full decisions (state build, agent, placement with look-ahead) on
/// a half-busy cluster with `queue_size` waiting jobs drawn from `pool`.
pub fn measure_overhead(
    decider: &mut dyn Decider,
    pool: &[JobRecord],
    spec: &ClusterSpec,
    cfg: &SimConfig,
    queue_sizes: &[usize],
    repeats: usize,
) -> Result<Vec<OverheadRow>, SimError> {
    let mut state = build_cluster(spec.clone())?;
    // occupy every other node's first half so placements are non-trivial
    for (i, node) in spec.nodes.iter().enumerate().step_by(2) {
        let g = node.gpus / 2;
        if g == 0 {
            continue;
        }
        let bg = JobRecord {
            job_id: format!("__bg{i}"),
            user_id: String::new(),
            vc_id: node.vc_id.clone(),
            submit_time: 0,
            requested_time: 1,
            actual_runtime: 1,
            requested_gpus: g,
            gpu_type: node.gpu_type.clone(),
            requested_cpus: None,
            requested_mem_gb: None,
        };
        state.allocate(&bg, &PlacementPlan::new(vec![(node.node_id.clone(), g)], crate::cluster::PlanStyle::Pack))?;
    }
    let now = pool.iter().map(|j| j.submit_time).max().unwrap_or(0) + 1;
    let mut rows = Vec::new();
    for &q in queue_sizes {
        let queue: Vec<&JobRecord> = pool.iter().cycle().take(q.max(1)).collect();
        let mut times = Vec::with_capacity(repeats);
        let batch_start = Instant::now();
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            let sm = build_state(&queue, &state, now, cfg.feature_runtime_source, cfg.feature_mode);
            let (row, prios) = decider.decide(&sm).map_err(SimError::Decider)?;
            let mut rest: Vec<usize> = (0..sm.valid_rows).filter(|&r| r != row).collect();
            rest.sort_by(|&a, &b| prios[b].total_cmp(&prios[a]));
            let look: Vec<&JobRecord> = rest
                .iter()
                .take(cfg.lookahead.saturating_sub(1))
                .map(|&r| queue[sm.row_queue_index[r]])
                .collect();
            let head = queue[sm.row_queue_index[row]];
            std::hint::black_box(choose_plan(&state, head, &look));
            times.push(t0.elapsed().as_secs_f64());
        }
        let batch = batch_start.elapsed().as_secs_f64();
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        rows.push(OverheadRow {
            queue_size: q,
            decisions: times.len(),
            median_decision_wall_clock_s: times[times.len() / 2],
            mean_decision_wall_clock_s: mean,
            batch_wall_clock_s: batch,
        });
    }
    Ok(rows)
}
