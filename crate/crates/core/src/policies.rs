//! Baseline priority functions and the Slurm multifactor approximation.
//!
//! Every score here follows one convention: higher schedules first.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{JobRecord, RuntimeSource};

/// Slurm-style age factor saturates after a week.
pub const MAX_AGE_SECS: f64 = 7.0 * 24.0 * 3600.0;
const WEEK_SECS: f64 = 7.0 * 24.0 * 3600.0;
pub const SLURM_WEIGHT: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Fifo,
    Sjf,
    Wfp3,
    Unicep,
    F1,
    SlurmMf,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Fifo,
        PolicyKind::Sjf,
        PolicyKind::Wfp3,
        PolicyKind::Unicep,
        PolicyKind::F1,
        PolicyKind::SlurmMf,
    ];
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy '{0}'")]
    Unknown(String),
    #[error("priority file: {0}")]
    File(String),
}

impl FromStr for PolicyKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fifo" | "fcfs" => Ok(PolicyKind::Fifo),
            "sjf" => Ok(PolicyKind::Sjf),
            "wfp3" | "wfp" => Ok(PolicyKind::Wfp3),
            "unicep" | "uni_cep" => Ok(PolicyKind::Unicep),
            "f1" => Ok(PolicyKind::F1),
            "slurm" | "slurm_mf" | "multifactor" => Ok(PolicyKind::SlurmMf),
            other => Err(PolicyError::Unknown(other.to_string())),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PolicyKind::Fifo => "fifo",
            PolicyKind::Sjf => "sjf",
            PolicyKind::Wfp3 => "wfp3",
            PolicyKind::Unicep => "unicep",
            PolicyKind::F1 => "f1",
            PolicyKind::SlurmMf => "slurm_mf",
        };
        f.write_str(s)
    }
}

/// What a priority function may look at besides the job itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityContext {
    pub now: u64,
    pub runtime_source: RuntimeSource,
    /// GPU-seconds consumed so far, per user (fair-share input).
    pub user_usage: HashMap<String, f64>,
    /// Usage at which the fair-share factor halves.
    pub half_decay: f64,
    /// Min and max observed runtime over the queue snapshot.
    pub queue_runtime_range: (f64, f64),
}

impl PriorityContext {
    pub fn new(now: u64, runtime_source: RuntimeSource) -> Self {
        PriorityContext {
            now,
            runtime_source,
            user_usage: HashMap::new(),
            half_decay: WEEK_SECS,
            queue_runtime_range: (0.0, 0.0),
        }
    }

    /// Context for a queue snapshot on a cluster of `total_gpus`.
    pub fn for_queue(
        now: u64,
        runtime_source: RuntimeSource,
        queue: &[&JobRecord],
        user_usage: HashMap<String, f64>,
        total_gpus: u32,
    ) -> Self {
        let rts = queue.iter().map(|j| j.runtime(runtime_source) as f64);
        let range = rts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let range = if queue.is_empty() { (0.0, 0.0) } else { range };
        PriorityContext {
            now,
            runtime_source,
            user_usage,
            half_decay: (total_gpus.max(1) as f64) * WEEK_SECS,
            queue_runtime_range: range,
        }
    }
}

/// Priority score of `job` under `kind`; higher schedules first.
///
/// `wt` is the wait so far, `rt` the runtime per the context's source,
/// `nt` the GPU count and `st` the submit time.
pub fn priority(kind: PolicyKind, job: &JobRecord, ctx: &PriorityContext) -> f64 {
    let wt = ctx.now.saturating_sub(job.submit_time) as f64;
    let rt = job.runtime(ctx.runtime_source).max(1) as f64;
    let nt = job.requested_gpus as f64;
    let st = job.submit_time as f64;
    match kind {
        PolicyKind::Fifo => -st,
        PolicyKind::Sjf => -rt,
        // published form is -(wt/rt)^3 * nt, minimized
        PolicyKind::Wfp3 => (wt / rt).powi(3) * nt,
        // log2(1) = 0 would divide by zero
        PolicyKind::Unicep => wt / (nt.max(2.0).log2() * rt),
        // published F1 is minimized; st = 0 is clamped to 1
        PolicyKind::F1 => -(rt.log10() * nt + 870.0 * st.max(1.0).log10()),
        PolicyKind::SlurmMf => {
            let age = (wt / MAX_AGE_SECS).min(1.0);
            let usage = ctx.user_usage.get(&job.user_id).copied().unwrap_or(0.0);
            let fair_share = (-usage / ctx.half_decay).exp2();
            let (lo, hi) = ctx.queue_runtime_range;
            let job_attr = if hi > lo { 1.0 - ((rt - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
            let partition = 1.0;
            let qos = 1.0;
            SLURM_WEIGHT * (age + fair_share + job_attr + partition + qos)
        }
    }
}

/// Order by descending score; ties by earlier submit, then job id.
pub fn order_by_scores(queue: &[&JobRecord], scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| queue[a].submit_time.cmp(&queue[b].submit_time))
            .then_with(|| queue[a].job_id.cmp(&queue[b].job_id))
    });
    idx
}

/// Indices into `queue`, highest priority first.
pub fn rank(kind: PolicyKind, queue: &[&JobRecord], ctx: &PriorityContext) -> Vec<usize> {
    let scores: Vec<f64> = queue.iter().map(|j| priority(kind, j, ctx)).collect();
    order_by_scores(queue, &scores)
}

/// Externally supplied per-job priorities (CSV: `job_id,priority`), e.g.
/// published predictions of another scheduler. Jobs absent from the table
/// fall back to `fallback`, ranked below every listed job.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorityTable {
    pub priorities: HashMap<String, f64>,
}

impl PriorityTable {
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::File(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        #[derive(Deserialize)]
        struct Row {
            job_id: String,
            priority: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut priorities = HashMap::new();
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| PolicyError::File(e.to_string()))?;
            if !row.priority.is_finite() {
                return Err(PolicyError::File(format!("non-finite priority for {}", row.job_id)));
            }
            priorities.insert(row.job_id, row.priority);
        }
        Ok(PriorityTable { priorities })
    }

    pub fn rank(&self, fallback: PolicyKind, queue: &[&JobRecord], ctx: &PriorityContext) -> Vec<usize> {
        let mut idx = rank(fallback, queue, ctx);
        // stable: listed jobs by table priority, the rest keep fallback order
        idx.sort_by(|&a, &b| {
            match (self.priorities.get(&queue[a].job_id), self.priorities.get(&queue[b].job_id)) {
                (Some(x), Some(y)) => y.total_cmp(x),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            }
        });
        idx
    }
}
