//! Feature building and heuristic sampling: per-job raw, cluster and
//! engineered features, and the fixed-shape state matrix fed to the agent.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::trace::{GpuType, JobRecord, RuntimeSource};

pub const MAX_QUEUE_SIZE: usize = 256;
pub const OV_WIDTH: usize = 8;
pub const CV_WIDTH: usize = 5;
/// Above this CFF the sampler emphasizes job size, below it urgency.
pub const FRAG_THRESHOLD: f64 = 0.5;
pub const EMPHASIZED_WEIGHT: f64 = 1.0;
pub const DEEMPHASIZED_WEIGHT: f64 = 0.6;
pub const NUM_WAYS_CAP: usize = 8;

/// Column meanings of the observation vector, per mode.
pub const ENGINEERED_COLUMNS: [&str; OV_WIDTH] =
    ["req_gpus", "req_time", "wait", "dsr", "future_avail", "cff", "size_or_urgency", "num_ways"];
pub const NAIVE_COLUMNS: [&str; OV_WIDTH] =
    ["req_gpus", "req_time", "wait", "submit", "gpu_type", "req_cpus", "req_mem", "free_nodes"];
pub const CV_COLUMNS: [&str; CV_WIDTH] = ["submit", "req_time", "can_schedule_now", "req_gpus", "wait"];

/// How observation rows are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Engineered features with heuristic sampling.
    #[default]
    Engineered,
    /// The first eight raw columns, min-max normalized (ablation arm).
    Naive,
}

impl FeatureMode {
    /// Identifies the observation column layout; stored in checkpoints.
    pub fn layout_version(self) -> &'static str {
        match self {
            FeatureMode::Engineered => "ov8-engineered-v1",
            FeatureMode::Naive => "ov8-naive-v1",
        }
    }
}

/// Every tracked feature of one queued job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub job_id: String,
    pub user_id: String,
    pub vc_id: String,
    pub requested_gpus: f64,
    pub requested_time: f64,
    pub wait_time: f64,
    pub submit_time: f64,
    pub gpu_type: String,
    pub req_cpus: f64,
    pub req_mem: f64,
    pub free_nodes: f64,
    pub can_schedule_now: bool,
    pub num_ways_to_schedule: usize,
    pub dsr: f64,
    pub future_avail: f64,
    pub cff: f64,
    pub job_size: f64,
    pub urgency: f64,
}

/// `requested_gpus / free GPUs of the matching type`, capped at
/// `requested_gpus` (the value when nothing of that type is free).
pub fn dsr(job: &JobRecord, state: &ClusterState) -> f64 {
    let free = matching_free(job, &state.free_gpus_by_type());
    let req = job.requested_gpus as f64;
    (req / free.max(1) as f64).clamp(0.0, req)
}

fn matching_free(job: &JobRecord, by_type: &BTreeMap<GpuType, u32>) -> u32 {
    by_type
        .iter()
        .filter(|(t, _)| job.gpu_type.accepts(t))
        .map(|(_, &f)| f)
        .sum()
}

/// Expected free GPUs usable by `job` after it and the jobs queued ahead of
/// it are served: over the GPU types the job accepts, free GPUs minus the
/// demand of `ahead` jobs targeting that type, minus the job's own request.
/// May be negative.
pub fn future_avail(job: &JobRecord, state: &ClusterState, ahead: &[&JobRecord]) -> f64 {
    let by_type = state.free_gpus_by_type();
    let mut total = 0.0;
    for (t, &free) in &by_type {
        if !job.gpu_type.accepts(t) {
            continue;
        }
        let demand: u32 = ahead
            .iter()
            .filter(|j| &j.gpu_type == t)
            .map(|j| j.requested_gpus)
            .sum();
        total += free as f64 - demand as f64;
    }
    let misc_ahead: u32 = ahead.iter().filter(|j| j.gpu_type.is_misc()).map(|j| j.requested_gpus).sum();
    total - misc_ahead as f64 - job.requested_gpus as f64
}

/// Cluster fragmentation factor `1 - Σ f² / (Σ f)²` over per-node free
/// GPUs; 0 when nothing is free.
pub fn cff(state: &ClusterState) -> f64 {
    cff_of(state.free_gpus())
}

pub fn cff_of(free: &[u32]) -> f64 {
    let total: f64 = free.iter().map(|&f| f as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let squares: f64 = free.iter().map(|&f| (f as f64) * (f as f64)).sum();
    1.0 - squares / (total * total)
}

/// Min-max over the slice, clamped to [0,1]; constant columns map to 0.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Normalized `requested_gpus × requested_time` of `job` within `queue`.
pub fn job_size(job: &JobRecord, queue: &[&JobRecord], source: RuntimeSource) -> f64 {
    let product = |j: &JobRecord| j.requested_gpus as f64 * j.runtime(source) as f64;
    let lo = queue.iter().map(|j| product(j)).fold(f64::INFINITY, f64::min);
    let hi = queue.iter().map(|j| product(j)).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0;
    }
    ((product(job) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// `wait / (wait + runtime estimate)`: grows with age, never penalizes
/// long jobs.
pub fn urgency(job: &JobRecord, now: u64, source: RuntimeSource) -> f64 {
    let wait = now.saturating_sub(job.submit_time) as f64;
    let rt = job.runtime(source).max(1) as f64;
    wait / (wait + rt)
}

/// Normalized view of one row, the input to [`sample_features`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedRow {
    pub req_gpus: f64,
    pub req_time: f64,
    pub wait: f64,
    pub dsr: f64,
    pub future_avail: f64,
    pub job_size: f64,
    pub urgency: f64,
    pub num_ways: usize,
}

/// The eight-slot observation row:
/// `[req_gpus, req_time, wait, dsr, future_avail, cff, toggled, num_ways]`.
///
/// `toggled` blends job size and urgency; whichever the current CFF
/// emphasizes gets weight 1.0, the other 0.6, renormalized into [0,1].
pub fn sample_features(row: &NormalizedRow, cff: f64) -> [f64; OV_WIDTH] {
    let (emph, other) = if cff > FRAG_THRESHOLD {
        (row.job_size, row.urgency)
    } else {
        (row.urgency, row.job_size)
    };
    let toggled = (EMPHASIZED_WEIGHT * emph + DEEMPHASIZED_WEIGHT * other) / (EMPHASIZED_WEIGHT + DEEMPHASIZED_WEIGHT);
    let ways = row.num_ways.min(NUM_WAYS_CAP) as f64 / NUM_WAYS_CAP as f64;
    [
        row.req_gpus,
        row.req_time,
        row.wait,
        row.dsr,
        row.future_avail,
        cff,
        toggled.clamp(0.0, 1.0),
        ways,
    ]
}

/// Fixed-shape agent input: 256×8 observation and 256×5 critic blocks,
/// zero-padded below `valid_rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMatrix {
    pub ov: Vec<f64>,
    pub cv: Vec<f64>,
    pub valid_rows: usize,
    pub row_jobs: Vec<String>,
    /// Index into the queue slice passed to [`build_state`] for each valid row.
    #[serde(skip)]
    pub row_queue_index: Vec<usize>,
}

impl StateMatrix {
    pub fn empty() -> Self {
        StateMatrix {
            ov: vec![0.0; MAX_QUEUE_SIZE * OV_WIDTH],
            cv: vec![0.0; MAX_QUEUE_SIZE * CV_WIDTH],
            valid_rows: 0,
            row_jobs: Vec::new(),
            row_queue_index: Vec::new(),
        }
    }

    pub fn ov_row(&self, r: usize) -> &[f64] {
        &self.ov[r * OV_WIDTH..(r + 1) * OV_WIDTH]
    }

    pub fn cv_row(&self, r: usize) -> &[f64] {
        &self.cv[r * CV_WIDTH..(r + 1) * CV_WIDTH]
    }
}

/// Build every feature for the (already truncated) queue.
pub fn build_feature_rows(
    queue: &[&JobRecord],
    state: &ClusterState,
    now: u64,
    source: RuntimeSource,
) -> Vec<FeatureRow> {
    let by_type = state.free_gpus_by_type();
    let cluster_cff = cff(state);
    let free_nodes = state.free_nodes() as f64;
    // jobs with the same resource shape share a candidate family
    let mut ways_cache: HashMap<(u32, &str, &str, Option<u32>, Option<u64>), usize> = HashMap::new();
    let mut ahead_by_type: BTreeMap<&GpuType, u32> = BTreeMap::new();
    let mut misc_ahead = 0u32;

    let mut rows = Vec::with_capacity(queue.len());
    for &job in queue {
        let key = (
            job.requested_gpus,
            job.gpu_type.as_str(),
            job.vc_id.as_str(),
            job.requested_cpus,
            job.requested_mem_gb.map(f64::to_bits),
        );
        let num_ways = *ways_cache
            .entry(key)
            .or_insert_with(|| state.candidate_placements(job).len());

        let usable: f64 = by_type
            .iter()
            .filter(|(t, _)| job.gpu_type.accepts(t))
            .map(|(t, &f)| f as f64 - ahead_by_type.get(t).copied().unwrap_or(0) as f64)
            .sum();
        let future = usable - misc_ahead as f64 - job.requested_gpus as f64;

        let req = job.requested_gpus as f64;
        let free_match = matching_free(job, &by_type);
        rows.push(FeatureRow {
            job_id: job.job_id.clone(),
            user_id: job.user_id.clone(),
            vc_id: job.vc_id.clone(),
            requested_gpus: req,
            requested_time: job.runtime(source) as f64,
            wait_time: now.saturating_sub(job.submit_time) as f64,
            submit_time: job.submit_time as f64,
            gpu_type: job.gpu_type.to_string(),
            req_cpus: job.requested_cpus.map_or(0.0, |c| c as f64),
            req_mem: job.requested_mem_gb.unwrap_or(0.0),
            free_nodes,
            can_schedule_now: num_ways > 0,
            num_ways_to_schedule: num_ways,
            dsr: (req / free_match.max(1) as f64).clamp(0.0, req),
            future_avail: future,
            cff: cluster_cff,
            job_size: 0.0,
            urgency: urgency(job, now, source),
        });

        if job.gpu_type.is_misc() {
            misc_ahead += job.requested_gpus;
        } else {
            *ahead_by_type.entry(&job.gpu_type).or_insert(0) += job.requested_gpus;
        }
    }
    let sizes = min_max(&rows.iter().map(|r| r.requested_gpus * r.requested_time).collect::<Vec<_>>());
    for (r, s) in rows.iter_mut().zip(sizes) {
        r.job_size = s;
    }
    rows
}

/// The queue rows the state matrix will hold: earliest submitters first,
/// at most [`MAX_QUEUE_SIZE`]. Returns indices into `queue`.
pub fn observed_rows(queue: &[&JobRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    idx.sort_by(|&a, &b| {
        queue[a]
            .submit_time
            .cmp(&queue[b].submit_time)
            .then_with(|| queue[a].job_id.cmp(&queue[b].job_id))
    });
    idx.truncate(MAX_QUEUE_SIZE);
    idx
}

/// Assemble the state matrix for the current queue and cluster.
pub fn build_state(
    queue: &[&JobRecord],
    state: &ClusterState,
    now: u64,
    source: RuntimeSource,
    mode: FeatureMode,
) -> StateMatrix {
    build_state_with_rows(queue, state, now, source, mode).0
}

/// Like [`build_state`], also returning the full feature rows.
pub fn build_state_with_rows(
    queue: &[&JobRecord],
    state: &ClusterState,
    now: u64,
    source: RuntimeSource,
    mode: FeatureMode,
) -> (StateMatrix, Vec<FeatureRow>) {
    let mut sm = StateMatrix::empty();
    if queue.is_empty() {
        return (sm, Vec::new());
    }
    let kept = observed_rows(queue);
    let jobs: Vec<&JobRecord> = kept.iter().map(|&i| queue[i]).collect();
    let rows = build_feature_rows(&jobs, state, now, source);

    let column = |f: &dyn Fn(&FeatureRow) -> f64| min_max(&rows.iter().map(f).collect::<Vec<_>>());
    let gpus = column(&|r| r.requested_gpus);
    let time = column(&|r| r.requested_time);
    let wait = column(&|r| r.wait_time);
    let submit = column(&|r| r.submit_time);

    match mode {
        FeatureMode::Engineered => {
            let dsr = column(&|r| r.dsr);
            let future = column(&|r| r.future_avail);
            for (i, r) in rows.iter().enumerate() {
                let norm = NormalizedRow {
                    req_gpus: gpus[i],
                    req_time: time[i],
                    wait: wait[i],
                    dsr: dsr[i],
                    future_avail: future[i],
                    job_size: r.job_size,
                    urgency: r.urgency,
                    num_ways: r.num_ways_to_schedule,
                };
                sm.ov[i * OV_WIDTH..(i + 1) * OV_WIDTH].copy_from_slice(&sample_features(&norm, r.cff));
            }
        }
        FeatureMode::Naive => {
            let mut types: Vec<&GpuType> = state.spec().nodes.iter().map(|n| &n.gpu_type).collect();
            types.sort();
            types.dedup();
            let type_code = column(&|r| {
                types
                    .iter()
                    .position(|t| t.as_str() == r.gpu_type)
                    .map_or(0.0, |p| p as f64)
            });
            let cpus = column(&|r| r.req_cpus);
            let mem = column(&|r| r.req_mem);
            let node_count = state.spec().nodes.len().max(1) as f64;
            for (i, r) in rows.iter().enumerate() {
                let row = [
                    gpus[i],
                    time[i],
                    wait[i],
                    submit[i],
                    type_code[i],
                    cpus[i],
                    mem[i],
                    (r.free_nodes / node_count).clamp(0.0, 1.0),
                ];
                sm.ov[i * OV_WIDTH..(i + 1) * OV_WIDTH].copy_from_slice(&row);
            }
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let cv = [
            submit[i],
            time[i],
            if r.can_schedule_now { 1.0 } else { 0.0 },
            gpus[i],
            wait[i],
        ];
        sm.cv[i * CV_WIDTH..(i + 1) * CV_WIDTH].copy_from_slice(&cv);
    }
    sm.valid_rows = rows.len();
    sm.row_jobs = rows.iter().map(|r| r.job_id.clone()).collect();
    sm.row_queue_index = kept;
    (sm, rows)
}

/// Debug dump of the full feature table.
pub fn feature_rows_csv(rows: &[FeatureRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Debug dump of the state matrix: one line per row (padding included).
pub fn state_matrix_csv(sm: &StateMatrix, mode: FeatureMode) -> Result<Vec<u8>, csv::Error> {
    let ov_names = match mode {
        FeatureMode::Engineered => ENGINEERED_COLUMNS,
        FeatureMode::Naive => NAIVE_COLUMNS,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "job_id".to_string()];
    header.extend(ov_names.iter().map(|c| format!("ov_{c}")));
    header.extend(CV_COLUMNS.iter().map(|c| format!("cv_{c}")));
    w.write_record(&header)?;
    for r in 0..MAX_QUEUE_SIZE {
        let mut rec = vec![r.to_string(), sm.row_jobs.get(r).cloned().unwrap_or_default()];
        rec.extend(sm.ov_row(r).iter().map(|v| format!("{v:.6}")));
        rec.extend(sm.cv_row(r).iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_cluster, ClusterSpec, NodeSpec, PlacementPlan, PlanStyle};

    fn node(id: &str, ty: &str, gpus: u32) -> NodeSpec {
        NodeSpec {
            node_id: id.into(),
            gpu_type: GpuType::new(ty),
            gpus,
            cpus: gpus * 4,
            mem_gb: gpus as f64 * 16.0,
            vc_id: String::new(),
        }
    }

    fn cluster(nodes: Vec<NodeSpec>) -> ClusterState {
        build_cluster(ClusterSpec {
            nodes,
            cpu_per_gpu: 4,
            mem_per_gpu: 16.0,
            confine_to_vc: true,
        })
        .unwrap()
    }

    fn job(id: &str, ty: &str, gpus: u32, submit: u64, rt: u64) -> JobRecord {
        JobRecord {
            job_id: id.into(),
            user_id: "u".into(),
            vc_id: String::new(),
            submit_time: submit,
            requested_time: rt,
            actual_runtime: rt,
            requested_gpus: gpus,
            gpu_type: GpuType::new(ty),
            requested_cpus: None,
            requested_mem_gb: None,
        }
    }

    fn occupy(state: &mut ClusterState, node: &str, gpus: u32, id: &str, ty: &str) {
        let j = job(id, ty, gpus, 0, 1);
        state
            .allocate(&j, &PlacementPlan::new(vec![(node.into(), gpus)], PlanStyle::Pack))
            .unwrap();
    }

    #[test]
    fn dsr_cases() {
        let s = cluster(vec![node("p", "P100", 8)]);
        assert_eq!(dsr(&job("a", "P100", 4, 0, 1), &s), 0.5);
        let mut busy = s.clone();
        occupy(&mut busy, "p", 8, "f", "P100");
        assert_eq!(dsr(&job("a", "P100", 4, 0, 1), &busy), 4.0);
        let mut half = s.clone();
        occupy(&mut half, "p", 4, "f", "P100");
        assert_eq!(dsr(&job("a", "P100", 4, 0, 1), &half), 1.0);
    }

    #[test]
    fn future_avail_cases() {
        let s = cluster(vec![node("n", "V100", 8)]);
        let j = job("a", "V100", 4, 0, 1);
        assert_eq!(future_avail(&j, &s, &[]), 4.0);
        let big = job("b", "V100", 8, 0, 1);
        assert_eq!(future_avail(&j, &s, &[&big]), -4.0);
        // other types do not count against this job
        let s2 = cluster(vec![node("n", "V100", 8), node("p", "P100", 8)]);
        let p = job("c", "P100", 8, 0, 1);
        assert_eq!(future_avail(&j, &s2, &[&p]), 4.0);
    }

    #[test]
    fn future_avail_matches_streaming_build() {
        let s = cluster(vec![node("n", "V100", 8), node("m", "V100", 8)]);
        let jobs = [job("a", "V100", 4, 0, 1), job("b", "V100", 8, 1, 1), job("c", "V100", 2, 2, 1)];
        let q: Vec<&JobRecord> = jobs.iter().collect();
        let rows = build_feature_rows(&q, &s, 10, RuntimeSource::Requested);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.future_avail, future_avail(q[i], &s, &q[..i]));
            assert_eq!(r.dsr, dsr(q[i], &s));
        }
    }

    #[test]
    fn cff_cases() {
        assert_eq!(cff_of(&[8]), 0.0);
        assert_eq!(cff_of(&[8, 0, 0]), 0.0);
        assert_eq!(cff_of(&[4, 4]), 0.5);
        assert_eq!(cff_of(&[1; 8]), 0.875);
        assert_eq!(cff_of(&[0, 0]), 0.0);
    }

    #[test]
    fn job_size_cases() {
        let a = job("a", "V", 1, 0, 40);
        assert_eq!(job_size(&a, &[&a], RuntimeSource::Requested), 0.0);
        let b = job("b", "V", 2, 0, 40);
        let c = job("c", "V", 3, 0, 40);
        let q = [&a, &b, &c];
        assert_eq!(job_size(&b, &q, RuntimeSource::Requested), 0.5);
        assert_eq!(job_size(&c, &q, RuntimeSource::Requested), 1.0);
    }

    #[test]
    fn urgency_cases() {
        let j = job("a", "V", 1, 100, 50);
        assert_eq!(urgency(&j, 100, RuntimeSource::Requested), 0.0);
        assert_eq!(urgency(&j, 150, RuntimeSource::Requested), 0.5);
        let mut prev = 0.0;
        for now in [200, 1_000, 100_000, 10_000_000] {
            let u = urgency(&j, now, RuntimeSource::Requested);
            assert!(u > prev && u < 1.0);
            prev = u;
        }
    }

    #[test]
    fn toggle_follows_cff() {
        let row = NormalizedRow {
            job_size: 0.9,
            urgency: 0.1,
            ..Default::default()
        };
        let high = sample_features(&row, 0.8);
        assert!((high[6] - (0.9 + 0.6 * 0.1) / 1.6).abs() < 1e-12);
        let low = sample_features(&row, 0.1);
        assert!((low[6] - (0.1 + 0.6 * 0.9) / 1.6).abs() < 1e-12);
        assert!(high[6] > low[6]);
    }

    #[test]
    fn num_ways_emphasis() {
        let three = NormalizedRow { num_ways: 3, ..Default::default() };
        let one = NormalizedRow { num_ways: 1, ..Default::default() };
        assert!(sample_features(&three, 0.2)[7] > sample_features(&one, 0.2)[7]);
        let many = NormalizedRow { num_ways: 40, ..Default::default() };
        assert_eq!(sample_features(&many, 0.2)[7], 1.0);
    }

    #[test]
    fn padding_and_truncation() {
        let s = cluster(vec![node("n", "V100", 8)]);
        let jobs: Vec<JobRecord> = (0..3).map(|i| job(&format!("j{i}"), "V100", 1, i, 10)).collect();
        let q: Vec<&JobRecord> = jobs.iter().collect();
        let sm = build_state(&q, &s, 10, RuntimeSource::Requested, FeatureMode::Engineered);
        assert_eq!(sm.valid_rows, 3);
        assert!(sm.ov[3 * OV_WIDTH..].iter().all(|&v| v == 0.0));
        assert!(sm.cv[3 * CV_WIDTH..].iter().all(|&v| v == 0.0));

        // 300 jobs submitted in reverse id order; the earliest 256 are kept
        let many: Vec<JobRecord> = (0..300).map(|i| job(&format!("j{i:03}"), "V100", 1, 300 - i, 10)).collect();
        let q: Vec<&JobRecord> = many.iter().collect();
        let sm = build_state(&q, &s, 1000, RuntimeSource::Requested, FeatureMode::Engineered);
        assert_eq!(sm.valid_rows, 256);
        assert_eq!(sm.row_jobs[0], "j299");
        assert!(!sm.row_jobs.contains(&"j000".to_string()));

        let empty = build_state(&[], &s, 0, RuntimeSource::Requested, FeatureMode::Engineered);
        assert_eq!(empty.valid_rows, 0);
        assert!(empty.ov.iter().chain(&empty.cv).all(|&v| v == 0.0));
    }

    #[test]
    fn naive_columns_are_raw() {
        let s = cluster(vec![node("n", "V100", 8)]);
        let jobs = [job("a", "V100", 1, 0, 10), job("b", "V100", 4, 5, 30)];
        let q: Vec<&JobRecord> = jobs.iter().collect();
        let sm = build_state(&q, &s, 10, RuntimeSource::Requested, FeatureMode::Naive);
        assert_eq!(sm.ov_row(1)[..4], [1.0, 1.0, 0.0, 1.0]);
        assert_eq!(sm.ov_row(0)[7], 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entries_bounded(
                specs in prop::collection::vec((1u32..9, 0u64..5000, 1u64..5000), 0..60),
                busy in 0u32..8,
                now_extra in 0u64..10_000,
                naive in any::<bool>(),
            ) {
                let mut s = cluster(vec![node("a", "V100", 8), node("b", "V100", 8), node("c", "P100", 4)]);
                if busy > 0 {
                    occupy(&mut s, "a", busy, "bg", "V100");
                }
                let jobs: Vec<JobRecord> = specs
                    .iter()
                    .enumerate()
                    .map(|(i, &(g, sub, rt))| job(&format!("j{i}"), if i % 3 == 0 { "P100" } else { "V100" }, g, sub, rt))
                    .collect();
                let q: Vec<&JobRecord> = jobs.iter().collect();
                let mode = if naive { FeatureMode::Naive } else { FeatureMode::Engineered };
                let sm = build_state(&q, &s, 5000 + now_extra, RuntimeSource::Requested, mode);
                prop_assert_eq!(sm.valid_rows, jobs.len().min(MAX_QUEUE_SIZE));
                prop_assert!(sm.ov.iter().chain(&sm.cv).all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(sm.ov[sm.valid_rows * OV_WIDTH..].iter().all(|&v| v == 0.0));
            }

            #[test]
            fn cff_rises_with_even_splitting(total_per in 1u32..16, k in 1usize..8) {
                let fewer = vec![total_per * (k as u32 + 1); k];
                let more = vec![total_per * k as u32; k + 1];
                prop_assert!(cff_of(&more) > cff_of(&fewer));
            }

            #[test]
            fn cff_zero_iff_single_node(free in prop::collection::vec(0u32..8, 1..10)) {
                let nonzero = free.iter().filter(|&&f| f > 0).count();
                let c = cff_of(&free);
                prop_assert!((0.0..1.0).contains(&c));
                prop_assert_eq!(c == 0.0, nonzero <= 1);
            }

            #[test]
            fn min_max_endpoints(values in prop::collection::vec(-1e6f64..1e6, 1..50)) {
                let n = min_max(&values);
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (v, x) in values.iter().zip(&n) {
                    if hi > lo {
                        if *v == lo { prop_assert_eq!(*x, 0.0); }
                        if *v == hi { prop_assert_eq!(*x, 1.0); }
                    } else {
                        prop_assert_eq!(*x, 0.0);
                    }
                }
            }
        }
    }
}
