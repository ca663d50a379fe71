//! Job traces: the canonical record schema, adapters for the public GPU
//! trace families, a seeded synthetic generator, and train/test splitting
//! and batch sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label of the GPU model a job asks for (or a node carries).
///
/// `MISC` is a wildcard used by the Alibaba trace: such jobs may land on any
/// node type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GpuType(String);

impl GpuType {
    pub const MISC: &'static str = "MISC";

    pub fn new(label: impl Into<String>) -> Self {
        GpuType(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_misc(&self) -> bool {
        self.0.eq_ignore_ascii_case(Self::MISC)
    }

    /// Whether a job asking for `self` may run on a node of type `node`.
    pub fn accepts(&self, node: &GpuType) -> bool {
        self.is_misc() || self == node
    }
}

impl fmt::Display for GpuType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GpuType {
    fn from(s: &str) -> Self {
        GpuType::new(s)
    }
}

/// One trace row in the canonical schema. Times are integer seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub user_id: String,
    /// Virtual cluster; empty means the job may use any node.
    pub vc_id: String,
    pub submit_time: u64,
    pub requested_time: u64,
    pub actual_runtime: u64,
    pub requested_gpus: u32,
    pub gpu_type: GpuType,
    pub requested_cpus: Option<u32>,
    pub requested_mem_gb: Option<f64>,
}

impl JobRecord {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |why: &str| {
            Err(TraceError::InvalidJob {
                job_id: self.job_id.clone(),
                reason: why.to_string(),
            })
        };
        if self.job_id.is_empty() {
            return bad("empty job_id");
        }
        if self.requested_time < 1 {
            return bad("requested_time must be >= 1");
        }
        if self.actual_runtime < 1 {
            return bad("actual_runtime must be >= 1");
        }
        if self.requested_gpus < 1 {
            return bad("requested_gpus must be >= 1");
        }
        if self.requested_cpus == Some(0) {
            return bad("requested_cpus must be >= 1 when present");
        }
        if let Some(mem) = self.requested_mem_gb {
            if !(mem.is_finite() && mem > 0.0) {
                return bad("requested_mem_gb must be positive when present");
            }
        }
        Ok(())
    }

    /// Runtime as seen by policies and features under the given source.
    pub fn runtime(&self, source: RuntimeSource) -> u64 {
        match source {
            RuntimeSource::Actual => self.actual_runtime,
            RuntimeSource::Requested => self.requested_time,
        }
    }

    /// Fill absent CPU/memory demands proportionally to the GPU count.
    pub fn infer_resources(&mut self, cpu_per_gpu: u32, mem_per_gpu_gb: f64) {
        if self.requested_cpus.is_none() {
            self.requested_cpus = Some(self.requested_gpus * cpu_per_gpu.max(1));
        }
        if self.requested_mem_gb.is_none() {
            self.requested_mem_gb = Some(self.requested_gpus as f64 * mem_per_gpu_gb);
        }
    }
}

/// Which runtime figure the scheduler is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeSource {
    /// Ground truth from the trace (training regime).
    Actual,
    /// User estimate (evaluation regime).
    #[default]
    Requested,
}

impl FromStr for RuntimeSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "actual" => Ok(RuntimeSource::Actual),
            "requested" => Ok(RuntimeSource::Requested),
            other => Err(format!("unknown runtime source '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TraceMeta {
    pub source: String,
    pub cluster_hint: Option<String>,
    /// Rows rejected by the loader (missing or invalid mandatory fields).
    pub dropped_rows: usize,
}

/// A non-empty, submit-ordered list of jobs with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    jobs: Vec<JobRecord>,
    pub epoch: i64,
    pub meta: TraceMeta,
}

impl TraceSet {
    /// Sorts by submit time (stable, then by id) and checks the invariants.
    pub fn new(mut jobs: Vec<JobRecord>, epoch: i64, meta: TraceMeta) -> Result<Self, TraceError> {
        if jobs.is_empty() {
            return Err(TraceError::Empty);
        }
        let mut seen = HashSet::with_capacity(jobs.len());
        for job in &jobs {
            job.validate()?;
            if !seen.insert(job.job_id.as_str()) {
                return Err(TraceError::DuplicateJob(job.job_id.clone()));
            }
        }
        jobs.sort_by(|a, b| a.submit_time.cmp(&b.submit_time).then_with(|| a.job_id.cmp(&b.job_id)));
        Ok(TraceSet { jobs, epoch, meta })
    }

    pub fn jobs(&self) -> &[JobRecord] {
        &self.jobs
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn into_jobs(self) -> Vec<JobRecord> {
        self.jobs
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown trace format '{0}' (expected canonical, philly, helios or alibaba)")]
    UnknownFormat(String),
    #[error("trace has no valid rows ({dropped} dropped)")]
    NoValidRows { dropped: usize },
    #[error("trace is empty")]
    Empty,
    #[error("duplicate job id '{0}'")]
    DuplicateJob(String),
    #[error("invalid job '{job_id}': {reason}")]
    InvalidJob { job_id: String, reason: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("split of {n} jobs at fraction {fraction} leaves one side empty")]
    DegenerateSplit { n: usize, fraction: f64 },
    #[error("batch of {size} requested from a trace of {len} jobs")]
    BatchTooLarge { size: usize, len: usize },
    #[error("batch size must be positive")]
    ZeroBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Canonical,
    Philly,
    Helios,
    Alibaba,
}

impl FromStr for TraceFormat {
    type Err = TraceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(TraceFormat::Canonical),
            "philly" => Ok(TraceFormat::Philly),
            "helios" => Ok(TraceFormat::Helios),
            "alibaba" => Ok(TraceFormat::Alibaba),
            other => Err(TraceError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for TraceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TraceFormat::Canonical => "canonical",
            TraceFormat::Philly => "philly",
            TraceFormat::Helios => "helios",
            TraceFormat::Alibaba => "alibaba",
        };
        f.write_str(s)
    }
}

/// Load a trace file through the adapter for `format`.
///
/// Rows missing a mandatory field or violating a record invariant are
/// dropped; the count ends up in `meta.dropped_rows`.
pub fn load_trace(path: impl AsRef<Path>, format: TraceFormat) -> Result<TraceSet, TraceError> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let source = path.display().to_string();
    parse_trace(&text, format, &source)
}

/// Parse trace text already in memory; see [`load_trace`].
pub fn parse_trace(text: &str, format: TraceFormat, source: &str) -> Result<TraceSet, TraceError> {
    let (jobs, mut dropped, epoch) = match format {
        TraceFormat::Canonical => {
            let (jobs, dropped) = parse_canonical(text)?;
            (jobs, dropped, 0)
        }
        TraceFormat::Philly => adapters::philly(text)?,
        TraceFormat::Helios => adapters::helios(text)?,
        TraceFormat::Alibaba => adapters::alibaba(text)?,
    };
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(jobs.len());
    for job in jobs {
        if job.validate().is_err() || !seen.insert(job.job_id.clone()) {
            dropped += 1;
        } else {
            kept.push(job);
        }
    }
    if kept.is_empty() {
        return Err(TraceError::NoValidRows { dropped });
    }
    let meta = TraceMeta {
        source: format!("{format}:{source}"),
        cluster_hint: None,
        dropped_rows: dropped,
    };
    TraceSet::new(kept, epoch, meta)
}

/// Canonical rows that fail to deserialize count as dropped.
fn parse_canonical(text: &str) -> Result<(Vec<JobRecord>, usize), TraceError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut jobs = Vec::new();
    let mut dropped = 0;
    for row in reader.deserialize::<JobRecord>() {
        match row {
            Ok(job) => jobs.push(job),
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => dropped += 1,
        }
    }
    Ok((jobs, dropped))
}

/// Write the canonical CSV form (header = `JobRecord` field names).
pub fn save_trace(trace: &TraceSet, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    let bytes = to_canonical_csv(trace.jobs())?;
    crate::io::write_atomic(path, &bytes).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn to_canonical_csv(jobs: &[JobRecord]) -> Result<Vec<u8>, TraceError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for job in jobs {
        writer.serialize(job)?;
    }
    writer.flush().map_err(|source| TraceError::Io {
        path: "<memory>".into(),
        source,
    })?;
    writer
        .into_inner()
        .map_err(|e| TraceError::Io {
            path: "<memory>".into(),
            source: e.into_error(),
        })
}

/// Column-mapping shims for the public trace families.
///
/// Each adapter reads a headered CSV, looks up columns by any of several
/// accepted names (case-insensitive), and rebases submit times so the
/// earliest job arrives at 0 (`epoch` keeps the original origin).
///
/// * philly: `job_id|jobid`, `user|user_id`, `vc|vc_id`,
///   `submit_time|submitted_time`, runtime from `duration|run_time` or
///   `end_time - start_time`, `gpu_num|num_gpus`, optional `time_limit`
///   (else the estimate equals the runtime), optional `gpu_type`
///   (default P100), optional `cpu_num`, `mem_gb`.
/// * helios: Helios `cluster_log.csv` layout: `job_id`, `user`, `vc`,
///   `gpu_num`, `cpu_num`, `submit_time`, `duration`, optional
///   `time_limit`, `gpu_type` (default V100). The five busiest virtual
///   clusters become VC1..VC5 in descending job count; rows from other
///   clusters are dropped.
/// * alibaba: a job/task join of the PAI tables: `job_name|job_id`,
///   `user`, `start_time|submit_time` (submission), `end_time`,
///   `plan_gpu` (percent of one GPU, per instance), `inst_num`
///   (default 1), `plan_cpu` (percent of one core, per instance),
///   `plan_mem` (GB per instance), `gpu_type` (default MISC). No
///   virtual clusters.
///
/// Times may be integer/float seconds or `YYYY-MM-DD HH:MM:SS`.
mod adapters {
    use super::*;

    type Adapted = Result<(Vec<JobRecord>, usize, i64), TraceError>;

    struct Columns {
        index: HashMap<String, usize>,
    }

    impl Columns {
        fn new(headers: &csv::StringRecord) -> Self {
            let index = headers
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
                .collect();
            Columns { index }
        }

        fn find(&self, names: &[&str]) -> Option<usize> {
            names.iter().find_map(|n| self.index.get(*n).copied())
        }
    }

    fn field<'r>(row: &'r csv::StringRecord, col: Option<usize>) -> Option<&'r str> {
        col.and_then(|i| row.get(i)).map(str::trim).filter(|s| !s.is_empty())
    }

    pub(super) fn parse_time(s: &str) -> Option<i64> {
        if let Ok(v) = s.parse::<i64>() {
            return Some(v);
        }
        if let Ok(v) = s.parse::<f64>() {
            return v.is_finite().then_some(v.floor() as i64);
        }
        for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%m/%d/%Y %H:%M:%S"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(dt.and_utc().timestamp());
            }
        }
        None
    }

    fn parse_num(s: Option<&str>) -> Option<f64> {
        s.and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite())
    }

    /// Raw row before rebasing: submit is absolute.
    struct Raw {
        job: JobRecord,
        submit: i64,
    }

    fn rebase(rows: Vec<Raw>, dropped: usize) -> Adapted {
        let epoch = rows.iter().map(|r| r.submit).min().unwrap_or(0);
        let jobs = rows
            .into_iter()
            .map(|mut r| {
                r.job.submit_time = (r.submit - epoch) as u64;
                r.job
            })
            .collect();
        Ok((jobs, dropped, epoch))
    }

    fn reader(text: &str) -> csv::Reader<&[u8]> {
        csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes())
    }

    fn runtime(row: &csv::StringRecord, dur: Option<usize>, start: Option<usize>, end: Option<usize>) -> Option<i64> {
        if let Some(d) = parse_num(field(row, dur)) {
            return Some(d.round() as i64);
        }
        let s = field(row, start).and_then(parse_time)?;
        let e = field(row, end).and_then(parse_time)?;
        Some(e - s)
    }

    fn positive_u64(v: Option<i64>) -> Option<u64> {
        v.filter(|&x| x >= 1).map(|x| x as u64)
    }

    /// Shared path for the Philly/Helios layouts, which differ only in
    /// defaults and VC handling.
    fn slurm_like(text: &str, default_type: &str) -> Result<(Vec<(Raw, String)>, usize), TraceError> {
        let mut rdr = reader(text);
        let cols = Columns::new(rdr.headers()?);
        let c_id = cols.find(&["job_id", "jobid"]);
        let c_user = cols.find(&["user", "user_id"]);
        let c_vc = cols.find(&["vc", "vc_id"]);
        let c_submit = cols.find(&["submit_time", "submitted_time"]);
        let c_dur = cols.find(&["duration", "run_time", "runtime"]);
        let c_start = cols.find(&["start_time"]);
        let c_end = cols.find(&["end_time"]);
        let c_limit = cols.find(&["time_limit", "requested_time"]);
        let c_gpus = cols.find(&["gpu_num", "num_gpus", "gpus"]);
        let c_type = cols.find(&["gpu_type"]);
        let c_cpus = cols.find(&["cpu_num", "num_cpus", "cpus"]);
        let c_mem = cols.find(&["mem_gb", "mem"]);

        let mut out = Vec::new();
        let mut dropped = 0;
        for row in rdr.records() {
            let row = row?;
            let parsed = (|| {
                let job_id = field(&row, c_id)?.to_string();
                let submit = field(&row, c_submit).and_then(parse_time)?;
                let actual = positive_u64(runtime(&row, c_dur, c_start, c_end))?;
                let requested = match parse_num(field(&row, c_limit)) {
                    Some(v) => positive_u64(Some(v.round() as i64))?,
                    None => actual,
                };
                let gpus = parse_num(field(&row, c_gpus))?;
                if gpus < 1.0 {
                    return None;
                }
                let vc = field(&row, c_vc).unwrap_or("").to_string();
                let job = JobRecord {
                    job_id,
                    user_id: field(&row, c_user).unwrap_or("").to_string(),
                    vc_id: vc.clone(),
                    submit_time: 0,
                    requested_time: requested,
                    actual_runtime: actual,
                    requested_gpus: gpus.round() as u32,
                    gpu_type: GpuType::new(field(&row, c_type).unwrap_or(default_type)),
                    requested_cpus: parse_num(field(&row, c_cpus)).filter(|&c| c >= 1.0).map(|c| c.round() as u32),
                    requested_mem_gb: parse_num(field(&row, c_mem)).filter(|&m| m > 0.0),
                };
                Some((Raw { job, submit }, vc))
            })();
            match parsed {
                Some(r) => out.push(r),
                None => dropped += 1,
            }
        }
        Ok((out, dropped))
    }

    pub(super) fn philly(text: &str) -> Adapted {
        let (rows, dropped) = slurm_like(text, "P100")?;
        rebase(rows.into_iter().map(|(r, _)| r).collect(), dropped)
    }

    pub(super) fn helios(text: &str) -> Adapted {
        let (rows, mut dropped) = slurm_like(text, "V100")?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (_, vc) in &rows {
            *counts.entry(vc.clone()).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mapping: HashMap<String, String> = ranked
            .into_iter()
            .take(5)
            .enumerate()
            .map(|(i, (vc, _))| (vc, format!("VC{}", i + 1)))
            .collect();
        let mut kept = Vec::with_capacity(rows.len());
        for (mut raw, vc) in rows {
            match mapping.get(&vc) {
                Some(mapped) => {
                    raw.job.vc_id = mapped.clone();
                    kept.push(raw);
                }
                None => dropped += 1,
            }
        }
        rebase(kept, dropped)
    }

    pub(super) fn alibaba(text: &str) -> Adapted {
        let mut rdr = reader(text);
        let cols = Columns::new(rdr.headers()?);
        let c_id = cols.find(&["job_name", "job_id"]);
        let c_user = cols.find(&["user", "user_id"]);
        let c_submit = cols.find(&["start_time", "submit_time"]);
        let c_end = cols.find(&["end_time"]);
        let c_gpu = cols.find(&["plan_gpu"]);
        let c_inst = cols.find(&["inst_num"]);
        let c_cpu = cols.find(&["plan_cpu"]);
        let c_mem = cols.find(&["plan_mem"]);
        let c_type = cols.find(&["gpu_type"]);

        let mut rows = Vec::new();
        let mut dropped = 0;
        for row in rdr.records() {
            let row = row?;
            let parsed = (|| {
                let job_id = field(&row, c_id)?.to_string();
                let submit = field(&row, c_submit).and_then(parse_time)?;
                let end = field(&row, c_end).and_then(parse_time)?;
                let actual = positive_u64(Some(end - submit))?;
                let plan_gpu = parse_num(field(&row, c_gpu)).filter(|&g| g > 0.0)?;
                let inst = parse_num(field(&row, c_inst)).unwrap_or(1.0).max(1.0);
                let gpus = ((plan_gpu / 100.0).ceil() * inst).round() as u32;
                let cpus = parse_num(field(&row, c_cpu))
                    .filter(|&c| c > 0.0)
                    .map(|c| ((c / 100.0).ceil() * inst).round() as u32);
                let mem = parse_num(field(&row, c_mem)).filter(|&m| m > 0.0).map(|m| m * inst);
                let job = JobRecord {
                    job_id,
                    user_id: field(&row, c_user).unwrap_or("").to_string(),
                    vc_id: String::new(),
                    submit_time: 0,
                    requested_time: actual,
                    actual_runtime: actual,
                    requested_gpus: gpus,
                    gpu_type: GpuType::new(field(&row, c_type).unwrap_or(GpuType::MISC)),
                    requested_cpus: cpus,
                    requested_mem_gb: mem,
                };
                Some(Raw { job, submit })
            })();
            match parsed {
                Some(r) => rows.push(r),
                None => dropped += 1,
            }
        }
        rebase(rows, dropped)
    }
}

/// Parameters of the synthetic trace generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub job_count: usize,
    /// Poisson arrival rate, jobs per second.
    pub arrival_rate: f64,
    /// Mean of the log-normal runtime distribution, seconds.
    pub runtime_mean: f64,
    /// Log-space standard deviation of the runtime distribution.
    pub runtime_sigma: f64,
    pub runtime_max: u64,
    /// (gpu count, weight) pairs over {1, 2, 4, 8, 16}.
    pub gpu_demand: Vec<(u32, f64)>,
    /// (gpu type label, weight) pairs.
    pub gpu_types: Vec<(String, f64)>,
    /// (virtual cluster, weight) pairs; empty leaves jobs unconfined.
    pub vcs: Vec<(String, f64)>,
    /// Multiplicative factor range turning runtime into the user estimate.
    pub estimate_noise: (f64, f64),
    pub users: u32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            job_count: 1024,
            arrival_rate: 0.022333,
            runtime_mean: 3600.0,
            runtime_sigma: 1.5,
            runtime_max: 7 * 24 * 3600,
            gpu_demand: vec![(1, 0.55), (2, 0.15), (4, 0.15), (8, 0.1), (16, 0.05)],
            gpu_types: vec![("V100".into(), 1.0)],
            vcs: Vec::new(),
            estimate_noise: (1.0, 2.0),
            users: 32,
            seed: 0,
        }
    }
}

fn check_weights(name: &str, weights: impl Iterator<Item = f64>) -> Result<Vec<f64>, TraceError> {
    let w: Vec<f64> = weights.collect();
    if w.is_empty() {
        return Err(TraceError::InvalidConfig(format!("{name}: no entries")));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(TraceError::InvalidConfig(format!("{name}: negative or non-finite weight")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TraceError::InvalidConfig(format!("{name}: weights sum to {sum}, expected 1")));
    }
    Ok(w)
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let err = |m: &str| Err(TraceError::InvalidConfig(m.to_string()));
        if self.job_count == 0 {
            return err("job_count must be positive");
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return err("arrival_rate must be positive");
        }
        if !(self.runtime_mean.is_finite() && self.runtime_mean > 0.0) {
            return err("runtime_mean must be positive");
        }
        if !(self.runtime_sigma.is_finite() && self.runtime_sigma >= 0.0) {
            return err("runtime_sigma must be non-negative");
        }
        if self.runtime_max < 1 {
            return err("runtime_max must be >= 1");
        }
        let (lo, hi) = self.estimate_noise;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return err("estimate_noise must be a range 0 < lo <= hi");
        }
        if self.gpu_demand.iter().any(|(g, _)| *g == 0) {
            return err("gpu_demand sizes must be positive");
        }
        if self.users == 0 {
            return err("users must be positive");
        }
        check_weights("gpu_demand", self.gpu_demand.iter().map(|p| p.1))?;
        check_weights("gpu_types", self.gpu_types.iter().map(|p| p.1))?;
        if !self.vcs.is_empty() {
            check_weights("vcs", self.vcs.iter().map(|p| p.1))?;
        }
        Ok(())
    }
}

/// Generate a synthetic trace. A pure function of `cfg` (seed included).
pub fn synthesize_trace(cfg: &GenConfig) -> Result<TraceSet, TraceError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gaps = Exp::new(cfg.arrival_rate).map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
    let mu = cfg.runtime_mean.ln() - cfg.runtime_sigma * cfg.runtime_sigma / 2.0;
    let runtimes = LogNormal::new(mu, cfg.runtime_sigma).map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
    let demand_pick = WeightedIndex::new(cfg.gpu_demand.iter().map(|p| p.1))
        .map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
    let type_pick = WeightedIndex::new(cfg.gpu_types.iter().map(|p| p.1))
        .map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
    let vc_pick = if cfg.vcs.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(cfg.vcs.iter().map(|p| p.1)).map_err(|e| TraceError::InvalidConfig(e.to_string()))?)
    };
    let width = cfg.job_count.to_string().len();

    let mut clock = 0.0f64;
    let mut jobs = Vec::with_capacity(cfg.job_count);
    for i in 0..cfg.job_count {
        if i > 0 {
            clock += gaps.sample(&mut rng);
        }
        let actual = (runtimes.sample(&mut rng).round() as u64).clamp(1, cfg.runtime_max);
        let (lo, hi) = cfg.estimate_noise;
        let factor = if lo == hi { lo } else { rng.random_range(lo..hi) };
        let requested = ((actual as f64 * factor).ceil() as u64).max(1);
        let gpus = cfg.gpu_demand[demand_pick.sample(&mut rng)].0;
        let gpu_type = GpuType::new(cfg.gpu_types[type_pick.sample(&mut rng)].0.clone());
        let vc_id = vc_pick.as_ref().map(|d| cfg.vcs[d.sample(&mut rng)].0.clone()).unwrap_or_default();
        let user = rng.random_range(0..cfg.users);
        jobs.push(JobRecord {
            job_id: format!("j{i:0width$}"),
            user_id: format!("u{user}"),
            vc_id,
            submit_time: clock.floor() as u64,
            requested_time: requested,
            actual_runtime: actual,
            requested_gpus: gpus,
            gpu_type,
            requested_cpus: None,
            requested_mem_gb: None,
        });
    }
    TraceSet::new(
        jobs,
        0,
        TraceMeta {
            source: format!("synthetic:seed={}", cfg.seed),
            cluster_hint: None,
            dropped_rows: 0,
        },
    )
}

/// Prefix/suffix split; the prefix gets `floor(fraction * n)` jobs.
pub fn split_trace(t: &TraceSet, train_fraction: f64) -> Result<(TraceSet, TraceSet), TraceError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TraceError::BadFraction(train_fraction));
    }
    let n = t.len();
    let cut = (train_fraction * n as f64).floor() as usize;
    if cut == 0 || cut == n {
        return Err(TraceError::DegenerateSplit { n, fraction: train_fraction });
    }
    let part = |jobs: &[JobRecord], tag: &str| TraceSet {
        jobs: jobs.to_vec(),
        epoch: t.epoch,
        meta: TraceMeta {
            source: format!("{}#{tag}", t.meta.source),
            ..t.meta.clone()
        },
    };
    Ok((part(&t.jobs[..cut], "train"), part(&t.jobs[cut..], "test")))
}

/// A contiguous window of a trace, rebased so its first job arrives at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub start: usize,
    pub jobs: Vec<JobRecord>,
}

pub fn sample_batch(t: &TraceSet, size: usize, rng_seed: u64) -> Result<Batch, TraceError> {
    if size == 0 {
        return Err(TraceError::ZeroBatch);
    }
    if size > t.len() {
        return Err(TraceError::BatchTooLarge { size, len: t.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let start = rng.random_range(0..=t.len() - size);
    Ok(rebased_window(t, start, size))
}

pub fn rebased_window(t: &TraceSet, start: usize, size: usize) -> Batch {
    let window = &t.jobs[start..start + size];
    let origin = window[0].submit_time;
    let jobs = window
        .iter()
        .map(|j| JobRecord {
            submit_time: j.submit_time - origin,
            ..j.clone()
        })
        .collect();
    Batch { start, jobs }
}

/// Canonical CSV bytes of a trace written to any sink.
pub fn write_canonical<W: Write>(jobs: &[JobRecord], sink: W) -> Result<(), TraceError> {
    let mut writer = csv::Writer::from_writer(sink);
    for job in jobs {
        writer.serialize(job)?;
    }
    writer.flush().map_err(|source| TraceError::Io {
        path: "<writer>".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str, submit: u64, gpus: u32) -> JobRecord {
        JobRecord {
            job_id: id.into(),
            user_id: "u".into(),
            vc_id: String::new(),
            submit_time: submit,
            requested_time: 100,
            actual_runtime: 50,
            requested_gpus: gpus,
            gpu_type: GpuType::new("V100"),
            requested_cpus: None,
            requested_mem_gb: None,
        }
    }

    fn trace(n: usize) -> TraceSet {
        let jobs = (0..n).map(|i| job(&format!("j{i}"), i as u64 * 10, 1)).collect();
        TraceSet::new(jobs, 0, TraceMeta::default()).unwrap()
    }

    const CANONICAL: &str = "\
job_id,user_id,vc_id,submit_time,requested_time,actual_runtime,requested_gpus,gpu_type,requested_cpus,requested_mem_gb
b,u1,VC1,20,100,90,2,V100,,
a,u2,VC1,5,60,60,1,P100,4,16.5
c,u1,VC2,10,300,200,8,V100,,
";

    #[test]
    fn canonical_rows_sorted_by_submit() {
        let t = parse_trace(CANONICAL, TraceFormat::Canonical, "mem").unwrap();
        let ids: Vec<_> = t.jobs().iter().map(|j| j.job_id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert_eq!(t.jobs()[0].requested_cpus, Some(4));
        assert_eq!(t.jobs()[0].requested_mem_gb, Some(16.5));
        assert_eq!(t.meta.dropped_rows, 0);
    }

    #[test]
    fn zero_gpu_row_dropped_and_counted() {
        let text = format!("{CANONICAL}d,u3,VC1,30,10,10,0,V100,,\n");
        let t = parse_trace(&text, TraceFormat::Canonical, "mem").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.meta.dropped_rows, 1);
    }

    #[test]
    fn unparsable_rows_counted_and_empty_trace_rejected() {
        let text = "job_id,user_id\nx,y\n";
        match parse_trace(text, TraceFormat::Canonical, "mem") {
            Err(TraceError::NoValidRows { dropped }) => assert_eq!(dropped, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_format_label() {
        assert!(matches!("swf".parse::<TraceFormat>(), Err(TraceError::UnknownFormat(_))));
        assert_eq!("Helios".parse::<TraceFormat>().unwrap(), TraceFormat::Helios);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_trace("/definitely/not/here.csv", TraceFormat::Canonical),
            Err(TraceError::Io { .. })
        ));
    }

    #[test]
    fn helios_maps_five_busiest_vcs() {
        let mut text = String::from("job_id,user,vc,gpu_num,cpu_num,submit_time,duration,state\n");
        let vcs = [("vcA", 6), ("vcB", 5), ("vcC", 4), ("vcD", 3), ("vcE", 2), ("vcF", 1)];
        let mut k = 0;
        for (vc, n) in vcs {
            for _ in 0..n {
                text.push_str(&format!("{k},u,{vc},1,4,2020-04-01 00:00:{:02},60,COMPLETED\n", k % 60));
                k += 1;
            }
        }
        // a CPU-only job is dropped
        text.push_str("cpu1,u,vcA,0,4,2020-04-01 00:00:00,60,COMPLETED\n");
        let t = parse_trace(&text, TraceFormat::Helios, "mem").unwrap();
        let mut seen: Vec<String> = t.jobs().iter().map(|j| j.vc_id.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, ["VC1", "VC2", "VC3", "VC4", "VC5"]);
        // vcF (1 job) and the CPU job are dropped
        assert_eq!(t.meta.dropped_rows, 2);
        assert_eq!(t.len(), 20);
        assert!(t.jobs().iter().filter(|j| j.vc_id == "VC1").count() == 6);
        assert_eq!(t.jobs()[0].submit_time, 0);
        assert_eq!(t.jobs()[0].gpu_type.as_str(), "V100");
    }

    #[test]
    fn philly_defaults_estimate_to_runtime() {
        let text = "jobid,user,vc,submitted_time,run_time,num_gpus\n\
                    p1,u1,vc1,1000,3600,8\np2,u2,vc1,1060,100,1\n";
        let t = parse_trace(text, TraceFormat::Philly, "mem").unwrap();
        assert_eq!(t.epoch, 1000);
        assert_eq!(t.jobs()[1].submit_time, 60);
        assert_eq!(t.jobs()[0].requested_time, 3600);
        assert_eq!(t.jobs()[0].gpu_type.as_str(), "P100");
    }

    #[test]
    fn alibaba_percent_units() {
        let text = "job_name,user,start_time,end_time,plan_gpu,inst_num,plan_cpu,plan_mem,gpu_type\n\
                    a1,u,100,700,50,2,600,29.3,T4\na2,u,200,,100,1,100,2,MISC\n";
        let t = parse_trace(text, TraceFormat::Alibaba, "mem").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.meta.dropped_rows, 1);
        let j = &t.jobs()[0];
        assert_eq!(j.requested_gpus, 2);
        assert_eq!(j.requested_cpus, Some(12));
        assert_eq!(j.actual_runtime, 600);
    }

    #[test]
    fn split_examples() {
        let (a, b) = split_trace(&trace(100), 0.9).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        let (a, b) = split_trace(&trace(2), 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        let (a, b) = split_trace(&trace(10), 0.95).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        assert_eq!(b.jobs()[0].job_id, "j9");
        assert!(matches!(split_trace(&trace(10), 1.0), Err(TraceError::BadFraction(_))));
        assert!(matches!(split_trace(&trace(10), 0.0), Err(TraceError::BadFraction(_))));
    }

    #[test]
    fn batch_window_rebased() {
        let jobs = vec![job("x", 100, 1), job("y", 130, 1), job("z", 175, 1)];
        let t = TraceSet::new(jobs, 0, TraceMeta::default()).unwrap();
        let b = sample_batch(&t, 3, 1).unwrap();
        assert_eq!(b.start, 0);
        let submits: Vec<u64> = b.jobs.iter().map(|j| j.submit_time).collect();
        assert_eq!(submits, [0, 30, 75]);
        assert!(matches!(sample_batch(&t, 4, 1), Err(TraceError::BatchTooLarge { .. })));
    }

    #[test]
    fn batch_sampling_deterministic() {
        let t = trace(10_000);
        let a = sample_batch(&t, 256, 99).unwrap();
        let b = sample_batch(&t, 256, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.jobs.len(), 256);
        assert_eq!(a.jobs[0].submit_time, 0);
    }

    #[test]
    fn synth_deterministic_and_exact_estimates() {
        let cfg = GenConfig {
            job_count: 1024,
            seed: 7,
            estimate_noise: (1.0, 1.0),
            ..GenConfig::default()
        };
        let a = synthesize_trace(&cfg).unwrap();
        let b = synthesize_trace(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1024);
        assert!(a.jobs().iter().all(|j| j.requested_time == j.actual_runtime));
    }

    #[test]
    fn synth_arrival_rate() {
        let cfg = GenConfig {
            job_count: 10_000,
            arrival_rate: 0.0223,
            seed: 3,
            ..GenConfig::default()
        };
        let t = synthesize_trace(&cfg).unwrap();
        let span = t.jobs().last().unwrap().submit_time - t.jobs()[0].submit_time;
        let mean_gap = span as f64 / (t.len() - 1) as f64;
        let expected = 1.0 / 0.0223;
        assert!((mean_gap - expected).abs() / expected < 0.05, "mean gap {mean_gap}");
    }

    #[test]
    fn synth_rejects_bad_configs() {
        let bad = [
            GenConfig { job_count: 0, ..GenConfig::default() },
            GenConfig { arrival_rate: 0.0, ..GenConfig::default() },
            GenConfig { runtime_sigma: -1.0, ..GenConfig::default() },
            GenConfig { gpu_demand: vec![(1, 0.5), (2, 0.4)], ..GenConfig::default() },
            GenConfig { gpu_types: vec![("A".into(), 1.5), ("B".into(), -0.5)], ..GenConfig::default() },
            GenConfig { estimate_noise: (2.0, 1.0), ..GenConfig::default() },
        ];
        for cfg in bad {
            assert!(synthesize_trace(&cfg).is_err(), "{cfg:?}");
        }
        // zero variance is fine
        let cfg = GenConfig { runtime_sigma: 0.0, job_count: 10, ..GenConfig::default() };
        let t = synthesize_trace(&cfg).unwrap();
        assert!(t.jobs().iter().all(|j| j.actual_runtime == 3600));
    }

    #[test]
    fn infer_resources_proportional() {
        let mut j = job("a", 0, 4);
        j.infer_resources(6, 24.0);
        assert_eq!(j.requested_cpus, Some(24));
        assert_eq!(j.requested_mem_gb, Some(96.0));
        let mut k = job("b", 0, 4);
        k.requested_cpus = Some(3);
        k.infer_resources(6, 24.0);
        assert_eq!(k.requested_cpus, Some(3));
    }
}
