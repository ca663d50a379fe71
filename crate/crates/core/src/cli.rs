//! Command-line surface: run configuration, subcommands and their outputs.
//!
//! Settings resolve as flags, then the TOML config file, then defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{self, ActionMode, AgentDecider, AgentError, EvalConfig, Model, PpoHyper, TrainConfig};
use crate::cluster::{ClusterConfig, ClusterError, ClusterSpec, NodeSpec};
use crate::features::{self, FeatureMode};
use crate::io::write_atomic;
use crate::metrics::{Metric, MetricSummary};
use crate::policies::PolicyKind;
use crate::sim::{self, AllocMode, Engine, Scheduler, SimConfig, SimError};
use crate::trace::{self, GenConfig, GpuType, RuntimeSource, TraceError, TraceFormat, TraceSet};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::InvalidConfig(_)
            | TraceError::BadFraction(_)
            | TraceError::ZeroBatch
            | TraceError::DegenerateSplit { .. }
            | TraceError::BatchTooLarge { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ClusterError> for CliError {
    fn from(e: ClusterError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Unschedulable { .. } | SimError::DuplicateJob(_) | SimError::EmptyBatch => CliError::Data(e.to_string()),
            SimError::ZeroLookahead => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Hyper(_) => CliError::Config(e.to_string()),
            AgentError::LayoutMismatch { .. } | AgentError::Checkpoint(_) | AgentError::Trace(_) => CliError::Data(e.to_string()),
            AgentError::Sim(s) => s.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    /// Trace file; when absent a synthetic trace is generated from `[gen]`.
    pub path: Option<PathBuf>,
    pub format: TraceFormat,
    /// Leading share of the trace used for training; the rest is evaluated.
    pub train_fraction: f64,
}

impl Default for TraceSection {
    fn default() -> Self {
        TraceSection {
            path: None,
            format: TraceFormat::Canonical,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Cluster description with `[[group]]` tables; overrides the fields below.
    pub file: Option<PathBuf>,
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub gpu_type: String,
    pub cpus_per_node: u32,
    pub mem_gb_per_node: f64,
    pub cpu_per_gpu: u32,
    pub mem_per_gpu: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            file: None,
            nodes: 8,
            gpus_per_node: 8,
            gpu_type: "V100".into(),
            cpus_per_node: 64,
            mem_gb_per_node: 512.0,
            cpu_per_gpu: 8,
            mem_per_gpu: 64.0,
        }
    }
}

impl ClusterSection {
    pub fn spec(&self) -> Result<ClusterSpec, CliError> {
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let cfg: ClusterConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            return Ok(cfg.into_spec()?);
        }
        let spec = ClusterSpec {
            nodes: (0..self.nodes)
                .map(|i| NodeSpec {
                    node_id: format!("node{i:02}"),
                    gpu_type: GpuType::new(self.gpu_type.clone()),
                    gpus: self.gpus_per_node,
                    cpus: self.cpus_per_node,
                    mem_gb: self.mem_gb_per_node,
                    vc_id: String::new(),
                })
                .collect(),
            cpu_per_gpu: self.cpu_per_gpu,
            mem_per_gpu: self.mem_per_gpu,
            confine_to_vc: true,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub base_policy: PolicyKind,
    pub metric: Metric,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batches_per_epoch: 100,
            batch_size: 256,
            base_policy: PolicyKind::Fifo,
            metric: Metric::Wait,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub runs: usize,
    pub batch_size: usize,
    pub base_policies: Vec<PolicyKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            runs: 10,
            batch_size: 1024,
            base_policies: vec![PolicyKind::Fifo],
        }
    }
}

/// Merged view of every setting a command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub trace: TraceSection,
    pub gen: GenConfig,
    pub cluster: ClusterSection,
    pub train: TrainSection,
    pub ppo: PpoHyper,
    pub sim: SimConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            trace: TraceSection::default(),
            gen: GenConfig::default(),
            cluster: ClusterSection::default(),
            train: TrainSection::default(),
            ppo: PpoHyper::default(),
            sim: SimConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))
    }
}

/// The trace plus a digest identifying it in result provenance.
pub struct LoadedTrace {
    pub trace: TraceSet,
    pub digest: String,
    pub source: String,
}

pub fn load_trace(cfg: &RunConfig) -> Result<LoadedTrace, CliError> {
    let (trace, source) = match &cfg.trace.path {
        Some(p) => (trace::load_trace(p, cfg.trace.format)?, p.display().to_string()),
        None => {
            let mut gen = cfg.gen.clone();
            if gen.seed == 0 {
                gen.seed = cfg.seed;
            }
            (trace::synthesize_trace(&gen)?, format!("synthetic(seed={})", gen.seed))
        }
    };
    let csv = trace::to_canonical_csv(trace.jobs())?;
    let digest = Sha256::digest(&csv).iter().map(|b| format!("{b:02x}")).collect();
    Ok(LoadedTrace { trace, digest, source })
}

#[derive(Parser, Debug)]
#[command(name = "gpusched", version, about = "GPU cluster scheduling simulator with a learned scheduler")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic trace as canonical CSV.
    GenTrace(GenTraceArgs),
    /// Train the learned scheduler against a base policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint against one or more base policies.
    Eval(EvalArgs),
    /// Tabulate result files produced by `eval`.
    Compare(CompareArgs),
    /// Dump the feature table and state matrix at a simulation step.
    InspectState(InspectArgs),
    /// Measure per-decision latency over queue sizes.
    BenchOverhead(BenchArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace file (canonical CSV unless --trace-format says otherwise).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub trace_format: Option<TraceFormat>,
    /// Cluster description TOML with [[group]] tables.
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = &self.trace {
            cfg.trace.path = Some(t.clone());
        }
        if let Some(f) = self.trace_format {
            cfg.trace.format = f;
        }
        if let Some(c) = &self.cluster {
            cfg.cluster.file = Some(c.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub arrival_rate: Option<f64>,
    /// Output CSV path (defaults to <out>/trace.csv).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_policy: Option<PolicyKind>,
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Raw-feature ablation: no feature engineering, first-fit placement.
    #[arg(long)]
    pub naive: bool,
    #[arg(long)]
    pub policy_lr: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated base policies.
    #[arg(long, value_delimiter = ',')]
    pub base_policy: Vec<PolicyKind>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub naive: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Result files written by `eval`.
    #[arg(required = true, num_args = 2..)]
    pub results: Vec<PathBuf>,
    /// Write the table as CSV here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of event steps to simulate before dumping.
    #[arg(long, default_value_t = 10)]
    pub step: usize,
    #[arg(long, default_value = "fifo")]
    pub policy: PolicyKind,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub naive: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![128usize, 256, 512, 1024])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenTrace(a) => cmd_gen_trace(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::InspectState(a) => cmd_inspect(a),
        Command::BenchOverhead(a) => cmd_bench(a),
    }
}

fn apply_naive(cfg: &mut RunConfig, naive: bool) {
    if naive {
        cfg.sim.feature_mode = FeatureMode::Naive;
        cfg.sim.alloc_mode = AllocMode::FirstFit;
    }
}

pub fn cmd_gen_trace(a: GenTraceArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    if let Some(j) = a.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        cfg.gen.job_count = j;
    }
    if let Some(r) = a.arrival_rate {
        cfg.gen.arrival_rate = r;
    }
    cfg.gen.seed = cfg.seed;
    let t = trace::synthesize_trace(&cfg.gen)?;
    let path = a.output.unwrap_or_else(|| cfg.output_dir.join("trace.csv"));
    write_out(&path, &trace::to_canonical_csv(t.jobs())?)?;
    println!("wrote {} jobs to {}", t.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    trace_source: &'a str,
    trace_digest: &'a str,
    batches: usize,
    epoch_mean_reward: Vec<(usize, f64)>,
    wall_clock_s: f64,
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batches {
        cfg.train.batches_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.base_policy {
        cfg.train.base_policy = v;
    }
    if let Some(v) = a.metric {
        cfg.train.metric = v;
    }
    if let Some(v) = a.policy_lr {
        cfg.ppo.policy_lr = v;
    }
    apply_naive(&mut cfg, a.naive);
    let spec = cfg.cluster.spec()?;
    let loaded = load_trace(&cfg)?;
    let (train_set, _) = trace::split_trace(&loaded.trace, cfg.trace.train_fraction)?;
    let tc = train_config(&cfg);
    let mut model = match &a.resume {
        Some(p) => Model::load(p)?,
        None => Model::new(cfg.sim.feature_mode, &cfg.ppo, cfg.seed)?,
    };
    let started = Instant::now();
    let curve = agent::train(&mut model, &train_set, &spec, &tc, |row| {
        eprintln!(
            "epoch {:>3} batch {:>3} reward {:+.4} clip {:.2}",
            row.epoch, row.batch, row.reward, row.clip_fraction
        );
    })?;
    let dir = &cfg.output_dir;
    write_out(&dir.join("checkpoint.json"), &model.to_json()?)?;
    write_out(&dir.join("curve.csv"), &agent::curve_csv(&curve).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    write_out(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let summary = TrainSummary {
        trace_source: &loaded.source,
        trace_digest: &loaded.digest,
        batches: curve.len(),
        epoch_mean_reward: agent::epoch_means(&curve),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    write_out(&dir.join("train_summary.json"), &to_json(&summary)?)?;
    println!("trained {} batches; outputs in {}", curve.len(), dir.display());
    Ok(())
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let mut sim = cfg.sim.clone();
    // training reservations see true runtimes
    sim.reservation_runtime_source = RuntimeSource::Actual;
    TrainConfig {
        epochs: cfg.train.epochs,
        batches_per_epoch: cfg.train.batches_per_epoch,
        batch_size: cfg.train.batch_size,
        base_policy: cfg.train.base_policy,
        metric: cfg.train.metric,
        seed: cfg.seed,
        hyper: cfg.ppo.clone(),
        sim,
    }
}

pub fn eval_config(cfg: &RunConfig, base_policy: PolicyKind) -> EvalConfig {
    let mut sim = cfg.sim.clone();
    sim.feature_runtime_source = RuntimeSource::Requested;
    sim.reservation_runtime_source = RuntimeSource::Requested;
    EvalConfig {
        runs: cfg.eval.runs,
        batch_size: cfg.eval.batch_size,
        base_policy,
        metric: cfg.train.metric,
        seed: cfg.seed,
        sim,
    }
}

/// One scheduler's aggregate on one trace; the input to `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub scheduler: String,
    pub trace_source: String,
    pub trace_digest: String,
    pub runs: usize,
    pub batch_size: usize,
    pub summary: MetricSummary,
    pub wall_clock_s: f64,
}

pub fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    if !a.base_policy.is_empty() {
        cfg.eval.base_policies = a.base_policy.clone();
    }
    if let Some(m) = a.metric {
        cfg.train.metric = m;
    }
    if let Some(r) = a.runs {
        cfg.eval.runs = r;
    }
    if let Some(b) = a.batch_size {
        cfg.eval.batch_size = b;
    }
    apply_naive(&mut cfg, a.naive);
    if cfg.eval.runs == 0 {
        return Err(CliError::Config("--runs must be positive".into()));
    }
    let spec = cfg.cluster.spec()?;
    let loaded = load_trace(&cfg)?;
    let (_, test_set) = trace::split_trace(&loaded.trace, cfg.trace.train_fraction)?;
    let model = Model::load(&a.checkpoint)?;
    let dir = cfg.output_dir.clone();
    let trained = model.trained_against.map_or("untrained".to_string(), |p| p.to_string());
    let mut matrix_row = BTreeMap::new();
    for &policy in &cfg.eval.base_policies {
        let ec = eval_config(&cfg, policy);
        let started = Instant::now();
        let report = agent::evaluate(&model, &test_set, &spec, &ec)?;
        let elapsed = started.elapsed().as_secs_f64();
        write_out(&dir.join(format!("report_{policy}.json")), &to_json(&report)?)?;
        write_out(&dir.join(format!("runs_{policy}.csv")), &runs_csv(&report)?)?;
        for (name, summary) in [(policy.to_string(), report.mean_base), (format!("rl-{policy}"), report.mean_rl)] {
            let rf = ResultFile {
                scheduler: name.clone(),
                trace_source: loaded.source.clone(),
                trace_digest: loaded.digest.clone(),
                runs: ec.runs,
                batch_size: ec.batch_size,
                summary,
                // both pipelines run inside one evaluation; split evenly
                wall_clock_s: elapsed / 2.0,
            };
            write_out(&dir.join(format!("result_{name}.json")), &to_json(&rf)?)?;
        }
        let cell = report.improvement_pct.get(&cfg.train.metric.to_string()).copied().unwrap_or(0.0);
        matrix_row.insert(policy.to_string(), cell);
        println!(
            "{policy}: base {} {:.3} vs learned {:.3} ({:+.2}%)",
            cfg.train.metric,
            report.mean_base.get(cfg.train.metric),
            report.mean_rl.get(cfg.train.metric),
            cell
        );
    }
    let matrix = agent::TransferMatrix {
        metric: cfg.train.metric,
        trained_on: vec![trained],
        tested_on: cfg.eval.base_policies.clone(),
        cells: vec![cfg.eval.base_policies.iter().map(|p| matrix_row[&p.to_string()]).collect()],
    };
    write_out(&dir.join("transfer.json"), &to_json(&matrix)?)?;
    Ok(())
}

fn runs_csv(report: &agent::Report) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record([
        "run", "batch_start", "base_wait", "rl_wait", "base_jct", "rl_jct", "base_bsld", "rl_bsld", "base_util", "rl_util", "reward",
    ])
    .map_err(err)?;
    for r in &report.runs {
        w.write_record([
            r.run.to_string(),
            r.batch_start.to_string(),
            format!("{:.4}", r.base.mean_wait),
            format!("{:.4}", r.rl.mean_wait),
            format!("{:.4}", r.base.mean_jct),
            format!("{:.4}", r.rl.mean_jct),
            format!("{:.6}", r.base.mean_bsld),
            format!("{:.6}", r.rl.mean_bsld),
            format!("{:.6}", r.base.utilization),
            format!("{:.6}", r.rl.utilization),
            format!("{:.6}", r.reward),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Aligned comparison table; the delta column is the BSLD change relative
/// to the first row.
pub fn compare_table(results: &[ResultFile]) -> Result<Vec<Vec<String>>, CliError> {
    let first = results.first().ok_or_else(|| CliError::Data("nothing to compare".into()))?;
    if let Some(other) = results.iter().find(|r| r.trace_digest != first.trace_digest) {
        return Err(CliError::Data(format!(
            "results come from different traces ({} vs {})",
            first.trace_source, other.trace_source
        )));
    }
    let base = first.summary.mean_bsld;
    let mut rows = vec![["scheduler", "bsld", "wait_s", "jct_s", "utilization", "wall_clock_s", "bsld_delta_pct"]
        .map(String::from)
        .to_vec()];
    for r in results {
        let delta = if base.abs() > 0.0 { (r.summary.mean_bsld - base) / base * 100.0 } else { 0.0 };
        rows.push(vec![
            r.scheduler.clone(),
            format!("{:.3}", r.summary.mean_bsld),
            format!("{:.1}", r.summary.mean_wait),
            format!("{:.1}", r.summary.mean_jct),
            format!("{:.4}", r.summary.utilization),
            format!("{:.2}", r.wall_clock_s),
            format!("{delta:+.2}"),
        ]);
    }
    Ok(rows)
}

pub fn cmd_compare(a: CompareArgs) -> Result<(), CliError> {
    let results = a
        .results
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_slice::<ResultFile>(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows = compare_table(&results)?;
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        println!("{}", line.join("  "));
    }
    if let Some(out) = a.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.write_record(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        write_out(&out, &w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    }
    Ok(())
}

pub fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    apply_naive(&mut cfg, a.naive);
    let spec = cfg.cluster.spec()?;
    let loaded = load_trace(&cfg)?;
    let size = a.batch_size.unwrap_or(cfg.train.batch_size).min(loaded.trace.len());
    let batch = trace::rebased_window(&loaded.trace, 0, size);
    let mut engine = Engine::new(&batch.jobs, &spec, cfg.sim.clone(), Scheduler::Policy(a.policy))?;
    for _ in 0..a.step {
        if !engine.step()? {
            break;
        }
    }
    let queue = engine.queue();
    let (sm, rows) = features::build_state_with_rows(
        &queue,
        engine.state(),
        engine.now(),
        cfg.sim.feature_runtime_source,
        cfg.sim.feature_mode,
    );
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    let dir = &cfg.output_dir;
    write_out(&dir.join("features.csv"), &features::feature_rows_csv(&rows).map_err(err)?)?;
    write_out(&dir.join("state_matrix.csv"), &features::state_matrix_csv(&sm, cfg.sim.feature_mode).map_err(err)?)?;
    println!(
        "t={} queue={} free_gpus={} cff={:.4}; wrote features.csv and state_matrix.csv to {}",
        engine.now(),
        queue.len(),
        engine.state().total_free_gpus(),
        features::cff(engine.state()),
        dir.display()
    );
    Ok(())
}

pub fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let cfg = a.common.resolve()?;
    let spec = cfg.cluster.spec()?;
    let loaded = load_trace(&cfg)?;
    let model = match &a.checkpoint {
        Some(p) => Model::load(p)?,
        None => Model::new(cfg.sim.feature_mode, &cfg.ppo, cfg.seed)?,
    };
    model.check_layout(cfg.sim.feature_mode)?;
    let mut decider = AgentDecider::new(&model, ActionMode::Greedy, cfg.seed, false);
    let rows = sim::measure_overhead(&mut decider, loaded.trace.jobs(), &spec, &cfg.sim, &a.sizes, a.repeats)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!(
            "queue {:>5}: median {:.3} ms per decision",
            r.queue_size,
            r.median_decision_wall_clock_s * 1e3
        );
    }
    let dir = &cfg.output_dir;
    write_out(&dir.join("overhead.csv"), &w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    write_out(&dir.join("overhead.json"), &to_json(&rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(CliError::Config(_))));
        let partial = RunConfig::from_toml("seed = 9\n[train]\nepochs = 3\n").unwrap();
        assert_eq!((partial.seed, partial.train.epochs, partial.train.batch_size), (9, 3, 256));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 4\noutput_dir = \"a\"\n").unwrap();
        let c = Common {
            config: Some(p.clone()),
            seed: Some(11),
            ..Default::default()
        };
        let cfg = c.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.output_dir.as_path()), (11, Path::new("a")));
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 4);
    }

    #[test]
    fn compare_refuses_mixed_traces() {
        let r = |name: &str, digest: &str, bsld: f64| ResultFile {
            scheduler: name.into(),
            trace_source: digest.into(),
            trace_digest: digest.into(),
            runs: 1,
            batch_size: 1,
            summary: MetricSummary {
                mean_bsld: bsld,
                ..Default::default()
            },
            wall_clock_s: 0.5,
        };
        let rows = compare_table(&[r("fifo", "x", 10.0), r("rl-fifo", "x", 8.0)]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].contains(&"wall_clock_s".to_string()));
        assert_eq!(rows[2].last().unwrap(), "-20.00");
        assert!(matches!(compare_table(&[r("a", "x", 1.0), r("b", "y", 1.0)]), Err(CliError::Data(_))));
    }
}
