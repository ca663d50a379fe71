//! Actor-critic scheduling agent: per-row actor over the observation block,
//! critic over the flattened critic block, dual-pipeline rewards and a
//! clipped-surrogate training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSpec;
use crate::features::{FeatureMode, StateMatrix, CV_WIDTH, MAX_QUEUE_SIZE, OV_WIDTH};
use crate::metrics::{aggregate_score, Metric, MetricSummary};
use crate::nn::{adam_step, init_mlp, softmax, Activation, MlpParams, NnError, OptState};
use crate::policies::PolicyKind;
use crate::sim::{run_episode, Decider, EpisodeResult, Scheduler, SimConfig, SimError};
use crate::trace::{sample_batch, TraceError, TraceSet};

pub const ACTOR_SIZES: [usize; 4] = [OV_WIDTH, 32, 16, 1];
pub const CRITIC_SIZES: [usize; 4] = [MAX_QUEUE_SIZE * CV_WIDTH, 64, 32, 1];
pub const REWARD_EPSILON: f64 = 1e-6;
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("no valid rows to choose from")]
    NoAction,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("checkpoint layout {found} does not match the configured layout {expected}")]
    LayoutMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss; update skipped")]
    NonFiniteLoss,
    #[error("invalid hyper-parameters: {0}")]
    Hyper(String),
    #[error("no trajectories to learn from")]
    NoTrajectories,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub clip: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub epochs: usize,
    /// Decisions per gradient step; 0 uses the whole trajectory.
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            clip: 0.2,
            policy_lr: 1e-4,
            value_lr: 1e-3,
            epochs: 4,
            minibatch: 0,
            entropy_coef: 0.01,
            value_coef: 0.5,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(AgentError::Hyper(format!("clip {} outside (0,1)", self.clip)));
        }
        if !(self.policy_lr >= 0.0 && self.value_lr >= 0.0) {
            return Err(AgentError::Hyper("learning rates must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(AgentError::Hyper("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Actor, critic and their optimizer states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format: u32,
    /// Observation column layout the actor was trained on.
    pub layout: String,
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub actor_opt: OptState,
    pub critic_opt: OptState,
    pub trained_against: Option<PolicyKind>,
    pub completed_batches: usize,
}

impl Model {
    pub fn new(mode: FeatureMode, hyper: &PpoHyper, seed: u64) -> Result<Self, AgentError> {
        let actor = init_mlp(&ACTOR_SIZES, Activation::Tanh, derive_seed(seed, &[0xac7]))?;
        let critic = init_mlp(&CRITIC_SIZES, Activation::Tanh, derive_seed(seed, &[0xc71]))?;
        Ok(Model {
            format: CHECKPOINT_FORMAT,
            layout: mode.layout_version().to_string(),
            actor_opt: OptState::new(actor.params.len(), hyper.policy_lr),
            critic_opt: OptState::new(critic.params.len(), hyper.value_lr),
            actor,
            critic,
            trained_against: None,
            completed_batches: 0,
        })
    }

    pub fn check_layout(&self, mode: FeatureMode) -> Result<(), AgentError> {
        if self.layout != mode.layout_version() {
            return Err(AgentError::LayoutMismatch {
                expected: mode.layout_version().to_string(),
                found: self.layout.clone(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>, AgentError> {
        serde_json::to_vec(self).map_err(|e| AgentError::Checkpoint(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AgentError> {
        let m: Model = serde_json::from_slice(bytes).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(AgentError::Checkpoint(format!("unsupported format {}", m.format)));
        }
        if m.actor.sizes != ACTOR_SIZES || m.critic.sizes != CRITIC_SIZES {
            return Err(AgentError::Checkpoint("network shapes differ from this build".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let bytes = std::fs::read(path).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }
}

/// Deterministic seed for a sub-task, mixed with splitmix64.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Actor logits for every one of the 256 rows (padding included).
pub fn actor_logits(actor: &MlpParams, sm: &StateMatrix) -> Result<Vec<f64>, AgentError> {
    (0..MAX_QUEUE_SIZE)
        .map(|r| Ok(actor.predict(sm.ov_row(r))?[0]))
        .collect()
}

/// Masked softmax of the actor logits over the valid rows; padded rows 0.
pub fn actor_priorities(actor: &MlpParams, sm: &StateMatrix) -> Result<Vec<f64>, AgentError> {
    if sm.valid_rows == 0 {
        return Err(AgentError::NoAction);
    }
    let logits = actor_logits(actor, sm)?;
    let mask: Vec<bool> = (0..MAX_QUEUE_SIZE).map(|r| r < sm.valid_rows).collect();
    Ok(softmax(&logits, &mask)?)
}

pub fn critic_value(critic: &MlpParams, sm: &StateMatrix) -> Result<f64, AgentError> {
    Ok(critic.predict(&sm.cv)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Pick a row: a categorical draw, or the argmax with ties going to the
/// lower row (rows are ordered by submit time).
pub fn select_action(pv: &[f64], mode: ActionMode, rng: &mut impl Rng) -> Result<usize, AgentError> {
    if pv.iter().all(|&p| p <= 0.0) {
        return Err(AgentError::NoAction);
    }
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &p) in pv.iter().enumerate() {
                if p > pv[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in pv.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                last = i;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(last)
        }
    }
}

/// `(abs - ars) / max(|abs|, ε)` for lower-is-better scores; positive iff
/// the learned scheduler beat the baseline.
pub fn compute_reward(abs_score: f64, ars_score: f64) -> f64 {
    (abs_score - ars_score) / abs_score.abs().max(REWARD_EPSILON)
}

/// Lower-is-better episode score: summed per-job metric, or negated
/// utilization.
pub fn episode_score(r: &EpisodeResult, metric: Metric, tau: f64) -> Result<f64, AgentError> {
    match metric {
        Metric::Utilization => Ok(-r.summary.utilization),
        m => aggregate_score(&r.outcomes, m, tau).map_err(|e| AgentError::Sim(SimError::Metric(e))),
    }
}

/// One recorded decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Observation rows of the valid jobs only.
    pub ov: Vec<f64>,
    pub cv: Vec<f64>,
    pub valid_rows: usize,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub decisions: Vec<Decision>,
    pub reward: f64,
}

/// [`Decider`] backed by the actor; optionally records a trajectory.
pub struct AgentDecider<'a> {
    model: &'a Model,
    mode: ActionMode,
    rng: ChaCha8Rng,
    record: bool,
    pub decisions: Vec<Decision>,
}

impl<'a> AgentDecider<'a> {
    pub fn new(model: &'a Model, mode: ActionMode, seed: u64, record: bool) -> Self {
        AgentDecider {
            model,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            record,
            decisions: Vec::new(),
        }
    }
}

impl Decider for AgentDecider<'_> {
    fn decide(&mut self, sm: &StateMatrix) -> Result<(usize, Vec<f64>), String> {
        let mut pv = actor_priorities(&self.model.actor, sm).map_err(|e| e.to_string())?;
        let action = select_action(&pv, self.mode, &mut self.rng).map_err(|e| e.to_string())?;
        if self.record {
            let value = critic_value(&self.model.critic, sm).map_err(|e| e.to_string())?;
            self.decisions.push(Decision {
                ov: sm.ov[..sm.valid_rows * OV_WIDTH].to_vec(),
                cv: sm.cv.clone(),
                valid_rows: sm.valid_rows,
                action,
                log_prob: pv[action].ln(),
                value,
            });
        }
        pv.truncate(sm.valid_rows);
        Ok((action, pv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub decisions: usize,
}

/// Clipped-surrogate term `min(r·A, clip(r)·A)` and whether the clipped
/// branch is the active one (zero gradient through `r`).
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Losses and gradients for a set of decisions; advantages are `R - V`.
fn gradients(
    model: &Model,
    items: &[(&Decision, f64)],
    hyper: &PpoHyper,
) -> Result<(Vec<f64>, Vec<f64>, UpdateStats), AgentError> {
    let n = items.len() as f64;
    let mut ga = vec![0.0; model.actor.params.len()];
    let mut gc = vec![0.0; model.critic.params.len()];
    let mut st = UpdateStats {
        decisions: items.len(),
        ..Default::default()
    };
    for &(d, ret) in items {
        let adv = ret - d.value;
        let mut caches = Vec::with_capacity(d.valid_rows);
        let mut logits = Vec::with_capacity(d.valid_rows);
        for r in 0..d.valid_rows {
            let (y, cache) = model.actor.forward(&d.ov[r * OV_WIDTH..(r + 1) * OV_WIDTH])?;
            logits.push(y[0]);
            caches.push(cache);
        }
        let p = softmax(&logits, &vec![true; d.valid_rows])?;
        let logp = p[d.action].max(f64::MIN_POSITIVE).ln();
        let ratio = (logp - d.log_prob).exp();
        let (surr, clipped) = clipped_surrogate(ratio, adv, hyper.clip);
        let entropy: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
        st.policy_loss += -surr / n;
        st.entropy += entropy / n;
        st.mean_ratio += ratio / n;
        if clipped {
            st.clip_fraction += 1.0 / n;
        }
        // d(loss)/d(logp_action)
        let g_logp = if clipped { 0.0 } else { -ratio * adv };
        for r in 0..d.valid_rows {
            let delta = if r == d.action { 1.0 } else { 0.0 };
            let log_pr = p[r].max(f64::MIN_POSITIVE).ln();
            // loss carries -entropy_coef·H; dH/dz_r = -p_r (ln p_r + H)
            let dz = g_logp * (delta - p[r]) + hyper.entropy_coef * p[r] * (log_pr + entropy);
            if dz != 0.0 {
                model.actor.backward_into(&caches[r], &[dz / n], &mut ga)?;
            }
        }
        let (v, cache) = model.critic.forward(&d.cv)?;
        let err = v[0] - ret;
        st.value_loss += hyper.value_coef * err * err / n;
        model.critic.backward_into(&cache, &[2.0 * hyper.value_coef * err / n], &mut gc)?;
    }
    if !(st.policy_loss.is_finite() && st.value_loss.is_finite()) {
        return Err(AgentError::NonFiniteLoss);
    }
    Ok((ga, gc, st))
}

/// Clipped-surrogate update over the trajectories. On a non-finite loss or
/// gradient the model is left untouched.
pub fn ppo_update(
    model: &mut Model,
    trajectories: &[Trajectory],
    hyper: &PpoHyper,
    seed: u64,
) -> Result<UpdateStats, AgentError> {
    hyper.validate()?;
    let items: Vec<(&Decision, f64)> = trajectories
        .iter()
        .flat_map(|t| t.decisions.iter().map(move |d| (d, t.reward)))
        .collect();
    if items.is_empty() {
        return Err(AgentError::NoTrajectories);
    }
    let mut work = model.clone();
    work.actor_opt.lr = hyper.policy_lr;
    work.critic_opt.lr = hyper.value_lr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let size = if hyper.minibatch == 0 { items.len() } else { hyper.minibatch };
    let mut first: Option<UpdateStats> = None;
    for _ in 0..hyper.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(size) {
            let batch: Vec<(&Decision, f64)> = chunk.iter().map(|&i| items[i]).collect();
            let (ga, gc, st) = gradients(&work, &batch, hyper)?;
            adam_step(&mut work.actor.params, &ga, &mut work.actor_opt)?;
            adam_step(&mut work.critic.params, &gc, &mut work.critic_opt)?;
            first.get_or_insert(st);
        }
    }
    if !(work.actor.is_finite() && work.critic.is_finite()) {
        return Err(AgentError::NonFiniteLoss);
    }
    *model = work;
    // statistics of the first pass, i.e. of the pre-update policy
    let mut st = first.expect("at least one minibatch");
    st.decisions = items.len();
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub base_policy: PolicyKind,
    pub metric: Metric,
    pub seed: u64,
    pub hyper: PpoHyper,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batches_per_epoch: 100,
            batch_size: 256,
            base_policy: PolicyKind::Fifo,
            metric: Metric::Wait,
            seed: 0,
            hyper: PpoHyper::default(),
            sim: SimConfig {
                reservation_runtime_source: crate::trace::RuntimeSource::Actual,
                ..SimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub batch: usize,
    pub reward: f64,
    pub base_score: f64,
    pub rl_score: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub decisions: usize,
}

/// Run the base and learned pipelines on one batch; returns the trajectory
/// (reward assigned) with both scores.
pub fn collect(
    model: &Model,
    batch: &[crate::trace::JobRecord],
    spec: &ClusterSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Trajectory, f64, f64), AgentError> {
    let (base, rl) = rayon::join(
        || run_episode(batch, spec, &cfg.sim, Scheduler::Policy(cfg.base_policy)),
        || {
            let mut d = AgentDecider::new(model, ActionMode::Sample, seed, true);
            let r = run_episode(batch, spec, &cfg.sim, Scheduler::Agent(&mut d));
            r.map(|r| (r, d.decisions))
        },
    );
    let base = base?;
    let (rl, decisions) = rl?;
    let abs = episode_score(&base, cfg.metric, cfg.sim.tau)?;
    let ars = episode_score(&rl, cfg.metric, cfg.sim.tau)?;
    let reward = compute_reward(abs, ars);
    Ok((Trajectory { decisions, reward }, abs, ars))
}

/// Train for the configured budget, continuing from `model`'s completed
/// batch count. `on_batch` sees each curve row as it is produced.
pub fn train(
    model: &mut Model,
    trace: &TraceSet,
    spec: &ClusterSpec,
    cfg: &TrainConfig,
    mut on_batch: impl FnMut(&CurveRow),
) -> Result<Vec<CurveRow>, AgentError> {
    cfg.hyper.validate()?;
    model.check_layout(cfg.sim.feature_mode)?;
    let total = cfg.epochs * cfg.batches_per_epoch;
    let mut curve = Vec::new();
    for k in model.completed_batches..total {
        let (epoch, b) = (k / cfg.batches_per_epoch, k % cfg.batches_per_epoch);
        let batch_seed = derive_seed(cfg.seed, &[1, epoch as u64, b as u64]);
        let batch = sample_batch(trace, cfg.batch_size, batch_seed)?;
        let (traj, abs, ars) = collect(model, &batch.jobs, spec, cfg, derive_seed(batch_seed, &[2]))?;
        let stats = if traj.decisions.is_empty() {
            UpdateStats::default()
        } else {
            ppo_update(model, std::slice::from_ref(&traj), &cfg.hyper, derive_seed(batch_seed, &[3]))?
        };
        model.completed_batches = k + 1;
        model.trained_against = Some(cfg.base_policy);
        let row = CurveRow {
            epoch,
            batch: b,
            reward: traj.reward,
            base_score: abs,
            rl_score: ars,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            mean_ratio: stats.mean_ratio,
            decisions: traj.decisions.len(),
        };
        on_batch(&row);
        curve.push(row);
    }
    Ok(curve)
}

/// Mean reward per epoch.
pub fn epoch_means(curve: &[CurveRow]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in curve {
        let e = acc.entry(r.epoch).or_default();
        e.0 += r.reward;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn curve_csv(curve: &[CurveRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in curve {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub runs: usize,
    pub batch_size: usize,
    pub base_policy: PolicyKind,
    pub metric: Metric,
    pub seed: u64,
    pub sim: SimConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 10,
            batch_size: 1024,
            base_policy: PolicyKind::Fifo,
            metric: Metric::Wait,
            seed: 0,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub batch_start: usize,
    pub base: MetricSummary,
    pub rl: MetricSummary,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub base_policy: PolicyKind,
    pub trained_against: Option<PolicyKind>,
    pub metric: Metric,
    pub runs: Vec<RunRecord>,
    pub mean_base: MetricSummary,
    pub mean_rl: MetricSummary,
    /// Percent improvement of the learned scheduler over the base policy
    /// per metric (positive is better).
    pub improvement_pct: BTreeMap<String, f64>,
}

fn mean_summary(items: &[MetricSummary]) -> MetricSummary {
    let n = items.len().max(1) as f64;
    MetricSummary {
        jobs: items.iter().map(|s| s.jobs).sum::<usize>() / items.len().max(1),
        mean_wait: items.iter().map(|s| s.mean_wait).sum::<f64>() / n,
        mean_jct: items.iter().map(|s| s.mean_jct).sum::<f64>() / n,
        mean_bsld: items.iter().map(|s| s.mean_bsld).sum::<f64>() / n,
        utilization: items.iter().map(|s| s.utilization).sum::<f64>() / n,
        makespan: items.iter().map(|s| s.makespan).sum::<u64>() / items.len().max(1) as u64,
    }
}

/// Percent by which `rl` improves on `base` for `metric`.
pub fn improvement_pct(base: &MetricSummary, rl: &MetricSummary, metric: Metric) -> f64 {
    let (b, r) = (base.get(metric), rl.get(metric));
    if b.abs() < REWARD_EPSILON {
        return 0.0;
    }
    if metric.higher_is_better() {
        (r - b) / b.abs() * 100.0
    } else {
        (b - r) / b.abs() * 100.0
    }
}

/// Paired base/learned episodes on `runs` sampled batches, greedy actions.
pub fn evaluate(model: &Model, trace: &TraceSet, spec: &ClusterSpec, cfg: &EvalConfig) -> Result<Report, AgentError> {
    model.check_layout(cfg.sim.feature_mode)?;
    let runs: Vec<RunRecord> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| -> Result<RunRecord, AgentError> {
            let seed = derive_seed(cfg.seed, &[4, run as u64]);
            let batch = sample_batch(trace, cfg.batch_size, seed)?;
            let base = run_episode(&batch.jobs, spec, &cfg.sim, Scheduler::Policy(cfg.base_policy))?;
            let mut d = AgentDecider::new(model, ActionMode::Greedy, seed, false);
            let rl = run_episode(&batch.jobs, spec, &cfg.sim, Scheduler::Agent(&mut d))?;
            let reward = compute_reward(
                episode_score(&base, cfg.metric, cfg.sim.tau)?,
                episode_score(&rl, cfg.metric, cfg.sim.tau)?,
            );
            Ok(RunRecord {
                run,
                batch_start: batch.start,
                base: base.summary,
                rl: rl.summary,
                reward,
            })
        })
        .collect::<Result<_, _>>()?;
    let mean_base = mean_summary(&runs.iter().map(|r| r.base).collect::<Vec<_>>());
    let mean_rl = mean_summary(&runs.iter().map(|r| r.rl).collect::<Vec<_>>());
    let improvement_pct = Metric::ALL
        .iter()
        .map(|&m| (m.to_string(), improvement_pct(&mean_base, &mean_rl, m)))
        .collect();
    Ok(Report {
        base_policy: cfg.base_policy,
        trained_against: model.trained_against,
        metric: cfg.metric,
        runs,
        mean_base,
        mean_rl,
        improvement_pct,
    })
}

/// Improvement of each trained model (rows) against each base policy
/// (columns) on the target metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub metric: Metric,
    pub trained_on: Vec<String>,
    pub tested_on: Vec<PolicyKind>,
    pub cells: Vec<Vec<f64>>,
}

pub fn transfer_matrix(
    models: &[(String, &Model)],
    tested_on: &[PolicyKind],
    trace: &TraceSet,
    spec: &ClusterSpec,
    cfg: &EvalConfig,
) -> Result<TransferMatrix, AgentError> {
    let mut cells = Vec::with_capacity(models.len());
    for (_, model) in models {
        let mut row = Vec::with_capacity(tested_on.len());
        for &p in tested_on {
            let c = EvalConfig {
                base_policy: p,
                ..cfg.clone()
            };
            let rep = evaluate(model, trace, spec, &c)?;
            row.push(improvement_pct(&rep.mean_base, &rep.mean_rl, cfg.metric));
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        metric: cfg.metric,
        trained_on: models.iter().map(|(n, _)| n.clone()).collect(),
        tested_on: tested_on.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::StateMatrix;

    fn model() -> Model {
        Model::new(FeatureMode::Engineered, &PpoHyper::default(), 7).unwrap()
    }

    fn sm_with_rows(rows: &[[f64; OV_WIDTH]]) -> StateMatrix {
        let mut sm = StateMatrix::empty();
        for (i, r) in rows.iter().enumerate() {
            sm.ov[i * OV_WIDTH..(i + 1) * OV_WIDTH].copy_from_slice(r);
            sm.cv[i * CV_WIDTH] = r[0];
        }
        sm.valid_rows = rows.len();
        sm
    }

    #[test]
    fn priorities_identical_rows_uniform() {
        let m = model();
        let sm = sm_with_rows(&[[0.3; OV_WIDTH]; 4]);
        let pv = actor_priorities(&m.actor, &sm).unwrap();
        for p in &pv[..4] {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!(pv[4..].iter().all(|&p| p == 0.0));
        let one = sm_with_rows(&[[0.9; OV_WIDTH]]);
        assert_eq!(actor_priorities(&m.actor, &one).unwrap()[0], 1.0);
        assert!(matches!(actor_priorities(&m.actor, &StateMatrix::empty()), Err(AgentError::NoAction)));
    }

    #[test]
    fn dominating_row_ranks_first() {
        let mut actor = MlpParams::zeros(&ACTOR_SIZES, Activation::Tanh).unwrap();
        // all weights positive: logits increase in every input
        for v in &mut actor.params {
            *v = 0.1;
        }
        let sm = sm_with_rows(&[[0.2; OV_WIDTH], [0.8; OV_WIDTH], [0.5; OV_WIDTH]]);
        let pv = actor_priorities(&actor, &sm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&pv, ActionMode::Greedy, &mut rng).unwrap(), 1);
    }

    #[test]
    fn permutation_equivariance() {
        let m = model();
        let rows = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], [0.9; OV_WIDTH], [0.0; OV_WIDTH]];
        let pv = actor_priorities(&m.actor, &sm_with_rows(&rows)).unwrap();
        let perm = [rows[2], rows[0], rows[1]];
        let pp = actor_priorities(&m.actor, &sm_with_rows(&perm)).unwrap();
        assert!((pv[0] - pp[1]).abs() < 1e-15 && (pv[1] - pp[2]).abs() < 1e-15 && (pv[2] - pp[0]).abs() < 1e-15);
    }

    #[test]
    fn critic_cases() {
        let zero = MlpParams::zeros(&CRITIC_SIZES, Activation::Tanh).unwrap();
        assert_eq!(critic_value(&zero, &StateMatrix::empty()).unwrap(), 0.0);
        let m = model();
        let mut sm = StateMatrix::empty();
        sm.cv.iter_mut().for_each(|v| *v = 1.0);
        let v = critic_value(&m.critic, &sm).unwrap();
        assert!(v.is_finite());
        assert_eq!(v, critic_value(&m.critic, &sm).unwrap());
    }

    #[test]
    fn select_action_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_action(&[0.2, 0.5, 0.3], ActionMode::Greedy, &mut rng).unwrap(), 1);
        assert_eq!(select_action(&[0.5, 0.5], ActionMode::Greedy, &mut rng).unwrap(), 0);
        let draw = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            (0..20).map(|_| select_action(&[0.2, 0.5, 0.3], ActionMode::Sample, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert!(select_action(&[0.0, 0.0], ActionMode::Greedy, &mut rng).is_err());
    }

    #[test]
    fn sample_frequencies_within_three_sigma() {
        let p = [0.2, 0.5, 0.3];
        let n = 100_000;
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            counts[select_action(&p, ActionMode::Sample, &mut rng).unwrap()] += 1;
        }
        for i in 0..3 {
            let sigma = (n as f64 * p[i] * (1.0 - p[i])).sqrt();
            assert!((counts[i] as f64 - n as f64 * p[i]).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn reward_cases() {
        assert!((compute_reward(1000.0, 800.0) - 0.2).abs() < 1e-12);
        assert_eq!(compute_reward(5.0, 5.0), 0.0);
        assert_eq!(compute_reward(0.0, 0.0), 0.0);
        assert!(compute_reward(10.0, 9.0) > 0.0);
        assert!(compute_reward(10.0, 11.0) < 0.0);
    }

    #[test]
    fn clipped_surrogate_case() {
        let (v, clipped) = clipped_surrogate(1.5, 2.0, 0.2);
        assert!((v - 1.2 * 2.0).abs() < 1e-12 && clipped);
        let (v, clipped) = clipped_surrogate(0.9, 2.0, 0.2);
        assert!((v - 1.8).abs() < 1e-12 && !clipped);
    }

    fn bandit_trajectory(m: &Model, action: usize, reward: f64) -> Trajectory {
        let sm = sm_with_rows(&[[0.1, 0.9, 0.2, 0.3, 0.5, 0.1, 0.0, 0.4], [0.7, 0.1, 0.6, 0.2, 0.1, 0.1, 0.9, 0.2]]);
        let pv = actor_priorities(&m.actor, &sm).unwrap();
        Trajectory {
            decisions: vec![Decision {
                ov: sm.ov[..2 * OV_WIDTH].to_vec(),
                cv: sm.cv.clone(),
                valid_rows: 2,
                action,
                log_prob: pv[action].ln(),
                value: 0.0,
            }],
            reward,
        }
    }

    #[test]
    fn zero_advantage_without_entropy_changes_nothing_in_actor() {
        let mut m = model();
        let t = bandit_trajectory(&m, 0, 0.0);
        let hyper = PpoHyper {
            entropy_coef: 0.0,
            ..Default::default()
        };
        let before = m.actor.clone();
        let st = ppo_update(&mut m, &[t], &hyper, 1).unwrap();
        assert_eq!(m.actor.params, before.params);
        assert_eq!(st.policy_loss, 0.0);
    }

    #[test]
    fn bandit_update_favors_better_action() {
        let mut m = model();
        let hyper = PpoHyper {
            entropy_coef: 0.0,
            policy_lr: 1e-2,
            ..Default::default()
        };
        let sm = sm_with_rows(&[[0.1, 0.9, 0.2, 0.3, 0.5, 0.1, 0.0, 0.4], [0.7, 0.1, 0.6, 0.2, 0.1, 0.1, 0.9, 0.2]]);
        let before = actor_priorities(&m.actor, &sm).unwrap()[1];
        let good = bandit_trajectory(&m, 1, 1.0);
        let bad = bandit_trajectory(&m, 0, -1.0);
        ppo_update(&mut m, &[good, bad], &hyper, 2).unwrap();
        let after = actor_priorities(&m.actor, &sm).unwrap()[1];
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let m = model();
        let t = bandit_trajectory(&m, 1, 0.7);
        let hyper = PpoHyper::default();
        let items: Vec<(&Decision, f64)> = t.decisions.iter().map(|d| (d, t.reward)).collect();
        let (ga, _, _) = gradients(&m, &items, &hyper).unwrap();
        let loss = |mm: &Model| gradients(mm, &items, &hyper).unwrap().2;
        let total = |s: UpdateStats| s.policy_loss - hyper.entropy_coef * s.entropy;
        let mut probe = m.clone();
        for i in (0..ga.len()).step_by(37) {
            let orig = probe.actor.params[i];
            probe.actor.params[i] = orig + 1e-6;
            let up = total(loss(&probe));
            probe.actor.params[i] = orig - 1e-6;
            let down = total(loss(&probe));
            probe.actor.params[i] = orig;
            let num = (up - down) / 2e-6;
            assert!((num - ga[i]).abs() <= 1e-6 + 1e-4 * num.abs(), "param {i}: {num} vs {}", ga[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_layout_guard() {
        let m = model();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(m.check_layout(FeatureMode::Engineered).is_ok());
        assert!(matches!(m.check_layout(FeatureMode::Naive), Err(AgentError::LayoutMismatch { .. })));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_eq!(derive_seed(9, &[3]), derive_seed(9, &[3]));
    }
}
