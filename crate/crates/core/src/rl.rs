//! Policy-gradient fine-tuning against a folding oracle.
//!
//! Each epoch freezes a snapshot of the policy, samples a batch of denoising
//! trajectories with a temperature mixture, scores their folds, forms
//! advantages against a baseline and takes a few clipped-ratio ascent steps.

use std::time::Instant;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_sequence, DenoisingTrajectory, NoiseSchedule, SamplerConfig, DEFAULT_SIGMA_MIN};
use crate::encoder::ConditioningEmbedding;
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, MetricsReport};
use crate::oracle::FoldingOracle;
use crate::policy::{clip_grad_norm, step_density, Adam, NoisePredictor, PolicyParams, PolicySnapshot, StepContext};
use crate::rewards::{total_reward, RewardConfig};
use crate::struct_io::BackboneStructure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// No baseline: the advantage is the raw reward.
    Reward,
    Batch,
    Moving,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(Self::Reward),
            "batch" => Ok(Self::Batch),
            "moving" => Ok(Self::Moving),
            other => Err(Error::Config(format!("unknown baseline mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub batch_size: usize,
    pub clip_eps: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub n_steps_rl: usize,
    pub beta_baseline: f64,
    pub temperature_set: Vec<f64>,
    pub baseline_mode: BaselineMode,
    pub sigma_min: f64,
    pub log_wall_time: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            updates_per_epoch: 2,
            batch_size: 60,
            clip_eps: 0.5,
            learning_rate: 5e-5,
            max_grad_norm: 1.0,
            n_steps_rl: 30,
            beta_baseline: 0.9,
            temperature_set: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            baseline_mode: BaselineMode::Moving,
            sigma_min: DEFAULT_SIGMA_MIN,
            log_wall_time: false,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        if self.n_steps_rl == 0 {
            return bad("n_steps_rl must be positive");
        }
        if !(0.0..1.0).contains(&self.beta_baseline) {
            return bad("beta_baseline must lie in [0, 1)");
        }
        if self.temperature_set.is_empty() || self.temperature_set.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("temperature_set must hold positive temperatures");
        }
        if !(self.sigma_min > 0.0) {
            return bad("sigma_min must be positive during RL");
        }
        Ok(())
    }
}

/// A design target with its cached conditioning embedding.
#[derive(Debug, Clone)]
pub struct RlTarget {
    pub id: String,
    pub structure: BackboneStructure,
    pub embedding: ConditioningEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub b: f64,
    pub beta_baseline: f64,
    pub initialized: bool,
}

impl BaselineState {
    pub fn new(beta_baseline: f64) -> Self {
        Self {
            b: 0.0,
            beta_baseline,
            initialized: false,
        }
    }
}

pub fn batch_baseline(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Config("baseline of an empty batch".into()));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// The first batch initializes the average; later batches blend in with weight 1 − β.
pub fn update_moving_baseline(state: &BaselineState, batch_mean: f64) -> BaselineState {
    let b = if state.initialized {
        state.beta_baseline * state.b + (1.0 - state.beta_baseline) * batch_mean
    } else {
        batch_mean
    };
    BaselineState {
        b,
        initialized: true,
        ..*state
    }
}

pub fn advantage(reward: f64, baseline: f64) -> f64 {
    reward - baseline
}

pub fn clipped_objective(ratio: f64, adv: f64, clip_eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv)
}

/// Independent stream per (seed, epoch, trajectory), so batches do not depend on scheduling.
pub fn trajectory_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

pub fn score_design(oracle: &dyn FoldingOracle, reward: &RewardConfig, traj: &DenoisingTrajectory, target: &BackboneStructure) -> Result<(MetricsReport, f64)> {
    let fold = oracle.fold(&traj.final_sequence)?;
    let m = metrics_report(&fold, target)?;
    Ok((m, total_reward(reward, &m)))
}

/// A scored trajectory; `metrics` is what the oracle fold achieved against its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub trajectory: DenoisingTrajectory,
    pub metrics: MetricsReport,
}

/// Samples and scores `batch_size` trajectories, cycling over targets.
/// The first trajectory of each target is deterministic (τ = 0).
pub fn collect_batch<P: NoisePredictor + ?Sized>(
    policy: &P,
    epoch: usize,
    targets: &[RlTarget],
    oracle: &dyn FoldingOracle,
    reward: &RewardConfig,
    cfg: &RlConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Experience>> {
    if targets.is_empty() {
        return Err(Error::Config("no RL targets".into()));
    }
    let results: Vec<Result<Experience>> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|m| {
            let mut rng = trajectory_rng(seed, epoch, m);
            let ti = m % targets.len();
            let target = &targets[ti];
            let temperature = if m < targets.len() {
                0.0
            } else {
                cfg.temperature_set[rng.random_range(0..cfg.temperature_set.len())]
            };
            let sampler = SamplerConfig {
                n_steps: cfg.n_steps_rl,
                temperature,
                sigma_min: cfg.sigma_min,
            };
            let (_, mut traj) = sample_sequence(policy, &target.embedding, sched, &sampler, &mut rng)?;
            traj.target_index = ti;
            traj.target_id = target.id.clone();
            let (metrics, r) = score_design(oracle, reward, &traj, &target.structure)?;
            traj.reward = r;
            Ok(Experience { trajectory: traj, metrics })
        })
        .collect();

    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut dropped = 0;
    for (m, res) in results.into_iter().enumerate() {
        match res {
            Ok(e) => batch.push(e),
            Err(e @ (Error::Oracle(_) | Error::Shape(_))) => {
                warn!("dropping trajectory {m}: {e}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if 2 * dropped > cfg.batch_size {
        return Err(Error::Batch(format!("{dropped} of {} trajectories failed", cfg.batch_size)));
    }
    Ok(batch)
}

/// Per-trajectory advantages for the chosen baseline; also returns the baseline used.
pub fn advantages(rewards: &[f64], mode: BaselineMode, state: &mut BaselineState) -> Result<(Vec<f64>, f64)> {
    let mean = batch_baseline(rewards)?;
    let b = match mode {
        BaselineMode::Reward => 0.0,
        BaselineMode::Batch => mean,
        BaselineMode::Moving => {
            *state = update_moving_baseline(state, mean);
            state.b
        }
    };
    Ok((rewards.iter().map(|r| advantage(*r, b)).collect(), b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub clip_frac: f64,
    pub n_contributing: usize,
}

/// Clipped surrogate averaged over stochastic trajectories, with its exact gradient.
pub fn clipped_objective_and_grad(
    params: &PolicyParams,
    batch: &[DenoisingTrajectory],
    advs: &[f64],
    targets: &[RlTarget],
    cfg: &RlConfig,
    sched: &NoiseSchedule,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    if batch.len() != advs.len() {
        return Err(Error::Shape("one advantage per trajectory required".into()));
    }
    let per_traj: Vec<Result<(f64, Vec<f64>, usize, usize)>> = batch
        .par_iter()
        .zip(advs.par_iter())
        .filter(|(traj, _)| traj.temperature > 0.0)
        .map(|(traj, &adv)| {
            let target = targets
                .get(traj.target_index)
                .ok_or_else(|| Error::State(format!("trajectory refers to missing target {}", traj.target_index)))?;
            let ctx = StepContext {
                h: &target.embedding,
                schedule: sched,
                temperature: traj.temperature,
                sigma_min: cfg.sigma_min,
            };
            let mut value = 0.0;
            let mut grad = vec![0.0; params.n_params()];
            let mut clipped = 0;
            for step in &traj.steps {
                let old = step
                    .log_prob_old
                    .ok_or_else(|| Error::State("step is missing its sampling log-probability".into()))?;
                let d = step_density(params, step, &ctx)?;
                let ratio = (d.log_prob - old).exp();
                if (ratio - 1.0).abs() > cfg.clip_eps {
                    clipped += 1;
                }
                let unclipped = ratio * adv;
                let clipped_term = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
                if unclipped <= clipped_term {
                    value += unclipped;
                    let scale = adv * ratio;
                    let coeff: Vec<[f64; 4]> = d.dlogp_deps.iter().map(|g| g.map(|v| v * scale)).collect();
                    params.accumulate_outer(&mut grad, &coeff, &d.features);
                } else {
                    value += clipped_term;
                }
            }
            Ok((value, grad, clipped, traj.steps.len()))
        })
        .collect();

    let mut total = 0.0;
    let mut grad = vec![0.0; params.n_params()];
    let (mut clipped, mut steps, mut n) = (0, 0, 0);
    for r in per_traj {
        let (v, g, c, s) = r?;
        total += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        clipped += c;
        steps += s;
        n += 1;
    }
    if n > 0 {
        total /= n as f64;
        grad.iter_mut().for_each(|g| *g /= n as f64);
    }
    Ok((
        ObjectiveValue {
            objective: total,
            clip_frac: if steps > 0 { clipped as f64 / steps as f64 } else { 0.0 },
            n_contributing: n,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
}

/// One clipped-gradient Adam ascent step.
pub fn policy_update(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &[DenoisingTrajectory],
    advs: &[f64],
    targets: &[RlTarget],
    cfg: &RlConfig,
    sched: &NoiseSchedule,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::Config("policy update on an empty batch".into()));
    }
    let (value, mut grad) = clipped_objective_and_grad(params, batch, advs, targets, cfg, sched)?;
    if !value.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let bad = grad.iter().filter(|g| !g.is_finite()).count();
        return Err(Error::Update(format!(
            "non-finite objective {} or gradient ({bad} of {} entries)",
            value.objective,
            grad.len()
        )));
    }
    let grad_norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
    let mut flat = params.to_flat();
    adam.step(&mut flat, &grad, true);
    *params = PolicyParams::from_flat(params.spec, &flat)?;
    Ok(UpdateStats {
        objective: value.objective,
        clip_frac: value.clip_frac,
        grad_norm,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub clip_frac: f64,
    pub mean_abs_adv: f64,
    pub wall_ms: u64,
    /// Surrogate objective at each update of the epoch.
    pub objectives: Vec<f64>,
    /// Mean GDT_TS of the deterministic (τ = 0) designs.
    pub det_gdt: f64,
    pub n_trajectories: usize,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Runs `cfg.epochs` epochs of snapshot → collect → baseline → updates.
/// `on_epoch` sees every log record as soon as it is complete.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &mut PolicyParams,
    targets: &[RlTarget],
    oracle: &dyn FoldingOracle,
    reward: &RewardConfig,
    cfg: &RlConfig,
    sched: &NoiseSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut adam = Adam::new(params.n_params(), cfg.learning_rate);
    let mut baseline = BaselineState::new(cfg.beta_baseline);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let snapshot = PolicySnapshot::new(params, epoch);
        let experience = collect_batch(&snapshot, epoch, targets, oracle, reward, cfg, sched, seed)?;
        let rewards: Vec<f64> = experience.iter().map(|e| e.trajectory.reward).collect();
        let (advs, b) = advantages(&rewards, cfg.baseline_mode, &mut baseline)?;
        let batch: Vec<DenoisingTrajectory> = experience.iter().map(|e| e.trajectory.clone()).collect();
        let det: Vec<f64> = experience
            .iter()
            .filter(|e| e.trajectory.temperature == 0.0)
            .map(|e| e.metrics.gdt_ts)
            .collect();

        let mut objectives = Vec::with_capacity(cfg.updates_per_epoch);
        let mut clip_frac = 0.0;
        for _ in 0..cfg.updates_per_epoch {
            let stats = policy_update(params, &mut adam, &batch, &advs, targets, cfg, sched)?;
            debug!("epoch {epoch}: objective {:.4}, grad norm {:.4}", stats.objective, stats.grad_norm);
            objectives.push(stats.objective);
            clip_frac += stats.clip_frac / cfg.updates_per_epoch as f64;
        }
        let entry = EpochLog {
            epoch,
            mean_reward: batch_baseline(&rewards)?,
            baseline: b,
            clip_frac,
            mean_abs_adv: advs.iter().map(|a| a.abs()).sum::<f64>() / advs.len() as f64,
            wall_ms: if cfg.log_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
            objectives,
            det_gdt: if det.is_empty() { 0.0 } else { det.iter().sum::<f64>() / det.len() as f64 },
            n_trajectories: batch.len(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Folds `n_samples` deterministic (τ = 0) designs per target from independent
/// starting noise; reports are grouped by target.
pub fn evaluate_deterministic<P: NoisePredictor + ?Sized>(
    policy: &P,
    targets: &[RlTarget],
    oracle: &dyn FoldingOracle,
    sched: &NoiseSchedule,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<MetricsReport>>> {
    let sampler = SamplerConfig {
        n_steps,
        temperature: 0.0,
        sigma_min: DEFAULT_SIGMA_MIN,
    };
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (0..n_samples)
                .into_par_iter()
                .map(|j| {
                    let mut rng = trajectory_rng(seed, usize::MAX - i, j);
                    let (seq, _) = sample_sequence(policy, &t.embedding, sched, &sampler, &mut rng)?;
                    metrics_report(&oracle.fold(&seq)?, &t.structure)
                })
                .collect()
        })
        .collect()
}
