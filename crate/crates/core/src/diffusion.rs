//! Variance-preserving diffusion over one-hot sequence space.
//!
//! Linear β schedule, forward noising, the noise-prediction pre-training loss
//! and a DDIM sampler whose per-step noise is scaled by a temperature, which
//! gives every denoising step a diagonal-Gaussian action density.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::ConditioningEmbedding;
use crate::error::{Error, Result};
use crate::policy::{Adam, Latent, NoisePredictor, PolicyParams};
use crate::struct_io::{decode_argmax, RnaSequence, CHANNELS};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub t_final: f64,
    pub eps_time: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
            t_final: 1.0,
            eps_time: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub sigma: f64,
    /// log(α²/σ²); +∞ at t = 0.
    pub lambda: f64,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta0 > 0.0
            && self.beta1 >= self.beta0
            && self.eps_time > 0.0
            && self.eps_time < self.t_final
            && self.t_final.is_finite()
            && self.beta1.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise schedule {self:?}")))
        }
    }

    /// ∫₀ᵗ β(s) ds.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=self.t_final).contains(&t) {
            return Err(Error::Range(format!("time {t} outside [0, {}]", self.t_final)));
        }
        let integral = self.integral(t);
        let alpha2 = (-integral).exp();
        // 1 − e^{−x} without cancellation for small x.
        let sigma2 = -(-integral).exp_m1();
        Ok(ScheduleValues {
            alpha: alpha2.sqrt(),
            sigma: sigma2.sqrt(),
            lambda: if sigma2 == 0.0 { f64::INFINITY } else { (alpha2 / sigma2).ln() },
        })
    }
}

/// Uniform grid `times[0] = eps_time < … < times[n_steps] = T`; sampling walks it backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(sched: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        let span = sched.t_final - sched.eps_time;
        let mut times: Vec<f64> = (0..=n_steps)
            .map(|k| sched.eps_time + span * k as f64 / n_steps as f64)
            .collect();
        times[n_steps] = sched.t_final;
        Ok(Self { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
}

fn check_shapes(a: &[[f64; CHANNELS]], b: &[[f64; CHANNELS]], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} rows vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Latent {
    (0..n).map(|_| std::array::from_fn(|_| rng.sample(StandardNormal))).collect()
}

/// `x_t = α_t x₀ + σ_t ε`.
pub fn forward_noise(x0: &[[f64; CHANNELS]], t: f64, eps: &[[f64; CHANNELS]], sched: &NoiseSchedule) -> Result<Latent> {
    check_shapes(x0, eps, "forward_noise")?;
    let v = sched.alpha_sigma(t)?;
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| std::array::from_fn(|c| v.alpha * x[c] + v.sigma * e[c]))
        .collect())
}

/// The Gaussian a DDIM step draws from.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x0_hat: Latent,
    pub mean: Latent,
    pub std: f64,
    /// ∂μ/∂ε̂, the same scalar for every entry.
    pub eps_coef: f64,
}

pub fn ddim_transition(
    x_tk: &[[f64; CHANNELS]],
    eps_hat: &[[f64; CHANNELS]],
    t_k: f64,
    t_km1: f64,
    temperature: f64,
    sigma_min: f64,
    sched: &NoiseSchedule,
) -> Result<Transition> {
    check_shapes(x_tk, eps_hat, "ddim_step")?;
    if !(t_k > t_km1) || t_km1 < 0.0 {
        return Err(Error::Range(format!("DDIM step needs t_k > t_km1 ≥ 0, got {t_k} → {t_km1}")));
    }
    if !(temperature >= 0.0) {
        return Err(Error::Range(format!("temperature {temperature} must be ≥ 0")));
    }
    let cur = sched.alpha_sigma(t_k)?;
    let prev = sched.alpha_sigma(t_km1)?;
    let eta = (prev.sigma / cur.sigma) * (1.0 - (cur.alpha * cur.alpha) / (prev.alpha * prev.alpha)).max(0.0).sqrt();
    let std = (temperature * eta).max(sigma_min);
    let direction = (prev.sigma * prev.sigma - std * std).max(0.0).sqrt();
    let x0_hat: Latent = x_tk
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| std::array::from_fn(|c| (x[c] - cur.sigma * e[c]) / cur.alpha))
        .collect();
    let mean = x0_hat
        .iter()
        .zip(eps_hat)
        .map(|(x0, e)| std::array::from_fn(|c| prev.alpha * x0[c] + direction * e[c]))
        .collect();
    Ok(Transition {
        x0_hat,
        mean,
        std,
        eps_coef: direction - prev.alpha * cur.sigma / cur.alpha,
    })
}

/// Sum of independent N(mean, std²) log-densities.
pub fn gaussian_log_prob(x: &[[f64; CHANNELS]], mean: &[[f64; CHANNELS]], std: f64) -> f64 {
    let n = (x.len() * CHANNELS) as f64;
    let sq: f64 = x
        .iter()
        .zip(mean)
        .flat_map(|(a, m)| (0..CHANNELS).map(move |c| (a[c] - m[c]).powi(2)))
        .sum();
    -0.5 * sq / (std * std) - n * (std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Debug, Clone)]
pub struct DdimStep {
    pub x_prev: Latent,
    pub x0_hat: Latent,
    /// None when the step is deterministic (zero std).
    pub log_prob: Option<f64>,
    pub mean: Latent,
    pub std: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    x_tk: &[[f64; CHANNELS]],
    eps_hat: &[[f64; CHANNELS]],
    t_k: f64,
    t_km1: f64,
    temperature: f64,
    sigma_min: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DdimStep> {
    let tr = ddim_transition(x_tk, eps_hat, t_k, t_km1, temperature, sigma_min, sched)?;
    if tr.std == 0.0 {
        return Ok(DdimStep {
            x_prev: tr.mean.clone(),
            x0_hat: tr.x0_hat,
            log_prob: None,
            mean: tr.mean,
            std: 0.0,
        });
    }
    let x_prev: Latent = tr
        .mean
        .iter()
        .map(|m| std::array::from_fn(|c| m[c] + tr.std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let log_prob = gaussian_log_prob(&x_prev, &tr.mean, tr.std);
    Ok(DdimStep {
        x_prev,
        x0_hat: tr.x0_hat,
        log_prob: Some(log_prob),
        mean: tr.mean,
        std: tr.std,
    })
}

/// One denoising transition `state (at t) → action (at t_prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Latent,
    pub t: f64,
    pub t_prev: f64,
    pub action: Latent,
    pub log_prob_old: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingTrajectory {
    pub steps: Vec<StepRecord>,
    pub final_x0: Latent,
    pub final_sequence: RnaSequence,
    pub reward: f64,
    pub temperature: f64,
    pub target_index: usize,
    pub target_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub temperature: f64,
    pub sigma_min: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            temperature: 0.1,
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || !(self.temperature >= 0.0) || !(self.sigma_min >= 0.0) {
            return Err(Error::Config(format!("invalid sampler settings {self:?}")));
        }
        Ok(())
    }
}

/// Runs the sampler from an explicit starting latent `x_T`.
pub fn sample_from<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    h: &ConditioningEmbedding,
    x_start: Latent,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(RnaSequence, DenoisingTrajectory)> {
    cfg.validate()?;
    check_shapes(&x_start, &x_start, "")?;
    if x_start.len() != h.len() {
        return Err(Error::Shape(format!("latent has {} rows, embedding {}", x_start.len(), h.len())));
    }
    let grid = TimeGrid::uniform(sched, cfg.n_steps)?;
    let mut x = x_start;
    let mut steps = Vec::with_capacity(cfg.n_steps);
    let mut x0_hat = Vec::new();
    for k in (1..=cfg.n_steps).rev() {
        let (t, t_prev) = (grid.times[k], grid.times[k - 1]);
        let eps_hat = policy.predict_noise(&x, t, h)?;
        let step = ddim_step(&x, &eps_hat, t, t_prev, cfg.temperature, cfg.sigma_min, sched, rng)?;
        if step.x_prev.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Range(format!("non-finite latent at t = {t_prev}")));
        }
        steps.push(StepRecord {
            state: std::mem::replace(&mut x, step.x_prev.clone()),
            t,
            t_prev,
            action: step.x_prev,
            log_prob_old: step.log_prob,
        });
        x0_hat = step.x0_hat;
    }
    let seq = decode_argmax(&x0_hat)?;
    let traj = DenoisingTrajectory {
        steps,
        final_x0: x0_hat,
        final_sequence: seq.clone(),
        reward: 0.0,
        temperature: cfg.temperature,
        target_index: 0,
        target_id: String::new(),
    };
    Ok((seq, traj))
}

/// Draws `x_T ~ N(0, I)` and runs the sampler.
pub fn sample_sequence<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    h: &ConditioningEmbedding,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(RnaSequence, DenoisingTrajectory)> {
    let x_start = standard_normal(rng, h.len());
    sample_from(policy, h, x_start, sched, cfg, rng)
}

/// A clean sequence together with the structure embedding it should be generated from.
#[derive(Debug, Clone, Copy)]
pub struct PretrainExample<'a> {
    pub x0: &'a [[f64; CHANNELS]],
    pub h: &'a ConditioningEmbedding,
}

/// The random part of one pre-training term.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainDraw {
    pub t: f64,
    pub eps: Latent,
}

pub fn draw_pretrain_noise<R: Rng + ?Sized>(batch: &[PretrainExample<'_>], sched: &NoiseSchedule, rng: &mut R) -> Vec<PretrainDraw> {
    batch
        .iter()
        .map(|ex| PretrainDraw {
            t: rng.random_range(sched.eps_time..=sched.t_final),
            eps: standard_normal(rng, ex.x0.len()),
        })
        .collect()
}

/// Mean over the batch of ‖ε − ε̂‖² and its gradient, for fixed draws.
pub fn pretrain_loss_with(
    params: &PolicyParams,
    batch: &[PretrainExample<'_>],
    draws: &[PretrainDraw],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty pre-training batch".into()));
    }
    if batch.len() != draws.len() {
        return Err(Error::Shape("one noise draw per example required".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.n_params()];
    for (ex, draw) in batch.iter().zip(draws) {
        let x_t = forward_noise(ex.x0, draw.t, &draw.eps, sched)?;
        let features = params.features(&x_t, draw.t, ex.h)?;
        let eps_hat = params.apply(&features);
        let mut coeff = Vec::with_capacity(eps_hat.len());
        for (e, p) in draw.eps.iter().zip(&eps_hat) {
            let r: [f64; CHANNELS] = std::array::from_fn(|c| p[c] - e[c]);
            loss += r.iter().map(|v| v * v).sum::<f64>();
            coeff.push(r.map(|v| 2.0 * v));
        }
        params.accumulate_outer(&mut grad, &coeff, &features);
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((loss / m, grad))
}

/// Samples `t ~ U[eps_time, T]` and `ε ~ N(0, I)` per example, then evaluates the loss.
pub fn pretrain_loss<R: Rng + ?Sized>(
    params: &PolicyParams,
    batch: &[PretrainExample<'_>],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty pre-training batch".into()));
    }
    let draws = draw_pretrain_noise(batch, sched, rng);
    pretrain_loss_with(params, batch, &draws, sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 8,
            learning_rate: 3e-4,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid pre-training settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam descent on the noise-prediction loss; examples are drawn with replacement.
/// Returns the loss of every iteration.
pub fn pretrain<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    examples: &[PretrainExample<'_>],
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no pre-training examples".into()));
    }
    let mut adam = Adam::new(params.n_params(), cfg.learning_rate);
    let mut flat = params.to_flat();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<PretrainExample<'_>> = (0..cfg.batch_size).map(|_| examples[rng.random_range(0..examples.len())]).collect();
        let current = PolicyParams::from_flat(params.spec, &flat)?;
        let (loss, grad) = pretrain_loss(&current, &batch, sched, rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Update(format!("non-finite pre-training loss at iteration {it}")));
        }
        adam.step(&mut flat, &grad, false);
        losses.push(loss);
    }
    *params = PolicyParams::from_flat(params.spec, &flat)?;
    Ok(losses)
}
