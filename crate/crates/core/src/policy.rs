//! Conditional noise-prediction policy.
//!
//! The trainable policy is a per-nucleotide affine map
//! `ε̂ᵢ = W · [xᵢ ; t_emb ; hᵢ] + b` over the noisy one-hot row, a sinusoidal
//! time embedding and the invariant (scalar) part of the conditioning
//! embedding. Being affine in its parameters, every gradient the training
//! loops need has a closed form.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_transition, gaussian_log_prob, NoiseSchedule, StepRecord};
use crate::encoder::ConditioningEmbedding;
use crate::error::{Error, Result};
use crate::struct_io::CHANNELS;

pub const TIME_EMBED_DIM: usize = 16;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RIDERCK\0";
const CHECKPOINT_VERSION: u32 = 1;

pub type Latent = Vec<[f64; CHANNELS]>;

/// Sinusoidal embedding of `t` at angular frequencies 1, 2, 4, …, 128.
pub fn time_embed(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for m in 0..TIME_EMBED_DIM / 2 {
        let w = (1u32 << m) as f64;
        out[2 * m] = (w * t).sin();
        out[2 * m + 1] = (w * t).cos();
    }
    out
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &[[f64; CHANNELS]], t: f64, h: &ConditioningEmbedding) -> Result<Latent>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub x_dim: usize,
    pub t_dim: usize,
    pub h_dim: usize,
}

impl FeatureSpec {
    pub fn new(h_dim: usize) -> Self {
        Self {
            x_dim: CHANNELS,
            t_dim: TIME_EMBED_DIM,
            h_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.x_dim + self.t_dim + self.h_dim
    }
}

/// Affine policy parameters; `w` is `4 × input_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub spec: FeatureSpec,
    pub w: Vec<f64>,
    pub b: [f64; CHANNELS],
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec) -> Self {
        Self {
            spec,
            w: vec![0.0; CHANNELS * spec.input_dim()],
            b: [0.0; CHANNELS],
        }
    }

    /// Entries drawn from N(0, 0.02²).
    pub fn init<R: Rng + ?Sized>(spec: FeatureSpec, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut p = Self::zeros(spec);
        p.w.iter_mut().for_each(|x| *x = normal.sample(rng));
        p.b.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + CHANNELS
    }

    /// `[w…, b…]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.extend_from_slice(&self.b);
        v
    }

    pub fn from_flat(spec: FeatureSpec, flat: &[f64]) -> Result<Self> {
        let nw = CHANNELS * spec.input_dim();
        if flat.len() != nw + CHANNELS {
            return Err(Error::Shape(format!("expected {} parameters, got {}", nw + CHANNELS, flat.len())));
        }
        let mut b = [0.0; CHANNELS];
        b.copy_from_slice(&flat[nw..]);
        Ok(Self {
            spec,
            w: flat[..nw].to_vec(),
            b,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|x| x.is_finite())
    }

    fn check_inputs(&self, x_t: &[[f64; CHANNELS]], h: &ConditioningEmbedding) -> Result<()> {
        if x_t.len() != h.len() {
            return Err(Error::Shape(format!("latent has {} rows, embedding {}", x_t.len(), h.len())));
        }
        if h.scalar_dim() != self.spec.h_dim {
            return Err(Error::Shape(format!(
                "embedding has {} scalar channels, policy expects {}",
                h.scalar_dim(),
                self.spec.h_dim
            )));
        }
        Ok(())
    }

    /// Input feature rows `[xᵢ ; t_emb ; hᵢ]`.
    pub fn features(&self, x_t: &[[f64; CHANNELS]], t: f64, h: &ConditioningEmbedding) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(x_t, h)?;
        let te = time_embed(t);
        Ok(x_t
            .iter()
            .zip(&h.scalar)
            .map(|(x, hs)| {
                let mut f = Vec::with_capacity(self.spec.input_dim());
                f.extend_from_slice(x);
                f.extend_from_slice(&te);
                f.extend_from_slice(hs);
                f
            })
            .collect())
    }

    pub fn apply(&self, features: &[Vec<f64>]) -> Latent {
        let d = self.spec.input_dim();
        features
            .iter()
            .map(|f| {
                let mut out = self.b;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += self.w[c * d..(c + 1) * d].iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
                }
                out
            })
            .collect()
    }

    /// Adds `Σᵢ coeffᵢ ⊗ fᵢ` into a flat gradient laid out like [`to_flat`](Self::to_flat).
    pub fn accumulate_outer(&self, grad: &mut [f64], coeff: &[[f64; CHANNELS]], features: &[Vec<f64>]) {
        let d = self.spec.input_dim();
        let nw = CHANNELS * d;
        for (g, f) in coeff.iter().zip(features) {
            for c in 0..CHANNELS {
                if g[c] == 0.0 {
                    continue;
                }
                for (slot, x) in grad[c * d..(c + 1) * d].iter_mut().zip(f) {
                    *slot += g[c] * x;
                }
                grad[nw + c] += g[c];
            }
        }
    }

    /// Writes the versioned binary checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for d in [self.spec.x_dim, self.spec.t_dim, self.spec.h_dim, CHANNELS] {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in self.to_flat() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 4];
        let mut u64buf = [0u8; 8];
        for d in &mut dims {
            input.read_exact(&mut u64buf)?;
            *d = u64::from_le_bytes(u64buf) as usize;
        }
        if dims[0] != CHANNELS || dims[1] != TIME_EMBED_DIM || dims[3] != CHANNELS {
            return Err(Error::Checkpoint(format!("unexpected dims header {dims:?}")));
        }
        let spec = FeatureSpec::new(dims[2]);
        let n = CHANNELS * spec.input_dim() + CHANNELS;
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            input
                .read_exact(&mut u64buf)
                .map_err(|e| Error::Checkpoint(format!("truncated parameters: {e}")))?;
            flat.push(f64::from_le_bytes(u64buf));
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Self::from_flat(spec, &flat)
    }
}

impl NoisePredictor for PolicyParams {
    fn predict_noise(&self, x_t: &[[f64; CHANNELS]], t: f64, h: &ConditioningEmbedding) -> Result<Latent> {
        Ok(self.apply(&self.features(x_t, t, h)?))
    }
}

/// Frozen parameters used to collect one epoch of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    params: PolicyParams,
    epoch: usize,
}

impl PolicySnapshot {
    pub fn new(params: &PolicyParams, epoch: usize) -> Self {
        Self {
            params: params.clone(),
            epoch,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for x in self.params.to_flat() {
            for byte in x.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }
}

impl NoisePredictor for PolicySnapshot {
    fn predict_noise(&self, x_t: &[[f64; CHANNELS]], t: f64, h: &ConditioningEmbedding) -> Result<Latent> {
        self.params.predict_noise(x_t, t, h)
    }
}

/// Adam with bias-corrected moments, used for both descent and ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Moves `params` along `-grad` (descent) or `+grad` (ascent).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], ascend: bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let sign = if ascend { 1.0 } else { -1.0 };
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += sign * self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Predicts the exact noise that separates `x_t` from a known clean sequence.
#[derive(Debug, Clone)]
pub struct TeacherPolicy {
    pub x0: Latent,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for TeacherPolicy {
    fn predict_noise(&self, x_t: &[[f64; CHANNELS]], t: f64, _h: &ConditioningEmbedding) -> Result<Latent> {
        if x_t.len() != self.x0.len() {
            return Err(Error::Shape("teacher latent length mismatch".into()));
        }
        let v = self.schedule.alpha_sigma(t)?;
        Ok(x_t
            .iter()
            .zip(&self.x0)
            .map(|(x, x0)| std::array::from_fn(|c| (x[c] - v.alpha * x0[c]) / v.sigma))
            .collect())
    }
}

/// What a log-density gradient needs besides the step record itself.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub h: &'a ConditioningEmbedding,
    pub schedule: &'a NoiseSchedule,
    pub temperature: f64,
    pub sigma_min: f64,
}

/// Log-density of the recorded action under `params`, plus the pieces its gradient needs.
pub struct StepDensity {
    pub log_prob: f64,
    /// ∂ log π / ∂ ε̂ per entry.
    pub dlogp_deps: Latent,
    pub features: Vec<Vec<f64>>,
}

pub fn step_density(params: &PolicyParams, step: &StepRecord, ctx: &StepContext<'_>) -> Result<StepDensity> {
    if step.action.len() != step.state.len() {
        return Err(Error::State("step action and state lengths differ".into()));
    }
    let features = params.features(&step.state, step.t, ctx.h)?;
    let eps_hat = params.apply(&features);
    let tr = ddim_transition(&step.state, &eps_hat, step.t, step.t_prev, ctx.temperature, ctx.sigma_min, ctx.schedule)?;
    if tr.std <= 0.0 {
        return Err(Error::State("deterministic step has no action density".into()));
    }
    let inv_var = 1.0 / (tr.std * tr.std);
    let dlogp_deps = step
        .action
        .iter()
        .zip(&tr.mean)
        .map(|(a, m)| std::array::from_fn(|c| tr.eps_coef * (a[c] - m[c]) * inv_var))
        .collect();
    Ok(StepDensity {
        log_prob: gaussian_log_prob(&step.action, &tr.mean, tr.std),
        dlogp_deps,
        features,
    })
}

/// Log-density of the recorded action under `params`.
pub fn log_prob(params: &PolicyParams, step: &StepRecord, ctx: &StepContext<'_>) -> Result<f64> {
    Ok(step_density(params, step, ctx)?.log_prob)
}

/// Exact gradient of the action log-density with respect to `[w…, b…]`.
pub fn grad_log_prob(params: &PolicyParams, step: &StepRecord, ctx: &StepContext<'_>) -> Result<Vec<f64>> {
    let d = step_density(params, step, ctx)?;
    let mut grad = vec![0.0; params.n_params()];
    params.accumulate_outer(&mut grad, &d.dlogp_deps, &d.features);
    Ok(grad)
}
