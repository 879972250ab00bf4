//! Reference oracles used by the test suites.
//!
//! Everything here is deliberately slow and shares no code with the
//! production paths it checks: superpositions come from Horn's quaternion
//! method rather than an SVD, and the searches are exhaustive.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Quaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{
    draw_pretrain_noise, pretrain_loss_with, sample_sequence, DenoisingTrajectory, NoiseSchedule, PretrainExample, SamplerConfig,
    DEFAULT_SIGMA_MIN,
};
use crate::encoder::ConditioningEmbedding;
use crate::oracle::{helix_fold, HelixOracleParams};
use crate::policy::{grad_log_prob, log_prob, FeatureSpec, Latent, PolicyParams, StepContext};
use crate::rl::{clipped_objective_and_grad, update_moving_baseline, BaselineState, RlConfig, RlTarget};
use crate::struct_io::{BackboneStructure, Nucleotide, Point, ResidueAtoms, RnaSequence};

/// Optimal rotation and translation (`q ≈ R p + t`) over the points in `idx`, via Horn's quaternion method.
pub fn horn_superpose(p: &[Point], q: &[Point], idx: &[usize]) -> (Matrix3<f64>, Point) {
    let n = idx.len() as f64;
    let cp = idx.iter().fold(Point::zeros(), |acc, &i| acc + p[i]) / n;
    let cq = idx.iter().fold(Point::zeros(), |acc, &i| acc + q[i]) / n;
    let mut s = Matrix3::<f64>::zeros();
    for &i in idx {
        s += (p[i] - cp) * (q[i] - cq).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let k = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(k);
    let mut best = 0;
    for j in 1..4 {
        if eig.eigenvalues[j] > eig.eigenvalues[best] {
            best = j;
        }
    }
    let v = eig.eigenvectors.column(best);
    let quat = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
    let r = quat.to_rotation_matrix().into_inner();
    (r, cq - r * cp)
}

fn dists(p: &[Point], q: &[Point], r: &Matrix3<f64>, t: &Point) -> Vec<f64> {
    p.iter().zip(q).map(|(a, b)| (r * a + t - b).norm()).collect()
}

/// GDT_TS maximising each cutoff count over fits to every subset of size ≥ 3.
pub fn gdt_ts_bruteforce(a: &BackboneStructure, b: &BackboneStructure) -> f64 {
    let (p, q) = (a.c4p_trace(), b.c4p_trace());
    let n = p.len();
    assert!(n <= 12, "exhaustive subset search is exponential");
    let cutoffs = [1.0, 2.0, 4.0, 8.0];
    let mut best = [0usize; 4];
    for mask in 0u32..(1 << n) {
        if mask.count_ones() < 3 {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let (r, t) = horn_superpose(&p, &q, &idx);
        let d = dists(&p, &q, &r, &t);
        for (k, c) in cutoffs.iter().enumerate() {
            best[k] = best[k].max(d.iter().filter(|&&x| x <= *c).count());
        }
    }
    best.iter().sum::<usize>() as f64 / (4 * n) as f64
}

/// TM-score seeded from every contiguous fragment of every length ≥ 3, refined to a fixed point.
pub fn tm_score_bruteforce(a: &BackboneStructure, b: &BackboneStructure) -> f64 {
    let (p, q) = (a.c4p_trace(), b.c4p_trace());
    let n = p.len();
    let raw = 1.24 * (n as f64 - 15.0).cbrt() - 1.8;
    let d0 = if raw < 0.5 { 0.5 } else { raw };
    let mut best = 0.0f64;
    for len in 3..=n {
        for start in 0..=(n - len) {
            let mut subset: Vec<usize> = (start..start + len).collect();
            let mut last = f64::NEG_INFINITY;
            for _ in 0..1000 {
                let (r, t) = horn_superpose(&p, &q, &subset);
                let d = dists(&p, &q, &r, &t);
                let s: f64 = d.iter().map(|x| 1.0 / (1.0 + (x / d0) * (x / d0))).sum::<f64>() / n as f64;
                if s > best {
                    best = s;
                }
                if (s - last).abs() < 1e-9 {
                    break;
                }
                last = s;
                let next: Vec<usize> = (0..n).filter(|&i| d[i] < d0).collect();
                if next.len() < 3 || next == subset {
                    break;
                }
                subset = next;
            }
        }
    }
    best
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error, with `floor` guarding tiny denominators.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let axis = Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Random chain with ~5.9 Å steps and plausible three-atom residues.
pub fn random_structure<R: Rng + ?Sized>(rng: &mut R, n: usize) -> BackboneStructure {
    let mut gauss = || -> f64 { StandardNormal.sample(rng) };
    let mut x = Point::zeros();
    let mut residues = Vec::with_capacity(n);
    for i in 0..n {
        let step = Vector3::new(gauss(), gauss(), gauss()).normalize() * 5.9;
        if i > 0 {
            x += step;
        }
        let p = x + Vector3::new(gauss(), gauss(), gauss()).normalize() * 3.9;
        let nb = x + Vector3::new(gauss(), gauss(), gauss()).normalize() * 3.4;
        let base = Nucleotide::ALL[(gauss().abs() * 10.0) as usize % 4];
        residues.push(ResidueAtoms::new(base, p, x, nb));
    }
    BackboneStructure::new(residues, "A", "random").expect("finite")
}

/// Copy of `s` with i.i.d. Gaussian noise on every atom.
pub fn perturbed<R: Rng + ?Sized>(rng: &mut R, s: &BackboneStructure, sigma: f64) -> BackboneStructure {
    s.jittered(sigma, rng)
}

/// Embedding with Gaussian scalar channels and no vector channels.
pub fn random_embedding<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> ConditioningEmbedding {
    ConditioningEmbedding {
        scalar: (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect(),
        vector: vec![vec![]; n],
    }
}

pub fn random_sequence<R: Rng + ?Sized>(rng: &mut R, n: usize) -> RnaSequence {
    RnaSequence::new((0..n).map(|_| Nucleotide::ALL[rng.random_range(0..4)]).collect()).expect("non-empty")
}

fn random_target<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> RlTarget {
    let n = rng.random_range(4..=8);
    let structure = helix_fold(&HelixOracleParams::default(), &random_sequence(rng, n));
    RlTarget {
        id: "probe".into(),
        embedding: random_embedding(rng, n, dim),
        structure,
    }
}

fn relative_error_of<F: FnMut(&[f64]) -> f64>(analytic: &[f64], f: F, at: &[f64], h: f64) -> f64 {
    let numeric = finite_difference(f, at, h);
    max_relative_error(analytic, &numeric, 1e-2)
}

/// Worst relative error of the pre-training loss gradient on one random configuration.
pub fn pretrain_gradient_error<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let sched = NoiseSchedule::default();
    let dim = rng.random_range(1..=4);
    let spec = FeatureSpec::new(dim);
    let params = PolicyParams::init(spec, rng);
    let items: Vec<(Latent, ConditioningEmbedding)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let n = rng.random_range(3..=8);
            (random_sequence(rng, n).onehot(), random_embedding(rng, n, dim))
        })
        .collect();
    let batch: Vec<PretrainExample<'_>> = items.iter().map(|(x0, h)| PretrainExample { x0, h }).collect();
    let draws = draw_pretrain_noise(&batch, &sched, rng);
    let (_, analytic) = pretrain_loss_with(&params, &batch, &draws, &sched).expect("valid batch");
    relative_error_of(
        &analytic,
        |x| {
            let p = PolicyParams::from_flat(spec, x).expect("same size");
            pretrain_loss_with(&p, &batch, &draws, &sched).expect("valid batch").0
        },
        &params.to_flat(),
        1e-5,
    )
}

/// Worst relative error of the action log-density gradient at one random step.
pub fn log_prob_gradient_error<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let sched = NoiseSchedule::default();
    let dim = rng.random_range(1..=4);
    let spec = FeatureSpec::new(dim);
    let params = PolicyParams::init(spec, rng);
    let target = random_target(rng, dim);
    let sampler = SamplerConfig {
        n_steps: rng.random_range(2..=6),
        temperature: rng.random_range(0.1..1.0),
        sigma_min: DEFAULT_SIGMA_MIN,
    };
    let (_, traj) = sample_sequence(&params, &target.embedding, &sched, &sampler, rng).expect("sampling");
    let step = &traj.steps[rng.random_range(0..traj.steps.len())];
    let ctx = StepContext {
        h: &target.embedding,
        schedule: &sched,
        temperature: sampler.temperature,
        sigma_min: sampler.sigma_min,
    };
    let analytic = grad_log_prob(&params, step, &ctx).expect("stochastic step");
    relative_error_of(
        &analytic,
        |x| log_prob(&PolicyParams::from_flat(spec, x).expect("same size"), step, &ctx).expect("stochastic step"),
        &params.to_flat(),
        1e-5,
    )
}

/// Worst relative error of the clipped surrogate gradient on a random two-trajectory batch,
/// evaluated a small random distance away from the sampling policy.
pub fn objective_gradient_error<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let sched = NoiseSchedule::default();
    let dim = rng.random_range(1..=4);
    let spec = FeatureSpec::new(dim);
    let cfg = RlConfig {
        clip_eps: rng.random_range(0.1..0.6),
        ..RlConfig::default()
    };
    let targets = [random_target(rng, dim), random_target(rng, dim)];
    let old = PolicyParams::init(spec, rng);
    let batch: Vec<DenoisingTrajectory> = (0..2)
        .map(|m| {
            let sampler = SamplerConfig {
                n_steps: 3,
                temperature: cfg.temperature_set[rng.random_range(0..cfg.temperature_set.len())],
                sigma_min: cfg.sigma_min,
            };
            let (_, mut traj) = sample_sequence(&old, &targets[m].embedding, &sched, &sampler, rng).expect("sampling");
            traj.target_index = m;
            traj
        })
        .collect();
    let mut flat = old.to_flat();
    flat.iter_mut().for_each(|v| *v += 0.003 * Distribution::<f64>::sample(&StandardNormal, rng));
    let params = PolicyParams::from_flat(spec, &flat).expect("same size");
    let advs = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let (_, analytic) = clipped_objective_and_grad(&params, &batch, &advs, &targets, &cfg, &sched).expect("valid batch");
    relative_error_of(
        &analytic,
        |x| {
            let p = PolicyParams::from_flat(spec, x).expect("same size");
            clipped_objective_and_grad(&p, &batch, &advs, &targets, &cfg, &sched).expect("valid batch").0.objective
        },
        &flat,
        // The ratio exp(Δ log π) has large third derivatives at small ς; 1e-5 leaves O(h²) error near 5e-4.
        1e-6,
    )
}

/// Batch means `mu + sigma·z` over `n` batches and the moving-average baseline that tracks them.
pub fn scripted_baseline_stream<R: Rng + ?Sized>(rng: &mut R, n: usize, mu: f64, sigma: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let mut state = BaselineState::new(beta);
    let mut raw = Vec::with_capacity(n);
    let mut smoothed = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        let mean = mu + sigma * z;
        state = update_moving_baseline(&state, mean);
        raw.push(mean);
        smoothed.push(state.b);
    }
    (raw, smoothed)
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}
