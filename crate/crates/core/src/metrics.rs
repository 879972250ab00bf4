//! Rigid superposition and structural similarity scores.
//!
//! All scores use one representative point per residue, the C4' atom.
//! GDT_TS and TM-score are maximised over superpositions seeded from
//! contiguous fragments and refined on their inlier sets. Chains of at most
//! [`EXACT_SEARCH_MAX_LEN`] residues are searched exhaustively instead.

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::struct_io::{BackboneStructure, Point};

/// Distance cutoffs (Å) averaged by GDT_TS.
pub const GDT_CUTOFFS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Fragment lengths used to seed the superposition searches; `usize::MAX` stands for the whole chain.
const SEED_LENGTHS: [usize; 4] = [3, 5, 7, usize::MAX];
const GDT_MAX_ITERS: usize = 20;
const TM_MAX_ITERS: usize = 100;
const TM_TOL: f64 = 1e-9;
/// Chains up to this length are searched exhaustively: GDT over fits to
/// every residue subset, TM-score from contiguous fragments of every length.
pub const EXACT_SEARCH_MAX_LEN: usize = 10;
/// Lower bound applied to the TM-score length scale.
pub const D0_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Superposition {
    pub rotation: Matrix3<f64>,
    pub translation: Point,
    pub rmsd: f64,
}

impl Superposition {
    pub fn apply(&self, x: &Point) -> Point {
        self.rotation * x + self.translation
    }
}

/// Least-squares rigid motion mapping `p` onto `q` (`q ≈ R p + t`).
pub fn kabsch_superpose(p: &[Point], q: &[Point]) -> Result<Superposition> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("point sets differ in length: {} vs {}", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::Shape("superposition needs at least one point pair".into()));
    }
    let idx: Vec<usize> = (0..p.len()).collect();
    let (rotation, translation) = fit_subset(p, q, &idx);
    let rmsd = rmsd_after(p, q, &rotation, &translation);
    Ok(Superposition {
        rotation,
        translation,
        rmsd,
    })
}

fn rmsd_after(p: &[Point], q: &[Point], rotation: &Matrix3<f64>, translation: &Point) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (rotation * a + translation - b).norm_squared())
        .sum();
    (sum / p.len() as f64).sqrt()
}

/// Kabsch fit restricted to `idx`; returns (R, t) with `q ≈ R p + t`.
fn fit_subset(p: &[Point], q: &[Point], idx: &[usize]) -> (Matrix3<f64>, Point) {
    let n = idx.len() as f64;
    let mut cp = Point::zeros();
    let mut cq = Point::zeros();
    for &i in idx {
        cp += p[i];
        cq += q[i];
    }
    cp /= n;
    cq /= n;
    let mut h = Matrix3::zeros();
    for &i in idx {
        h += (p[i] - cp) * (q[i] - cq).transpose();
    }
    let rotation = proper_rotation(&h);
    let translation = cq - rotation * cp;
    (rotation, translation)
}

/// Rotation R maximising tr(R H) for the covariance H = Σ p qᵀ, restricted to det R = +1.
fn proper_rotation(h: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*h, true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v requested").transpose();
    let s = svd.singular_values;
    let mut smallest = 0;
    for k in 1..3 {
        if s[k] < s[smallest] {
            smallest = k;
        }
    }
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(smallest, smallest)] = -1.0;
    }
    v * d * u.transpose()
}

fn check_pair(a: &BackboneStructure, b: &BackboneStructure, min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("residue counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::Shape(format!("need at least {min} residues, got {}", a.len())));
    }
    Ok(())
}

/// C4' RMSD, either after optimal superposition or in the given frames.
pub fn rmsd(a: &BackboneStructure, b: &BackboneStructure, superpose: bool) -> Result<f64> {
    check_pair(a, b, 1)?;
    let (p, q) = (a.c4p_trace(), b.c4p_trace());
    if superpose {
        Ok(kabsch_superpose(&p, &q)?.rmsd)
    } else {
        Ok(rmsd_after(&p, &q, &Matrix3::identity(), &Point::zeros()))
    }
}

/// Contiguous fragments used as superposition seeds, in a fixed order.
fn seed_fragments(n: usize) -> Vec<Vec<usize>> {
    let mut lengths: Vec<usize> = if n <= EXACT_SEARCH_MAX_LEN {
        (3..=n).collect()
    } else {
        SEED_LENGTHS.iter().map(|&l| l.min(n)).filter(|&l| l >= 3).collect()
    };
    lengths.dedup();
    let mut seeds = Vec::new();
    for len in lengths {
        for start in 0..=n - len {
            seeds.push((start..start + len).collect());
        }
    }
    seeds
}

fn distances(p: &[Point], q: &[Point], rotation: &Matrix3<f64>, translation: &Point, out: &mut Vec<f64>) {
    out.clear();
    out.extend(p.iter().zip(q).map(|(a, b)| (rotation * a + translation - b).norm()));
}

/// Largest number of residues within `cutoff` over the seeded superposition search.
fn max_within(p: &[Point], q: &[Point], cutoff: f64, seeds: &[Vec<usize>]) -> usize {
    let mut best = 0;
    let mut d = Vec::with_capacity(p.len());
    for seed in seeds {
        let mut subset = seed.clone();
        for _ in 0..GDT_MAX_ITERS {
            let (r, t) = fit_subset(p, q, &subset);
            distances(p, q, &r, &t, &mut d);
            let inliers: Vec<usize> = (0..p.len()).filter(|&i| d[i] <= cutoff).collect();
            best = best.max(inliers.len());
            if inliers == subset || inliers.len() < 3 {
                break;
            }
            subset = inliers;
        }
        if best == p.len() {
            break;
        }
    }
    best
}

/// Per-cutoff maxima over fits to every subset of at least three residues.
fn max_within_exhaustive(p: &[Point], q: &[Point]) -> [usize; 4] {
    let n = p.len();
    let mut best = [0usize; 4];
    let mut d = Vec::with_capacity(n);
    let mut subset = Vec::with_capacity(n);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() < 3 {
            continue;
        }
        subset.clear();
        subset.extend((0..n).filter(|i| mask >> i & 1 == 1));
        let (r, t) = fit_subset(p, q, &subset);
        distances(p, q, &r, &t, &mut d);
        for (k, cutoff) in GDT_CUTOFFS.iter().enumerate() {
            best[k] = best[k].max(d.iter().filter(|&&x| x <= *cutoff).count());
        }
        if best[0] == n {
            break;
        }
    }
    best
}

/// Residue counts within each of the GDT cutoffs.
pub fn gdt_counts(a: &BackboneStructure, b: &BackboneStructure) -> Result<[usize; 4]> {
    check_pair(a, b, 3)?;
    let (p, q) = (a.c4p_trace(), b.c4p_trace());
    if p.len() <= EXACT_SEARCH_MAX_LEN {
        return Ok(max_within_exhaustive(&p, &q));
    }
    let seeds = seed_fragments(p.len());
    Ok(GDT_CUTOFFS.map(|c| max_within(&p, &q, c, &seeds)))
}

/// GDT_TS: mean over the 1, 2, 4, 8 Å cutoffs of the superimposable fraction.
pub fn gdt_ts(a: &BackboneStructure, b: &BackboneStructure) -> Result<f64> {
    let counts = gdt_counts(a, b)?;
    let total: usize = counts.iter().sum();
    Ok(total as f64 / (4 * a.len()) as f64)
}

/// TM-score length scale, clamped below at [`D0_MIN`].
pub fn d0(length: usize) -> f64 {
    let raw = 1.24 * (length as f64 - 15.0).cbrt() - 1.8;
    raw.max(D0_MIN)
}

/// TM-score normalised by the length of `b`.
pub fn tm_score(a: &BackboneStructure, b: &BackboneStructure) -> Result<f64> {
    check_pair(a, b, 3)?;
    let (p, q) = (a.c4p_trace(), b.c4p_trace());
    let n = p.len();
    let scale = d0(b.len());
    let score = |d: &[f64]| d.iter().map(|x| 1.0 / (1.0 + (x / scale).powi(2))).sum::<f64>() / n as f64;

    let mut best = 0.0f64;
    let mut d = Vec::with_capacity(n);
    for seed in seed_fragments(n) {
        let mut subset = seed;
        let mut previous = f64::NEG_INFINITY;
        for _ in 0..TM_MAX_ITERS {
            let (r, t) = fit_subset(&p, &q, &subset);
            distances(&p, &q, &r, &t, &mut d);
            let s = score(&d);
            best = best.max(s);
            if (s - previous).abs() < TM_TOL {
                break;
            }
            previous = s;
            let next: Vec<usize> = (0..n).filter(|&i| d[i] < scale).collect();
            if next.len() < 3 || next == subset {
                break;
            }
            subset = next;
        }
    }
    Ok(best.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gdt_ts: f64,
    pub tm_score: f64,
    pub rmsd: f64,
    #[serde(rename = "n")]
    pub n_residues: usize,
}

impl MetricsReport {
    /// `{"gdt_ts":…,"tm_score":…,"rmsd":…,"n":…}` with six decimals.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"gdt_ts\":{:.6},\"tm_score\":{:.6},\"rmsd\":{:.6},\"n\":{}}}",
            self.gdt_ts, self.tm_score, self.rmsd, self.n_residues
        )
    }
}

/// All three scores of `a` (e.g. a predicted fold) against the reference `b`.
pub fn metrics_report(a: &BackboneStructure, b: &BackboneStructure) -> Result<MetricsReport> {
    Ok(MetricsReport {
        gdt_ts: gdt_ts(a, b)?,
        tm_score: tm_score(a, b)?,
        rmsd: rmsd(a, b, true)?,
        n_residues: b.len(),
    })
}
