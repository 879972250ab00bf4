//! Geometric k-NN graph over nucleotide centroids.
//!
//! Node features: 15 rotation-invariant scalars and 4 unit vectors per
//! nucleotide. Edge features: radial-basis distance encoding, sinusoidal
//! encoding of the sequence offset `j - i`, the raw distance and the unit
//! displacement vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::struct_io::{BackboneStructure, Point};

pub const DEFAULT_K: usize = 32;
pub const RBF_CENTERS: usize = 32;
pub const RBF_DMAX: f64 = 30.0;
pub const POSENC_DIM: usize = 32;
pub const NODE_SCALAR_DIM: usize = 15;
pub const NODE_VECTOR_DIM: usize = 4;
/// Training-time coordinate jitter (Å).
pub const TRAINING_JITTER: f64 = 0.1;

/// Edge feature widths. `Compact` carries only the computed channels,
/// `Padded` zero-fills them to 131 scalar and 3 vector channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLayout {
    #[default]
    Compact,
    Padded,
}

impl EdgeLayout {
    pub fn scalar_dim(self) -> usize {
        match self {
            EdgeLayout::Compact => RBF_CENTERS + POSENC_DIM + 1,
            EdgeLayout::Padded => 131,
        }
    }

    pub fn vector_dim(self) -> usize {
        match self {
            EdgeLayout::Compact => 1,
            EdgeLayout::Padded => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricGraph {
    pub n_nodes: usize,
    /// Per node, neighbour indices sorted by distance then index.
    pub neighbors: Vec<Vec<usize>>,
    pub node_scalar: Vec<Vec<f64>>,
    pub node_vector: Vec<Vec<Point>>,
    /// `edge_scalar[i][slot]` describes the edge from `i` to `neighbors[i][slot]`.
    pub edge_scalar: Vec<Vec<Vec<f64>>>,
    pub edge_vector: Vec<Vec<Vec<Point>>>,
    pub coords: Vec<Point>,
    pub layout: EdgeLayout,
}

impl GeometricGraph {
    /// Relabels nodes so that new node `a` is old node `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes;
        if perm.len() != n {
            return Err(Error::Shape(format!("permutation of length {} for {n} nodes", perm.len())));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Shape("not a permutation".into()));
            }
            inverse[old] = new;
        }
        Ok(Self {
            n_nodes: n,
            neighbors: perm
                .iter()
                .map(|&old| self.neighbors[old].iter().map(|&j| inverse[j]).collect())
                .collect(),
            node_scalar: perm.iter().map(|&o| self.node_scalar[o].clone()).collect(),
            node_vector: perm.iter().map(|&o| self.node_vector[o].clone()).collect(),
            edge_scalar: perm.iter().map(|&o| self.edge_scalar[o].clone()).collect(),
            edge_vector: perm.iter().map(|&o| self.edge_vector[o].clone()).collect(),
            coords: perm.iter().map(|&o| self.coords[o]).collect(),
            layout: self.layout,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Gaussian radial basis with centres evenly spaced on `[0, d_max]`, width equal to the spacing.
pub fn rbf_encode(d: f64, n_centers: usize, d_max: f64) -> Vec<f64> {
    if n_centers == 1 {
        return vec![(-(d * d)).exp()];
    }
    let spacing = d_max / (n_centers - 1) as f64;
    (0..n_centers)
        .map(|m| {
            let mu = m as f64 * spacing;
            (-((d - mu) / spacing).powi(2)).exp()
        })
        .collect()
}

/// Interleaved `(sin, cos)` of `offset / 10000^(2m/dim)`.
pub fn posenc(offset: i64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding dimension must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for m in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * m as f64) / dim as f64);
        let angle = offset as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

fn unit_or_zero(v: Point) -> Point {
    let n = v.norm();
    if n > 1e-12 {
        v / n
    } else {
        Point::zeros()
    }
}

fn cos_angle(a: Point, b: Point) -> f64 {
    let denom = a.norm() * b.norm();
    if denom > 1e-12 {
        (a.dot(&b) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Signed dihedral angle of the four points, as `(sin, cos)`.
fn dihedral(p0: Point, p1: Point, p2: Point, p3: Point) -> (f64, f64) {
    let b0 = p0 - p1;
    let b1 = p2 - p1;
    let b2 = p3 - p2;
    let b1n = unit_or_zero(b1);
    let v = b0 - b1n * b0.dot(&b1n);
    let w = b2 - b1n * b2.dot(&b1n);
    let x = v.dot(&w);
    let y = b1n.cross(&v).dot(&w);
    let r = (x * x + y * y).sqrt();
    if r > 1e-12 {
        (y / r, x / r)
    } else {
        (0.0, 0.0)
    }
}

fn node_features(s: &BackboneStructure) -> (Vec<Vec<f64>>, Vec<Vec<Point>>) {
    let n = s.len();
    let x = s.centroids();
    let mut scalars = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for (i, r) in s.residues.iter().enumerate() {
        let forward = if i + 1 < n { x[i + 1] - x[i] } else { Point::zeros() };
        let backward = if i > 0 { x[i - 1] - x[i] } else { Point::zeros() };
        let to_p = r.p - r.c4p;
        let to_n = r.n_glyco - r.c4p;

        let mut f = Vec::with_capacity(NODE_SCALAR_DIM);
        f.push(to_p.norm());
        f.push(to_n.norm());
        f.push((r.p - r.n_glyco).norm());
        f.push(cos_angle(to_p, to_n));
        f.push(cos_angle(r.c4p - r.p, r.n_glyco - r.p));
        f.push(cos_angle(r.p - r.n_glyco, r.c4p - r.n_glyco));
        f.push(backward.norm());
        f.push(forward.norm());
        let (s0, c0) = if i >= 2 && i + 1 < n {
            dihedral(x[i - 2], x[i - 1], x[i], x[i + 1])
        } else {
            (0.0, 0.0)
        };
        let (s1, c1) = if i >= 1 && i + 2 < n {
            dihedral(x[i - 1], x[i], x[i + 1], x[i + 2])
        } else {
            (0.0, 0.0)
        };
        f.extend([s0, c0, s1, c1]);
        f.extend([forward.norm(), backward.norm(), to_p.norm()]);
        debug_assert_eq!(f.len(), NODE_SCALAR_DIM);
        scalars.push(f);
        vectors.push(vec![
            unit_or_zero(forward),
            unit_or_zero(backward),
            unit_or_zero(to_p),
            unit_or_zero(to_n),
        ]);
    }
    (scalars, vectors)
}

/// k nearest neighbours of every node; ties broken by index.
fn knn(coords: &[Point], k: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    let k = k.min(n - 1);
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((coords[j] - coords[i]).norm(), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Builds the featurized k-NN graph of a structure.
pub fn build_graph(s: &BackboneStructure, k: usize) -> Result<GeometricGraph> {
    build_graph_with(s, k, EdgeLayout::Compact)
}

pub fn build_graph_with(s: &BackboneStructure, k: usize, layout: EdgeLayout) -> Result<GeometricGraph> {
    let n = s.len();
    if n < 2 {
        return Err(Error::Graph(format!("need at least 2 residues, got {n}")));
    }
    if k == 0 {
        return Err(Error::Graph("k must be positive".into()));
    }
    let coords = s.centroids();
    let neighbors = knn(&coords, k);
    let (node_scalar, node_vector) = node_features(s);

    let mut edge_scalar = Vec::with_capacity(n);
    let mut edge_vector = Vec::with_capacity(n);
    for (i, nbrs) in neighbors.iter().enumerate() {
        let mut es = Vec::with_capacity(nbrs.len());
        let mut ev = Vec::with_capacity(nbrs.len());
        for &j in nbrs {
            let disp = coords[j] - coords[i];
            let d = disp.norm();
            let mut f = rbf_encode(d, RBF_CENTERS, RBF_DMAX);
            f.extend(posenc(j as i64 - i as i64, POSENC_DIM)?);
            f.push(d);
            f.resize(layout.scalar_dim(), 0.0);
            let mut v = vec![unit_or_zero(disp)];
            v.resize(layout.vector_dim(), Point::zeros());
            es.push(f);
            ev.push(v);
        }
        edge_scalar.push(es);
        edge_vector.push(ev);
    }

    Ok(GeometricGraph {
        n_nodes: n,
        neighbors,
        node_scalar,
        node_vector,
        edge_scalar,
        edge_vector,
        coords,
        layout,
    })
}

/// Graph of a copy of `s` with [`TRAINING_JITTER`] Gaussian noise on every atom.
pub fn build_graph_training<R: rand::Rng + ?Sized>(
    s: &BackboneStructure,
    k: usize,
    layout: EdgeLayout,
    rng: &mut R,
) -> Result<GeometricGraph> {
    build_graph_with(&s.jittered(TRAINING_JITTER, rng), k, layout)
}
