//! Equivariant message-passing encoder producing per-nucleotide conditioning.
//!
//! Every layer works on (scalar, vector) channel pairs. Vector channels are
//! only ever mixed linearly across channels and rescaled by gates computed
//! from scalars, and scalars only see vectors through their norms, so the
//! scalar output is invariant and the vector output rotates with the input.
//! Parameters are drawn once from a seeded generator and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{build_graph_with, EdgeLayout, GeometricGraph, NODE_SCALAR_DIM, NODE_VECTOR_DIM};
use crate::struct_io::{BackboneStructure, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub node_scalar: usize,
    pub node_vector: usize,
    pub edge_scalar: usize,
    pub edge_vector: usize,
    pub k: usize,
    pub edge_layout: EdgeLayout,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            node_scalar: 256,
            node_vector: 24,
            edge_scalar: 128,
            edge_vector: 4,
            k: 32,
            edge_layout: EdgeLayout::Compact,
            seed: 17,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.node_scalar, self.node_vector, self.edge_scalar, self.edge_vector, self.k];
        if dims.contains(&0) {
            return Err(Error::Config("encoder dimensions and k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningEmbedding {
    /// N × node_scalar, rotation invariant.
    pub scalar: Vec<Vec<f64>>,
    /// N × node_vector, rotation equivariant.
    pub vector: Vec<Vec<Point>>,
}

impl ConditioningEmbedding {
    pub fn len(&self) -> usize {
        self.scalar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scalar.is_empty()
    }

    pub fn scalar_dim(&self) -> usize {
        self.scalar.first().map_or(0, Vec::len)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
struct Dense {
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (cols.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self { cols, data }
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// Linear combination of vector channels: out[r] = Σ_c W[r,c] v[c].
    fn mix(&self, v: &[Point]) -> Vec<Point> {
        debug_assert_eq!(v.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).fold(Point::zeros(), |acc, (w, x)| acc + x * *w))
            .collect()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Geometric vector perceptron: (s, V) -> (s', V').
#[derive(Debug, Clone)]
struct Gvp {
    w_hidden: Dense,
    w_scalar: Dense,
    b_scalar: Vec<f64>,
    w_vector: Dense,
    w_gate: Dense,
    b_gate: Vec<f64>,
    activate: bool,
}

impl Gvp {
    fn new(si: usize, vi: usize, so: usize, vo: usize, activate: bool, rng: &mut ChaCha8Rng) -> Self {
        let h = vi.max(vo);
        Self {
            w_hidden: Dense::random(h, vi, rng),
            w_scalar: Dense::random(so, si + h, rng),
            b_scalar: vec![0.0; so],
            w_vector: Dense::random(vo, h, rng),
            w_gate: Dense::random(vo, so, rng),
            b_gate: vec![0.0; vo],
            activate,
        }
    }

    fn forward(&self, s: &[f64], v: &[Point]) -> (Vec<f64>, Vec<Point>) {
        let vh = self.w_hidden.mix(v);
        let mut input = Vec::with_capacity(s.len() + vh.len());
        input.extend_from_slice(s);
        input.extend(vh.iter().map(|x| x.norm()));
        let mut s_out = self.w_scalar.matvec(&input);
        for (x, b) in s_out.iter_mut().zip(&self.b_scalar) {
            *x += b;
            if self.activate {
                *x = silu(*x);
            }
        }
        let gates = self.w_gate.matvec(&s_out);
        let v_out = self
            .w_vector
            .mix(&vh)
            .into_iter()
            .zip(gates.iter().zip(&self.b_gate))
            .map(|(x, (g, b))| x * sigmoid(g + b))
            .collect();
        (s_out, v_out)
    }
}

/// Zero-mean unit-variance scalars; vectors divided by their RMS channel norm.
fn normalize(s: &mut [f64], v: &mut [Point]) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    for x in s.iter_mut() {
        *x = (*x - mean) * inv;
    }
    if !v.is_empty() {
        let ms = v.iter().map(|x| x.norm_squared()).sum::<f64>() / v.len() as f64;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        for x in v.iter_mut() {
            *x *= inv;
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    message: Gvp,
    update: Gvp,
}

/// Frozen, seeded encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    node_in: Gvp,
    edge_in: Gvp,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (hs, hv, es, ev) = (config.node_scalar, config.node_vector, config.edge_scalar, config.edge_vector);
        let layout = config.edge_layout;
        let node_in = Gvp::new(NODE_SCALAR_DIM, NODE_VECTOR_DIM, hs, hv, false, &mut rng);
        let edge_in = Gvp::new(layout.scalar_dim(), layout.vector_dim(), es, ev, false, &mut rng);
        let layers = (0..config.layers)
            .map(|_| Layer {
                message: Gvp::new(2 * hs + es, 2 * hv + ev, hs, hv, true, &mut rng),
                update: Gvp::new(2 * hs, 2 * hv, hs, hv, true, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            node_in,
            edge_in,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn scalar_dim(&self) -> usize {
        self.config.node_scalar
    }

    /// Featurizes and encodes a structure.
    pub fn encode_structure(&self, s: &BackboneStructure) -> Result<ConditioningEmbedding> {
        let g = build_graph_with(s, self.config.k, self.config.edge_layout)?;
        self.encode(&g)
    }

    /// Runs the embedding layers and all message-passing rounds over `g`.
    pub fn encode(&self, g: &GeometricGraph) -> Result<ConditioningEmbedding> {
        if g.layout != self.config.edge_layout {
            return Err(Error::Shape(format!(
                "graph edge layout {:?} does not match encoder layout {:?}",
                g.layout, self.config.edge_layout
            )));
        }
        let n = g.n_nodes;
        let mut s = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let (mut si, mut vi) = self.node_in.forward(&g.node_scalar[i], &g.node_vector[i]);
            normalize(&mut si, &mut vi);
            s.push(si);
            v.push(vi);
        }
        let edges: Vec<Vec<(Vec<f64>, Vec<Point>)>> = (0..n)
            .map(|i| {
                (0..g.neighbors[i].len())
                    .map(|slot| self.edge_in.forward(&g.edge_scalar[i][slot], &g.edge_vector[i][slot]))
                    .collect()
            })
            .collect();

        let (hs, hv) = (self.config.node_scalar, self.config.node_vector);
        for layer in &self.layers {
            let mut next_s = Vec::with_capacity(n);
            let mut next_v = Vec::with_capacity(n);
            for i in 0..n {
                let mut agg_s = vec![0.0; hs];
                let mut agg_v = vec![Point::zeros(); hv];
                let nbrs = &g.neighbors[i];
                for (slot, &j) in nbrs.iter().enumerate() {
                    let (es, ev) = &edges[i][slot];
                    let ms_in: Vec<f64> = s[i].iter().chain(&s[j]).chain(es).copied().collect();
                    let mv_in: Vec<Point> = v[i].iter().chain(&v[j]).chain(ev).copied().collect();
                    let (ms, mv) = layer.message.forward(&ms_in, &mv_in);
                    for (a, b) in agg_s.iter_mut().zip(ms) {
                        *a += b;
                    }
                    for (a, b) in agg_v.iter_mut().zip(mv) {
                        *a += b;
                    }
                }
                let denom = nbrs.len().max(1) as f64;
                agg_s.iter_mut().for_each(|x| *x /= denom);
                agg_v.iter_mut().for_each(|x| *x /= denom);

                let us_in: Vec<f64> = s[i].iter().chain(&agg_s).copied().collect();
                let uv_in: Vec<Point> = v[i].iter().chain(&agg_v).copied().collect();
                let (ds, dv) = layer.update.forward(&us_in, &uv_in);
                let mut si: Vec<f64> = s[i].iter().zip(ds).map(|(a, b)| a + b).collect();
                let mut vi: Vec<Point> = v[i].iter().zip(dv).map(|(a, b)| a + b).collect();
                normalize(&mut si, &mut vi);
                next_s.push(si);
                next_v.push(vi);
            }
            s = next_s;
            v = next_v;
        }
        Ok(ConditioningEmbedding { scalar: s, vector: v })
    }
}
