use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::{ParameterStore, Tensor};
use crate::{Error, Result};

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Affine map `x W + b` with `W` stored `in×out` and `b` stored `1×out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in ±1/√in.
    pub fn init(store: &mut ParameterStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let layer = Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        };
        let w = Tensor::from_vec(in_dim, out_dim, uniform(rng, in_dim * out_dim, bound)).expect("linear shape");
        let b = Tensor::from_vec(1, out_dim, uniform(rng, out_dim, bound)).expect("bias shape");
        store.insert(&layer.weight, w);
        store.insert(&layer.bias, b);
        layer
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Sets weight and bias to zero, e.g. for a head that must start neutral.
    pub fn zero(&self, store: &mut ParameterStore) {
        for name in [&self.weight, &self.bias] {
            if let Some(t) = store.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Stack of linear layers with GELU between them and none after the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn init(store: &mut ParameterStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// Scaled dot-product attention with `heads` heads over `dim` features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(store: &mut ParameterStore, prefix: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::HeadSplit { dim, heads });
        }
        Ok(Self {
            query: Linear::init(store, &format!("{prefix}.q"), dim, dim, rng),
            key: Linear::init(store, &format!("{prefix}.k"), dim, dim, rng),
            value: Linear::init(store, &format!("{prefix}.v"), dim, dim, rng),
            output: Linear::init(store, &format!("{prefix}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Queries from `q_in (n×d)`, keys from `k_in (m×d)`, values from `v_in (m×d)`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::HeadSplit {
                dim: self.dim,
                heads: self.heads,
            });
        }
        let q = self.query.forward(g, store, q_in)?;
        let k = self.key.forward(g, store, k_in)?;
        let v = self.value.forward(g, store, v_in)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, (h + 1) * hd);
            let kh = g.slice_cols(k, h * hd, (h + 1) * hd);
            let vh = g.slice_cols(v, h * hd, (h + 1) * hd);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.output.forward(g, store, cat)
    }

    pub fn self_attention(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        self.forward(g, store, x, x, x)
    }
}
