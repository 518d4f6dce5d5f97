//! Spline-edged linear layer: every input→output edge carries its own
//! learnable activation `φ(x) = w_base·silu(x) + Σ_c coeff_c·B_c(x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::{ParameterStore, Tensor};
use crate::Result;

/// Uniform knot grid on `[lo, hi]` with `intervals` cells, extended by
/// `order` knots on each side. Inputs outside the range are clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub order: usize,
}

impl Default for SplineGrid {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 1.0,
            intervals: 5,
            order: 3,
        }
    }
}

impl SplineGrid {
    pub fn basis_count(&self) -> usize {
        self.intervals + self.order
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Full extended knot vector, `intervals + 2·order + 1` entries.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.intervals + 2 * self.order)
            .map(|i| self.lo + (i as f64 - self.order as f64) * h)
            .collect()
    }

    /// The `intervals + 1` knots spanning `[lo, hi]`.
    pub fn interior_knots(&self) -> Vec<f64> {
        let k = self.knots();
        k[self.order..=self.order + self.intervals].to_vec()
    }

    /// Basis values and their derivatives at `x` (derivative zero where clamped).
    pub fn eval_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let clamped = x < self.lo || x > self.hi;
        let x = x.clamp(self.lo, self.hi);
        let t = self.knots();
        let k = self.order;
        let nb = self.basis_count();
        // Degree 0, with the last in-range cell closed on the right so x = hi
        // takes the left limit.
        let last = self.order + self.intervals - 1;
        let mut b: Vec<f64> = (0..t.len() - 1)
            .map(|j| {
                let hit = if x >= self.hi {
                    j == last
                } else {
                    t[j] <= x && x < t[j + 1]
                };
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut lower = b.clone();
        for d in 1..=k {
            lower = b.clone();
            let mut next = vec![0.0; b.len() - 1];
            for (i, nv) in next.iter_mut().enumerate() {
                let left = (x - t[i]) / (t[i + d] - t[i]) * b[i];
                let right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * b[i + 1];
                *nv = left + right;
            }
            b = next;
        }
        debug_assert_eq!(b.len(), nb);
        let mut der = vec![0.0; nb];
        if k > 0 && !clamped {
            let kf = k as f64;
            for (i, dv) in der.iter_mut().enumerate() {
                let a = kf / (t[i + k] - t[i]) * lower[i];
                let c = kf / (t[i + k + 1] - t[i + 1]) * lower[i + 1];
                *dv = a - c;
            }
        }
        (b, der)
    }
}

/// Parameter names and dimensions of one spline-edged layer. Parameters:
/// `base_weight` is `out×in`; `spline_coeffs` is `out×(in·nb)`, i.e. the
/// `out×in×nb` coefficient array flattened along its last two axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KanLinear {
    pub base_weight: String,
    pub spline_coeffs: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
}

impl KanLinear {
    /// Registers parameters: base weights uniform in ±1/√in, spline
    /// coefficients zero, so a fresh layer is a silu-warped linear map.
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let base: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let layer = Self {
            base_weight: format!("{prefix}.base_weight"),
            spline_coeffs: format!("{prefix}.spline_coeffs"),
            in_dim,
            out_dim,
            grid,
        };
        store.insert(
            &layer.base_weight,
            Tensor::from_vec(out_dim, in_dim, base).expect("kan base shape"),
        );
        store.insert(
            &layer.spline_coeffs,
            Tensor::zeros(out_dim, in_dim * grid.basis_count()),
        );
        layer
    }

    /// `x (n×in) → n×out`, `out_j = Σ_i φ_{j,i}(x_i)`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let base = g.param(store, &self.base_weight)?;
        let coeffs = g.param(store, &self.spline_coeffs)?;
        let act = g.silu(x);
        let base_t = g.transpose(base);
        let linear = g.matmul(act, base_t)?;
        let basis = g.spline_basis(x, &self.grid);
        let coeffs_t = g.transpose(coeffs);
        let spline = g.matmul(basis, coeffs_t)?;
        g.add(linear, spline)
    }
}

/// Stack of spline-edged layers applied in sequence, `Φ_{n−1} ∘ … ∘ Φ_0`.
pub fn kan_forward(layers: &[KanLinear], g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        h = layer.forward(g, store, h)?;
    }
    Ok(h)
}
