//! Central finite-difference gradient checking for graph-built functions.

use super::{Graph, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: ‖analytic − numeric‖₂ / max(‖analytic‖₂ + ‖numeric‖₂, 1e-6).
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out);
    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        let mut numeric = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        let mut work = inputs.to_vec();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // Absolute tolerance for gradients that vanish identically.
        let scale = (analytic.norm() + numeric.norm()).max(1e-6);
        relative_errors.push(diff / scale);
    }
    Ok(GradCheck { relative_errors })
}
