//! Central finite-difference gradient checking.
//!
//! Only forward values are used here, so the check is independent of the
//! adjoint rules it validates.

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries smaller than this in both gradients compare absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Central-difference gradient of a scalar function of several tensors.
pub fn numerical_gradient(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    h: f64,
) -> Result<Tensor> {
    let mut probe = inputs.to_vec();
    let mut out = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let orig = inputs[which].data()[i];
        probe[which].data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe[which].data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe[which].data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Builds a scalar from `inputs` (bound as variables) and compares the
/// reverse-mode gradient against central differences.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let analytic = g.backward(root, &vars)?.into_tensors();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_relative_error = 0.0;
    let mut worst = (0, 0);
    for (k, a) in analytic.iter().enumerate() {
        let n = numerical_gradient(&eval, inputs, k, h)?;
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(x, y);
            if e > max_relative_error {
                max_relative_error = e;
                worst = (k, i);
            }
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_relative_error,
        worst,
        analytic,
        numeric,
    })
}
