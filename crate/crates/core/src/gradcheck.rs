//! Central finite-difference oracle for graph gradients.

use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Coordinates smaller than this fraction of the largest gradient entry are
/// compared against that fraction instead, since their finite differences
/// are dominated by rounding.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
    /// with `floor = max(1e-8, SCALE_FLOOR · max |analytic|)`.
    pub max_rel_error: f64,
    /// [`Graph::kink_margin`] at the unperturbed point.
    pub kink_margin: f64,
}

/// Checks a scalar-valued builder `f` at the single input `x0`.
pub fn gradient_check<F>(f: F, x0: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let report = gradient_check_many(
        |g, vars| f(g, vars[0]),
        core::slice::from_ref(x0),
        h,
    )?;
    Ok(report.max_rel_error)
}

/// Checks a builder taking several leaves, perturbing every coordinate of
/// every leaf in turn. The numeric gradient is the Richardson combination
/// `(4·D(h/2) − D(h)) / 3` of two central differences.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let kink_margin = g.kink_margin();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; t.len()])
        })
        .collect();

    let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (SCALE_FLOOR * scale).max(1e-8);
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error: f64 = 0.0;
    for (leaf, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[leaf].data()[i];
            let mut central = |step: f64| -> Result<f64, TensorError> {
                probe[leaf].data_mut()[i] = orig + step;
                let plus = eval(&probe)?;
                probe[leaf].data_mut()[i] = orig - step;
                let minus = eval(&probe)?;
                probe[leaf].data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let (coarse, fine) = (central(h)?, central(h / 2.0)?);
            let numeric = (4.0 * fine - coarse) / 3.0;
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheck {
        max_rel_error,
        kink_margin,
    })
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64, TensorError> {
    g.value(v)
        .item()
        .ok_or_else(|| TensorError::NonScalarRoot(g.shape(v).to_vec()))
}
