//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error used by the input-space checks: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    floored_relative_error(analytic, numeric, 1e-8)
}

/// Denominator floor of the parameter-space check. A whole-network loss of
/// order one carries round-off near 1e-14, i.e. about 5e-10 in a central
/// difference at `eps = 1e-5`; a derivative must exceed noise / 1e-4 ≈ 5e-6
/// before a 1e-4 relative comparison means anything. Smaller derivatives are
/// compared absolutely against `1e-4 · floor`.
pub const PARAM_CHECK_FLOOR: f64 = 1e-5;

pub fn floored_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between the reverse-mode gradient of the scalar
/// function `f` at `x` and its central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_where(f, x, eps, |_, _| true)
}

/// Like [`grad_check`], but only coordinates accepted by `include(index, value)`
/// are compared. Used to keep check points away from non-differentiable kinks.
pub fn grad_check_where<F, P>(f: F, x: &Tensor, eps: f64, include: P) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
    P: Fn(usize, f64) -> bool,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t, false);
        let y = f(&mut g, v)?;
        scalar(&g, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        if !include(i, x.data()[i]) {
            continue;
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn scalar(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::shape(format!("grad check needs a scalar output, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Outcome of a parameter-space gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates_checked: usize,
    /// Coordinates whose finite-difference stencil crossed a ReLU kink.
    pub coordinates_skipped: usize,
}

/// Gradient check over every trainable tensor of `store`.
///
/// With `per_tensor = Some(k)`, at most `k` coordinates are drawn at random
/// from each tensor (every tensor is still visited); `None` checks them all.
/// A coordinate is skipped when either stencil point changes the sign pattern
/// of any ReLU input, since the central difference is then not a derivative.
pub fn grad_check_params<F, R>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    per_tensor: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    store.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    g.backward(y)?;
    store.accumulate_grads(&g);
    let signature = g.relu_signature();

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates_checked: 0,
        coordinates_skipped: 0,
    };
    for id in ids {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < numel => sample(rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for c in coords {
            let original = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = original + eps;
            let (plus, sig_plus) = eval_store(&f, store)?;
            store.value_mut(id).data_mut()[c] = original - eps;
            let (minus, sig_minus) = eval_store(&f, store)?;
            store.value_mut(id).data_mut()[c] = original;
            if sig_plus != signature || sig_minus != signature {
                report.coordinates_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = floored_relative_error(store.grad(id).data()[c], numeric, PARAM_CHECK_FLOOR);
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
                report.worst_values = (store.grad(id).data()[c], numeric);
            }
        }
    }
    Ok(report)
}

fn eval_store<F>(f: &F, store: &ParamStore) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    Ok((scalar(&g, y)?, g.relu_signature()))
}
