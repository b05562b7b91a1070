//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than relatively.
const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Fixed projection used to reduce a non-scalar output to a scalar.
fn projection(n: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|i| (1.7 * i as f64 + 0.3).sin() + 0.1).collect())
}

fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 {
        return g.reshape(out, &[]);
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(projection(n).reshape(&shape)?);
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

fn evaluate<F>(op: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let s = reduce(&mut g, out)?;
    Ok(g.value(s).item())
}

/// Analytic gradients of the (reduced) output of `op` with respect to each input.
pub fn analytic_gradients<F>(op: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let s = reduce(&mut g, out)?;
    let grads = g.backward(s)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect())
}

/// Compares `analytic` against central differences of the scalar function `f`.
pub fn compare_with_finite_differences<F>(
    f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..inputs[idx].numel() {
            let x0 = inputs[idx].data()[e];
            work[idx].data_mut()[e] = x0 + FD_STEP;
            let fp = f(&work)?;
            work[idx].data_mut()[e] = x0 - FD_STEP;
            let fm = f(&work)?;
            work[idx].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of input {idx} element {e}"
                )));
            }
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

/// Checks the backward pass of `op` at `inputs`. Non-scalar outputs are
/// reduced by a fixed weighted sum so that normalizing ops (whose plain sum
/// is constant) still receive a non-trivial upstream gradient.
pub fn check_gradients<F>(op: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient check input {i}")));
    }
    let analytic = analytic_gradients(&op, inputs)?;
    compare_with_finite_differences(|xs| evaluate(&op, xs), inputs, &analytic, tolerance)
}
