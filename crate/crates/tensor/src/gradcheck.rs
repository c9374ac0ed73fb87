//! Central finite-difference gradient verification.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub index: usize,
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, or 0 when both vanish.
    pub rel_error: f64,
    pub max_abs_diff: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f32,
    pub tol: f64,
    pub max_rel_error: f64,
    pub per_param: Vec<ParamGradError>,
    pub passed: bool,
}

/// Norm below which a gradient tensor counts as identically zero.
const VANISHING_NORM: f64 = 1e-7;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar. Relative error is measured tensor-wise on the full
/// gradient vector; the report passes iff the worst tensor is below `tol`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(f, params, eps, tol, None)
}

/// Like [`grad_check`], but differences at most `per_tensor` coordinates of
/// each tensor, drawn without replacement from `rng`. Errors are normwise
/// over the drawn coordinates only.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f32,
    tol: f64,
    per_tensor: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if per_tensor == 0 {
        return Err(TensorError::Contract("grad_check_sampled needs per_tensor > 0".into()));
    }
    check(f, params, eps, tol, Some((per_tensor, rng)))
}

fn check<F>(f: F, params: &[Tensor], eps: f32, tol: f64, mut sample: Option<(usize, &mut Rng)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(TensorError::Contract(format!(
            "grad_check eps {eps} outside [1e-4, 1e-2]"
        )));
    }

    let evaluate = |values: &[Tensor]| -> Result<f32> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item()?;
    g.backward(loss)?;

    let again = evaluate(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Reproducibility(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some((k, rng)) = sample.as_mut() {
            if *k < n {
                rng.shuffle(&mut coords);
                coords.truncate(*k);
                coords.sort_unstable();
            }
        }
        let analytic: Vec<f64> = match g.grad(*var) {
            Some(t) => coords.iter().map(|&e| f64::from(t.data()[e])).collect(),
            None => vec![0.0; coords.len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for &e in &coords {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = evaluate(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = evaluate(&work)?;
            work[pi].data_mut()[e] = orig;
            // Use the step actually representable in f32.
            let h = f64::from(orig + eps) - f64::from(orig - eps);
            numeric.push((f64::from(plus) - f64::from(minus)) / h);
        }
        per_param.push(compare(pi, &analytic, &numeric));
    }

    let max_rel_error = per_param.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        tol,
        max_rel_error,
        passed: max_rel_error < tol,
        per_param,
    })
}

fn compare(index: usize, analytic: &[f64], numeric: &[f64]) -> ParamGradError {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let (an, nn, dn) = (norm(analytic), norm(numeric), norm(&diff));
    let rel_error = if an + nn < VANISHING_NORM { 0.0 } else { dn / (an + nn) };
    ParamGradError {
        index,
        rel_error,
        max_abs_diff: diff.iter().map(|d| d.abs()).fold(0.0, f64::max),
        analytic_norm: an,
        numeric_norm: nn,
    }
}
