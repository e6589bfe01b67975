//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Largest relative discrepancy between autodiff and central differences.
///
/// `f` builds a scalar loss on a fresh tape from the supplied parameter vars
/// and must be deterministic. The error per element is
/// `|autodiff − fd| / max(|fd|, 1e-6)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_fn(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
            let loss = f(&mut tape, &vars)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((value, vars.iter().map(|&v| grads.get_or_zero(v)).collect()))
        },
        params,
        h,
    )
}

/// Same check for losses whose parameters are not plain tape inputs, e.g.
/// a whole network: `f` maps parameter values to the loss and its gradient
/// with respect to each of them.
pub fn grad_check_fn<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(g, p)| g.shape() != p.shape()) {
        return Err(crate::error::Error::Shape("gradients do not match the parameters".into()));
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..work[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = f(&work)?.0;
            work[pi].data_mut()[j] = orig - h;
            let minus = f(&work)?.0;
            work[pi].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = (grad.data()[j] - fd).abs() / fd.abs().max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
