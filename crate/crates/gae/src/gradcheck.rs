//! Central-difference gradient verification in double precision.
//!
//! A loss closure is re-evaluated under elementwise perturbations of a
//! parameter, and the numeric gradient is compared against the analytic one
//! from backprop. All callers should build their models in `DType::F64`.

use candle_core::{DType, Tensor, Var};

use crate::error::{GaeError, Result};

/// Numeric gradient of `f` w.r.t. every element of `var`, via central
/// differences with step `h`. The var is restored afterwards.
pub fn numeric_grad<F>(var: &Var, mut f: F, h: f64) -> Result<Tensor>
where
    F: FnMut() -> Result<f64>,
{
    let t = var.as_tensor();
    if t.dtype() != DType::F64 {
        return Err(GaeError::config("numeric_grad requires f64 parameters"));
    }
    let dims = t.dims().to_vec();
    let dev = t.device().clone();
    let base = t.flatten_all()?.to_vec1::<f64>()?;
    let mut grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        var.set(&Tensor::from_vec(plus, dims.as_slice(), &dev)?)?;
        let fp = f()?;
        let mut minus = base.clone();
        minus[i] -= h;
        var.set(&Tensor::from_vec(minus, dims.as_slice(), &dev)?)?;
        let fm = f()?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    var.set(&Tensor::from_vec(base, dims.as_slice(), &dev)?)?;
    Ok(Tensor::from_vec(grad, dims.as_slice(), &dev)?)
}

/// Normwise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, floor)`.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let a = analytic.flatten_all()?.to_vec1::<f64>()?;
    let n = numeric.flatten_all()?.to_vec1::<f64>()?;
    if a.len() != n.len() {
        return Err(GaeError::shape("gradient length mismatch"));
    }
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (x, y) in a.iter().zip(n.iter()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nn += y * y;
    }
    let denom = (na.sqrt() + nn.sqrt()).max(1e-10);
    Ok(diff.sqrt() / denom)
}

/// Outcome of one parameter's gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
}

/// Check the analytic gradients of `loss_fn` against central differences for
/// every named var. Returns per-parameter relative errors. Parameters that
/// receive no gradient are checked against the numeric gradient being zero.
pub fn check_vars<F>(named: &[(String, Var)], loss_fn: F, h: f64) -> Result<Vec<GradCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    let loss = loss_fn()?;
    if loss.dims() != [] as [usize; 0] {
        return Err(GaeError::shape("loss must be a scalar"));
    }
    let grads = loss.backward()?;
    let mut out = Vec::with_capacity(named.len());
    for (name, var) in named {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        let numeric = numeric_grad(var, || loss_fn()?.to_scalar::<f64>().map_err(Into::into), h)?;
        out.push(GradCheck {
            name: name.clone(),
            rel_err: rel_err(&analytic, &numeric)?,
        });
    }
    Ok(out)
}

/// Largest relative error across all checked parameters.
pub fn max_rel_err<F>(named: &[(String, Var)], loss_fn: F, h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    Ok(check_vars(named, loss_fn, h)?
        .into_iter()
        .map(|c| c.rel_err)
        .fold(0.0, f64::max))
}
