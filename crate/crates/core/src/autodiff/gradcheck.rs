//! Central-difference gradient verification.

use crate::autodiff::{Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error used throughout: `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")))
    }
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences and returns the largest relative error over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor, coord: usize| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let y = f(&tape, v)?.value().item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite { coord })
        }
    };

    let mut worst = 0.0_f64;
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let numeric = (eval(plus, k)? - eval(minus, k)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    Ok(worst)
}

/// Same check, but with respect to the parameter `name` of `model`.
///
/// `f` must bind the model's trainable parameters with [`Tape::param`] (the
/// usual forward path does). The model is restored before returning.
pub fn grad_check_param<M, F>(model: &mut M, name: &str, f: F, eps: f64) -> Result<f64>
where
    M: Parameterized,
    F: for<'t> Fn(&'t Tape, &M) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let original = model
        .params()
        .into_iter()
        .find(|p| p.name() == name)
        .map(|p| p.value().clone())
        .ok_or_else(|| Error::MissingComponent(name.to_string()))?;

    let analytic = {
        let tape = Tape::new();
        let loss = f(&tape, model)?;
        let grads = tape.backward(loss)?;
        grads
            .param(name)
            .cloned()
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?
    };

    let set = |model: &mut M, value: Tensor| {
        for p in model.params_mut() {
            if p.name() == name {
                p.set_value(value);
                return;
            }
        }
    };
    let eval = |model: &M, coord: usize| -> Result<f64> {
        let tape = Tape::new();
        let y = f(&tape, model)?.value().item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite { coord })
        }
    };

    let mut worst = 0.0_f64;
    let mut outcome = Ok(());
    for k in 0..original.numel() {
        let mut plus = original.clone();
        plus.data_mut()[k] += eps;
        set(model, plus);
        let yp = eval(model, k);
        let mut minus = original.clone();
        minus.data_mut()[k] -= eps;
        set(model, minus);
        let ym = eval(model, k);
        match (yp, ym) {
            (Ok(yp), Ok(ym)) => {
                let numeric = (yp - ym) / (2.0 * eps);
                worst = worst.max(relative_error(analytic.data()[k], numeric));
            }
            (Err(e), _) | (_, Err(e)) => {
                outcome = Err(e);
                break;
            }
        }
    }
    set(model, original);
    outcome.map(|()| worst)
}
