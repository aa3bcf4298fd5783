use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`rel_err`]; gradients smaller than this are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// A scalar-valued function that can be recorded at any precision.
///
/// The tape gradient is taken at the caller's precision while the central
/// differences are always evaluated in `f64`, so an `f32` gradient is judged
/// against an oracle that is not itself dominated by `f32` cancellation.
pub trait ScalarFn {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of<T: Real>(out: &Var<'_, T>) -> Result<f64> {
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item().as_f64())
}

/// Maximum relative error between the tape gradient of `f` at `inputs` and
/// `(f(x+eps) - f(x-eps)) / 2eps`, over every input element.
pub fn grad_check<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheck> {
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f.eval(&tape, &vars)?;
    scalar_of(&out)?;
    let grads = tape.backward(out)?;

    let eval64 = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x)).collect();
        scalar_of(&f.eval(&tape, &vars)?)
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.raw(*var) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval64(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval64(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
