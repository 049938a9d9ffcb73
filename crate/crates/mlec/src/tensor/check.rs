//! Central-difference gradient verification.

use super::{backward, Tape, Tensor, TensorError, Var};

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences and returns the max over coordinates of
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `f` receives a fresh tape and the lifted input and must produce a scalar.
pub fn gradient_check(
    f: impl Fn(&Tape, &Var) -> Result<Var, TensorError>,
    x: &Tensor,
    eps: f64,
) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let xv = tape.param(x);
    let loss = f(&tape, &xv)?;
    backward(&loss)?;
    let analytic = xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fp = eval_scalar(&f, &plus)?;
        let fm = eval_scalar(&f, &minus)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

fn eval_scalar(
    f: &impl Fn(&Tape, &Var) -> Result<Var, TensorError>,
    x: &Tensor,
) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let xv = tape.param(x);
    Ok(f(&tape, &xv)?.scalar_value())
}
