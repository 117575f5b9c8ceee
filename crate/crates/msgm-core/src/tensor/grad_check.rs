//! Central finite-difference oracle for gradient verification.
//!
//! Kept independent of the tape's backward pass: the oracle only ever calls a
//! user-supplied forward closure, so it cannot share bugs with the analytic
//! path it checks.

use super::Tensor;

/// Central-difference gradient of a scalar-valued function at `x`.
///
/// Evaluates `f` at `x ± h` per coordinate: (f(x+h) - f(x-h)) / 2h.
pub fn central_diff<F>(f: &mut F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Mixed relative/absolute error between an analytic gradient and a
/// finite-difference reference: max over entries of |a - f| / max(1, |f|).
pub fn max_rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), fd.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(fd.data().iter())
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}
