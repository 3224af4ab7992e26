use super::{Tape, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the input (a leaf on the gradient pass, a
/// constant on the probing passes) and must return a scalar. Returns the
/// largest per-coordinate `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, step: S) -> Result<f64>
where
    S: Scalar,
    F: Fn(&Tape<S>, &Tensor<S>) -> Result<Tensor<S>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let loss = f(&tape, &leaf)?;
    let analytic = if loss.requires_grad() {
        tape.backward(&loss)?
            .get(&leaf)
            .map(Tensor::to_vec)
            .unwrap_or_else(|| vec![S::zero(); x.len()])
    } else {
        vec![S::zero(); x.len()]
    };

    let eval = |data: Vec<S>| -> Result<f64> {
        let probe = Tensor::new(x.shape().to_vec(), data)?;
        let tape = Tape::new();
        Ok(f(&tape, &probe)?.item().as_f64())
    };

    let h = step.as_f64();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += step;
        let mut minus = x.to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let exact = analytic[i].as_f64();
        let scale = exact.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((exact - numeric).abs() / scale);
    }
    Ok(worst)
}
