//! Reverse-mode versus central finite-difference gradient comparison.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::with_finite_check(true);
    let y = f(tape.constant(point.clone()))?;
    scalar_of(y)
}

fn scalar_of(y: Var<'_>) -> Result<f64> {
    let v = y.value();
    if v.numel() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Max over all coordinates of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, eps, &all)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = {
        let tape = Tape::with_finite_check(true);
        let x = tape.var(point.clone());
        let y = f(x)?;
        scalar_of(y)?;
        y.backward()?.get_or_zeros(x)
    };
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = analytic.data()[i];
        let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
