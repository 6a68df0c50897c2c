//! Real-input discrete Fourier transform as a fixed matrix product.
//!
//! For a window of `T` samples the one-sided spectrum has `K + 1` bins,
//! `K = floor(T / 2)`. The transform multiplies by precomputed cosine and
//! negative-sine tables, so reverse-mode gradients follow from matmul.

use super::tape::{Var, TAU};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One-sided Fourier coefficients of `D` real channels, each `D x (K+1)`.
pub struct ComplexCoefficients<'t> {
    pub re: Var<'t>,
    pub im: Var<'t>,
}

impl ComplexCoefficients<'_> {
    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[1]
    }
}

/// Cosine and negative-sine tables of shape `[T, K+1]`.
pub fn dft_tables(frames: usize) -> (Tensor, Tensor) {
    let bins = frames / 2 + 1;
    let mut re = vec![0.0; frames * bins];
    let mut im = vec![0.0; frames * bins];
    for t in 0..frames {
        for j in 0..bins {
            // reduce j*t mod T first so large products keep full precision
            let angle = TAU * ((j * t) % frames) as f64 / frames as f64;
            re[t * bins + j] = angle.cos();
            im[t * bins + j] = -angle.sin();
        }
    }
    (
        Tensor::new(&[frames, bins], re).expect("consistent shape"),
        Tensor::new(&[frames, bins], im).expect("consistent shape"),
    )
}

/// `c[i, j] = sum_t x[i, t] exp(-2 pi i j t / T)` for `j = 0..=K`.
pub fn dft_real<'t>(signal: Var<'t>) -> Result<ComplexCoefficients<'t>> {
    let shape = signal.shape();
    let [_, frames] = shape[..] else {
        return Err(Error::Shape(format!(
            "dft expects a [channels, frames] signal, got {shape:?}"
        )));
    };
    if frames < 2 {
        return Err(Error::Invalid(format!(
            "dft needs at least 2 frames, got {frames}"
        )));
    }
    let tape = signal.tape();
    let (re, im) = dft_tables(frames);
    Ok(ComplexCoefficients {
        re: signal.matmul(tape.constant(re))?,
        im: signal.matmul(tape.constant(im))?,
    })
}
