//! Sinusoidal activation and its weight initialisation.

use rand::Rng;

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `sin(omega * x)`.
pub fn siren_activation(x: Var<'_>, omega: f64) -> Result<Var<'_>> {
    if omega <= 0.0 {
        return Err(Error::Invalid(format!("siren omega must be positive, got {omega}")));
    }
    x.scale(omega)?.sin()
}

/// Half-width of the uniform initialisation interval.
pub fn siren_bound(fan_in: usize, omega: f64, first_layer: bool) -> f64 {
    if first_layer {
        1.0 / fan_in as f64
    } else {
        (6.0 / fan_in as f64).sqrt() / omega
    }
}

/// `[fan_in, fan_out]` weights drawn uniformly within [`siren_bound`].
pub fn siren_init<R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    omega: f64,
    first_layer: bool,
) -> Tensor {
    let bound = siren_bound(fan_in, omega, first_layer);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, std::f64::consts::FRAC_PI_2]));
        let y = siren_activation(x, 1.0).unwrap().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        assert!(siren_activation(x, 0.0).is_err());
    }

    #[test]
    fn init_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let omega = 30.0;
        let fan_in = 64;
        let deep = siren_init(&mut rng, fan_in, 10_000 / fan_in + 1, omega, false);
        let bound = (6.0 / fan_in as f64).sqrt() / omega;
        assert!(deep.numel() >= 10_000);
        assert!(deep.data().iter().all(|w| w.abs() <= bound));
        let first = siren_init(&mut rng, fan_in, 200, omega, true);
        assert!(first.data().iter().all(|w| w.abs() <= 1.0 / fan_in as f64));
    }
}
