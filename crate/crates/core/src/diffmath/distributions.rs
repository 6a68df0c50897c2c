//! Diagonal Gaussian helpers: closed-form KL and the reparameterised draw.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn require_positive(v: Var<'_>, what: &str) -> Result<()> {
    if let Some(bad) = v.value().data().iter().find(|&&s| s <= 0.0) {
        return Err(Error::Invalid(format!(
            "{what} must be strictly positive, got {bad}"
        )));
    }
    Ok(())
}

/// `sum_d log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`.
pub fn gaussian_kl<'t>(
    mu_q: Var<'t>,
    sigma_q: Var<'t>,
    mu_p: Var<'t>,
    sigma_p: Var<'t>,
) -> Result<Var<'t>> {
    require_positive(sigma_q, "posterior sigma")?;
    require_positive(sigma_p, "prior sigma")?;
    let log_ratio = sigma_p.div(sigma_q)?.log()?;
    let num = sigma_q.square()?.add(mu_q.sub(mu_p)?.square()?)?;
    let quad = num.div(sigma_p.square()?.scale(2.0)?)?;
    log_ratio.add(quad)?.offset(-0.5)?.sum()
}

/// `mu + sigma * noise`; the noise is a constant so no gradient reaches it.
pub fn reparameterize<'t>(mu: Var<'t>, sigma: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    let (ms, ss) = (mu.shape(), sigma.shape());
    if ms != ss || ms != noise.shape() {
        return Err(Error::Shape(format!(
            "reparameterize: mu {ms:?}, sigma {ss:?}, noise {:?}",
            noise.shape()
        )));
    }
    let eps = mu.tape().constant(noise.clone());
    mu.add(sigma.mul(eps)?)
}
