//! Per-step sampling-noise optimization.
//!
//! At each denoising step the sampler injects a fresh noise draw. Before
//! the step runs, the draw is nudged by gradient descent so that the step
//! lands closer to the matching point of the inversion trajectory, while
//! a Gaussian KL penalty keeps the draw statistically unremarkable. The
//! two losses are balanced by a stopping ratio rather than a weighted
//! sum: descent on the reconstruction loss stops once it is within a
//! factor `lambda` of the regularity loss.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{fp, lossy, Scalar};
use crate::schedule::SamplerSchedule;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("regularity loss needs at least 2 samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("step {t} outside 1..={num_steps}")]
    StepOutOfRange { t: usize, num_steps: usize },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values in {context}")]
    NonFinite { context: &'static str },
    #[error("invalid balance config {field}: {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: String,
    },
}

/// Knobs of the noise optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig<F> {
    /// Stop once `l_r / l_n <= lambda`.
    pub lambda: F,
    /// Descent step size; the effective step never overshoots the target.
    pub step_size: F,
    /// Hard cap on descent iterations per sampler step.
    pub max_iterations: usize,
    /// Lower bound applied to the sample variance inside the KL loss.
    pub variance_floor: F,
}

impl<F: Scalar> Default for BalanceConfig<F> {
    fn default() -> Self {
        Self {
            lambda: fp(125.0),
            step_size: fp(0.1),
            max_iterations: 50,
            variance_floor: fp(1e-12),
        }
    }
}

impl<F: Scalar> BalanceConfig<F> {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !self.lambda.is_finite() || self.lambda < F::zero() {
            return Err(NoiseError::InvalidConfig {
                field: "lambda",
                reason: format!("must be finite and >= 0, got {}", lossy(self.lambda)),
            });
        }
        if !self.step_size.is_finite() || self.step_size <= F::zero() {
            return Err(NoiseError::InvalidConfig {
                field: "step_size",
                reason: format!("must be finite and > 0, got {}", lossy(self.step_size)),
            });
        }
        if !self.variance_floor.is_finite() || self.variance_floor <= F::zero() {
            return Err(NoiseError::InvalidConfig {
                field: "variance_floor",
                reason: format!("must be finite and > 0, got {}", lossy(self.variance_floor)),
            });
        }
        Ok(())
    }
}

/// KL divergence of a sample's empirical Gaussian from the standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDivergence<F> {
    pub value: F,
    /// True when the sample variance sat below the floor and was clamped.
    pub variance_floored: bool,
}

/// What one optimization run did, in the order it did it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport<F> {
    /// Final reconstruction loss.
    pub l_r: F,
    /// Final regularity loss.
    pub l_n: F,
    /// `l_r / l_n`; `Some(0)` when `l_r` is zero, `None` when only `l_n` is.
    pub ratio: Option<F>,
    pub iterations_used: usize,
    /// True when the iteration cap ended descent before the ratio test did.
    pub hit_cap: bool,
    pub variance_floored: bool,
    /// Reconstruction loss before descent and after each update.
    pub l_r_history: Vec<F>,
}

/// `l_r / l_n` with the degenerate cases pinned down: a zero numerator is
/// a perfect reconstruction regardless of `l_n`, and a zero denominator
/// alone means the ratio is unbounded.
pub fn loss_ratio<F: Scalar>(l_r: F, l_n: F) -> Option<F> {
    if l_r == F::zero() {
        Some(F::zero())
    } else if l_n == F::zero() {
        None
    } else {
        Some(l_r / l_n)
    }
}

/// KL of the empirical `N(mean, variance)` of `eps` from `N(0, 1)`,
/// `(mean^2 + var - 1 - ln var) / 2`, with population variance.
pub fn gaussian_kl_loss<F: Scalar>(
    eps: &Array3<F>,
    variance_floor: F,
) -> Result<KlDivergence<F>, NoiseError> {
    let n = eps.len();
    if n < 2 {
        return Err(NoiseError::TooFewSamples { n });
    }
    if !eps.iter().all(|x| x.is_finite()) {
        return Err(NoiseError::NonFinite { context: "noise sample" });
    }
    let count = fp::<F>(n as f64);
    let mean = eps.sum() / count;
    let variance = eps.mapv(|x| (x - mean) * (x - mean)).sum() / count;
    let variance_floored = variance < variance_floor;
    let v = if variance_floored { variance_floor } else { variance };
    let half = fp::<F>(0.5);
    let value = half * (mean * mean + v - F::one() - v.ln());
    Ok(KlDivergence {
        value,
        variance_floored,
    })
}

/// Residual of the sampler step `nu z_t + beta e + gamma eps` against the
/// inversion target `z'_{t-1}`. All shapes must agree.
fn step_residual<F: Scalar>(
    z_prime_prev: &Array3<F>,
    z_hat_t: &Array3<F>,
    denoiser_out: &Array3<F>,
    eps: &Array3<F>,
    nu: F,
    beta: F,
    gamma: F,
) -> Array3<F> {
    z_prime_prev - &(z_hat_t * nu) - &(denoiser_out * beta) - &(eps * gamma)
}

/// Flat Euclidean norm of the step residual.
pub fn reconstruction_loss<F: Scalar>(
    z_prime_prev: &Array3<F>,
    z_hat_t: &Array3<F>,
    denoiser_out: &Array3<F>,
    eps: &Array3<F>,
    nu: F,
    beta: F,
    gamma: F,
) -> F {
    assert_eq!(z_prime_prev.shape(), z_hat_t.shape(), "latent shapes must agree");
    assert_eq!(z_prime_prev.shape(), denoiser_out.shape(), "denoiser shape must agree");
    assert_eq!(z_prime_prev.shape(), eps.shape(), "noise shape must agree");
    step_residual(z_prime_prev, z_hat_t, denoiser_out, eps, nu, beta, gamma)
        .mapv(|x| x * x)
        .sum()
        .sqrt()
}

fn check_shape<F: Scalar>(
    arr: &Array3<F>,
    reference: &Array3<F>,
    context: &'static str,
) -> Result<(), NoiseError> {
    if arr.shape() != reference.shape() {
        return Err(NoiseError::ShapeMismatch {
            context,
            expected: reference.shape().to_vec(),
            got: arr.shape().to_vec(),
        });
    }
    if !arr.iter().all(|x| x.is_finite()) {
        return Err(NoiseError::NonFinite { context });
    }
    Ok(())
}

/// Descends the reconstruction loss in the noise draw for sampler step
/// `t`, stopping at the ratio test, a perfect reconstruction, or the
/// iteration cap. `denoiser_out` is the denoiser evaluated at `z_hat_t`,
/// computed once by the caller; it does not depend on the draw, so it
/// stays fixed through descent. Returns the optimized draw and a report.
///
/// The descent direction is `gamma r / |r|` for residual `r`, and the
/// step is clamped to `|r| / gamma^2` so each update shrinks `|r|` by
/// exactly `min(step_size gamma^2, |r|)`: monotone, never overshooting.
pub fn optimize_noise<F: Scalar>(
    z_hat_t: &Array3<F>,
    z_prime_prev: &Array3<F>,
    denoiser_out: &Array3<F>,
    eps_t: &Array3<F>,
    schedule: &SamplerSchedule<F>,
    t: usize,
    config: &BalanceConfig<F>,
) -> Result<(Array3<F>, LossReport<F>), NoiseError> {
    config.validate()?;
    if t == 0 || t > schedule.num_steps() {
        return Err(NoiseError::StepOutOfRange {
            t,
            num_steps: schedule.num_steps(),
        });
    }
    check_shape(z_prime_prev, z_hat_t, "inversion target")?;
    check_shape(denoiser_out, z_hat_t, "denoiser output")?;
    check_shape(eps_t, z_hat_t, "noise draw")?;
    if !z_hat_t.iter().all(|x| x.is_finite()) {
        return Err(NoiseError::NonFinite { context: "latent" });
    }

    let (nu, beta, gamma) = (schedule.nu(t), schedule.beta(t), schedule.gamma(t));
    let mut eps = eps_t.clone();
    let mut residual = step_residual(z_prime_prev, z_hat_t, denoiser_out, &eps, nu, beta, gamma);
    let mut l_r = residual.mapv(|x| x * x).sum().sqrt();
    let mut history = vec![l_r];

    // A zero noise coefficient makes the draw irrelevant to this step.
    if gamma == F::zero() {
        let kl = gaussian_kl_loss(&eps, config.variance_floor)?;
        return Ok((
            eps,
            LossReport {
                l_r,
                l_n: kl.value,
                ratio: loss_ratio(l_r, kl.value),
                iterations_used: 0,
                hit_cap: false,
                variance_floored: kl.variance_floored,
                l_r_history: history,
            },
        ));
    }

    let gamma_sq = gamma * gamma;
    let mut iterations_used = 0;
    loop {
        let kl = gaussian_kl_loss(&eps, config.variance_floor)?;
        let ratio = loss_ratio(l_r, kl.value);
        let satisfied = matches!(ratio, Some(r) if r <= config.lambda);
        if satisfied || iterations_used == config.max_iterations {
            return Ok((
                eps,
                LossReport {
                    l_r,
                    l_n: kl.value,
                    ratio,
                    iterations_used,
                    hit_cap: !satisfied,
                    variance_floored: kl.variance_floored,
                    l_r_history: history,
                },
            ));
        }
        let step = config.step_size.min(l_r / gamma_sq);
        let scale = step * gamma / l_r;
        eps = &eps + &(&residual * scale);
        residual = step_residual(z_prime_prev, z_hat_t, denoiser_out, &eps, nu, beta, gamma);
        l_r = residual.mapv(|x| x * x).sum().sqrt();
        history.push(l_r);
        iterations_used += 1;
    }
}
