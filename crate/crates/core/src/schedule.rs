//! Sampler coefficient schedule.
//!
//! One denoising step maps `z_t` to `nu_t z_t + beta_t e + gamma_t eps`,
//! where `e` is the denoiser output and `eps` the per-step noise draw. The
//! inverse (noising) step divides by `nu_t`, so `nu_t` must never be zero.
//! Coefficients are indexed by step `t` in `1..=num_steps`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lossy, Scalar};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule arrays must share one non-zero length; got nu={nu}, beta={beta}, gamma={gamma}")]
    LengthMismatch { nu: usize, beta: usize, gamma: usize },
    #[error("non-finite coefficient {name}[{t}] = {value}")]
    NonFinite {
        name: &'static str,
        t: usize,
        value: f64,
    },
    #[error("nu[{t}] must be non-zero; the noising step divides by it")]
    ZeroNu { t: usize },
    #[error("invalid sigma ladder: {reason}")]
    BadSigmaLadder { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule<F> {
    nu: Vec<F>,
    beta: Vec<F>,
    gamma: Vec<F>,
}

impl<F: Scalar> SamplerSchedule<F> {
    pub fn new(nu: Vec<F>, beta: Vec<F>, gamma: Vec<F>) -> Result<Self, ScheduleError> {
        if nu.is_empty() || nu.len() != beta.len() || nu.len() != gamma.len() {
            return Err(ScheduleError::LengthMismatch {
                nu: nu.len(),
                beta: beta.len(),
                gamma: gamma.len(),
            });
        }
        for (name, arr) in [("nu", &nu), ("beta", &beta), ("gamma", &gamma)] {
            for (idx, &value) in arr.iter().enumerate() {
                if !value.is_finite() {
                    return Err(ScheduleError::NonFinite {
                        name,
                        t: idx + 1,
                        value: lossy(value),
                    });
                }
            }
        }
        for (idx, &value) in nu.iter().enumerate() {
            if value == F::zero() {
                return Err(ScheduleError::ZeroNu { t: idx + 1 });
            }
        }
        Ok(Self { nu, beta, gamma })
    }

    /// Coefficients from an ancestral-Euler sigma ladder of length
    /// `num_steps + 1`, decreasing from the top sigma to zero. Step `t`
    /// moves from `sigmas[T - t]` to `sigmas[T - t + 1]`, so `t = 1` is
    /// the final, noise-free transition.
    pub fn euler_ancestral(sigmas: &[F]) -> Result<Self, ScheduleError> {
        if sigmas.len() < 2 {
            return Err(ScheduleError::BadSigmaLadder {
                reason: format!("need at least 2 sigmas, got {}", sigmas.len()),
            });
        }
        for pair in sigmas.windows(2) {
            if !(pair[0] > pair[1]) {
                return Err(ScheduleError::BadSigmaLadder {
                    reason: format!(
                        "sigmas must strictly decrease, got {} then {}",
                        lossy(pair[0]),
                        lossy(pair[1])
                    ),
                });
            }
        }
        if sigmas[sigmas.len() - 1] < F::zero() || !sigmas[0].is_finite() {
            return Err(ScheduleError::BadSigmaLadder {
                reason: "sigmas must be finite and non-negative".into(),
            });
        }
        let steps = sigmas.len() - 1;
        let mut nu = Vec::with_capacity(steps);
        let mut beta = Vec::with_capacity(steps);
        let mut gamma = Vec::with_capacity(steps);
        // Build from t = 1 (bottom transition) to t = steps (top).
        for t in 1..=steps {
            let from = sigmas[steps - t];
            let to = sigmas[steps - t + 1];
            let up = (to * to * (from * from - to * to) / (from * from)).sqrt();
            let down = (to * to - up * up).sqrt();
            nu.push(F::one());
            beta.push(down - from);
            gamma.push(up);
        }
        Self::new(nu, beta, gamma)
    }

    pub fn num_steps(&self) -> usize {
        self.nu.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            t >= 1 && t <= self.nu.len(),
            "schedule step {t} outside 1..={}",
            self.nu.len()
        );
        t - 1
    }

    pub fn nu(&self, t: usize) -> F {
        self.nu[self.idx(t)]
    }

    pub fn beta(&self, t: usize) -> F {
        self.beta[self.idx(t)]
    }

    pub fn gamma(&self, t: usize) -> F {
        self.gamma[self.idx(t)]
    }
}

/// Sigma ladder with the usual rho-warped spacing, highest first, with a
/// trailing zero. Returns `num_steps + 1` values.
pub fn karras_sigmas<F: Scalar>(
    num_steps: usize,
    sigma_min: F,
    sigma_max: F,
    rho: F,
) -> Result<Vec<F>, ScheduleError> {
    if num_steps == 0 || !(sigma_min > F::zero()) || !(sigma_max > sigma_min) || !(rho > F::zero())
    {
        return Err(ScheduleError::BadSigmaLadder {
            reason: format!(
                "need num_steps >= 1 and 0 < sigma_min < sigma_max with rho > 0; got n={num_steps}, min={}, max={}, rho={}",
                lossy(sigma_min),
                lossy(sigma_max),
                lossy(rho)
            ),
        });
    }
    let inv_rho = F::one() / rho;
    let lo = sigma_min.powf(inv_rho);
    let hi = sigma_max.powf(inv_rho);
    let mut sigmas = Vec::with_capacity(num_steps + 1);
    if num_steps == 1 {
        sigmas.push(sigma_max);
    } else {
        let denom = F::from_usize(num_steps - 1).unwrap();
        for i in 0..num_steps {
            let frac = F::from_usize(i).unwrap() / denom;
            sigmas.push((hi + frac * (lo - hi)).powf(rho));
        }
    }
    sigmas.push(F::zero());
    Ok(sigmas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accessors_use_one_based_steps() {
        let s = SamplerSchedule::new(vec![1.0, 2.0], vec![0.1, 0.2], vec![0.0, 0.05]).unwrap();
        assert_eq!(s.num_steps(), 2);
        assert_eq!(s.nu(1), 1.0);
        assert_eq!(s.nu(2), 2.0);
        assert_eq!(s.beta(2), 0.2);
        assert_eq!(s.gamma(1), 0.0);
    }

    #[test]
    #[should_panic(expected = "outside 1..=")]
    fn step_zero_is_rejected() {
        let s = SamplerSchedule::new(vec![1.0], vec![0.1], vec![0.0]).unwrap();
        let _ = s.nu(0);
    }

    #[test]
    fn zero_nu_is_rejected() {
        let result = SamplerSchedule::new(vec![1.0, 0.0], vec![0.1, 0.1], vec![0.0, 0.0]);
        assert!(matches!(result, Err(ScheduleError::ZeroNu { t: 2 })));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let result = SamplerSchedule::new(vec![1.0], vec![0.1, 0.2], vec![0.0]);
        assert!(matches!(result, Err(ScheduleError::LengthMismatch { .. })));
        let result = SamplerSchedule::<f64>::new(vec![], vec![], vec![]);
        assert!(matches!(result, Err(ScheduleError::LengthMismatch { .. })));
    }

    #[test]
    fn non_finite_coefficients_are_rejected() {
        let result = SamplerSchedule::new(vec![1.0], vec![f64::NAN], vec![0.0]);
        assert!(matches!(result, Err(ScheduleError::NonFinite { name: "beta", .. })));
    }

    #[test]
    fn ancestral_coefficients_match_hand_algebra() {
        // Ladder 2 -> 1 -> 0: the top step has up = sqrt(1 * (4-1)/4)
        // = sqrt(0.75), down = sqrt(1 - 0.75) = 0.5, beta = 0.5 - 2.
        let s = SamplerSchedule::euler_ancestral(&[2.0_f64, 1.0, 0.0]).unwrap();
        assert_eq!(s.num_steps(), 2);
        let up_top = 0.75_f64.sqrt();
        assert!((s.gamma(2) - up_top).abs() < 1e-12);
        assert!((s.beta(2) - (0.5 - 2.0)).abs() < 1e-12);
        assert_eq!(s.nu(2), 1.0);
        // Bottom transition lands on sigma = 0: no fresh noise.
        assert_eq!(s.gamma(1), 0.0);
        assert!((s.beta(1) - (0.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn non_decreasing_ladders_are_rejected() {
        assert!(SamplerSchedule::euler_ancestral(&[1.0_f64, 1.0, 0.0]).is_err());
        assert!(SamplerSchedule::euler_ancestral(&[1.0_f64]).is_err());
    }

    #[test]
    fn warped_ladder_has_the_right_shape() {
        let sigmas = karras_sigmas(4, 0.1_f64, 10.0, 7.0).unwrap();
        assert_eq!(sigmas.len(), 5);
        assert!((sigmas[0] - 10.0).abs() < 1e-12);
        assert!((sigmas[3] - 0.1).abs() < 1e-12);
        assert_eq!(sigmas[4], 0.0);
        for pair in sigmas.windows(2) {
            assert!(pair[0] > pair[1]);
        }
        let schedule = SamplerSchedule::euler_ancestral(&sigmas).unwrap();
        assert_eq!(schedule.num_steps(), 4);
    }
}
