//! Latent tensors, per-step noise draws, and conditioning embeddings.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("latent contains non-finite values ({context})")]
    NonFinite { context: &'static str },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("step {t} outside 1..={num_steps}")]
    StepOutOfRange { t: usize, num_steps: usize },
}

/// A latent tensor `(channels, height, width)` tagged with the sampler
/// step it sits at: `0` is fully denoised, `num_steps` fully noised.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<F> {
    data: Array3<F>,
    timestep: usize,
}

impl<F: Scalar> LatentCode<F> {
    pub fn new(data: Array3<F>, timestep: usize) -> Result<Self, LatentError> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(LatentError::NonFinite { context: "latent" });
        }
        Ok(Self { data, timestep })
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }
}

/// Token embeddings of one conditioning text, `(tokens, dim)`.
pub type TextEmbedding<F> = Array2<F>;

/// The two conditionings a fusion run needs: the target text and the
/// empty (null) text used by inversion.
#[derive(Debug, Clone)]
pub struct ConditioningEmbeddings<F> {
    pub text: TextEmbedding<F>,
    pub null: TextEmbedding<F>,
}

/// One standard-normal draw per sampler step, fixed by seed. Step `t`
/// indexes `1..=num_steps`. The optimizer replaces entries in place.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank<F> {
    draws: Vec<Array3<F>>,
}

impl<F: Scalar> NoiseBank<F> {
    pub fn sample(shape: [usize; 3], num_steps: usize, seed: u64) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape[0] * shape[1] * shape[2];
        let draws = (0..num_steps)
            .map(|_| {
                let data: Vec<F> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
                Array3::from_shape_vec(shape, data).expect("shape and length agree")
            })
            .collect();
        Self { draws }
    }

    pub fn num_steps(&self) -> usize {
        self.draws.len()
    }

    pub fn get(&self, t: usize) -> Result<&Array3<F>, LatentError> {
        self.check(t)?;
        Ok(&self.draws[t - 1])
    }

    pub fn set(&mut self, t: usize, eps: Array3<F>) -> Result<(), LatentError> {
        self.check(t)?;
        if eps.shape() != self.draws[t - 1].shape() {
            return Err(LatentError::ShapeMismatch {
                context: "noise bank entry",
                expected: self.draws[t - 1].shape().to_vec(),
                got: eps.shape().to_vec(),
            });
        }
        if !eps.iter().all(|x| x.is_finite()) {
            return Err(LatentError::NonFinite {
                context: "noise bank entry",
            });
        }
        self.draws[t - 1] = eps;
        Ok(())
    }

    fn check(&self, t: usize) -> Result<(), LatentError> {
        if t == 0 || t > self.draws.len() {
            return Err(LatentError::StepOutOfRange {
                t,
                num_steps: self.draws.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn latents_reject_non_finite_data() {
        let mut data = Array3::<f64>::zeros((1, 2, 2));
        data[[0, 0, 0]] = f64::NAN;
        assert!(LatentCode::new(data, 0).is_err());
    }

    #[test]
    fn noise_bank_is_seed_deterministic() {
        let a: NoiseBank<f64> = NoiseBank::sample([1, 4, 4], 4, 7);
        let b: NoiseBank<f64> = NoiseBank::sample([1, 4, 4], 4, 7);
        let c: NoiseBank<f64> = NoiseBank::sample([1, 4, 4], 4, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.num_steps(), 4);
    }

    #[test]
    fn draws_look_standard_normal() {
        let bank: NoiseBank<f64> = NoiseBank::sample([4, 16, 16], 1, 3);
        let eps = bank.get(1).unwrap();
        let n = eps.len() as f64;
        let mean = eps.sum() / n;
        let var = eps.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "var {var}");
    }

    #[test]
    fn bank_indexing_is_one_based_and_checked() {
        let mut bank: NoiseBank<f64> = NoiseBank::sample([1, 2, 2], 2, 1);
        assert!(bank.get(0).is_err());
        assert!(bank.get(3).is_err());
        assert!(bank.get(2).is_ok());
        assert!(bank.set(1, Array3::zeros((1, 2, 2))).is_ok());
        assert!(bank.set(1, Array3::zeros((1, 3, 2))).is_err());
        assert!(bank
            .set(1, Array3::from_elem((1, 2, 2), f64::INFINITY))
            .is_err());
    }
}
