//! Harmony scoring of a fused output.
//!
//! The score rewards joint image and text similarity and penalizes
//! imbalance between the two: `F = (I + k T) - beta |I - k T|`. With the
//! default unit penalty weight this collapses to `2 min(I, k T)`, so the
//! score peaks where the image term and the gained text term cross.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{fp, lossy, Scalar};

#[derive(Debug, Error)]
pub enum HarmonyError {
    #[error("similarity input is not finite: image={image}, text={text}")]
    NonFiniteSimilarity { image: f64, text: f64 },
    #[error("invalid harmony config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

/// Image and text similarity of one candidate, each clamped into `[0, 1]`.
///
/// Raw cosine values below zero clamp to zero; values above one clamp to
/// one. Construction rejects non-finite input, so downstream scoring never
/// sees NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair<F> {
    image: F,
    text: F,
}

impl<F: Scalar> SimilarityPair<F> {
    pub fn new(image: F, text: F) -> Result<Self, HarmonyError> {
        if !image.is_finite() || !text.is_finite() {
            return Err(HarmonyError::NonFiniteSimilarity {
                image: lossy(image),
                text: lossy(text),
            });
        }
        let clamp = |x: F| x.max(F::zero()).min(F::one());
        Ok(Self {
            image: clamp(image),
            text: clamp(text),
        })
    }

    pub fn image(&self) -> F {
        self.image
    }

    pub fn text(&self) -> F {
        self.text
    }
}

/// Knobs shared by the harmony score, the scale search, and the
/// injection-step controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonyConfig<F> {
    /// Gain on the text axis; trades image fidelity against editability.
    pub k: F,
    /// Weight of the imbalance penalty term.
    pub beta_weight: F,
    /// Search bracket for the cross-attention scale.
    pub alpha_min: F,
    pub alpha_max: F,
    /// Bracket width at which the scale search stops.
    pub alpha_tol: F,
    /// Image-similarity band targeted by the injection-step controller.
    pub isim_min: F,
    pub isim_max: F,
}

impl<F: Scalar> Default for HarmonyConfig<F> {
    fn default() -> Self {
        Self {
            k: fp(2.3),
            beta_weight: fp(1.0),
            alpha_min: fp(0.0),
            alpha_max: fp(2.0),
            alpha_tol: fp(0.1),
            isim_min: fp(0.45),
            isim_max: fp(0.85),
        }
    }
}

impl<F: Scalar> HarmonyConfig<F> {
    pub fn validate(&self) -> Result<(), HarmonyError> {
        let err = |field: &'static str, reason: String| -> Result<(), HarmonyError> {
            Err(HarmonyError::InvalidConfig { field, reason })
        };
        let finite = [
            ("k", self.k),
            ("beta_weight", self.beta_weight),
            ("alpha_min", self.alpha_min),
            ("alpha_max", self.alpha_max),
            ("alpha_tol", self.alpha_tol),
            ("isim_min", self.isim_min),
            ("isim_max", self.isim_max),
        ];
        for (field, value) in finite {
            if !value.is_finite() {
                return err(field, format!("must be finite, got {}", lossy(value)));
            }
        }
        if self.k <= F::zero() {
            return err("k", format!("must be positive, got {}", lossy(self.k)));
        }
        if self.beta_weight < F::zero() {
            return err(
                "beta_weight",
                format!("must be non-negative, got {}", lossy(self.beta_weight)),
            );
        }
        if self.alpha_min >= self.alpha_max {
            return err(
                "alpha_min",
                format!(
                    "bracket must satisfy alpha_min < alpha_max, got [{}, {}]",
                    lossy(self.alpha_min),
                    lossy(self.alpha_max)
                ),
            );
        }
        if self.alpha_tol <= F::zero() {
            return err(
                "alpha_tol",
                format!("must be positive, got {}", lossy(self.alpha_tol)),
            );
        }
        if self.isim_min >= self.isim_max {
            return err(
                "isim_min",
                format!(
                    "band must satisfy isim_min < isim_max, got [{}, {}]",
                    lossy(self.isim_min),
                    lossy(self.isim_max)
                ),
            );
        }
        if self.isim_min < F::zero() || self.isim_max > F::one() {
            return err(
                "isim_min",
                format!(
                    "band must lie inside [0, 1], got [{}, {}]",
                    lossy(self.isim_min),
                    lossy(self.isim_max)
                ),
            );
        }
        Ok(())
    }
}

/// Harmony score of one candidate: `(I + k T) - beta |I - k T|`.
///
/// The unit-weight case is computed as `2 min(I, k T)`, which is the same
/// expression rearranged and avoids a cancellation ulp in the subtraction.
pub fn score_f<F: Scalar>(pair: SimilarityPair<F>, config: &HarmonyConfig<F>) -> Result<F, HarmonyError> {
    config.validate()?;
    let i = pair.image();
    let kt = config.k * pair.text();
    if config.beta_weight == F::one() {
        return Ok(fp::<F>(2.0) * i.min(kt));
    }
    Ok((i + kt) - config.beta_weight * (i - kt).abs())
}

/// Imbalance of one candidate: `|I - k T|`. Zero exactly at the crossing.
pub fn balance_bsim<F: Scalar>(pair: SimilarityPair<F>, config: &HarmonyConfig<F>) -> Result<F, HarmonyError> {
    config.validate()?;
    Ok((pair.image() - config.k * pair.text()).abs())
}
