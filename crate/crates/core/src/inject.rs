//! Bisection-free controller for the self-attention injection step.
//!
//! Probes image similarity at the current step count and walks one step at
//! a time: below the target band injects more structure (`i + 1`), above it
//! injects less (`i - 1`), inside it stops. The walk is clamped to
//! `[i_min, i_max]` and to a probe budget, so it terminates even when the
//! band is unreachable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harmony::HarmonyConfig;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum InjectError<E> {
    #[error("injection bounds rejected: i_min={i_min}, i_init={i_init}, i_max={i_max}")]
    InvalidBounds {
        i_min: usize,
        i_init: usize,
        i_max: usize,
    },
    #[error("invalid band config: {0}")]
    Config(#[from] crate::harmony::HarmonyError),
    #[error("similarity probe failed at i = {i}")]
    Probe {
        i: usize,
        #[source]
        source: E,
    },
    #[error("similarity probe returned a non-finite value at i = {i}")]
    NonFiniteProbe { i: usize },
}

/// One controller probe: the step count tried and the similarity seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionProbe<F> {
    pub i: usize,
    pub isim: F,
}

/// Walks the injection step count toward the image-similarity band
/// `[isim_min, isim_max]`, spending at most `max_iter` probes.
///
/// Returns the final step count and every probe taken, in order. The final
/// count is guaranteed to lie in `[i_min, i_max]`; it lies in the band
/// whenever an in-band count is reachable within the budget for a
/// monotone similarity profile.
pub fn adjust_injection_step<F, P, E>(
    mut isim_at: P,
    i_init: usize,
    i_min: usize,
    i_max: usize,
    max_iter: usize,
    config: &HarmonyConfig<F>,
) -> Result<(usize, Vec<InjectionProbe<F>>), InjectError<E>>
where
    F: Scalar,
    P: FnMut(usize) -> Result<F, E>,
{
    config.validate()?;
    if i_min > i_max || i_init < i_min || i_init > i_max {
        return Err(InjectError::InvalidBounds {
            i_min,
            i_init,
            i_max,
        });
    }

    let mut i = i_init;
    let mut probes = Vec::new();
    for _ in 0..max_iter {
        let isim = isim_at(i).map_err(|source| InjectError::Probe { i, source })?;
        if !isim.is_finite() {
            return Err(InjectError::NonFiniteProbe { i });
        }
        probes.push(InjectionProbe { i, isim });
        if isim < config.isim_min {
            // Too little of the source image survives; inject more steps.
            if i == i_max {
                break;
            }
            i += 1;
        } else if isim > config.isim_max {
            if i == i_min {
                break;
            }
            i -= 1;
        } else {
            break;
        }
    }
    Ok((i, probes))
}
