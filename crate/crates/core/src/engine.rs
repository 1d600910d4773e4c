//! Sampler operations over a pluggable diffusion backend.
//!
//! Two branches share one schedule. The noising branch runs the sampler
//! update backwards, `z'_t = (z'_{t-1} - beta_t e - gamma_t eps_t) / nu_t`,
//! evaluating the denoiser once at the previous-step latent. The denoising
//! branch runs it forwards, `z_{t-1} = nu_t z_t + beta_t e + gamma_t
//! eps_t`, capturing self-attention maps on the inversion pass and
//! replaying them (plus scaling cross-attention values) on the fusion
//! pass. With identical inputs the two branches are exact inverses.

use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionCache;
use crate::backend::{AttentionRouter, DiffusionBackend, EngineError};
use crate::latent::{LatentCode, NoiseBank, TextEmbedding};
use crate::scalar::{lossy, Scalar};
use crate::schedule::SamplerSchedule;

/// The two knobs the fusion branch exposes: cross-attention scale and
/// self-attention injection depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams<F> {
    pub alpha: F,
    pub inject_step: usize,
}

impl<F: Scalar> FusionParams<F> {
    pub fn validate(&self, num_steps: usize) -> Result<(), EngineError> {
        if !self.alpha.is_finite() {
            return Err(EngineError::NonFinite {
                context: format!("fusion scale alpha = {}", lossy(self.alpha)),
            });
        }
        if self.inject_step > num_steps {
            return Err(EngineError::InjectStepTooLarge {
                inject_step: self.inject_step,
                num_steps,
            });
        }
        Ok(())
    }
}

/// Output of [`invert`]: the noising trajectory `z'_0 ..= z'_T` (indexed
/// by timestep) and the fresh per-step noise draws that produced it.
#[derive(Debug, Clone)]
pub struct InversionResult<F> {
    pub trajectory: Vec<LatentCode<F>>,
    pub noise: NoiseBank<F>,
}

fn check_latent<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    latent: &LatentCode<F>,
    context: &'static str,
) -> Result<(), EngineError> {
    if latent.shape() != backend.latent_shape() {
        return Err(EngineError::ShapeMismatch {
            context,
            expected: backend.latent_shape().to_vec(),
            got: latent.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_noise<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    eps: &Array3<F>,
    context: &'static str,
) -> Result<(), EngineError> {
    if eps.shape() != backend.latent_shape() {
        return Err(EngineError::ShapeMismatch {
            context,
            expected: backend.latent_shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    if !eps.iter().all(|x| x.is_finite()) {
        return Err(EngineError::NonFinite {
            context: context.to_string(),
        });
    }
    Ok(())
}

fn denoiser_output<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    latent: &Array3<F>,
    conditioning: &TextEmbedding<F>,
    router: &mut AttentionRouter<'_, F>,
) -> Result<Array3<F>, EngineError> {
    let out = backend.denoise(latent, conditioning, router)?;
    if out.shape() != latent.shape() {
        return Err(EngineError::ShapeMismatch {
            context: "denoiser output",
            expected: latent.shape().to_vec(),
            got: out.shape().to_vec(),
        });
    }
    if !out.iter().all(|x| x.is_finite()) {
        return Err(EngineError::NonFinite {
            context: "denoiser output".into(),
        });
    }
    Ok(out)
}

/// One denoising step of the inversion branch under the null conditioning,
/// recording this step's self-attention maps into `cache`.
pub fn inversion_denoise_step<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    z_hat_t: &LatentCode<F>,
    null_text: &TextEmbedding<F>,
    eps_t: &Array3<F>,
    schedule: &SamplerSchedule<F>,
    cache: &mut AttentionCache<F>,
) -> Result<LatentCode<F>, EngineError> {
    let t = z_hat_t.timestep();
    let steps = schedule.num_steps();
    if t == 0 || t > steps {
        return Err(EngineError::StepOutOfRange { t, num_steps: steps });
    }
    check_latent(backend, z_hat_t, "inversion denoise input")?;
    check_noise(backend, eps_t, "inversion denoise noise")?;
    let mut router = AttentionRouter::capture(t, cache);
    let e = denoiser_output(backend, z_hat_t.data(), null_text, &mut router)?;
    let out = z_hat_t.data() * schedule.nu(t) + &(&e * schedule.beta(t)) + &(eps_t * schedule.gamma(t));
    Ok(LatentCode::new(out, t - 1)?)
}

/// One noising step: lifts the step `t - 1` latent to step `t` by the
/// inverse sampler update. The denoiser is evaluated at the previous-step
/// latent, a single application; `extra_iterations` optionally re-evaluate
/// it at successive estimates of the lifted latent.
pub fn add_noise_step<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    z_prime_prev: &LatentCode<F>,
    null_text: &TextEmbedding<F>,
    eps_t: &Array3<F>,
    schedule: &SamplerSchedule<F>,
    extra_iterations: usize,
) -> Result<LatentCode<F>, EngineError> {
    let t = z_prime_prev.timestep() + 1;
    let steps = schedule.num_steps();
    if t > steps {
        return Err(EngineError::StepOutOfRange { t, num_steps: steps });
    }
    check_latent(backend, z_prime_prev, "noising input")?;
    check_noise(backend, eps_t, "noising noise")?;
    let base = z_prime_prev.data() - &(eps_t * schedule.gamma(t));
    let inv_nu = F::one() / schedule.nu(t);
    let mut router = AttentionRouter::plain(t);
    let e = denoiser_output(backend, z_prime_prev.data(), null_text, &mut router)?;
    let mut estimate = (&base - &(&e * schedule.beta(t))) * inv_nu;
    for _ in 0..extra_iterations {
        let mut router = AttentionRouter::plain(t);
        let e = denoiser_output(backend, &estimate, null_text, &mut router)?;
        estimate = (&base - &(&e * schedule.beta(t))) * inv_nu;
    }
    Ok(LatentCode::new(estimate, t)?)
}

/// Lifts a clean latent through every schedule step, drawing one fresh
/// noise sample per step from `seed`. Returns the full trajectory
/// (`num_steps + 1` latents, indexed by timestep) and the noise bank.
pub fn invert<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    z_0: &LatentCode<F>,
    null_text: &TextEmbedding<F>,
    schedule: &SamplerSchedule<F>,
    seed: u64,
    extra_iterations: usize,
) -> Result<InversionResult<F>, EngineError>
where
    StandardNormal: Distribution<F>,
{
    if z_0.timestep() != 0 {
        return Err(EngineError::StepOutOfRange {
            t: z_0.timestep(),
            num_steps: 0,
        });
    }
    check_latent(backend, z_0, "inversion start")?;
    let steps = schedule.num_steps();
    let noise = NoiseBank::sample(backend.latent_shape(), steps, seed);
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(z_0.clone());
    for t in 1..=steps {
        let next = add_noise_step(
            backend,
            &trajectory[t - 1],
            null_text,
            noise.get(t)?,
            schedule,
            extra_iterations,
        )?;
        trajectory.push(next);
    }
    Ok(InversionResult { trajectory, noise })
}

/// One denoising step of the fusion branch under the target conditioning:
/// cached self-attention maps are replayed while the injection window is
/// active, and cross-attention values are scaled by `params.alpha`.
pub fn fusion_denoise_step<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    z_t: &LatentCode<F>,
    text: &TextEmbedding<F>,
    params: &FusionParams<F>,
    cache: &AttentionCache<F>,
    eps_t: &Array3<F>,
    schedule: &SamplerSchedule<F>,
) -> Result<LatentCode<F>, EngineError> {
    let t = z_t.timestep();
    let steps = schedule.num_steps();
    if t == 0 || t > steps {
        return Err(EngineError::StepOutOfRange { t, num_steps: steps });
    }
    params.validate(steps)?;
    check_latent(backend, z_t, "fusion denoise input")?;
    check_noise(backend, eps_t, "fusion denoise noise")?;
    let mut router = AttentionRouter::fuse(t, cache, params.alpha, params.inject_step, steps);
    let e = denoiser_output(backend, z_t.data(), text, &mut router)?;
    let out = z_t.data() * schedule.nu(t) + &(&e * schedule.beta(t)) + &(eps_t * schedule.gamma(t));
    Ok(LatentCode::new(out, t - 1)?)
}

/// Runs the fusion branch from the fully noised latent down to timestep
/// zero with fixed `(alpha, inject_step)`, reusing the per-step noise of
/// the inversion. Returns the trajectory indexed by timestep.
pub fn synthesize_with_params<F: Scalar>(
    backend: &dyn DiffusionBackend<F>,
    z_top: &LatentCode<F>,
    text: &TextEmbedding<F>,
    params: &FusionParams<F>,
    cache: &AttentionCache<F>,
    noise: &NoiseBank<F>,
    schedule: &SamplerSchedule<F>,
) -> Result<Vec<LatentCode<F>>, EngineError> {
    let steps = schedule.num_steps();
    if z_top.timestep() != steps {
        return Err(EngineError::StepOutOfRange {
            t: z_top.timestep(),
            num_steps: steps,
        });
    }
    if noise.num_steps() != steps {
        return Err(EngineError::ShapeMismatch {
            context: "noise bank steps",
            expected: vec![steps],
            got: vec![noise.num_steps()],
        });
    }
    params.validate(steps)?;
    let mut descending = Vec::with_capacity(steps + 1);
    descending.push(z_top.clone());
    for t in (1..=steps).rev() {
        let next = fusion_denoise_step(
            backend,
            descending.last().expect("trajectory is non-empty"),
            text,
            params,
            cache,
            noise.get(t)?,
            schedule,
        )?;
        descending.push(next);
    }
    descending.reverse();
    Ok(descending)
}
