//! Pluggable diffusion backend contract.
//!
//! A backend owns the codec between images and latents, the text encoder,
//! and one denoiser evaluation. It never decides attention behavior
//! itself: every attention block routes through the [`AttentionRouter`]
//! handed to `denoise`, which captures maps during inversion and replays
//! or rescales them during fusion. Backends must tolerate concurrent
//! `denoise` calls unless they say otherwise.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::attention::{
    attention_map, injected_self_attention, scaled_cross_attention, AttentionCache,
    AttentionError, LayerId,
};
use crate::latent::{LatentError, TextEmbedding};
use crate::scalar::Scalar;
use crate::schedule::{SamplerSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("step {t} outside 1..={num_steps}")]
    StepOutOfRange { t: usize, num_steps: usize },
    #[error("injection step {inject_step} exceeds the schedule's {num_steps} steps")]
    InjectStepTooLarge {
        inject_step: usize,
        num_steps: usize,
    },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values produced by {context}")]
    NonFinite { context: String },
    #[error("backend failure in {context}: {message}")]
    Backend { context: String, message: String },
    #[error("unknown backend '{name}'; available: {available:?}")]
    UnknownBackend { name: String, available: Vec<String> },
    #[error("text must be non-empty; use the null conditioning for the empty text")]
    EmptyText,
}

/// How the router treats attention for one denoiser evaluation.
enum RouterMode<'a, F> {
    /// Vanilla attention everywhere; no recording.
    Plain,
    /// Vanilla attention; every self-attention map is recorded.
    Capture { cache: &'a mut AttentionCache<F> },
    /// Fusion: self-attention maps may be replayed from the cache, and the
    /// cross-attention value path is scaled by `alpha`.
    Fuse {
        cache: &'a AttentionCache<F>,
        alpha: F,
        inject_step: usize,
        num_steps: usize,
    },
}

/// Routes every attention block of one denoiser evaluation at step `t`.
pub struct AttentionRouter<'a, F> {
    mode: RouterMode<'a, F>,
    t: usize,
}

impl<'a, F: Scalar> AttentionRouter<'a, F> {
    pub fn plain(t: usize) -> Self {
        Self {
            mode: RouterMode::Plain,
            t,
        }
    }

    pub fn capture(t: usize, cache: &'a mut AttentionCache<F>) -> Self {
        Self {
            mode: RouterMode::Capture { cache },
            t,
        }
    }

    pub fn fuse(
        t: usize,
        cache: &'a AttentionCache<F>,
        alpha: F,
        inject_step: usize,
        num_steps: usize,
    ) -> Self {
        Self {
            mode: RouterMode::Fuse {
                cache,
                alpha,
                inject_step,
                num_steps,
            },
            t,
        }
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    /// Self-attention for `layer`. Captures the map in capture mode and
    /// replays the cached map while fusion injection is active.
    pub fn self_attention(
        &mut self,
        layer: LayerId,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
    ) -> Result<Array2<F>, AttentionError> {
        match &mut self.mode {
            RouterMode::Plain => Ok(attention_map(q, k)?.dot(v)),
            RouterMode::Capture { cache } => {
                let map = attention_map(q, k)?;
                cache.insert(self.t, layer, map.clone())?;
                Ok(map.dot(v))
            }
            RouterMode::Fuse {
                cache,
                inject_step,
                num_steps,
                ..
            } => injected_self_attention(
                q,
                k,
                v,
                cache.get(self.t, layer),
                self.t,
                *inject_step,
                *num_steps,
            ),
        }
    }

    /// Cross-attention for `layer`; the value path is scaled in fuse mode.
    pub fn cross_attention(
        &mut self,
        _layer: LayerId,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
    ) -> Result<Array2<F>, AttentionError> {
        match &self.mode {
            RouterMode::Fuse { alpha, .. } => scaled_cross_attention(q, k, v, *alpha),
            _ => Ok(attention_map(q, k)?.dot(v)),
        }
    }
}

/// One diffusion model behind a stable contract. Images and latents are
/// `(channels, height, width)` arrays; images hold values in `[0, 1]`.
pub trait DiffusionBackend<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Latent geometry `(channels, height, width)`.
    fn latent_shape(&self) -> [usize; 3];

    /// Native input-image geometry `(channels, height, width)`.
    fn image_shape(&self) -> [usize; 3];

    /// Round-trip quality floor of the image codec, in dB PSNR.
    fn codec_psnr_floor(&self) -> f64;

    fn encode_image(&self, image: &Array3<F>) -> Result<Array3<F>, EngineError>;

    fn decode_latent(&self, latent: &Array3<F>) -> Result<Array3<F>, EngineError>;

    /// Token embeddings for a non-empty conditioning text.
    fn encode_text(&self, text: &str) -> Result<TextEmbedding<F>, EngineError>;

    /// Embeddings of the empty conditioning used by inversion.
    fn encode_null(&self) -> Result<TextEmbedding<F>, EngineError>;

    fn default_schedule(&self, num_steps: usize) -> Result<SamplerSchedule<F>, EngineError>;

    /// One denoiser evaluation at the router's step. All attention must go
    /// through `attn`.
    fn denoise(
        &self,
        latent: &Array3<F>,
        conditioning: &TextEmbedding<F>,
        attn: &mut AttentionRouter<'_, F>,
    ) -> Result<Array3<F>, EngineError>;

    /// False if `denoise` must not be called from multiple threads.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Resolves a backend by name. `toy` is the built-in test double; real
/// adapters register here as they land.
pub fn resolve_backend(name: &str, seed: u64) -> Result<Box<dyn DiffusionBackend<f64>>, EngineError> {
    match name {
        "toy" => Ok(Box::new(crate::toy::ToyBackend::<f64>::new(seed))),
        other => Err(EngineError::UnknownBackend {
            name: other.to_string(),
            available: vec!["toy".to_string()],
        }),
    }
}

/// Contract-testing double: identity codec over a fixed geometry and a
/// denoiser that returns one stored array no matter the input. Useful
/// because a frozen denoiser makes the noising and denoising branches
/// exact algebraic inverses.
#[derive(Debug, Clone)]
pub struct FixedOutputBackend<F> {
    shape: [usize; 3],
    output: Array3<F>,
    schedule: SamplerSchedule<F>,
}

impl<F: Scalar> FixedOutputBackend<F> {
    /// `output` must match `shape` and be finite.
    pub fn new(shape: [usize; 3], output: Array3<F>, schedule: SamplerSchedule<F>) -> Self {
        assert_eq!(output.shape(), shape, "fixed output must match the latent shape");
        assert!(output.iter().all(|x| x.is_finite()), "fixed output must be finite");
        Self {
            shape,
            output,
            schedule,
        }
    }

    fn check_shape(&self, arr: &Array3<F>, context: &'static str) -> Result<(), EngineError> {
        if arr.shape() != self.shape {
            return Err(EngineError::ShapeMismatch {
                context,
                expected: self.shape.to_vec(),
                got: arr.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl<F: Scalar> DiffusionBackend<F> for FixedOutputBackend<F> {
    fn name(&self) -> &str {
        "fixed-output"
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn codec_psnr_floor(&self) -> f64 {
        f64::INFINITY
    }

    fn encode_image(&self, image: &Array3<F>) -> Result<Array3<F>, EngineError> {
        self.check_shape(image, "fixed-output encode")?;
        Ok(image.clone())
    }

    fn decode_latent(&self, latent: &Array3<F>) -> Result<Array3<F>, EngineError> {
        self.check_shape(latent, "fixed-output decode")?;
        Ok(latent.clone())
    }

    fn encode_text(&self, text: &str) -> Result<TextEmbedding<F>, EngineError> {
        if text.is_empty() {
            return Err(EngineError::EmptyText);
        }
        Ok(Array2::zeros((1, 1)))
    }

    fn encode_null(&self) -> Result<TextEmbedding<F>, EngineError> {
        Ok(Array2::zeros((1, 1)))
    }

    fn default_schedule(&self, num_steps: usize) -> Result<SamplerSchedule<F>, EngineError> {
        if num_steps == self.schedule.num_steps() {
            Ok(self.schedule.clone())
        } else {
            Err(EngineError::Backend {
                context: "fixed-output schedule".into(),
                message: format!(
                    "built for {} steps, asked for {num_steps}",
                    self.schedule.num_steps()
                ),
            })
        }
    }

    fn denoise(
        &self,
        latent: &Array3<F>,
        _conditioning: &TextEmbedding<F>,
        _attn: &mut AttentionRouter<'_, F>,
    ) -> Result<Array3<F>, EngineError> {
        self.check_shape(latent, "fixed-output denoise")?;
        Ok(self.output.clone())
    }
}
