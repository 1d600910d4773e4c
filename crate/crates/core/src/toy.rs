//! Deterministic miniature backend for desk-scale runs and tests.
//!
//! The codec is the identity on one-channel 8x8 images, so latents are
//! the images themselves. The denoiser is a fixed-weight stack of one
//! self-attention and one cross-attention block over the 64 pixel tokens,
//! small enough that a full fusion run takes milliseconds yet exercising
//! every attention-routing path a real adapter would.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::backend::{AttentionRouter, DiffusionBackend, EngineError};
use crate::latent::TextEmbedding;
use crate::scalar::{fp, Scalar};
use crate::schedule::SamplerSchedule;

pub const TOY_SIDE: usize = 8;
pub const TOY_MODEL_DIM: usize = 8;
pub const TOY_TOKENS: usize = TOY_SIDE * TOY_SIDE;
pub const TOY_TEXT_TOKENS: usize = 4;
pub const DEFAULT_WEIGHT_SEED: u64 = 17;

/// Fixed-weight test backend; same seed, same weights, same outputs.
#[derive(Debug, Clone)]
pub struct ToyBackend<F> {
    weight_seed: u64,
    w_embed: Array2<F>,
    w_q_self: Array2<F>,
    w_k_self: Array2<F>,
    w_v_self: Array2<F>,
    w_q_cross: Array2<F>,
    w_k_cross: Array2<F>,
    w_v_cross: Array2<F>,
    w_out: Array2<F>,
}

fn draw_matrix<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<F>
where
    StandardNormal: Distribution<F>,
{
    let s = fp::<F>(scale);
    let data: Vec<F> = (0..rows * cols)
        .map(|_| {
            let x: F = StandardNormal.sample(rng);
            x * s
        })
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape and length agree")
}

impl<F: Scalar> ToyBackend<F>
where
    StandardNormal: Distribution<F>,
{
    pub fn new(weight_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let d = TOY_MODEL_DIM;
        let head_scale = 1.0 / (d as f64).sqrt();
        Self {
            weight_seed,
            w_embed: draw_matrix(&mut rng, 1, d, 1.0),
            w_q_self: draw_matrix(&mut rng, d, d, head_scale),
            w_k_self: draw_matrix(&mut rng, d, d, head_scale),
            w_v_self: draw_matrix(&mut rng, d, d, head_scale),
            w_q_cross: draw_matrix(&mut rng, d, d, head_scale),
            w_k_cross: draw_matrix(&mut rng, d, d, head_scale),
            w_v_cross: draw_matrix(&mut rng, d, d, head_scale),
            w_out: draw_matrix(&mut rng, d, 1, head_scale),
        }
    }

    fn embed_tokens(&self, text: &str) -> TextEmbedding<F> {
        // The embedding is a pure function of the text bytes, independent
        // of run seeds, so identical prompts embed identically everywhere.
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.weight_seed);
        draw_matrix(&mut rng, TOY_TEXT_TOKENS, TOY_MODEL_DIM, 1.0)
    }
}

impl<F: Scalar> Default for ToyBackend<F>
where
    StandardNormal: Distribution<F>,
{
    fn default() -> Self {
        Self::new(DEFAULT_WEIGHT_SEED)
    }
}

impl<F: Scalar> DiffusionBackend<F> for ToyBackend<F>
where
    StandardNormal: Distribution<F>,
{
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> [usize; 3] {
        [1, TOY_SIDE, TOY_SIDE]
    }

    fn image_shape(&self) -> [usize; 3] {
        [1, TOY_SIDE, TOY_SIDE]
    }

    fn codec_psnr_floor(&self) -> f64 {
        // Identity codec: lossless.
        f64::INFINITY
    }

    fn encode_image(&self, image: &Array3<F>) -> Result<Array3<F>, EngineError> {
        if image.shape() != self.image_shape() {
            return Err(EngineError::ShapeMismatch {
                context: "toy encode_image",
                expected: self.image_shape().to_vec(),
                got: image.shape().to_vec(),
            });
        }
        if !image.iter().all(|x| x.is_finite()) {
            return Err(EngineError::NonFinite {
                context: "toy encode_image input".into(),
            });
        }
        Ok(image.clone())
    }

    fn decode_latent(&self, latent: &Array3<F>) -> Result<Array3<F>, EngineError> {
        if latent.shape() != self.latent_shape() {
            return Err(EngineError::ShapeMismatch {
                context: "toy decode_latent",
                expected: self.latent_shape().to_vec(),
                got: latent.shape().to_vec(),
            });
        }
        Ok(latent.clone())
    }

    fn encode_text(&self, text: &str) -> Result<TextEmbedding<F>, EngineError> {
        if text.is_empty() {
            return Err(EngineError::EmptyText);
        }
        Ok(self.embed_tokens(text))
    }

    fn encode_null(&self) -> Result<TextEmbedding<F>, EngineError> {
        Ok(self.embed_tokens(""))
    }

    fn default_schedule(&self, num_steps: usize) -> Result<SamplerSchedule<F>, EngineError> {
        Ok(SamplerSchedule::new(
            vec![F::one(); num_steps],
            vec![fp(0.1); num_steps],
            vec![fp(0.05); num_steps],
        )?)
    }

    fn denoise(
        &self,
        latent: &Array3<F>,
        conditioning: &TextEmbedding<F>,
        attn: &mut AttentionRouter<'_, F>,
    ) -> Result<Array3<F>, EngineError> {
        if latent.shape() != self.latent_shape() {
            return Err(EngineError::ShapeMismatch {
                context: "toy denoise latent",
                expected: self.latent_shape().to_vec(),
                got: latent.shape().to_vec(),
            });
        }
        if conditioning.ncols() != TOY_MODEL_DIM {
            return Err(EngineError::ShapeMismatch {
                context: "toy denoise conditioning",
                expected: vec![TOY_TEXT_TOKENS, TOY_MODEL_DIM],
                got: conditioning.shape().to_vec(),
            });
        }
        let tokens = latent
            .to_shape((TOY_TOKENS, 1))
            .expect("latent reshapes to tokens")
            .to_owned();
        let h = tokens.dot(&self.w_embed);
        let s = attn.self_attention(
            0,
            &h.dot(&self.w_q_self),
            &h.dot(&self.w_k_self),
            &h.dot(&self.w_v_self),
        )?;
        let c = attn.cross_attention(
            0,
            &s.dot(&self.w_q_cross),
            &conditioning.dot(&self.w_k_cross),
            &conditioning.dot(&self.w_v_cross),
        )?;
        let out = c.dot(&self.w_out);
        let out = out
            .to_shape(self.latent_shape_tuple())
            .expect("tokens reshape to latent")
            .to_owned();
        if !out.iter().all(|x| x.is_finite()) {
            return Err(EngineError::NonFinite {
                context: "toy denoise output".into(),
            });
        }
        Ok(out)
    }
}

impl<F: Scalar> ToyBackend<F> {
    fn latent_shape_tuple(&self) -> (usize, usize, usize) {
        (1, TOY_SIDE, TOY_SIDE)
    }
}
