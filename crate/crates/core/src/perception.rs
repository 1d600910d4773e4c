//! Similarity scoring between images and texts.
//!
//! Two embedding clients drive the scores: one compares a candidate image
//! against the reference image, the other places images and texts in a
//! joint space. Raw cosines are clamped to `[0, 1]` exactly once, at the
//! scorer boundary, so downstream consumers can rely on the range without
//! re-clamping. The built-in clients are cheap deterministic stand-ins; a
//! real perceptual model plugs in through the same trait.

use ndarray::{Array1, Array2, Array3};
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("text must be non-empty")]
    EmptyText,
    #[error("embedding dimensions disagree: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite values in {context}")]
    NonFinite { context: &'static str },
    #[error("model '{model}' does not embed {modality}")]
    UnsupportedModality {
        model: String,
        modality: &'static str,
    },
    #[error("unknown embedding model '{name}'; available: {available:?}")]
    UnknownModel { name: String, available: Vec<String> },
    #[error("embedding backend failure in {context}: {message}")]
    Backend { context: String, message: String },
}

/// Maps images and texts into one embedding space. Implementations must
/// be deterministic for identical inputs.
pub trait EmbeddingClient<F: Scalar>: Send + Sync {
    fn id(&self) -> &str;

    fn embed_image(&self, image: &Array3<F>) -> Result<Array1<F>, PerceptionError>;

    fn embed_text(&self, text: &str) -> Result<Array1<F>, PerceptionError>;

    /// Input geometry `(width, height)` the model expects, if it has one.
    fn native_size(&self) -> Option<(usize, usize)> {
        None
    }
}

/// Cosine similarity in `[-1, 1]`. A zero-norm vector has no direction,
/// so any comparison against one scores `0`.
pub fn cosine_similarity<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> Result<F, PerceptionError> {
    if a.len() != b.len() {
        return Err(PerceptionError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if !a.iter().all(|x| x.is_finite()) || !b.iter().all(|x| x.is_finite()) {
        return Err(PerceptionError::NonFinite {
            context: "embedding",
        });
    }
    let norm_a = a.dot(a).sqrt();
    let norm_b = b.dot(b).sqrt();
    if norm_a == F::zero() || norm_b == F::zero() {
        return Ok(F::zero());
    }
    Ok(a.dot(b) / (norm_a * norm_b))
}

fn clamp_unit<F: Scalar>(x: F) -> F {
    x.max(F::zero()).min(F::one())
}

/// The two similarity channels a fusion run scores against.
pub struct PerceptionScorer<F> {
    image_client: Box<dyn EmbeddingClient<F>>,
    joint_client: Box<dyn EmbeddingClient<F>>,
}

impl<F: Scalar> PerceptionScorer<F> {
    pub fn new(
        image_client: Box<dyn EmbeddingClient<F>>,
        joint_client: Box<dyn EmbeddingClient<F>>,
    ) -> Self {
        Self {
            image_client,
            joint_client,
        }
    }

    /// Resolves both clients by registry name.
    pub fn from_names(
        image_model: &str,
        joint_model: &str,
        seed: u64,
    ) -> Result<Self, PerceptionError>
    where
        StandardNormal: rand_distr::Distribution<F>,
    {
        Ok(Self::new(
            resolve_embedding_client(image_model, seed)?,
            resolve_embedding_client(joint_model, seed)?,
        ))
    }

    pub fn model_ids(&self) -> (String, String) {
        (
            self.image_client.id().to_string(),
            self.joint_client.id().to_string(),
        )
    }

    /// Similarity of the candidate to the reference image, in `[0, 1]`.
    pub fn image_similarity(
        &self,
        reference: &Array3<F>,
        candidate: &Array3<F>,
    ) -> Result<F, PerceptionError> {
        let a = self.image_client.embed_image(reference)?;
        let b = self.image_client.embed_image(candidate)?;
        Ok(clamp_unit(cosine_similarity(&a, &b)?))
    }

    /// Similarity of the candidate to the text, in `[0, 1]`.
    pub fn text_similarity(&self, candidate: &Array3<F>, text: &str) -> Result<F, PerceptionError> {
        if text.is_empty() {
            return Err(PerceptionError::EmptyText);
        }
        let a = self.joint_client.embed_image(candidate)?;
        let b = self.joint_client.embed_text(text)?;
        Ok(clamp_unit(cosine_similarity(&a, &b)?))
    }
}

/// Image-only client: the embedding is the flattened pixel array. Image
/// similarity then reduces to a cosine over raw pixels.
#[derive(Debug, Clone, Default)]
pub struct PixelEmbedding;

impl<F: Scalar> EmbeddingClient<F> for PixelEmbedding {
    fn id(&self) -> &str {
        "pixel"
    }

    fn embed_image(&self, image: &Array3<F>) -> Result<Array1<F>, PerceptionError> {
        Ok(Array1::from_iter(image.iter().copied()))
    }

    fn embed_text(&self, _text: &str) -> Result<Array1<F>, PerceptionError> {
        Err(PerceptionError::UnsupportedModality {
            model: "pixel".into(),
            modality: "text",
        })
    }
}

/// Joint-space stand-in. Texts map to seeded Gaussian vectors keyed by
/// their hash; images project through a seeded random matrix keyed by
/// their pixel count. Deterministic, cheap, and shaped like the real
/// thing, but carrying no perceptual meaning.
#[derive(Debug, Clone)]
pub struct HashedJointEmbedding {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedJointEmbedding {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

impl HashedJointEmbedding {
    fn rng_for(&self, material: u64) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ material)
    }
}

impl<F: Scalar> EmbeddingClient<F> for HashedJointEmbedding
where
    StandardNormal: rand_distr::Distribution<F>,
{
    fn id(&self) -> &str {
        "hashed-joint"
    }

    fn embed_image(&self, image: &Array3<F>) -> Result<Array1<F>, PerceptionError> {
        use rand_distr::Distribution;
        let flat = Array1::from_iter(image.iter().copied());
        let mut rng = self.rng_for(0x9e37_79b9_7f4a_7c15 ^ flat.len() as u64);
        let projection: Array2<F> =
            Array2::from_shape_fn((self.dim, flat.len()), |_| StandardNormal.sample(&mut rng));
        Ok(projection.dot(&flat))
    }

    fn embed_text(&self, text: &str) -> Result<Array1<F>, PerceptionError> {
        use rand_distr::Distribution;
        let digest = Sha256::digest(text.as_bytes());
        let material = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = self.rng_for(material);
        Ok(Array1::from_shape_fn(self.dim, |_| {
            StandardNormal.sample(&mut rng)
        }))
    }
}

/// Resolves an embedding client by name. Both built-ins are deterministic
/// stand-ins; real models register here as they land.
pub fn resolve_embedding_client<F: Scalar>(
    name: &str,
    seed: u64,
) -> Result<Box<dyn EmbeddingClient<F>>, PerceptionError>
where
    StandardNormal: rand_distr::Distribution<F>,
{
    match name {
        "pixel" => Ok(Box::new(PixelEmbedding)),
        "hashed-joint" => Ok(Box::new(HashedJointEmbedding { dim: 64, seed })),
        other => Err(PerceptionError::UnknownModel {
            name: other.to_string(),
            available: vec!["pixel".to_string(), "hashed-joint".to_string()],
        }),
    }
}
