//! Fuses an object image with an object text inside a few-step diffusion
//! sampler, balancing fidelity to the image against editability toward the
//! text automatically: per-step sampling-noise optimization keeps the
//! inversion reproducible, a controller picks how many self-attention maps
//! to inject, and a golden-section search picks the cross-attention scale
//! that maximizes a harmony score of the two similarities.

pub mod attention;
pub mod backend;
pub mod engine;
pub mod harmony;
pub mod imageio;
pub mod inject;
pub mod latent;
pub mod manifest;
pub mod noise;
pub mod perception;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod schedule;
pub mod search;
pub mod stats;
pub mod toy;

pub use engine::{FusionParams, InversionResult};
pub use harmony::{balance_bsim, score_f, HarmonyConfig, SimilarityPair};
pub use inject::{adjust_injection_step, InjectionProbe};
pub use noise::{gaussian_kl_loss, loss_ratio, optimize_noise, BalanceConfig, LossReport};
pub use perception::{cosine_similarity, EmbeddingClient, PerceptionScorer};
pub use pipeline::{run_batch, run_synthesis, run_synthesis_with, BatchConfig, CandidateScorer};
pub use report::{RunConfig, RunReport, RunStatus};
pub use scalar::Scalar;
pub use search::{golden_section_search, SearchTrace};
pub use stats::{compare_methods, exact_permutation_p, kruskal_wallis, KruskalWallis};

/// Concrete `f64` aliases used by the pipeline and the command line.
pub type FusionParams64 = FusionParams<f64>;
pub type HarmonyConfig64 = HarmonyConfig<f64>;
pub type SimilarityPair64 = SimilarityPair<f64>;
pub type SearchTrace64 = SearchTrace<f64>;
