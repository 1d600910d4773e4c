//! Attention kernels shared by every diffusion backend.
//!
//! Self-attention maps captured while denoising the inverted source can be
//! replayed later in the fusion branch, overriding the maps the fused
//! latent would produce. Cross-attention scales only the value path, so
//! the map itself (and its row-stochasticity) is untouched by the scale.

use ndarray::Array2;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::scalar::{lossy, Scalar};

/// Position of one attention block inside a backend's denoiser.
pub type LayerId = usize;

/// Allowed deviation of any attention-map row sum from one.
pub const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values in {context}")]
    NonFinite { context: &'static str },
    #[error("attention map row {row} sums to {sum}, outside the row-stochastic tolerance")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("cache already holds a map for step {t}, layer {layer}")]
    DuplicateEntry { t: usize, layer: LayerId },
    #[error("no cached map for step {t}, layer {layer}; the inversion pass must cover every injected step")]
    MissingMap { t: usize, layer: LayerId },
    #[error("scale must be finite, got {alpha}")]
    NonFiniteScale { alpha: f64 },
}

fn check_finite<F: Scalar>(m: &Array2<F>, context: &'static str) -> Result<(), AttentionError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite { context })
    }
}

fn check_qkv<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
) -> Result<(), AttentionError> {
    if q.ncols() != k.ncols() || q.ncols() == 0 {
        return Err(AttentionError::ShapeMismatch {
            context: "query/key feature dim",
            expected: vec![q.nrows(), q.ncols()],
            got: vec![k.nrows(), k.ncols()],
        });
    }
    if v.nrows() != k.nrows() {
        return Err(AttentionError::ShapeMismatch {
            context: "key/value token count",
            expected: vec![k.nrows()],
            got: vec![v.nrows()],
        });
    }
    check_finite(q, "query")?;
    check_finite(k, "key")?;
    check_finite(v, "value")
}

/// Row-stochastic map `softmax(Q K^T / sqrt(d))`, stabilized by the row max.
pub fn attention_map<F: Scalar>(q: &Array2<F>, k: &Array2<F>) -> Result<Array2<F>, AttentionError> {
    if q.ncols() != k.ncols() || q.ncols() == 0 {
        return Err(AttentionError::ShapeMismatch {
            context: "query/key feature dim",
            expected: vec![q.nrows(), q.ncols()],
            got: vec![k.nrows(), k.ncols()],
        });
    }
    check_finite(q, "query")?;
    check_finite(k, "key")?;
    let scale = F::one() / F::from_usize(q.ncols()).unwrap().sqrt();
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|x| x * scale);
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.iter().cloned().fold(F::zero(), |acc, x| acc + x);
        row.mapv_inplace(|x| x / sum);
    }
    Ok(scores)
}

/// Checks that every row of `map` sums to one within [`ROW_SUM_TOL`].
pub fn check_row_stochastic<F: Scalar>(map: &Array2<F>) -> Result<(), AttentionError> {
    check_finite(map, "attention map")?;
    let tol = F::from_f64(ROW_SUM_TOL).unwrap();
    for (row, r) in map.rows().into_iter().enumerate() {
        let sum = r.iter().cloned().fold(F::zero(), |acc, x| acc + x);
        if (sum - F::one()).abs() > tol {
            return Err(AttentionError::NotRowStochastic {
                row,
                sum: lossy(sum),
            });
        }
    }
    Ok(())
}

/// True while the fusion branch replays cached maps: the first
/// `inject_step` denoising steps, counting down from `t = num_steps`.
pub fn injection_active(t: usize, inject_step: usize, num_steps: usize) -> bool {
    t > num_steps - inject_step.min(num_steps)
}

/// Self-attention for the fusion branch. While injection is active the
/// cached inversion map replaces the one the current latent would produce;
/// outside the window this is plain attention, bit for bit.
pub fn injected_self_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    cached: Option<&Array2<F>>,
    t: usize,
    inject_step: usize,
    num_steps: usize,
) -> Result<Array2<F>, AttentionError> {
    check_qkv(q, k, v)?;
    if injection_active(t, inject_step, num_steps) {
        let map = cached.ok_or(AttentionError::MissingMap { t, layer: 0 })?;
        if map.nrows() != q.nrows() || map.ncols() != k.nrows() {
            return Err(AttentionError::ShapeMismatch {
                context: "cached attention map",
                expected: vec![q.nrows(), k.nrows()],
                got: vec![map.nrows(), map.ncols()],
            });
        }
        check_row_stochastic(map)?;
        return Ok(map.dot(v));
    }
    Ok(attention_map(q, k)?.dot(v))
}

/// Cross-attention with the conditioning values scaled by `alpha`:
/// `softmax(Q K^T / sqrt(d)) . (alpha V)`. The attention map is unscaled.
pub fn scaled_cross_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    alpha: F,
) -> Result<Array2<F>, AttentionError> {
    if !alpha.is_finite() {
        return Err(AttentionError::NonFiniteScale { alpha: lossy(alpha) });
    }
    check_qkv(q, k, v)?;
    let map = attention_map(q, k)?;
    Ok(map.dot(&v.mapv(|x| x * alpha)))
}

/// Self-attention maps recorded during the inversion pass, keyed by
/// `(timestep, layer)`. Exactly one map may exist per key.
#[derive(Debug, Clone, Default)]
pub struct AttentionCache<F> {
    maps: BTreeMap<(usize, LayerId), Array2<F>>,
    layers: Vec<LayerId>,
}

impl<F: Scalar> AttentionCache<F> {
    pub fn new() -> Self {
        Self {
            maps: BTreeMap::new(),
            layers: Vec::new(),
        }
    }

    /// Records one map; rejects duplicates and maps that are not
    /// row-stochastic within [`ROW_SUM_TOL`].
    pub fn insert(
        &mut self,
        t: usize,
        layer: LayerId,
        map: Array2<F>,
    ) -> Result<(), AttentionError> {
        check_row_stochastic(&map)?;
        if self.maps.contains_key(&(t, layer)) {
            return Err(AttentionError::DuplicateEntry { t, layer });
        }
        if !self.layers.contains(&layer) {
            self.layers.push(layer);
        }
        self.maps.insert((t, layer), map);
        Ok(())
    }

    pub fn get(&self, t: usize, layer: LayerId) -> Option<&Array2<F>> {
        self.maps.get(&(t, layer))
    }

    pub fn contains(&self, t: usize, layer: LayerId) -> bool {
        self.maps.contains_key(&(t, layer))
    }

    /// Hooked layers in first-appearance order.
    pub fn layer_ids(&self) -> &[LayerId] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}
