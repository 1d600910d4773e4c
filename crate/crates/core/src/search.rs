//! Golden-section maximization of a unimodal objective over a bracket.
//!
//! Each iteration keeps the interior probe that survives the bracket
//! update, so exactly one fresh evaluation is paid per shrink and no alpha
//! is ever evaluated twice. On an exact probe tie both edges move inward,
//! which is safe for a unimodal objective: a tie brackets the apex between
//! the probes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{fp, lossy, Scalar};

/// Hard ceiling on objective evaluations; only reachable with a tolerance
/// near the floating-point floor of the bracket width.
const MAX_EVALS: usize = 1000;

#[derive(Debug, Error)]
pub enum SearchError<E> {
    #[error("invalid bracket [{a}, {b}]; need finite a < b")]
    InvalidBracket { a: f64, b: f64 },
    #[error("invalid tolerance {tol}; must be positive and finite")]
    InvalidTolerance { tol: f64 },
    #[error("objective failed at alpha = {alpha}")]
    Objective {
        alpha: f64,
        #[source]
        source: E,
    },
    #[error("objective returned a non-finite value at alpha = {alpha}")]
    NonFiniteValue { alpha: f64 },
}

/// Record of one bracket search: every objective evaluation in call order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace<F> {
    /// `(alpha, value)` pairs in evaluation order; no alpha repeats.
    pub evaluations: Vec<(F, F)>,
    pub alpha_star: F,
    /// False only if the evaluation ceiling fired before the bracket closed.
    pub converged: bool,
}

impl<F> SearchTrace<F> {
    pub fn evaluation_count(&self) -> usize {
        self.evaluations.len()
    }
}

struct Evaluator<F, O> {
    objective: O,
    evaluations: Vec<(F, F)>,
}

impl<F, O, E> Evaluator<F, O>
where
    F: Scalar,
    O: FnMut(F) -> Result<F, E>,
{
    fn eval(&mut self, alpha: F) -> Result<F, SearchError<E>> {
        if let Some(&(_, value)) = self.evaluations.iter().find(|(x, _)| *x == alpha) {
            return Ok(value);
        }
        let value = (self.objective)(alpha).map_err(|source| SearchError::Objective {
            alpha: lossy(alpha),
            source,
        })?;
        if !value.is_finite() {
            return Err(SearchError::NonFiniteValue { alpha: lossy(alpha) });
        }
        self.evaluations.push((alpha, value));
        Ok(value)
    }
}

/// Maximizes `objective` over `[a, b]`, returning the midpoint of the
/// final bracket once its width is at most `tol`, plus the full trace.
///
/// Evaluation count is bounded by `ceil(log_phi((b - a) / tol)) + 2`.
pub fn golden_section_search<F, O, E>(
    objective: O,
    a: F,
    b: F,
    tol: F,
) -> Result<(F, SearchTrace<F>), SearchError<E>>
where
    F: Scalar,
    O: FnMut(F) -> Result<F, E>,
{
    if !a.is_finite() || !b.is_finite() || a >= b {
        return Err(SearchError::InvalidBracket {
            a: lossy(a),
            b: lossy(b),
        });
    }
    if !tol.is_finite() || tol <= F::zero() {
        return Err(SearchError::InvalidTolerance { tol: lossy(tol) });
    }

    let half = fp::<F>(0.5);
    // 1/phi = (sqrt 5 - 1) / 2
    let inv_phi = (fp::<F>(5.0).sqrt() - F::one()) * half;
    let mut a = a;
    let mut b = b;
    let mut ev = Evaluator {
        objective,
        evaluations: Vec::new(),
    };
    let mut converged = true;

    if b - a > tol {
        let mut x1 = b - (b - a) * inv_phi;
        let mut x2 = a + (b - a) * inv_phi;
        let mut f1 = ev.eval(x1)?;
        let mut f2 = ev.eval(x2)?;
        loop {
            if b - a <= tol {
                break;
            }
            if ev.evaluations.len() >= MAX_EVALS {
                converged = false;
                break;
            }
            if f1 > f2 {
                // Apex is left of x2; the old left probe becomes the new right.
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - (b - a) * inv_phi;
                f1 = ev.eval(x1)?;
            } else if f2 > f1 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + (b - a) * inv_phi;
                f2 = ev.eval(x2)?;
            } else {
                // Exact tie: the apex sits between the probes.
                a = x1;
                b = x2;
                if b - a <= tol {
                    break;
                }
                x1 = b - (b - a) * inv_phi;
                x2 = a + (b - a) * inv_phi;
                f1 = ev.eval(x1)?;
                f2 = ev.eval(x2)?;
            }
        }
    }

    let alpha_star = (a + b) * half;
    let trace = SearchTrace {
        evaluations: ev.evaluations,
        alpha_star,
        converged,
    };
    Ok((alpha_star, trace))
}

/// Evaluation bound for a bracket of width `width` closed to `tol`.
pub fn evaluation_bound(width: f64, tol: f64) -> usize {
    if width <= tol {
        return 0;
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (width / tol).log(phi).ceil() as usize + 2
}
