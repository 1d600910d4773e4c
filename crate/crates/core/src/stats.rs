//! Rank statistics and metric aggregation for batch comparisons.
//!
//! Operates on f64 throughout: metric samples arrive as plain numbers,
//! and the chi-squared machinery behind the test is double-precision.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least 2 groups, got {n}")]
    TooFewGroups { n: usize },
    #[error("group {index} is empty")]
    EmptyGroup { index: usize },
    #[error("non-finite value in group {index}")]
    NonFinite { index: usize },
    #[error("method '{label}' has no samples")]
    EmptyMethod { label: String },
    #[error("{total:.3e} rank assignments exceed the exact-test budget of {budget}")]
    PermutationBudget { total: f64, budget: u64 },
}

/// Result of the rank test. `h` uses average ranks for ties and the tie
/// correction factor; `p_value` is the upper chi-squared tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
    /// True when the tail probability underflowed f64 and was reported as
    /// the smallest positive double instead of zero.
    pub p_underflow: bool,
    /// True when every observation is tied; `h` is 0 and `p_value` 1 by
    /// convention because ranks carry no information.
    pub degenerate: bool,
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("values are finite"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end (0-based) share ranks start+1 ..= end.
        let average = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = average;
        }
        start = end;
    }
    ranks
}

/// Tie correction `1 - sum(t^3 - t) / (n^3 - n)` over runs of tied values.
fn tie_correction(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mut tie_sum = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end] == sorted[start] {
            end += 1;
        }
        let t = (end - start) as f64;
        tie_sum += t * t * t - t;
        start = end;
    }
    1.0 - tie_sum / (n * n * n - n)
}

fn validate_groups(groups: &[Vec<f64>]) -> Result<(), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups { n: groups.len() });
    }
    for (index, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(StatsError::EmptyGroup { index });
        }
        if !group.iter().all(|x| x.is_finite()) {
            return Err(StatsError::NonFinite { index });
        }
    }
    Ok(())
}

fn chi_squared_tail(h: f64, df: usize) -> (f64, bool) {
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    let p = dist.sf(h);
    if p < f64::MIN_POSITIVE {
        (f64::MIN_POSITIVE, true)
    } else {
        (p, false)
    }
}

/// Rank test of whether the groups share one distribution.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis, StatsError> {
    validate_groups(groups)?;
    let degrees_of_freedom = groups.len() - 1;
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let ranks = average_ranks(&pooled);

    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
    let correction = tie_correction(&sorted);
    if correction == 0.0 {
        return Ok(KruskalWallis {
            h: 0.0,
            p_value: 1.0,
            degrees_of_freedom,
            p_underflow: false,
            degenerate: true,
        });
    }

    let mut offset = 0;
    let mut rank_share = 0.0;
    for group in groups {
        let sum: f64 = ranks[offset..offset + group.len()].iter().sum();
        rank_share += sum * sum / group.len() as f64;
        offset += group.len();
    }
    let h_raw = 12.0 / (n * (n + 1.0)) * rank_share - 3.0 * (n + 1.0);
    let h = (h_raw / correction).max(0.0);
    let (p_value, p_underflow) = chi_squared_tail(h, degrees_of_freedom);
    Ok(KruskalWallis {
        h,
        p_value,
        degrees_of_freedom,
        p_underflow,
        degenerate: false,
    })
}

/// Cap on how many rank assignments the exact test will enumerate.
pub const EXACT_PERMUTATION_BUDGET: u64 = 2_000_000;

fn assignment_count(groups: &[Vec<f64>]) -> f64 {
    let n: usize = groups.iter().map(Vec::len).sum();
    let mut ln_total = ln_gamma(n as f64 + 1.0);
    for group in groups {
        ln_total -= ln_gamma(group.len() as f64 + 1.0);
    }
    ln_total.exp()
}

/// Exact permutation p-value: the share of equally sized rank
/// assignments whose statistic is at least the observed one. Global
/// ranks are computed once; only group membership is permuted. Errors
/// when the assignment count exceeds `budget`.
pub fn exact_permutation_p(
    groups: &[Vec<f64>],
    budget: u64,
) -> Result<(f64, u64), StatsError> {
    validate_groups(groups)?;
    let approx_total = assignment_count(groups);
    if approx_total > budget as f64 {
        return Err(StatsError::PermutationBudget {
            total: approx_total,
            budget,
        });
    }

    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let ranks = average_ranks(&pooled);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();

    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
    if tie_correction(&sorted) == 0.0 {
        // Every assignment scores identically; the observed one is never
        // extreme.
        return Ok((1.0, 1));
    }

    // H is monotone in sum(R_j^2 / n_j), so compare that statistic.
    let mut offset = 0;
    let mut observed = 0.0;
    for size in &sizes {
        let sum: f64 = ranks[offset..offset + size].iter().sum();
        observed += sum * sum / *size as f64;
        offset += size;
    }
    let threshold = observed - 1e-9 * observed.abs().max(1.0);

    let mut remaining = sizes.clone();
    let mut sums = vec![0.0; sizes.len()];
    let mut total: u64 = 0;
    let mut at_least: u64 = 0;
    fn recurse(
        idx: usize,
        ranks: &[f64],
        sizes: &[usize],
        remaining: &mut [usize],
        sums: &mut [f64],
        threshold: f64,
        total: &mut u64,
        at_least: &mut u64,
    ) {
        if idx == ranks.len() {
            let statistic: f64 = sums
                .iter()
                .zip(sizes)
                .map(|(s, n)| s * s / *n as f64)
                .sum();
            *total += 1;
            if statistic >= threshold {
                *at_least += 1;
            }
            return;
        }
        for j in 0..sizes.len() {
            if remaining[j] > 0 {
                remaining[j] -= 1;
                sums[j] += ranks[idx];
                recurse(idx + 1, ranks, sizes, remaining, sums, threshold, total, at_least);
                sums[j] -= ranks[idx];
                remaining[j] += 1;
            }
        }
    }
    recurse(
        0,
        &ranks,
        &sizes,
        &mut remaining,
        &mut sums,
        threshold,
        &mut total,
        &mut at_least,
    );
    Ok((at_least as f64 / total as f64, total))
}

/// Per-run metric values collected from one finished synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub image_sim: f64,
    pub text_sim: f64,
    pub f_score: f64,
    pub b_sim: f64,
    /// Auxiliary judged scores, when a judge is wired in.
    pub aesthetic: Option<f64>,
    pub preference: Option<f64>,
}

/// All samples one method produced over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub label: String,
    pub samples: Vec<MetricSample>,
}

/// Column means for one method. Auxiliary columns are `None` when no
/// sample carried them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub count: usize,
    pub image_sim: f64,
    pub text_sim: f64,
    pub aesthetic: Option<f64>,
    pub preference: Option<f64>,
    pub f_score: f64,
    pub b_sim: f64,
}

/// One cross-method test over a single metric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTest {
    pub metric: String,
    pub test: KruskalWallis,
    pub exact_p: Option<f64>,
    pub exact_assignments: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub rows: Vec<MethodRow>,
    pub tests: Vec<MetricTest>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn optional_mean(values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(mean(&values))
    }
}

/// Column means over one method's samples.
pub fn summarize_method(method: &MethodMetrics) -> Result<MethodRow, StatsError> {
    if method.samples.is_empty() {
        return Err(StatsError::EmptyMethod {
            label: method.label.clone(),
        });
    }
    let pick = |f: fn(&MetricSample) -> f64| -> Vec<f64> {
        method.samples.iter().map(f).collect()
    };
    Ok(MethodRow {
        label: method.label.clone(),
        count: method.samples.len(),
        image_sim: mean(&pick(|s| s.image_sim)),
        text_sim: mean(&pick(|s| s.text_sim)),
        aesthetic: optional_mean(method.samples.iter().filter_map(|s| s.aesthetic).collect()),
        preference: optional_mean(method.samples.iter().filter_map(|s| s.preference).collect()),
        f_score: mean(&pick(|s| s.f_score)),
        b_sim: mean(&pick(|s| s.b_sim)),
    })
}

type MetricExtractor = fn(&MetricSample) -> Option<f64>;

const METRIC_COLUMNS: [(&str, MetricExtractor); 6] = [
    ("image_sim", |s| Some(s.image_sim)),
    ("text_sim", |s| Some(s.text_sim)),
    ("aesthetic", |s| s.aesthetic),
    ("preference", |s| s.preference),
    ("f_score", |s| Some(s.f_score)),
    ("b_sim", |s| s.b_sim.into()),
];

/// Means per method plus, with two or more methods, one rank test per
/// metric column across all of them. `exact_budget` switches the exact
/// permutation test on; metrics only some methods report are skipped.
pub fn compare_methods(
    methods: &[MethodMetrics],
    exact_budget: Option<u64>,
) -> Result<MethodComparison, StatsError> {
    let rows = methods
        .iter()
        .map(summarize_method)
        .collect::<Result<Vec<_>, _>>()?;
    let mut tests = Vec::new();
    if methods.len() >= 2 {
        for (name, extract) in METRIC_COLUMNS {
            let groups: Vec<Vec<f64>> = methods
                .iter()
                .map(|m| m.samples.iter().filter_map(extract).collect())
                .collect();
            if groups.iter().any(Vec::is_empty) {
                continue;
            }
            let test = kruskal_wallis(&groups)?;
            let (exact_p, exact_assignments) = match exact_budget {
                Some(budget) => {
                    let (p, count) = exact_permutation_p(&groups, budget)?;
                    (Some(p), Some(count))
                }
                None => (None, None),
            };
            tests.push(MetricTest {
                metric: name.to_string(),
                test,
                exact_p,
                exact_assignments,
            });
        }
    }
    Ok(MethodComparison { rows, tests })
}

fn format_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Fixed-width text table: one row per method, then the tests.
pub fn render_comparison(comparison: &MethodComparison) -> String {
    let mut out = String::new();
    let headers = [
        "method", "n", "image_sim", "text_sim", "aesthetic", "preference", "f_score", "b_sim",
    ];
    let mut grid: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
    for row in &comparison.rows {
        grid.push(vec![
            row.label.clone(),
            row.count.to_string(),
            format_cell(Some(row.image_sim)),
            format_cell(Some(row.text_sim)),
            format_cell(row.aesthetic),
            format_cell(row.preference),
            format_cell(Some(row.f_score)),
            format_cell(Some(row.b_sim)),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:>w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    if !comparison.tests.is_empty() {
        out.push('\n');
        for t in &comparison.tests {
            let mut line = format!(
                "{}: H = {:.4}, df = {}, p = {:.4e}",
                t.metric, t.test.h, t.test.degrees_of_freedom, t.test.p_value
            );
            if t.test.p_underflow {
                line.push_str(" (underflow)");
            }
            if t.test.degenerate {
                line.push_str(" (all values tied)");
            }
            if let (Some(p), Some(count)) = (t.exact_p, t.exact_assignments) {
                line.push_str(&format!(", exact p = {p:.4} over {count} assignments"));
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_separated_groups_match_the_hand_computed_statistic() {
        let groups = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let kw = kruskal_wallis(&groups).unwrap();
        // Ranks 1..6, rank sums 6 and 15:
        // H = 12/42 * (36/3 + 225/3) - 21 = 27/7.
        assert_relative_eq!(kw.h, 27.0 / 7.0, max_relative = 1e-12);
        assert_eq!(kw.degrees_of_freedom, 1);
        assert!((kw.p_value - 0.0495).abs() < 5e-4, "p = {}", kw.p_value);
        assert!(!kw.degenerate);
        assert!(!kw.p_underflow);
    }

    #[test]
    fn tied_values_use_average_ranks_and_the_correction_factor() {
        let groups = vec![vec![1.0, 1.0, 2.0], vec![2.0, 3.0, 3.0]];
        let kw = kruskal_wallis(&groups).unwrap();
        // Average ranks (1.5 1.5 3.5 | 3.5 5.5 5.5), raw H = 64/21,
        // correction 1 - 18/210 = 32/35, so H = 64/21 * 35/32 = 10/3.
        assert_relative_eq!(kw.h, 10.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn three_groups_match_the_hand_computed_tail() {
        let groups = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let kw = kruskal_wallis(&groups).unwrap();
        // Rank sums 3, 7, 11: H = 12/42 * (9/2 + 49/2 + 121/2) - 21 = 32/7.
        assert_relative_eq!(kw.h, 32.0 / 7.0, max_relative = 1e-12);
        assert_eq!(kw.degrees_of_freedom, 2);
        // With df = 2 the tail is exp(-H/2).
        assert_relative_eq!(kw.p_value, (-16.0 / 7.0_f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn fully_tied_data_is_degenerate_not_an_error() {
        let groups = vec![vec![5.0, 5.0], vec![5.0, 5.0, 5.0]];
        let kw = kruskal_wallis(&groups).unwrap();
        assert!(kw.degenerate);
        assert_eq!(kw.h, 0.0);
        assert_eq!(kw.p_value, 1.0);
    }

    #[test]
    fn an_extreme_statistic_reports_underflow_instead_of_zero() {
        let a: Vec<f64> = (0..1600).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..1600).map(|i| 10_000.0 + i as f64).collect();
        let kw = kruskal_wallis(&[a, b].to_vec()).unwrap();
        assert!(kw.p_underflow);
        assert_eq!(kw.p_value, f64::MIN_POSITIVE);
        assert!(kw.p_value > 0.0);
    }

    #[test]
    fn group_validation_catches_bad_input() {
        assert!(matches!(
            kruskal_wallis(&[vec![1.0]].to_vec()),
            Err(StatsError::TooFewGroups { n: 1 })
        ));
        assert!(matches!(
            kruskal_wallis(&[vec![1.0], vec![]].to_vec()),
            Err(StatsError::EmptyGroup { index: 1 })
        ));
        assert!(matches!(
            kruskal_wallis(&[vec![1.0], vec![f64::NAN]].to_vec()),
            Err(StatsError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn the_exact_test_matches_a_countable_oracle() {
        // Of the C(6,3) = 20 assignments only the two extreme splits reach
        // the observed statistic, so p = 0.1.
        let groups = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let (p, total) = exact_permutation_p(&groups, EXACT_PERMUTATION_BUDGET).unwrap();
        assert_eq!(total, 20);
        assert_relative_eq!(p, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn the_exact_test_refuses_oversized_problems() {
        let a: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let b: Vec<f64> = (15..30).map(|i| i as f64).collect();
        assert!(matches!(
            exact_permutation_p(&[a, b].to_vec(), EXACT_PERMUTATION_BUDGET),
            Err(StatsError::PermutationBudget { .. })
        ));
    }

    #[test]
    fn exact_and_asymptotic_tails_agree_loosely_on_small_data() {
        let groups = vec![vec![1.0, 3.0, 5.0], vec![2.0, 4.0, 6.0]];
        let kw = kruskal_wallis(&groups).unwrap();
        let (p, _) = exact_permutation_p(&groups, EXACT_PERMUTATION_BUDGET).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!((p - kw.p_value).abs() < 0.6);
    }

    fn sample(image: f64, text: f64) -> MetricSample {
        MetricSample {
            image_sim: image,
            text_sim: text,
            f_score: image + text,
            b_sim: (image - text).abs(),
            aesthetic: None,
            preference: None,
        }
    }

    #[test]
    fn method_rows_are_column_means() {
        let method = MethodMetrics {
            label: "ours".into(),
            samples: vec![sample(0.8, 0.2), sample(0.6, 0.4)],
        };
        let row = summarize_method(&method).unwrap();
        assert_eq!(row.count, 2);
        assert_relative_eq!(row.image_sim, 0.7);
        assert_relative_eq!(row.text_sim, 0.3);
        assert_relative_eq!(row.f_score, 1.0);
        assert_eq!(row.aesthetic, None);
    }

    #[test]
    fn comparisons_test_each_shared_metric_column() {
        let a = MethodMetrics {
            label: "a".into(),
            samples: vec![sample(0.1, 0.2), sample(0.2, 0.3), sample(0.3, 0.1)],
        };
        let b = MethodMetrics {
            label: "b".into(),
            samples: vec![sample(0.7, 0.8), sample(0.8, 0.9), sample(0.9, 0.7)],
        };
        let cmp = compare_methods(&[a, b], Some(EXACT_PERMUTATION_BUDGET)).unwrap();
        assert_eq!(cmp.rows.len(), 2);
        // Aux columns are absent, so four testable metrics remain.
        assert_eq!(cmp.tests.len(), 4);
        for t in &cmp.tests {
            assert!(t.exact_p.is_some());
            assert!((0.0..=1.0).contains(&t.test.p_value));
        }
        let table = render_comparison(&cmp);
        assert!(table.contains("image_sim"));
        assert!(table.contains("exact p"));
        assert!(table.lines().count() >= 7);
    }

    #[test]
    fn a_single_method_renders_without_tests() {
        let a = MethodMetrics {
            label: "solo".into(),
            samples: vec![sample(0.5, 0.5)],
        };
        let cmp = compare_methods(&[a], None).unwrap();
        assert!(cmp.tests.is_empty());
        let table = render_comparison(&cmp);
        assert!(table.contains("solo"));
    }
}
