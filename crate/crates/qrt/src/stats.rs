//! Cross-dataset statistical comparison: standardized effect sizes, the
//! Friedman omnibus test, pairwise Wilcoxon signed-rank tests with Holm's
//! step-down correction, average ranks with clique structure, and the
//! discreteness score for targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("result matrix is ragged: missing cell ({dataset}, {method})")]
    MissingCell { dataset: String, method: String },
    #[error("need at least {min} {what}, got {got}")]
    TooFew { what: &'static str, min: usize, got: usize },
    #[error("baseline method {0:?} not present")]
    UnknownBaseline(String),
}

/// Pooled-SD Cohen's d: (mean_a - mean_b) / s_pooled with n-1 variance
/// denominators. A zero pooled SD yields 0 when the means agree and a signed
/// infinity otherwise.
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    assert!(a.len() >= 2 && b.len() >= 2, "need at least two samples per side");
    let (ma, mb) = (mean(a), mean(b));
    let va = sample_var(a, ma);
    let vb = sample_var(b, mb);
    let pooled = (((a.len() - 1) as f64 * va + (b.len() - 1) as f64 * vb)
        / (a.len() + b.len() - 2) as f64)
        .sqrt();
    if pooled == 0.0 {
        if ma == mb {
            0.0
        } else if ma > mb {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (ma - mb) / pooled
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64], m: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Mid-ranks (1-based) of a row; ties share the average of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // positions are 1-based
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Friedman chi-square test over a datasets x methods score matrix (lower
/// scores rank better; the statistic is direction-invariant). Ties are
/// mid-ranked and the tie-corrected denominator is applied. A fully
/// degenerate matrix returns (0, 1).
pub fn friedman(scores: &[Vec<f64>]) -> Result<(f64, f64), StatsError> {
    let d = scores.len();
    if d < 2 {
        return Err(StatsError::TooFew { what: "datasets", min: 2, got: d });
    }
    let m = scores[0].len();
    if m < 2 {
        return Err(StatsError::TooFew { what: "methods", min: 2, got: m });
    }
    let mut rank_sums = vec![0.0; m];
    let mut tie_mass = 0.0; // sum over datasets of sum(t^3 - t)
    for row in scores {
        assert_eq!(row.len(), m, "ragged score matrix");
        let ranks = mid_ranks(row);
        for (s, r) in rank_sums.iter_mut().zip(ranks.iter()) {
            *s += r;
        }
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < m {
            let mut j = i;
            while j + 1 < m && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_mass += t * t * t - t;
            i = j + 1;
        }
    }
    let (df, mf) = (d as f64, m as f64);
    let raw = 12.0 / (df * mf * (mf + 1.0))
        * rank_sums.iter().map(|&s| s * s).sum::<f64>()
        - 3.0 * df * (mf + 1.0);
    let correction = 1.0 - tie_mass / (df * (mf * mf * mf - mf));
    if correction <= 0.0 {
        return Ok((0.0, 1.0)); // every row fully tied
    }
    let stat = (raw / correction).max(0.0);
    let p = chi2_sf(stat, (m - 1) as f64);
    Ok((stat, p))
}

/// Survival function of the chi-square distribution.
fn chi2_sf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    (1.0 - statrs::function::gamma::gamma_lr(k / 2.0, x / 2.0)).clamp(0.0, 1.0)
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
///
/// Zero differences are dropped; absolute differences are mid-ranked. Up to
/// 20 effective pairs the p-value is exact (full enumeration over the 2^n
/// sign assignments, computed on doubled ranks so the arithmetic is integer);
/// above that a normal approximation with tie-corrected variance and a 0.5
/// continuity correction is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return 1.0;
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 =
        ranks.iter().zip(diffs.iter()).filter(|(_, &d)| d > 0.0).map(|(&r, _)| r).sum();
    if n <= 20 {
        // doubled ranks are integers, so enumeration is exact
        let r2: Vec<u64> = ranks.iter().map(|&r| (2.0 * r).round() as u64).collect();
        let w2 = (2.0 * w_plus).round() as u64;
        let mut count_le: u64 = 0;
        let mut count_ge: u64 = 0;
        for mask in 0u64..(1u64 << n) {
            let mut w: u64 = 0;
            for (bit, &r) in r2.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    w += r;
                }
            }
            if w <= w2 {
                count_le += 1;
            }
            if w >= w2 {
                count_ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (count_le.min(count_ge) as f64) / total).min(1.0)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        // tie correction on the variance
        let mut tie_mass = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_mass += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_mass / 48.0;
        if var <= 0.0 {
            return 1.0;
        }
        let dev = w_plus - mu;
        let z = (dev - 0.5 * dev.signum()) / var.sqrt();
        (2.0 * (1.0 - crate::num::norm_cdf(z.abs()))).min(1.0)
    }
}

/// Holm step-down adjustment. Returns (adjusted p, reject) per input index;
/// rejection means adjusted p <= alpha, which reproduces the sequential
/// alpha/(m-i+1) thresholds.
pub fn holm_adjust(ps: &[f64], alpha: f64) -> Vec<(f64, bool)> {
    let m = ps.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| ps[i].total_cmp(&ps[j]));
    let mut out = vec![(0.0, false); m];
    let mut running = 0.0_f64;
    for (pos, &idx) in order.iter().enumerate() {
        let scaled = ((m - pos) as f64 * ps[idx]).min(1.0);
        running = running.max(scaled);
        out[idx] = (running, running <= alpha);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseDecision {
    pub method_a: String,
    pub method_b: String,
    pub p_raw: f64,
    pub p_holm: f64,
    pub significant: bool,
}

/// All-pairs Wilcoxon over per-dataset scores (one score vector per method)
/// with Holm correction across the whole pair family.
pub fn wilcoxon_holm(
    methods: &[String],
    scores: &[Vec<f64>],
    alpha: f64,
) -> Result<Vec<PairwiseDecision>, StatsError> {
    let m = methods.len();
    if m < 2 {
        return Err(StatsError::TooFew { what: "methods", min: 2, got: m });
    }
    let mut pairs = Vec::new();
    let mut raw = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            raw.push(wilcoxon_signed_rank(&scores[i], &scores[j]));
            pairs.push((i, j));
        }
    }
    let adjusted = holm_adjust(&raw, alpha);
    Ok(pairs
        .into_iter()
        .zip(raw.iter().zip(adjusted.iter()))
        .map(|((i, j), (&p_raw, &(p_holm, significant)))| PairwiseDecision {
            method_a: methods[i].clone(),
            method_b: methods[j].clone(),
            p_raw,
            p_holm,
            significant,
        })
        .collect())
}

/// Per-dataset mid-ranks (1 = best) averaged over datasets.
/// `lower_is_better` flips the orientation for score-like metrics.
pub fn average_ranks(scores: &[Vec<f64>], lower_is_better: bool) -> Vec<f64> {
    assert!(!scores.is_empty());
    let m = scores[0].len();
    let mut acc = vec![0.0; m];
    for row in scores {
        let oriented: Vec<f64> =
            if lower_is_better { row.clone() } else { row.iter().map(|v| -v).collect() };
        for (a, r) in acc.iter_mut().zip(mid_ranks(&oriented)) {
            *a += r;
        }
    }
    for a in &mut acc {
        *a /= scores.len() as f64;
    }
    acc
}

/// Fraction of target values belonging to the ten most frequent distinct
/// values. Frequency ties at the cut are broken by value order (ascending),
/// which only matters for the deterministic choice of which tied group
/// enters; the returned mass is the same either way when groups tie exactly.
pub fn discreteness(ys: &[f64]) -> f64 {
    assert!(!ys.is_empty());
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups: Vec<(f64, usize)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        groups.push((sorted[i], j - i + 1));
        i = j + 1;
    }
    groups.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.total_cmp(&b.0)));
    let top: usize = groups.iter().take(10).map(|g| g.1).sum();
    top as f64 / ys.len() as f64
}

/// Sample quantiles at the letter-value levels 1/8, 1/4, 1/2, 3/4, 7/8
/// (linear interpolation between order statistics).
pub fn letter_values(xs: &[f64]) -> [f64; 5] {
    assert!(!xs.is_empty());
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        let h = p * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    [q(0.125), q(0.25), q(0.5), q(0.75), q(0.875)]
}

/// Maximal groups of methods (by index) with no significant pairwise
/// difference, computed over the rank-sorted order as in critical-difference
/// diagrams.
pub fn cliques(avg_ranks: &[f64], decisions: &[PairwiseDecision], methods: &[String]) -> Vec<Vec<usize>> {
    let m = avg_ranks.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| avg_ranks[i].total_cmp(&avg_ranks[j]));
    let significant = |a: usize, b: usize| -> bool {
        decisions.iter().any(|d| {
            d.significant
                && ((d.method_a == methods[a] && d.method_b == methods[b])
                    || (d.method_a == methods[b] && d.method_b == methods[a]))
        })
    };
    let mut intervals: Vec<(usize, usize)> = Vec::new();
    for start in 0..m {
        let mut end = start;
        'grow: while end + 1 < m {
            for k in start..=end {
                if significant(order[k], order[end + 1]) {
                    break 'grow;
                }
            }
            end += 1;
        }
        intervals.push((start, end));
    }
    // keep only maximal intervals
    intervals.dedup();
    let maximal: Vec<(usize, usize)> = intervals
        .iter()
        .filter(|&&(s, e)| {
            !intervals.iter().any(|&(s2, e2)| (s2, e2) != (s, e) && s2 <= s && e <= e2)
        })
        .copied()
        .collect();
    maximal.into_iter().map(|(s, e)| order[s..=e].to_vec()).collect()
}

/// Method/dataset/seed metric cube feeding the comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    /// cells[dataset][method] = per-seed values.
    pub cells: Vec<Vec<Vec<f64>>>,
}

impl ResultMatrix {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.datasets.len() < 2 {
            return Err(StatsError::TooFew { what: "datasets", min: 2, got: self.datasets.len() });
        }
        if self.methods.len() < 2 {
            return Err(StatsError::TooFew { what: "methods", min: 2, got: self.methods.len() });
        }
        for (di, row) in self.cells.iter().enumerate() {
            for (mi, cell) in row.iter().enumerate() {
                if cell.is_empty() {
                    return Err(StatsError::MissingCell {
                        dataset: self.datasets[di].clone(),
                        method: self.methods[mi].clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Seed means per (dataset, method).
    pub fn seed_means(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|cell| mean(cell)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohensDRow {
    pub dataset: String,
    pub method: String,
    pub d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LetterValueRow {
    pub method: String,
    /// Quantiles of the per-dataset Cohen's d at 1/8, 1/4, 1/2, 3/4, 7/8.
    pub quantiles: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metric: String,
    pub lower_is_better: bool,
    pub baseline: String,
    pub alpha: f64,
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub cohens_d: Vec<CohensDRow>,
    pub letter_values: Vec<LetterValueRow>,
    pub friedman_statistic: f64,
    pub friedman_p: f64,
    pub average_ranks: Vec<f64>,
    pub pairwise: Vec<PairwiseDecision>,
    /// Methods (by name) in rank-adjacent groups that are not significantly
    /// distinguishable at `alpha`.
    pub cliques: Vec<Vec<String>>,
}

/// Assemble the full comparison for one metric.
pub fn compare(
    matrix: &ResultMatrix,
    metric: &str,
    baseline: &str,
    lower_is_better: bool,
    alpha: f64,
) -> Result<ComparisonReport, StatsError> {
    matrix.validate()?;
    let b_idx = matrix
        .methods
        .iter()
        .position(|m| m == baseline)
        .ok_or_else(|| StatsError::UnknownBaseline(baseline.to_string()))?;
    let means = matrix.seed_means();

    let mut cohens_rows = Vec::new();
    for (di, dataset) in matrix.datasets.iter().enumerate() {
        for (mi, method) in matrix.methods.iter().enumerate() {
            if mi == b_idx {
                continue;
            }
            let d = cohens_d(&matrix.cells[di][mi], &matrix.cells[di][b_idx]);
            cohens_rows.push(CohensDRow {
                dataset: dataset.clone(),
                method: method.clone(),
                d,
            });
        }
    }
    let letter_rows: Vec<LetterValueRow> = matrix
        .methods
        .iter()
        .enumerate()
        .filter(|&(mi, _)| mi != b_idx)
        .map(|(_, method)| {
            let ds: Vec<f64> = cohens_rows
                .iter()
                .filter(|r| &r.method == method)
                .map(|r| r.d)
                .collect();
            LetterValueRow { method: method.clone(), quantiles: letter_values(&ds) }
        })
        .collect();

    let oriented: Vec<Vec<f64>> = if lower_is_better {
        means.clone()
    } else {
        means.iter().map(|row| row.iter().map(|v| -v).collect()).collect()
    };
    let (friedman_statistic, friedman_p) = friedman(&oriented)?;
    let avg_ranks = average_ranks(&means, lower_is_better);

    // per-method score vectors across datasets for the pairwise tests
    let per_method: Vec<Vec<f64>> = (0..matrix.methods.len())
        .map(|mi| (0..matrix.datasets.len()).map(|di| means[di][mi]).collect())
        .collect();
    let pairwise = wilcoxon_holm(&matrix.methods, &per_method, alpha)?;
    let clique_idx = cliques(&avg_ranks, &pairwise, &matrix.methods);
    let cliques_named: Vec<Vec<String>> = clique_idx
        .into_iter()
        .map(|group| group.into_iter().map(|i| matrix.methods[i].clone()).collect())
        .collect();

    Ok(ComparisonReport {
        metric: metric.to_string(),
        lower_is_better,
        baseline: baseline.to_string(),
        alpha,
        methods: matrix.methods.clone(),
        datasets: matrix.datasets.clone(),
        cohens_d: cohens_rows,
        letter_values: letter_rows,
        friedman_statistic,
        friedman_p,
        average_ranks: avg_ranks,
        pairwise,
        cliques: cliques_named,
    })
}
