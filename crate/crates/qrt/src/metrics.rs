//! Scoring of predictive distributions: negative log likelihood, probabilistic
//! calibration error, CRPS, and mean predictive standard deviation, for base
//! mixtures and recalibrated compositions alike.
//!
//! All scores are reported in the original target units: evaluation happens in
//! standardized space and the change of variables is applied afterward
//! (+ln(sd) for NLL, a factor of sd for CRPS and SD; PCE is scale-free).

use crate::calib::{CalibError, CalibrationMap};
use crate::mdn::{MdnError, MixtureParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("non-finite log density at test point {index}")]
    NonFiniteDensity { index: usize },
    #[error(transparent)]
    Quantile(#[from] MdnError),
    #[error(transparent)]
    Density(#[from] CalibError),
}

/// A set of per-point predictive distributions sharing one calibration map
/// (or none). Sharing matters: the map inverse is level-dependent but
/// point-independent, so quantile grids amortize it.
#[derive(Clone, Copy)]
pub enum DistSet<'a> {
    Base(&'a [MixtureParams]),
    Recalibrated { bases: &'a [MixtureParams], map: &'a CalibrationMap },
}

impl<'a> DistSet<'a> {
    pub fn len(&self) -> usize {
        match self {
            DistSet::Base(b) => b.len(),
            DistSet::Recalibrated { bases, .. } => bases.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn base(&self, i: usize) -> &MixtureParams {
        match self {
            DistSet::Base(b) => &b[i],
            DistSet::Recalibrated { bases, .. } => &bases[i],
        }
    }

    pub fn log_pdf(&self, i: usize, y: f64) -> Result<f64, MetricsError> {
        match self {
            DistSet::Base(b) => Ok(b[i].log_pdf(y)),
            DistSet::Recalibrated { bases, map } => {
                let z = bases[i].cdf(y).clamp(0.0, 1.0);
                Ok(bases[i].log_pdf(y) + map.log_pdf(z)?)
            }
        }
    }

    pub fn cdf(&self, i: usize, y: f64) -> f64 {
        match self {
            DistSet::Base(b) => b[i].cdf(y),
            DistSet::Recalibrated { bases, map } => map.cdf(bases[i].cdf(y).clamp(0.0, 1.0)),
        }
    }

    /// Levels in base-CDF space realizing the requested distribution levels.
    fn base_levels(&self, alphas: &[f64]) -> Vec<f64> {
        match self {
            DistSet::Base(_) => alphas.to_vec(),
            DistSet::Recalibrated { map, .. } => alphas
                .iter()
                .map(|&a| map.inverse(a).clamp(1e-15, 1.0 - 1e-15))
                .collect(),
        }
    }
}

/// Ascending quantile sweep with warm-started brackets.
fn quantile_sweep(mix: &MixtureParams, ps: &[f64]) -> Result<Vec<f64>, MdnError> {
    debug_assert!(ps.windows(2).all(|w| w[0] <= w[1]), "levels must ascend");
    let mut out = Vec::with_capacity(ps.len());
    if ps.is_empty() {
        return Ok(out);
    }
    let first = mix.quantile(ps[0])?;
    out.push(first);
    if ps.len() == 1 {
        return Ok(out);
    }
    let last = mix.quantile(ps[ps.len() - 1])?;
    let mut lo = first;
    for &p in &ps[1..ps.len() - 1] {
        let q = mix.quantile_bracketed(p, lo, last)?;
        out.push(q);
        lo = q;
    }
    out.push(last);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Quantile levels M for PCE (grid j/(M+1)).
    pub pce_levels: usize,
    /// Quantile levels L for the CRPS estimator.
    pub crps_levels: usize,
    /// Grid size for the quantile-grid SD of recalibrated distributions.
    pub sd_grid: usize,
    /// Training-set target SD used to de-standardize scores.
    pub target_sd: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { pce_levels: 100, crps_levels: 99, sd_grid: 512, target_sd: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean negative log likelihood, nats, original target scale.
    pub nll: f64,
    /// Probabilistic calibration error, in [0,1].
    pub pce: f64,
    /// CRPS in original target units.
    pub crps: f64,
    /// Mean predictive standard deviation, original target units.
    pub sd: f64,
    /// Evaluation count.
    pub n: usize,
    /// PCE level count.
    pub levels_m: usize,
}

/// Mean negative log density plus the standardization Jacobian ln(sd).
pub fn nll(set: &DistSet, ys: &[f64], target_sd: f64) -> Result<f64, MetricsError> {
    assert_eq!(set.len(), ys.len());
    let mut acc = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let lp = set.log_pdf(i, y)?;
        if !lp.is_finite() {
            return Err(MetricsError::NonFiniteDensity { index: i });
        }
        acc -= lp;
    }
    Ok(acc / ys.len() as f64 + target_sd.ln())
}

/// PCE over PIT values already in hand.
pub fn pce_of_pits(pits: &[f64], m_levels: usize) -> f64 {
    assert!(m_levels >= 1);
    let mut sorted = pits.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut acc = 0.0;
    for j in 1..=m_levels {
        let alpha = j as f64 / (m_levels as f64 + 1.0);
        let emp = sorted.partition_point(|&z| z <= alpha) as f64 / n;
        acc += (alpha - emp).abs();
    }
    acc / m_levels as f64
}

/// Mean absolute gap between equidistant levels j/(M+1) and the empirical
/// PIT CDF.
pub fn pce(set: &DistSet, ys: &[f64], m_levels: usize) -> f64 {
    assert_eq!(set.len(), ys.len());
    let pits: Vec<f64> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| set.cdf(i, y).clamp(0.0, 1.0))
        .collect();
    pce_of_pits(&pits, m_levels)
}

/// CRPS via the quantile (pinball) decomposition,
/// 2 * integral of (1{y <= q_a} - a)(q_a - y) da, evaluated on the open grid
/// a_j = j/(L+1) with weight 1/(L+1) (the integrand vanishes at both ends, so
/// this is the trapezoid rule), then de-standardized.
pub fn crps(set: &DistSet, ys: &[f64], l_levels: usize, target_sd: f64) -> Result<f64, MetricsError> {
    assert_eq!(set.len(), ys.len());
    let alphas: Vec<f64> = (1..=l_levels).map(|j| j as f64 / (l_levels as f64 + 1.0)).collect();
    let ps = set.base_levels(&alphas);
    let mut acc = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let qs = quantile_sweep(set.base(i), &ps)?;
        let mut point = 0.0;
        for (j, &q) in qs.iter().enumerate() {
            let a = alphas[j];
            let ind = if y <= q { 1.0 } else { 0.0 };
            point += (ind - a) * (q - y);
        }
        acc += 2.0 * point / (l_levels as f64 + 1.0);
    }
    Ok(acc / ys.len() as f64 * target_sd)
}

/// Mean predictive standard deviation. Base mixtures use the closed-form
/// variance; recalibrated distributions use an equal-weight quantile grid at
/// the stratified midpoints (l-1/2)/grid.
pub fn mean_sd(set: &DistSet, grid: usize, target_sd: f64) -> Result<f64, MetricsError> {
    let n = set.len();
    let mut acc = 0.0;
    match set {
        DistSet::Base(bases) => {
            for b in *bases {
                acc += b.variance().sqrt();
            }
        }
        DistSet::Recalibrated { bases, .. } => {
            let alphas: Vec<f64> =
                (1..=grid).map(|l| (l as f64 - 0.5) / grid as f64).collect();
            let ps = set.base_levels(&alphas);
            for b in *bases {
                let qs = quantile_sweep(b, &ps)?;
                let mean: f64 = qs.iter().sum::<f64>() / grid as f64;
                let second: f64 = qs.iter().map(|q| q * q).sum::<f64>() / grid as f64;
                acc += (second - mean * mean).max(0.0).sqrt();
            }
        }
    }
    Ok(acc / n as f64 * target_sd)
}

/// All four scores in one report.
pub fn evaluate(set: &DistSet, ys: &[f64], cfg: &MetricConfig) -> Result<MetricReport, MetricsError> {
    Ok(MetricReport {
        nll: nll(set, ys, cfg.target_sd)?,
        pce: pce(set, ys, cfg.pce_levels),
        crps: crps(set, ys, cfg.crps_levels, cfg.target_sd)?,
        sd: mean_sd(set, cfg.sd_grid, cfg.target_sd)?,
        n: ys.len(),
        levels_m: cfg.pce_levels,
    })
}

/// Closed-form CRPS of a single Gaussian, used as an oracle by the
/// verification suites: sigma [z(2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)].
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    sigma
        * (z * (2.0 * crate::num::norm_cdf(z) - 1.0) + 2.0 * crate::num::norm_pdf(z)
            - 1.0 / std::f64::consts::PI.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::MapKind;
    use approx::assert_relative_eq;

    fn std_normal() -> MixtureParams {
        MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap()
    }

    #[test]
    fn nll_standard_normal_at_mean() {
        let bases = vec![std_normal()];
        let v = nll(&DistSet::Base(&bases), &[0.0], 1.0).unwrap();
        assert_relative_eq!(v, 0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn nll_destandardization_adds_log_sd() {
        let bases = vec![std_normal(), std_normal()];
        let ys = [0.3, -0.8];
        let plain = nll(&DistSet::Base(&bases), &ys, 1.0).unwrap();
        let scaled = nll(&DistSet::Base(&bases), &ys, 2.0).unwrap();
        assert_relative_eq!(scaled - plain, 2.0_f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn nll_of_near_uniform_map_matches_base() {
        // dense uniform centers + moderate bandwidth give phi ~ 1 on [0,1]
        let centers: Vec<f64> = (0..4000).map(|i| (i as f64 + 0.5) / 4000.0).collect();
        let map = CalibrationMap::build(MapKind::Refl, &centers, Some(0.05)).unwrap();
        let bases = vec![std_normal(), std_normal(), std_normal()];
        let ys = [0.0, 0.7, -1.2];
        let base = nll(&DistSet::Base(&bases), &ys, 1.0).unwrap();
        let recal =
            nll(&DistSet::Recalibrated { bases: &bases, map: &map }, &ys, 1.0).unwrap();
        assert!((recal - base).abs() < 1e-4, "difference {}", recal - base);
    }

    #[test]
    fn pce_hand_count_fixture() {
        assert_relative_eq!(pce_of_pits(&[0.1, 0.5, 0.9], 4), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn pce_all_zero_pits_is_half() {
        // mean(alpha_j) over the open grid is exactly 1/2
        for m in [4, 7, 100] {
            assert_relative_eq!(pce_of_pits(&[0.0; 5], m), 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn pce_equispaced_pits_hit_the_small_n_bias_floor() {
        // With the open level grid j/(M+1) and the 1/N empirical CDF, the
        // perfectly equispaced sample scores 1/(2N), not zero.
        let n = 100;
        let pits: Vec<f64> = (1..=n).map(|i| i as f64 / (n as f64 + 1.0)).collect();
        assert_relative_eq!(pce_of_pits(&pits, n), 1.0 / (2.0 * n as f64), epsilon = 1e-12);
    }

    #[test]
    fn pce_is_bounded_by_half() {
        let mut rng = crate::rng::stream(3, "pce-bound");
        use rand::Rng;
        for _ in 0..50 {
            let pits: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
            let v = pce_of_pits(&pits, 100);
            assert!((0.0..=0.5).contains(&v));
        }
    }

    #[test]
    fn crps_matches_gaussian_closed_form() {
        let bases = vec![std_normal()];
        let est = crps(&DistSet::Base(&bases), &[0.0], 99, 1.0).unwrap();
        assert_relative_eq!(crps_gaussian(0.0, 0.0, 1.0), 0.23369497725510913, epsilon = 1e-12);
        assert!((est - 0.233695).abs() < 2e-3, "estimate {est}");
    }

    #[test]
    fn crps_estimator_within_one_percent_across_scales() {
        for sigma in [0.1, 0.5, 1.0, 3.0, 10.0] {
            let mix = MixtureParams::new(vec![1.0], vec![0.0], vec![sigma]).unwrap();
            let bases = vec![mix];
            for frac in [-3.0, -1.5, 0.0, 1.5, 3.0] {
                let y = frac * sigma;
                let est = crps(&DistSet::Base(&bases), &[y], 99, 1.0).unwrap();
                let exact = crps_gaussian(y, 0.0, sigma);
                assert!(
                    (est - exact).abs() / exact < 0.01,
                    "sigma={sigma} y={y}: est {est} vs exact {exact}"
                );
            }
        }
    }

    #[test]
    fn crps_point_mass_and_translation_invariance() {
        let sharp = MixtureParams::new(vec![1.0], vec![0.7], vec![1e-6]).unwrap();
        let bases = vec![sharp];
        let est = crps(&DistSet::Base(&bases), &[0.7], 99, 1.0).unwrap();
        assert!(est.abs() < 1e-5, "sharp+correct CRPS {est}");

        let c = 11.25;
        let a = MixtureParams::new(vec![0.4, 0.6], vec![-1.0, 0.5], vec![0.5, 1.5]).unwrap();
        let b = MixtureParams::new(vec![0.4, 0.6], vec![-1.0 + c, 0.5 + c], vec![0.5, 1.5]).unwrap();
        let ya = 0.3;
        let ca = crps(&DistSet::Base(&vec![a]), &[ya], 99, 1.0).unwrap();
        let cb = crps(&DistSet::Base(&vec![b]), &[ya + c], 99, 1.0).unwrap();
        assert_relative_eq!(ca, cb, max_relative = 1e-6);
    }

    #[test]
    fn sd_closed_forms() {
        let single = MixtureParams::new(vec![1.0], vec![3.0], vec![1.7]).unwrap();
        let v = mean_sd(&DistSet::Base(&vec![single]), 512, 1.0).unwrap();
        assert_relative_eq!(v, 1.7, epsilon = 1e-12);

        let two =
            MixtureParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1e-6, 1e-6]).unwrap();
        let v = mean_sd(&DistSet::Base(&vec![two]), 512, 1.0).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn sd_quantile_grid_close_to_closed_form() {
        // run the grid estimator through a perfectly flat recalibration map
        let centers: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        let map = CalibrationMap::build(MapKind::Refl, &centers, Some(0.05)).unwrap();
        let mix = MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let bases = vec![mix];
        let v = mean_sd(&DistSet::Recalibrated { bases: &bases, map: &map }, 512, 1.0).unwrap();
        assert!((v - 1.0).abs() < 0.01, "grid SD {v}");
    }

    #[test]
    fn metrics_invariant_to_pair_order() {
        let bases: Vec<MixtureParams> = (0..6)
            .map(|i| {
                MixtureParams::new(
                    vec![0.5, 0.5],
                    vec![i as f64 * 0.3 - 1.0, 0.5],
                    vec![0.6, 1.2],
                )
                .unwrap()
            })
            .collect();
        let ys: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.5).collect();
        let rev_bases: Vec<MixtureParams> = bases.iter().rev().cloned().collect();
        let rev_ys: Vec<f64> = ys.iter().rev().copied().collect();
        let cfg = MetricConfig::default();
        let a = evaluate(&DistSet::Base(&bases), &ys, &cfg).unwrap();
        let b = evaluate(&DistSet::Base(&rev_bases), &rev_ys, &cfg).unwrap();
        assert_relative_eq!(a.nll, b.nll, max_relative = 1e-12);
        assert_relative_eq!(a.pce, b.pce, max_relative = 1e-12);
        assert_relative_eq!(a.crps, b.crps, max_relative = 1e-12);
        assert_relative_eq!(a.sd, b.sd, max_relative = 1e-12);
    }

    #[test]
    fn crps_and_sd_scale_with_target_sd() {
        let bases = vec![std_normal()];
        let ys = [0.4];
        let c1 = crps(&DistSet::Base(&bases), &ys, 99, 1.0).unwrap();
        let c3 = crps(&DistSet::Base(&bases), &ys, 99, 3.0).unwrap();
        assert_relative_eq!(c3, 3.0 * c1, epsilon = 1e-12);
        let s1 = mean_sd(&DistSet::Base(&bases), 512, 1.0).unwrap();
        let s3 = mean_sd(&DistSet::Base(&bases), 512, 3.0).unwrap();
        assert_relative_eq!(s3, 3.0 * s1, epsilon = 1e-12);
    }
}
