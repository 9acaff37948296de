//! PIT calibration maps and recalibrated predictive distributions.
//!
//! A calibration map estimates the CDF of the probability integral transform
//! Z = F(Y|X) on [0,1]; composing it with the base predictive CDF yields a
//! probabilistically calibrated distribution. Five estimators are provided:
//!
//! - `Emp`: empirical CDF, (1/n) sum 1(Z_i <= a).
//! - `Dcp`: the conformal variant (1/(n+1)) sum 1(Z_i <= a), carrying the
//!   finite-sample coverage guarantee.
//! - `Kde`: mixture of logistic CDFs centered at the Z_i with kernel variance
//!   b^2 n^(-2/5) (Scott's rule); smooth but leaks mass outside [0,1].
//! - `Trunc`: the KDE renormalized onto [0,1].
//! - `Refl`: the KDE with out-of-range mass reflected back across the
//!   endpoints, assuming the kernel mass outside [-1,2] is negligible; the
//!   implementation normalizes by the mass inside [-1,2] so the endpoint and
//!   unit-mass identities hold exactly rather than up to kernel tails.

use crate::mdn::{MdnError, MdnModel, MixtureParams};
use crate::num;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MapKind {
    Emp,
    Dcp,
    Kde,
    Trunc,
    Refl,
}

impl MapKind {
    pub fn needs_bandwidth(self) -> bool {
        matches!(self, MapKind::Kde | MapKind::Trunc | MapKind::Refl)
    }
}

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("calibration map needs at least one center")]
    EmptyCenters,
    #[error("PIT center {0} outside [0,1]")]
    CenterOutOfRange(f64),
    #[error("{0:?} map requires a bandwidth")]
    MissingBandwidth(MapKind),
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("{0:?} map has no density")]
    DensityUndefined(MapKind),
}

/// Immutable PIT-to-probability transform.
#[derive(Debug, Clone)]
pub struct CalibrationMap {
    kind: MapKind,
    /// Sorted ascending.
    centers: Vec<f64>,
    bandwidth: Option<f64>,
    /// b^2 n^(-2/5); zero for the stepwise kinds.
    kernel_variance: f64,
    /// Logistic kernel scale realizing that variance.
    scale: f64,
    /// Mass of the raw KDE inside [-1, 2]; 1.0 for stepwise kinds.
    refl_normalizer: f64,
    /// Mass of the raw KDE inside [0, 1] (the truncation normalizer).
    trunc_normalizer: f64,
    spread_warning: bool,
}

impl CalibrationMap {
    pub fn build(
        kind: MapKind,
        centers: &[f64],
        bandwidth: Option<f64>,
    ) -> Result<Self, CalibError> {
        if centers.is_empty() {
            return Err(CalibError::EmptyCenters);
        }
        if let Some(&bad) = centers.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(CalibError::CenterOutOfRange(bad));
        }
        let bandwidth = match (kind.needs_bandwidth(), bandwidth) {
            (true, None) => return Err(CalibError::MissingBandwidth(kind)),
            (true, Some(b)) if b <= 0.0 || !b.is_finite() => {
                return Err(CalibError::InvalidBandwidth(b))
            }
            (true, Some(b)) => Some(b),
            (false, _) => None,
        };
        let mut sorted = centers.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let (kernel_variance, scale) = match bandwidth {
            Some(b) => {
                let s2 = b * b * n.powf(-0.4);
                (s2, num::logistic_scale_for_variance(s2))
            }
            None => (0.0, 0.0),
        };
        let mut map = CalibrationMap {
            kind,
            centers: sorted,
            bandwidth,
            kernel_variance,
            scale,
            refl_normalizer: 1.0,
            trunc_normalizer: 1.0,
            spread_warning: false,
        };
        if kind.needs_bandwidth() {
            let inside = map.raw_cdf(2.0) - map.raw_cdf(-1.0);
            map.refl_normalizer = inside;
            map.trunc_normalizer = map.raw_cdf(1.0) - map.raw_cdf(0.0);
            map.spread_warning = 1.0 - inside > 1e-9;
        }
        Ok(map)
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.bandwidth
    }

    /// Kernel variance b^2 n^(-2/5) (zero for stepwise kinds).
    pub fn kernel_variance(&self) -> f64 {
        self.kernel_variance
    }

    /// Logistic kernel scale.
    pub fn kernel_scale(&self) -> f64 {
        self.scale
    }

    /// True when the kernel mass outside [-1,2] exceeded 1e-9 at build time,
    /// i.e. the reflection assumption was violated.
    pub fn spread_warning(&self) -> bool {
        self.spread_warning
    }

    /// Raw (unbounded) logistic-KDE CDF: mean_i F_Log(x; Z_i, scale).
    fn raw_cdf(&self, x: f64) -> f64 {
        let s: f64 = self.centers.iter().map(|&c| num::logistic_cdf(x, c, self.scale)).sum();
        s / self.centers.len() as f64
    }

    /// Raw logistic-KDE density: mean_i f_Log(x; Z_i, scale).
    fn raw_pdf(&self, x: f64) -> f64 {
        let s: f64 = self
            .centers
            .iter()
            .map(|&c| {
                let e = (-((x - c) / self.scale).abs()).exp();
                let d = 1.0 + e;
                e / (self.scale * d * d)
            })
            .sum();
        s / self.centers.len() as f64
    }

    /// Number of centers at or below x (binary search on the sorted list).
    fn count_le(&self, x: f64) -> usize {
        self.centers.partition_point(|&c| c <= x)
    }

    /// Map CDF at a level in [0,1] (values outside are handled by the
    /// piecewise definitions of the bounded kinds).
    pub fn cdf(&self, alpha: f64) -> f64 {
        let n = self.centers.len() as f64;
        match self.kind {
            MapKind::Emp => self.count_le(alpha) as f64 / n,
            MapKind::Dcp => self.count_le(alpha) as f64 / (n + 1.0),
            MapKind::Kde => self.raw_cdf(alpha),
            MapKind::Trunc => {
                if alpha <= 0.0 {
                    0.0
                } else if alpha >= 1.0 {
                    1.0
                } else {
                    let v = (self.raw_cdf(alpha) - self.raw_cdf(0.0)) / self.trunc_normalizer;
                    v.clamp(0.0, 1.0)
                }
            }
            MapKind::Refl => {
                if alpha <= 0.0 {
                    0.0
                } else if alpha >= 1.0 {
                    1.0
                } else {
                    // (F(x) - F(-x) + F(2) - F(2-x)) / (F(2) - F(-1))
                    let num = self.raw_cdf(alpha) - self.raw_cdf(-alpha) + self.raw_cdf(2.0)
                        - self.raw_cdf(2.0 - alpha);
                    (num / self.refl_normalizer).clamp(0.0, 1.0)
                }
            }
        }
    }

    /// Map density at a level in [0,1]; stepwise kinds have none.
    pub fn pdf(&self, alpha: f64) -> Result<f64, CalibError> {
        match self.kind {
            MapKind::Emp | MapKind::Dcp => Err(CalibError::DensityUndefined(self.kind)),
            MapKind::Kde => Ok(self.raw_pdf(alpha)),
            MapKind::Trunc => {
                if (0.0..=1.0).contains(&alpha) {
                    Ok(self.raw_pdf(alpha) / self.trunc_normalizer)
                } else {
                    Ok(0.0)
                }
            }
            MapKind::Refl => {
                if (0.0..=1.0).contains(&alpha) {
                    Ok((self.raw_pdf(alpha) + self.raw_pdf(-alpha) + self.raw_pdf(2.0 - alpha))
                        / self.refl_normalizer)
                } else {
                    Ok(0.0)
                }
            }
        }
    }

    /// log pdf, evaluated via logsumexp over the kernel log-densities so that
    /// spiky maps with tiny bandwidths stay finite. Term order matches the
    /// training-graph evaluation: direct terms, then the two reflections.
    pub fn log_pdf(&self, alpha: f64) -> Result<f64, CalibError> {
        let n = self.centers.len() as f64;
        match self.kind {
            MapKind::Emp | MapKind::Dcp => Err(CalibError::DensityUndefined(self.kind)),
            MapKind::Kde => {
                let terms: Vec<f64> = self
                    .centers
                    .iter()
                    .map(|&c| num::logistic_log_pdf(alpha, c, self.scale))
                    .collect();
                Ok(num::logsumexp(&terms) - n.ln())
            }
            MapKind::Trunc => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Ok(f64::NEG_INFINITY);
                }
                let terms: Vec<f64> = self
                    .centers
                    .iter()
                    .map(|&c| num::logistic_log_pdf(alpha, c, self.scale))
                    .collect();
                Ok(num::logsumexp(&terms) - n.ln() - self.trunc_normalizer.ln())
            }
            MapKind::Refl => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Ok(f64::NEG_INFINITY);
                }
                let mut terms = Vec::with_capacity(3 * self.centers.len());
                for &c in &self.centers {
                    terms.push(num::logistic_log_pdf(alpha, c, self.scale));
                }
                for &c in &self.centers {
                    terms.push(num::logistic_log_pdf(-alpha, c, self.scale));
                }
                for &c in &self.centers {
                    terms.push(num::logistic_log_pdf(2.0 - alpha, c, self.scale));
                }
                Ok(num::logsumexp(&terms) - n.ln() - self.refl_normalizer.ln())
            }
        }
    }

    /// Inverse of the map CDF. Continuous kinds bisect on [0,1] (80 rounds,
    /// then one clamp); stepwise kinds return the generalized inverse, the
    /// smallest level whose CDF reaches p (1.0 when nothing does, which can
    /// happen for DCP since its CDF tops out at n/(n+1)).
    pub fn inverse(&self, p: f64) -> f64 {
        match self.kind {
            MapKind::Emp | MapKind::Dcp => {
                if p <= 0.0 {
                    return 0.0;
                }
                let n = self.centers.len();
                let denom = if self.kind == MapKind::Emp { n as f64 } else { n as f64 + 1.0 };
                let j = (p * denom).ceil() as usize;
                if j == 0 {
                    0.0
                } else if j <= n {
                    self.centers[j - 1]
                } else {
                    1.0
                }
            }
            MapKind::Kde | MapKind::Trunc | MapKind::Refl => {
                let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (0.5 * (lo + hi)).clamp(0.0, 1.0)
            }
        }
    }

    /// Serialization form embedded in result records.
    pub fn to_record(&self) -> MapRecord {
        MapRecord { kind: self.kind, bandwidth: self.bandwidth, centers: self.centers.clone() }
    }

    pub fn from_record(rec: &MapRecord) -> Result<Self, CalibError> {
        CalibrationMap::build(rec.kind, &rec.centers, rec.bandwidth)
    }
}

/// (kind, bandwidth, sorted centers), the on-disk form of a map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapRecord {
    pub kind: MapKind,
    pub bandwidth: Option<f64>,
    pub centers: Vec<f64>,
}

/// PIT values Z_i = F(y_i | x_i) for a batch, clamped into [0,1] against
/// last-bit rounding excursions.
pub fn pit(model: &MdnModel, x: &Tensor, y: &[f64]) -> Result<Vec<f64>, MdnError> {
    assert_eq!(x.rows(), y.len(), "feature/target count mismatch");
    let mixtures = model.predict(x)?;
    Ok(pit_of(&mixtures, y))
}

/// PIT values for mixtures already predicted.
pub fn pit_of(mixtures: &[MixtureParams], y: &[f64]) -> Vec<f64> {
    mixtures.iter().zip(y.iter()).map(|(m, &yi)| m.cdf(yi).clamp(0.0, 1.0)).collect()
}

/// Composition map ∘ base: the recalibrated predictive distribution for one
/// input point.
#[derive(Clone, Copy)]
pub struct Recalibrated<'a> {
    pub base: &'a MixtureParams,
    pub map: &'a CalibrationMap,
}

impl<'a> Recalibrated<'a> {
    pub fn cdf(&self, y: f64) -> f64 {
        self.map.cdf(self.base.cdf(y).clamp(0.0, 1.0))
    }

    /// log f'(y) = log f(y) + log phi(F(y)).
    pub fn log_pdf(&self, y: f64) -> Result<f64, CalibError> {
        let z = self.base.cdf(y).clamp(0.0, 1.0);
        Ok(self.base.log_pdf(y) + self.map.log_pdf(z)?)
    }

    /// Quantile through both inverses: y = F^-1(map^-1(alpha)).
    pub fn quantile(&self, alpha: f64) -> Result<f64, MdnError> {
        let p = self.map.inverse(alpha).clamp(1e-15, 1.0 - 1e-15);
        self.base.quantile(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdn::MdnConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn logistic_pdf(x: f64, c: f64, s: f64) -> f64 {
        let e = (-((x - c) / s).abs()).exp();
        e / (s * (1.0 + e) * (1.0 + e))
    }

    #[test]
    fn scotts_rule_variance_is_exact_for_power_of_two() {
        let centers: Vec<f64> = (0..1024).map(|i| (i as f64 + 0.5) / 1024.0).collect();
        let map = CalibrationMap::build(MapKind::Kde, &centers, Some(0.1)).unwrap();
        // 1024^(2/5) = 16, so the variance is 0.01/16 exactly
        assert_relative_eq!(map.kernel_variance(), 6.25e-4, max_relative = 1e-14);
    }

    #[test]
    fn emp_cdf_counts() {
        let map = CalibrationMap::build(MapKind::Emp, &[0.1, 0.5, 0.9], None).unwrap();
        assert_relative_eq!(map.cdf(0.4), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(map.cdf(1.0), 1.0);
        assert_eq!(map.cdf(0.05), 0.0);
        // right-continuity at a center
        assert_relative_eq!(map.cdf(0.5), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn dcp_cdf_hand_count() {
        let centers: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
        let map = CalibrationMap::build(MapKind::Dcp, &centers, None).unwrap();
        assert_relative_eq!(map.cdf(0.5), 5.0 / 11.0, epsilon = 1e-15);
    }

    #[test]
    fn build_rejects_bad_inputs() {
        assert!(matches!(
            CalibrationMap::build(MapKind::Emp, &[], None),
            Err(CalibError::EmptyCenters)
        ));
        assert!(matches!(
            CalibrationMap::build(MapKind::Emp, &[0.5, 1.2], None),
            Err(CalibError::CenterOutOfRange(_))
        ));
        assert!(matches!(
            CalibrationMap::build(MapKind::Refl, &[0.5], None),
            Err(CalibError::MissingBandwidth(MapKind::Refl))
        ));
        assert!(matches!(
            CalibrationMap::build(MapKind::Kde, &[0.5], Some(-0.1)),
            Err(CalibError::InvalidBandwidth(_))
        ));
    }

    #[test]
    fn refl_endpoints_are_exact() {
        let mut rng = crate::rng::stream(5, "refl-endpoints");
        for _ in 0..32 {
            let n = rng.gen_range(1..50);
            let centers: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            for b in [0.01, 0.05, 0.1, 0.2] {
                let map = CalibrationMap::build(MapKind::Refl, &centers, Some(b)).unwrap();
                assert_eq!(map.cdf(0.0), 0.0);
                assert_eq!(map.cdf(1.0), 1.0);
            }
        }
    }

    #[test]
    fn kde_single_center_is_half_at_center() {
        let map = CalibrationMap::build(MapKind::Kde, &[0.5], Some(0.1)).unwrap();
        assert_relative_eq!(map.cdf(0.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn trunc_matches_direct_two_formula_evaluation() {
        let centers = [0.12, 0.37, 0.55, 0.91, 0.64];
        let map = CalibrationMap::build(MapKind::Trunc, &centers, Some(0.1)).unwrap();
        let raw = CalibrationMap::build(MapKind::Kde, &centers, Some(0.1)).unwrap();
        for alpha in [0.05, 0.3, 0.62, 0.97] {
            let expect = (raw.cdf(alpha) - raw.cdf(0.0)) / (raw.cdf(1.0) - raw.cdf(0.0));
            assert_relative_eq!(map.cdf(alpha), expect, epsilon = 1e-12);
        }
        assert_eq!(map.cdf(0.0), 0.0);
        assert_eq!(map.cdf(1.0), 1.0);
    }

    #[test]
    fn refl_pdf_integrates_to_one() {
        let mut rng = crate::rng::stream(6, "refl-mass");
        let centers: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        for b in [0.05, 0.2] {
            let map = CalibrationMap::build(MapKind::Refl, &centers, Some(b)).unwrap();
            let mass = crate::quad::adaptive_simpson(&|x| map.pdf(x).unwrap(), 0.0, 1.0, 1e-9);
            assert!((mass - 1.0).abs() < 1e-6, "b={b}: mass {mass}");
        }
    }

    #[test]
    fn refl_interior_matches_raw_kde_for_small_bandwidth() {
        let centers = [0.45, 0.5, 0.52, 0.55, 0.6];
        let map = CalibrationMap::build(MapKind::Refl, &centers, Some(0.01)).unwrap();
        let raw = CalibrationMap::build(MapKind::Kde, &centers, Some(0.01)).unwrap();
        let x = 0.5;
        assert_relative_eq!(map.pdf(x).unwrap(), raw.pdf(x).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn refl_single_center_pdf_closed_form() {
        let map = CalibrationMap::build(MapKind::Refl, &[0.5], Some(0.1)).unwrap();
        let s = map.kernel_scale();
        // peak plus the two reflected kernels, normalized by the [-1,2] mass
        let eta = num::logistic_cdf(2.0, 0.5, s) - num::logistic_cdf(-1.0, 0.5, s);
        let expect =
            (1.0 / (4.0 * s) + logistic_pdf(-0.5, 0.5, s) + logistic_pdf(1.5, 0.5, s)) / eta;
        assert_relative_eq!(map.pdf(0.5).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn log_pdf_agrees_with_pdf() {
        let centers = [0.2, 0.4, 0.7];
        for kind in [MapKind::Kde, MapKind::Trunc, MapKind::Refl] {
            let map = CalibrationMap::build(kind, &centers, Some(0.1)).unwrap();
            for x in [0.1, 0.5, 0.93] {
                assert_relative_eq!(
                    map.log_pdf(x).unwrap(),
                    map.pdf(x).unwrap().ln(),
                    epsilon = 1e-10
                );
            }
        }
        let emp = CalibrationMap::build(MapKind::Emp, &[0.5], None).unwrap();
        assert!(matches!(emp.pdf(0.5), Err(CalibError::DensityUndefined(MapKind::Emp))));
        assert!(matches!(emp.log_pdf(0.5), Err(CalibError::DensityUndefined(MapKind::Emp))));
    }

    #[test]
    fn inverse_symmetric_and_roundtrip() {
        let map = CalibrationMap::build(MapKind::Refl, &[0.3, 0.7], Some(0.1)).unwrap();
        assert_relative_eq!(map.inverse(0.5), 0.5, epsilon = 1e-10);
        for j in 1..40 {
            let alpha = j as f64 / 40.0;
            let p = map.cdf(alpha);
            assert_relative_eq!(map.inverse(p), alpha, epsilon = 1e-8);
            assert!((map.cdf(map.inverse(p)) - p).abs() <= 1e-10);
        }
    }

    #[test]
    fn emp_generalized_inverse() {
        let map = CalibrationMap::build(MapKind::Emp, &[0.2, 0.4, 0.8], None).unwrap();
        assert_eq!(map.inverse(0.5), 0.4);
        assert_eq!(map.inverse(0.0), 0.0);
        assert_eq!(map.inverse(1.0), 0.8);
        let dcp = CalibrationMap::build(MapKind::Dcp, &[0.2, 0.4, 0.8], None).unwrap();
        // DCP CDF tops out at 3/4, so higher targets clamp to 1
        assert_eq!(dcp.inverse(0.9), 1.0);
        assert_eq!(dcp.inverse(0.5), 0.4);
    }

    #[test]
    fn kde_converges_to_emp_as_bandwidth_vanishes() {
        let mut rng = crate::rng::stream(11, "kde-to-emp");
        let n = 64;
        let centers: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b = 1e-4;
        let kde = CalibrationMap::build(MapKind::Kde, &centers, Some(b)).unwrap();
        let emp = CalibrationMap::build(MapKind::Emp, &centers, None).unwrap();
        let kernel_sd = kde.kernel_variance().sqrt();
        let mut sup = 0.0_f64;
        let mut kept = 0;
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let near = centers.iter().any(|&c| (x - c).abs() <= 3.0 * kernel_sd);
            if near {
                continue;
            }
            kept += 1;
            sup = sup.max((kde.cdf(x) - emp.cdf(x)).abs());
        }
        assert!(kept > 900, "exclusion removed too many grid points: kept {kept}");
        assert!(sup < 1e-3, "sup gap {sup}");
    }

    #[test]
    fn dcp_guarantee_monte_carlo_small() {
        // Exchangeability check at a single level; the full grid runs in the
        // acceptance suite. Event uses strict inequality so the target is the
        // conformal staircase ceil(20a)/20 at lattice levels.
        let mut rng = crate::rng::stream(9, "dcp-mc-small");
        let n_cal = 19;
        let resamples = 4000;
        let alpha = 0.5;
        let mut hits = 0;
        for _ in 0..resamples {
            let z_test: f64 = rng.gen();
            let centers: Vec<f64> = (0..n_cal).map(|_| rng.gen()).collect();
            let map = CalibrationMap::build(MapKind::Dcp, &centers, None).unwrap();
            if map.cdf(z_test) < alpha {
                hits += 1;
            }
        }
        let freq = hits as f64 / resamples as f64;
        let target = (20.0_f64 * alpha).ceil() / 20.0;
        let se = (target * (1.0 - target) / resamples as f64).sqrt();
        assert!(
            (freq - target).abs() <= 3.0 * se,
            "freq {freq} target {target} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn pit_reference_cases() {
        let model =
            MdnModel::new(MdnConfig::new(1).with_hidden(1, 4).with_mixture(1), 3).unwrap();
        let x = Tensor::from_vec(1, 1, vec![0.0]);
        let mix = &model.predict(&x).unwrap()[0];
        let at_mean = pit(&model, &x, &[mix.means[0]]).unwrap();
        assert_relative_eq!(at_mean[0], 0.5, epsilon = 1e-12);
        let far_below = pit(&model, &x, &[mix.means[0] - 100.0 * mix.scales[0]]).unwrap();
        assert!(far_below[0] <= 1e-12);
    }

    #[test]
    fn pit_of_model_samples_is_uniform_by_ks() {
        let model = MdnModel::new(MdnConfig::new(2).with_hidden(2, 16), 17).unwrap();
        let mut rng = crate::rng::stream(17, "pit-ks");
        let n = 10_000;
        let mut xs = Tensor::zeros(n, 2);
        for r in 0..n {
            xs.set(r, 0, rng.gen_range(-2.0..2.0));
            xs.set(r, 1, rng.gen_range(-2.0..2.0));
        }
        let mixtures = model.predict(&xs).unwrap();
        let ys: Vec<f64> = mixtures.iter().map(|m| m.sample(&mut rng)).collect();
        let mut z = pit_of(&mixtures, &ys);
        z.sort_by(f64::total_cmp);
        let mut ks = 0.0_f64;
        for (i, &zi) in z.iter().enumerate() {
            let hi = (i + 1) as f64 / n as f64;
            let lo = i as f64 / n as f64;
            ks = ks.max((zi - hi).abs()).max((zi - lo).abs());
        }
        // 1% critical value for n = 10^4 is 1.6276/sqrt(n)
        assert!(ks < 0.0163, "KS statistic {ks}");
    }

    #[test]
    fn recalibrated_composition_is_monotone() {
        let base = MixtureParams::new(vec![0.6, 0.4], vec![-0.5, 1.0], vec![0.8, 0.4]).unwrap();
        let centers: Vec<f64> = (0..25).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let map = CalibrationMap::build(MapKind::Refl, &centers, Some(0.1)).unwrap();
        let rec = Recalibrated { base: &base, map: &map };
        let mut last = f64::NEG_INFINITY;
        for j in 1..20 {
            let q = rec.quantile(j as f64 / 20.0).unwrap();
            assert!(q >= last, "quantiles must be nondecreasing");
            last = q;
        }
        for y in [-2.0, 0.0, 0.5, 2.0] {
            assert!((0.0..=1.0).contains(&rec.cdf(y)));
        }
    }

    proptest! {
        #[test]
        fn map_cdf_is_nondecreasing(
            centers in prop::collection::vec(0.0f64..=1.0, 1..30),
            b in 0.01f64..0.3,
            a1 in 0.0f64..=1.0,
            a2 in 0.0f64..=1.0,
            kind_pick in 0usize..5,
        ) {
            let kind = [MapKind::Emp, MapKind::Dcp, MapKind::Kde, MapKind::Trunc, MapKind::Refl][kind_pick];
            let bw = kind.needs_bandwidth().then_some(b);
            let map = CalibrationMap::build(kind, &centers, bw).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(map.cdf(lo) <= map.cdf(hi) + 1e-15);
        }
    }
}
