//! MLP hypernetwork producing a Gaussian-mixture predictive distribution per
//! input row, with PDF / CDF / quantile evaluation of the mixtures.
//!
//! The network maps a feature row to 3K raw outputs, split into means,
//! pre-scales, and logits: sigma = softplus(rho) (floored at 1e-6) and
//! w = softmax(l). Hidden activation is ReLU.

use crate::autodiff::{Graph, NodeId};
use crate::num;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale floor applied after softplus; keeps degenerate targets from
/// producing divisions by ~0 scales.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MdnError {
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),
    #[error("quantile bracket expansion exceeded 60 doublings")]
    QuantileBracket,
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdnConfig {
    pub input_dim: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    /// Width of each hidden layer.
    pub hidden_width: usize,
    /// Mixture size K.
    pub mixture_k: usize,
}

impl MdnConfig {
    /// Defaults: 3 hidden layers of 128 units, mixture of 3 Gaussians.
    pub fn new(input_dim: usize) -> Self {
        MdnConfig { input_dim, hidden_layers: 3, hidden_width: 128, mixture_k: 3 }
    }

    pub fn with_mixture(mut self, k: usize) -> Self {
        self.mixture_k = k;
        self
    }

    pub fn with_hidden(mut self, layers: usize, width: usize) -> Self {
        self.hidden_layers = layers;
        self.hidden_width = width;
        self
    }

    pub fn validate(&self) -> Result<(), MdnError> {
        if self.input_dim < 1
            || self.hidden_layers < 1
            || self.hidden_width < 1
            || self.mixture_k < 1
        {
            return Err(MdnError::InvalidParams(format!("invalid config {self:?}")));
        }
        Ok(())
    }
}

/// One predictive Gaussian mixture: weights in (0,1) summing to one, means,
/// and strictly positive scales, all of length K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self, MdnError> {
        let p = MixtureParams { weights, means, scales };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<(), MdnError> {
        if self.weights.len() != self.means.len() || self.weights.len() != self.scales.len() {
            return Err(MdnError::InvalidParams("component arrays differ in length".into()));
        }
        if self.weights.is_empty() {
            return Err(MdnError::InvalidParams("empty mixture".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MdnError::InvalidParams(format!("weights sum to {sum}")));
        }
        if self.weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(MdnError::InvalidParams("weight outside [0,1]".into()));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(MdnError::InvalidParams("non-positive scale".into()));
        }
        Ok(())
    }

    /// log sum_k w_k N(y; mu_k, sigma_k^2), via logsumexp.
    pub fn log_pdf(&self, y: f64) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|k| self.weights[k].ln() + num::gauss_log_pdf(y, self.means[k], self.scales[k]))
            .collect();
        num::logsumexp(&terms)
    }

    /// sum_k w_k Phi((y - mu_k)/sigma_k).
    pub fn cdf(&self, y: f64) -> f64 {
        (0..self.k())
            .map(|k| self.weights[k] * num::norm_cdf((y - self.means[k]) / self.scales[k]))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        (0..self.k()).map(|k| self.weights[k] * self.means[k]).sum()
    }

    /// Var = sum_k w_k (sigma_k^2 + mu_k^2) - mean^2.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second: f64 = (0..self.k())
            .map(|k| {
                self.weights[k] * (self.scales[k] * self.scales[k] + self.means[k] * self.means[k])
            })
            .sum();
        second - m * m
    }

    /// Inverse CDF by bracketed bisection. The bracket starts at
    /// [min_k(mu_k - 20 sigma_k), max_k(mu_k + 20 sigma_k)] and is expanded
    /// geometrically if it does not contain the level.
    pub fn quantile(&self, alpha: f64) -> Result<f64, MdnError> {
        assert!(alpha > 0.0 && alpha < 1.0, "quantile level must be inside (0,1)");
        let mut lo = (0..self.k())
            .map(|k| self.means[k] - 20.0 * self.scales[k])
            .fold(f64::INFINITY, f64::min);
        let mut hi = (0..self.k())
            .map(|k| self.means[k] + 20.0 * self.scales[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut width = hi - lo;
        let mut doublings = 0;
        while self.cdf(lo) > alpha {
            lo -= width;
            width *= 2.0;
            doublings += 1;
            if doublings > 60 {
                return Err(MdnError::QuantileBracket);
            }
        }
        while self.cdf(hi) < alpha {
            hi += width;
            width *= 2.0;
            doublings += 1;
            if doublings > 60 {
                return Err(MdnError::QuantileBracket);
            }
        }
        self.quantile_bracketed(alpha, lo, hi)
    }

    /// Bisection on a bracket already known to contain the level; exposed so
    /// monotone quantile sweeps can warm-start from the previous root.
    pub fn quantile_bracketed(
        &self,
        alpha: f64,
        mut lo: f64,
        mut hi: f64,
    ) -> Result<f64, MdnError> {
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let c = self.cdf(mid);
            if (c - alpha).abs() <= 1e-12 {
                return Ok(mid);
            }
            if c < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
                break;
            }
        }
        Ok(mid)
    }

    /// Draw one value: pick a component by weight, then sample its Gaussian.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.k() - 1;
        for k in 0..self.k() {
            acc += self.weights[k];
            if u <= acc {
                idx = k;
                break;
            }
        }
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        self.means[idx] + self.scales[idx] * z
    }
}

/// Graph handles for one forward pass over a batch.
pub struct MdnNodes {
    pub means: NodeId,
    pub sigmas: NodeId,
    pub log_weights: NodeId,
    pub weights: NodeId,
}

pub struct MdnModel {
    config: MdnConfig,
    params: ParamStore,
}

impl MdnModel {
    /// Uniform fan-in initialization (U(-1/sqrt(fan_in), 1/sqrt(fan_in))),
    /// drawn from a dedicated stream so a seed pins the exact parameters.
    pub fn new(config: MdnConfig, seed: u64) -> Result<Self, MdnError> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "mdn-init");
        let mut params = ParamStore::new();
        let mut fan_in = config.input_dim;
        for layer in 0..config.hidden_layers {
            let out = config.hidden_width;
            params.insert(&format!("w{layer}"), init_weight(&mut rng, fan_in, out));
            params.insert(&format!("b{layer}"), init_bias(&mut rng, fan_in, out));
            fan_in = out;
        }
        let out = 3 * config.mixture_k;
        params.insert("w_out", init_weight(&mut rng, fan_in, out));
        params.insert("b_out", init_bias(&mut rng, fan_in, out));
        Ok(MdnModel { config, params })
    }

    pub fn config(&self) -> &MdnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Forward pass on the graph. `leaves` must come from
    /// `self.params().leaves(g)` (insertion order).
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId, leaves: &[NodeId]) -> MdnNodes {
        let k = self.config.mixture_k;
        let mut h = x;
        for layer in 0..self.config.hidden_layers {
            let w = leaves[2 * layer];
            let b = leaves[2 * layer + 1];
            let a = g.affine(h, w, b);
            h = g.relu(a);
        }
        let w_out = leaves[2 * self.config.hidden_layers];
        let b_out = leaves[2 * self.config.hidden_layers + 1];
        let raw = g.affine(h, w_out, b_out);
        let means = g.slice_cols(raw, 0, k);
        let rho = g.slice_cols(raw, k, 2 * k);
        let sp = g.softplus(rho);
        let sigmas = g.clamp_min(sp, SIGMA_FLOOR);
        let logits = g.slice_cols(raw, 2 * k, 3 * k);
        let lse = g.logsumexp_rows(logits);
        let log_weights = g.sub_colvec(logits, lse);
        let weights = g.exp(log_weights);
        MdnNodes { means, sigmas, log_weights, weights }
    }

    /// Predict mixtures for a batch of feature rows.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<MixtureParams>, MdnError> {
        if x.cols() != self.config.input_dim {
            return Err(MdnError::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.cols(),
            });
        }
        let mut g = Graph::new();
        let leaves = self.params.leaves(&mut g);
        let xn = g.constant(x.clone());
        let nodes = self.forward_graph(&mut g, xn, &leaves);
        let k = self.config.mixture_k;
        let (mv, sv, wv) = (g.value(nodes.means), g.value(nodes.sigmas), g.value(nodes.weights));
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            out.push(MixtureParams {
                weights: (0..k).map(|c| wv.get(r, c)).collect(),
                means: (0..k).map(|c| mv.get(r, c)).collect(),
                scales: (0..k).map(|c| sv.get(r, c)).collect(),
            });
        }
        Ok(out)
    }

    /// Serialize config plus parameters; f64 values as hex bit patterns so
    /// the round trip is bit-exact.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("qrt-mdn v1\n");
        out.push_str(&serde_json::to_string(&self.config).expect("config serializes"));
        out.push('\n');
        for (name, t) in self.params.values() {
            out.push_str(&format!("param {} {} {}\n", name, t.rows(), t.cols()));
            let words: Vec<String> =
                t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, MdnError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint"))?;
        if header != "qrt-mdn v1" {
            return Err(bad(&format!("unexpected header {header:?}")));
        }
        let cfg_line = lines.next().ok_or_else(|| bad("missing config line"))?;
        let config: MdnConfig =
            serde_json::from_str(cfg_line).map_err(|e| bad(&format!("config: {e}")))?;
        config.validate()?;
        let mut params = ParamStore::new();
        loop {
            let line = lines.next().ok_or_else(|| bad("missing end marker"))?;
            if line == "end" {
                break;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("param") => {}
                other => return Err(bad(&format!("expected param line, got {other:?}"))),
            }
            let name = parts.next().ok_or_else(|| bad("param name missing"))?;
            let rows: usize = parse_field(parts.next(), "rows")?;
            let cols: usize = parse_field(parts.next(), "cols")?;
            let data_line = lines.next().ok_or_else(|| bad("param data missing"))?;
            let data: Result<Vec<f64>, MdnError> = data_line
                .split_whitespace()
                .map(|w| {
                    u64::from_str_radix(w, 16)
                        .map(f64::from_bits)
                        .map_err(|e| bad(&format!("bad hex word {w:?}: {e}")))
                })
                .collect();
            let data = data?;
            if data.len() != rows * cols {
                return Err(bad(&format!(
                    "param {name}: expected {} values, got {}",
                    rows * cols,
                    data.len()
                )));
            }
            params.insert(name, Tensor::from_vec(rows, cols, data));
        }
        let expected = 2 * (config.hidden_layers + 1);
        if params.len() != expected {
            return Err(bad(&format!(
                "expected {expected} parameter arrays, got {}",
                params.len()
            )));
        }
        Ok(MdnModel { config, params })
    }
}

fn bad(msg: &str) -> MdnError {
    MdnError::CheckpointFormat(msg.to_string())
}

fn parse_field(field: Option<&str>, what: &str) -> Result<usize, MdnError> {
    field
        .ok_or_else(|| bad(&format!("{what} missing")))?
        .parse()
        .map_err(|e| bad(&format!("{what}: {e}")))
}

fn init_weight(rng: &mut impl Rng, fan_in: usize, out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(
        fan_in,
        out,
        (0..fan_in * out).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn init_bias(rng: &mut impl Rng, fan_in: usize, out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(1, out, (0..out).map(|_| rng.gen_range(-bound..bound)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny_model() -> MdnModel {
        MdnModel::new(MdnConfig::new(2).with_hidden(2, 4).with_mixture(3), 42).unwrap()
    }

    #[test]
    fn zeroed_output_layer_gives_uniform_weights_and_softplus_zero_scale() {
        let mut model = tiny_model();
        let k = model.config().mixture_k;
        let w_shape = model.params().get("w_out").unwrap().shape();
        model.params_mut().set("w_out", Tensor::zeros(w_shape.0, w_shape.1));
        model.params_mut().set("b_out", Tensor::zeros(1, 3 * k));
        let p = &model.predict(&Tensor::from_vec(1, 2, vec![0.3, -0.7])).unwrap()[0];
        for &w in &p.weights {
            assert_relative_eq!(w, 1.0 / k as f64, epsilon = 1e-15);
        }
        // rho = 0 -> sigma = softplus(0) = ln 2 (the 1e-6 floor does not bind)
        for &s in &p.scales {
            assert_relative_eq!(s, std::f64::consts::LN_2, epsilon = 1e-15);
        }
    }

    #[test]
    fn fixed_seed_and_input_reproduce_bit_identical_mixtures() {
        let x = Tensor::from_vec(2, 2, vec![0.1, -0.4, 1.2, 0.8]);
        let a = tiny_model().predict(&x).unwrap();
        let b = tiny_model().predict(&x).unwrap();
        assert_eq!(a, b);
        // golden record, captured once from this implementation
        let bits: Vec<u64> = a[0]
            .weights
            .iter()
            .chain(a[0].means.iter())
            .chain(a[0].scales.iter())
            .map(|v| v.to_bits())
            .collect();
        let golden: Vec<u64> = vec![
            0x3fd8d4447ca430fa,
            0x3fd21bc4f6a10ef0,
            0x3fd50ff68cbac014,
            0x3fa847d50d7dba4f,
            0x3feaba54683fc106,
            0xbfc2443444e2d42c,
            0x3fe518172ed472bc,
            0x3fe9b936a9994db0,
            0x3fe6d6eecd83727d,
        ];
        assert_eq!(bits, golden, "bits: {bits:#018x?}");
    }

    #[test]
    fn log_pdf_reference_values() {
        let std_normal =
            MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert_relative_eq!(std_normal.log_pdf(0.0), -0.9189385332046727, epsilon = 1e-12);

        // equal-weight symmetric pair vs direct density sum
        let two = MixtureParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let direct = (0.5 * num::norm_pdf(-1.0) + 0.5 * num::norm_pdf(1.0)).ln();
        assert_relative_eq!(two.log_pdf(0.0), direct, epsilon = 1e-12);

        // degenerate weights reduce to the live component
        let degen =
            MixtureParams::new(vec![1.0, 0.0], vec![0.5, 9.0], vec![2.0, 1.0]).unwrap();
        assert_relative_eq!(
            degen.log_pdf(0.2),
            num::gauss_log_pdf(0.2, 0.5, 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cdf_reference_values() {
        let std_normal = MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(std_normal.cdf(0.0), 0.5);
        let two = MixtureParams::new(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.7, 0.7]).unwrap();
        assert_relative_eq!(two.cdf(0.0), 0.5, epsilon = 1e-15);
        // ten sigma above the mean; erfc oracle puts the deficit below 1e-12
        let single = MixtureParams::new(vec![1.0], vec![3.0], vec![0.5]).unwrap();
        assert!((1.0 - single.cdf(3.0 + 10.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn quantile_reference_and_roundtrip() {
        let std_normal = MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert!(std_normal.quantile(0.5).unwrap().abs() < 1e-10);
        // inverse-normal oracle value for the 97.5% level
        assert_relative_eq!(std_normal.quantile(0.975).unwrap(), 1.959964, epsilon = 1e-5);

        let mix =
            MixtureParams::new(vec![0.3, 0.5, 0.2], vec![-2.0, 0.5, 4.0], vec![0.5, 1.5, 0.8])
                .unwrap();
        for j in 1..100 {
            let alpha = j as f64 / 100.0;
            let y = mix.quantile(alpha).unwrap();
            assert!(
                (mix.cdf(y) - alpha).abs() <= 1e-9,
                "roundtrip failed at alpha={alpha}: cdf={}",
                mix.cdf(y)
            );
        }
    }

    #[test]
    fn pdf_integrates_to_one_and_matches_cdf_derivative() {
        let mix = MixtureParams::new(vec![0.6, 0.4], vec![-1.0, 2.0], vec![0.8, 1.3]).unwrap();
        let lo = -1.0 - 12.0 * 0.8;
        let hi = 2.0 + 12.0 * 1.3;
        let mass = crate::quad::adaptive_simpson(&|y| mix.log_pdf(y).exp(), lo, hi, 1e-9);
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        // d cdf / dy == pdf by central differences
        let h = 1e-6;
        for y in [-2.0, -0.3, 0.9, 2.4] {
            let num_deriv = (mix.cdf(y + h) - mix.cdf(y - h)) / (2.0 * h);
            assert_relative_eq!(num_deriv, mix.log_pdf(y).exp(), epsilon = 1e-6);
        }
    }

    #[test]
    fn mean_nll_gradients_pass_finite_difference_check() {
        let model = tiny_model();
        let x = Tensor::from_vec(4, 2, vec![0.3, -0.7, 1.1, 0.2, -0.9, 0.5, 0.0, -1.3]);
        let y = Tensor::col(&[0.2, -0.4, 1.0, 0.3]);
        let inputs: Vec<Tensor> = model.params().values().map(|(_, t)| t.clone()).collect();
        let cfg = *model.config();
        let r = crate::autodiff::finite_diff_check(&inputs, 1e-5, &|g, leaves| {
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let m = MdnModel { config: cfg, params: ParamStore::new() };
            let nodes = m.forward_graph(g, xn, leaves);
            let lp = g.gaussian_log_pdf(yn, nodes.means, nodes.sigmas);
            let weighted = g.add(nodes.log_weights, lp);
            let per_point = g.logsumexp_rows(weighted);
            let total = g.mean(per_point);
            g.neg(total)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "NLL grad err {} at {:?}", r.max_rel_err, r.worst);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = tiny_model();
        let err = model.predict(&Tensor::from_vec(1, 3, vec![0.0; 3])).unwrap_err();
        assert!(matches!(err, MdnError::DimensionMismatch { expected: 2, got: 3 }));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = tiny_model();
        let text = model.to_checkpoint();
        let restored = MdnModel::from_checkpoint(&text).unwrap();
        assert_eq!(model.config(), restored.config());
        for ((n1, t1), (n2, t2)) in model.params().values().zip(restored.params().values()) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(text, restored.to_checkpoint());
    }

    #[test]
    fn checkpoint_rejects_malformed_input() {
        assert!(MdnModel::from_checkpoint("not a checkpoint").is_err());
        let model = tiny_model();
        let truncated: String =
            model.to_checkpoint().lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(MdnModel::from_checkpoint(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn cdf_is_nondecreasing(
            raw_w in prop::collection::vec(0.05f64..1.0, 3),
            means in prop::collection::vec(-5.0f64..5.0, 3),
            scales in prop::collection::vec(0.05f64..3.0, 3),
            y1 in -8.0f64..8.0,
            dy in 0.0f64..6.0,
        ) {
            let total: f64 = raw_w.iter().sum();
            let w: Vec<f64> = raw_w.iter().map(|v| v / total).collect();
            let mix = MixtureParams::new(w, means, scales).unwrap();
            prop_assert!(mix.cdf(y1) <= mix.cdf(y1 + dy) + 1e-15);
        }
    }
}
