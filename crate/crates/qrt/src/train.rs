//! The unified minibatch training procedure.
//!
//! One loss family covers the whole method table: with batch PITs Z_i and a
//! reflected-kernel map phi built from them,
//!
//! ```text
//! L(theta) = -(1/B) sum_i [ log f(y_i|x_i) + alpha * log phi(Z_i) ]
//! ```
//!
//! alpha = 0 is plain NLL training, alpha = 1 trains the recalibrated
//! distribution end to end, and negative alpha is entropy regularization
//! (where the entropy term may instead come from the Vasicek spacing
//! estimator). A boolean post-hoc step recalibrates the final model on the
//! calibration split. Ablations replace the map's center pathway: frozen at
//! initialization, detached from the gradient, or learned as free parameters.

use crate::autodiff::{DiffError, Graph, NodeId};
use crate::calib::{pit_of, CalibError, CalibrationMap, MapKind};
use crate::data::{Dataset, Splits, Standardizer};
use crate::mdn::{MdnConfig, MdnError, MdnModel, MixtureParams};
use crate::metrics::{self, DistSet, MetricsError};
use crate::params::AdamConfig;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, history: Box<TrainHistory>, source: DiffError },
    #[error("non-finite PIT value in batch")]
    NonFinitePit,
    #[error(transparent)]
    Mdn(#[from] MdnError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How the in-loop calibration map obtains its centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Centers are the batch PITs, fully differentiable.
    None,
    /// Map built once from the initial model before the first step (QRI).
    FrozenInit,
    /// Batch PITs as centers but detached from the gradient (QRG).
    StopGrad,
    /// Centers are extra trainable parameters, initialized U(0,1) (QRL).
    LearnedCenters,
}

/// Where the map centers come from each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapSource {
    /// The current batch's own PITs.
    Batch,
    /// PITs of a fresh without-replacement sample of the training set
    /// (clamped to the training size), costing M + B model evaluations.
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BandwidthSpec {
    Fixed(f64),
    /// Candidates resolved by validation NLL (ties to the smaller value).
    Tune(Vec<f64>),
}

impl BandwidthSpec {
    pub fn candidates(&self) -> Vec<f64> {
        match self {
            BandwidthSpec::Fixed(b) => vec![*b],
            BandwidthSpec::Tune(v) => v.clone(),
        }
    }
}

/// Mechanism realizing the entropy term for negative alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QregEstimator {
    /// The map term of the unified loss (log phi at the batch PITs).
    MapEntropy,
    /// Sample-spacing estimator over the sorted batch PITs.
    Vasicek,
}

/// The loss coefficient of the entropy term, either pinned or resolved by
/// the lambda sweep (QREG rows train one model per lambda with
/// alpha = -lambda and pick by the CRPS-capped PCE rule).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSpec {
    Fixed(f64),
    Tuned,
}

/// One row of the method table plus optimizer and stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    /// Coefficient of the map term: 0 = plain NLL, 1 = recalibration
    /// training, negative = entropy regularization with lambda = -alpha.
    pub alpha: AlphaSpec,
    /// Apply post-hoc recalibration on the calibration split.
    pub posthoc: bool,
    pub bandwidth: BandwidthSpec,
    /// Regularization strengths swept when alpha is tuned (QREG family);
    /// the runner trains one model per value and applies the CRPS-capped
    /// PCE rule.
    pub lambda_set: Vec<f64>,
    pub ablation: AblationMode,
    pub map_source: MapSource,
    pub qreg_estimator: QregEstimator,
    /// Spacing window; None = ceil(sqrt(B)).
    pub vasicek_window: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// None derives the rule: drop the last incomplete minibatch iff
    /// alpha != 0 (map quality degrades at tiny batch sizes).
    pub drop_last: Option<bool>,
    /// Map family used for the post-hoc step and in-loop map alike.
    pub posthoc_kind: MapKind,
    /// None derives the fairness rule: fold the calibration rows into
    /// training iff the method never uses them (alpha = 0, no post hoc).
    pub fold_calibration_into_train: Option<bool>,
}

impl MethodSpec {
    pub fn base_defaults(name: &str) -> Self {
        MethodSpec {
            name: name.to_string(),
            alpha: AlphaSpec::Fixed(0.0),
            posthoc: false,
            bandwidth: BandwidthSpec::Tune(vec![0.01, 0.05, 0.1, 0.2]),
            lambda_set: vec![0.0, 0.01, 0.05, 0.2, 1.0, 5.0],
            ablation: AblationMode::None,
            map_source: MapSource::Batch,
            qreg_estimator: QregEstimator::MapEntropy,
            vasicek_window: None,
            batch_size: 512,
            learning_rate: 1e-3,
            max_epochs: 1000,
            patience: 30,
            drop_last: None,
            posthoc_kind: MapKind::Refl,
            fold_calibration_into_train: None,
        }
    }

    /// The named method rows: BASE, QRC, QREG, QREGC, QRT, QRTC plus the
    /// ablations QRIC, QRGC, QRLC.
    pub fn preset(name: &str) -> Option<Self> {
        let mut spec = Self::base_defaults(name);
        match name {
            "BASE" => {}
            "QRC" => spec.posthoc = true,
            "QREG" => spec.alpha = AlphaSpec::Tuned,
            "QREGC" => {
                spec.alpha = AlphaSpec::Tuned;
                spec.posthoc = true;
            }
            "QRT" => spec.alpha = AlphaSpec::Fixed(1.0),
            "QRTC" => {
                spec.alpha = AlphaSpec::Fixed(1.0);
                spec.posthoc = true;
            }
            "QRIC" => {
                spec.alpha = AlphaSpec::Fixed(1.0);
                spec.posthoc = true;
                spec.ablation = AblationMode::FrozenInit;
            }
            "QRGC" => {
                spec.alpha = AlphaSpec::Fixed(1.0);
                spec.posthoc = true;
                spec.ablation = AblationMode::StopGrad;
            }
            "QRLC" => {
                spec.alpha = AlphaSpec::Fixed(1.0);
                spec.posthoc = true;
                spec.ablation = AblationMode::LearnedCenters;
            }
            _ => return None,
        }
        Some(spec)
    }

    /// Alpha is swept over the lambda grid (QREG rows).
    pub fn alpha_is_tuned(&self) -> bool {
        self.alpha == AlphaSpec::Tuned
    }

    pub fn uses_map_term(&self, alpha: f64) -> bool {
        alpha != 0.0
            && !(alpha < 0.0 && self.qreg_estimator == QregEstimator::Vasicek)
    }

    pub fn drop_last_effective(&self, alpha: f64) -> bool {
        self.drop_last.unwrap_or(alpha != 0.0)
    }

    pub fn fold_calibration_effective(&self) -> bool {
        self.fold_calibration_into_train
            .unwrap_or(self.alpha == AlphaSpec::Fixed(0.0) && !self.posthoc)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

/// Standardized tensors for the four partitions.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub x_train: Tensor,
    pub y_train: Vec<f64>,
    pub x_val: Tensor,
    pub y_val: Vec<f64>,
    pub x_cal: Tensor,
    pub y_cal: Vec<f64>,
    pub x_test: Tensor,
    pub y_test: Vec<f64>,
    /// Training-partition target SD, for de-standardizing scores.
    pub target_sd: f64,
}

impl SplitData {
    pub fn prepare(data: &Dataset, splits: &Splits, st: &Standardizer) -> Self {
        let train_idx = splits.effective_train();
        SplitData {
            x_train: st.transform_x(data, &train_idx),
            y_train: st.transform_y(data, &train_idx),
            x_val: st.transform_x(data, &splits.validation),
            y_val: st.transform_y(data, &splits.validation),
            x_cal: st.transform_x(data, &splits.calibration),
            y_cal: st.transform_y(data, &splits.calibration),
            x_test: st.transform_x(data, &splits.test),
            y_test: st.transform_y(data, &splits.test),
            target_sd: st.target_sd,
        }
    }
}

/// Per-epoch observations. NLL values are in standardized target space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_pce: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub kernel_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index of the epoch whose parameters were restored (min val NLL).
    pub selected_epoch: usize,
    pub stopped_early: bool,
}

/// Minimum-validation-NLL early stopping with a patience window.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, wait: 0 }
    }

    /// Returns true when the run should stop after this epoch. A strict
    /// improvement resets the window; `patience` consecutive non-improving
    /// epochs trigger the stop.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }

    pub fn improved(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Where the in-loop map centers come from for one batch.
pub enum CenterSource<'a> {
    Batch,
    Detached,
    Frozen(&'a [f64]),
    /// Leaf index of the learned-centers parameter.
    LearnedParam(usize),
    /// Extra rows forwarded through the model (sampled map source).
    External { x: &'a Tensor, y: &'a [f64] },
}

/// Everything `qrt_loss` needs besides the batch itself.
pub struct LossSpec<'a> {
    pub alpha: f64,
    pub bandwidth: f64,
    pub centers: CenterSource<'a>,
    pub qreg_estimator: QregEstimator,
    pub vasicek_window: usize,
}

/// Values extracted from one built batch loss.
pub struct BatchLoss {
    pub loss: NodeId,
    pub loss_value: f64,
    pub base_nll: f64,
    /// Value of the entropy term T (mean log phi(Z) or the spacing
    /// statistic); the loss is base_nll - alpha * T.
    pub entropy_term: f64,
    /// Logistic kernel pdf evaluations performed by this batch.
    pub kernel_evals: u64,
    /// Spacings floored at 1e-12 (duplicate PITs), Vasicek mechanism only.
    pub floored_spacings: usize,
}

struct ForwardBits {
    base_nll: NodeId,
    z: NodeId,
}

fn forward_nll_and_pit(
    g: &mut Graph,
    model: &MdnModel,
    leaves: &[NodeId],
    x: &Tensor,
    y: &[f64],
) -> ForwardBits {
    let xn = g.constant(x.clone());
    let yn = g.constant(Tensor::col(y));
    let nodes = model.forward_graph(g, xn, leaves);
    let lp = g.gaussian_log_pdf(yn, nodes.means, nodes.sigmas);
    let weighted = g.add(nodes.log_weights, lp);
    let per_point = g.logsumexp_rows(weighted);
    let mean_lp = g.mean(per_point);
    let base_nll = g.neg(mean_lp);
    let cdfs = g.gaussian_cdf(yn, nodes.means, nodes.sigmas);
    let wc = g.mul(nodes.weights, cdfs);
    let z = g.row_sum(wc);
    ForwardBits { base_nll, z }
}

/// PIT of extra rows for the sampled map source (part of the same graph, so
/// gradients flow into the map like in the batch-source case).
fn forward_pit_only(
    g: &mut Graph,
    model: &MdnModel,
    leaves: &[NodeId],
    x: &Tensor,
    y: &[f64],
) -> NodeId {
    let xn = g.constant(x.clone());
    let yn = g.constant(Tensor::col(y));
    let nodes = model.forward_graph(g, xn, leaves);
    let cdfs = g.gaussian_cdf(yn, nodes.means, nodes.sigmas);
    let wc = g.mul(nodes.weights, cdfs);
    g.row_sum(wc)
}

/// The unified batch loss L = base NLL - alpha * T. See the module docs for
/// the decomposition; with alpha = 0 the map machinery is skipped entirely.
pub fn qrt_loss(
    g: &mut Graph,
    model: &MdnModel,
    leaves: &[NodeId],
    x: &Tensor,
    y: &[f64],
    spec: &LossSpec,
) -> Result<BatchLoss, TrainError> {
    assert!(x.rows() >= 2 || spec.alpha == 0.0, "map term needs at least two rows");
    if spec.alpha != 0.0 {
        assert!(spec.bandwidth > 0.0, "map term needs a positive bandwidth");
    }
    let evals_before = g.kernel_pdf_evals();
    let bits = forward_nll_and_pit(g, model, leaves, x, y);
    if spec.alpha == 0.0 {
        return Ok(BatchLoss {
            loss: bits.base_nll,
            loss_value: g.value(bits.base_nll).item(),
            base_nll: g.value(bits.base_nll).item(),
            entropy_term: 0.0,
            kernel_evals: 0,
            floored_spacings: 0,
        });
    }
    if !g.value(bits.z).all_finite() {
        return Err(TrainError::NonFinitePit);
    }
    let use_vasicek = spec.alpha < 0.0 && spec.qreg_estimator == QregEstimator::Vasicek;
    let (term, floored) = if use_vasicek {
        let n = y.len();
        let k = spec.vasicek_window.clamp(1, n - 1);
        let sorted = g.sort_with_permutation(bits.z);
        let upper = g.slice_rows(sorted, k, n);
        let lower = g.slice_rows(sorted, 0, n - k);
        let spacing = g.sub(upper, lower);
        let floored_count =
            g.value(spacing).data().iter().filter(|&&v| v <= 1e-12).count();
        let safe = g.clamp_min(spacing, 1e-12);
        let scaled = g.scale(safe, (n as f64 + 1.0) / k as f64);
        let logs = g.log(scaled);
        (g.mean(logs), floored_count)
    } else {
        let centers = match spec.centers {
            CenterSource::Batch => bits.z,
            CenterSource::Detached => g.detach(bits.z),
            CenterSource::Frozen(vals) => g.constant(Tensor::col(vals)),
            CenterSource::LearnedParam(idx) => leaves[idx],
            CenterSource::External { x: cx, y: cy } => {
                forward_pit_only(g, model, leaves, cx, cy)
            }
        };
        let n_centers = g.value(centers).rows() as f64;
        let s2 = spec.bandwidth * spec.bandwidth * n_centers.powf(-0.4);
        let scale = crate::num::logistic_scale_for_variance(s2);
        let direct = g.logistic_log_pdf(bits.z, centers, scale);
        let zneg = g.neg(bits.z);
        let reflect_low = g.logistic_log_pdf(zneg, centers, scale);
        let zneg2 = g.neg(bits.z);
        let two_minus_z = g.add_scalar(zneg2, 2.0);
        let reflect_high = g.logistic_log_pdf(two_minus_z, centers, scale);
        let all = g.concat_cols(&[direct, reflect_low, reflect_high]);
        let lse = g.logsumexp_rows(all);
        let unnorm = g.add_scalar(lse, -n_centers.ln());
        // normalizer: mean kernel mass inside [-1, 2]
        let bounds = g.constant(Tensor::from_vec(2, 1, vec![2.0, -1.0]));
        let bound_cdfs = g.logistic_cdf(bounds, centers, scale);
        let hi = g.slice_rows(bound_cdfs, 0, 1);
        let lo = g.slice_rows(bound_cdfs, 1, 2);
        let per_center = g.sub(hi, lo);
        let eta = g.mean(per_center);
        let log_eta = g.log(eta);
        let log_phi = g.sub_scalar_node(unnorm, log_eta);
        (g.mean(log_phi), 0)
    };
    let scaled_term = g.scale(term, spec.alpha);
    let loss = g.sub(bits.base_nll, scaled_term);
    Ok(BatchLoss {
        loss,
        loss_value: g.value(loss).item(),
        base_nll: g.value(bits.base_nll).item(),
        entropy_term: g.value(term).item(),
        kernel_evals: g.kernel_pdf_evals() - evals_before,
        floored_spacings: floored,
    })
}

/// Plain (non-graph) sample-spacing entropy estimate over sorted values:
/// mean of log((N+1)/k * (Z_(i+k) - Z_(i))). Returns the estimate and the
/// number of spacings floored at 1e-12 (duplicates).
pub fn vasicek_entropy(zs: &[f64], k: usize) -> (f64, usize) {
    let n = zs.len();
    assert!(k >= 1 && k < n, "window must satisfy 1 <= k <= N-1");
    let mut sorted = zs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    let mut floored = 0;
    for i in 0..n - k {
        let mut sp = sorted[i + k] - sorted[i];
        if sp <= 1e-12 {
            sp = 1e-12;
            floored += 1;
        }
        acc += ((n as f64 + 1.0) / k as f64 * sp).ln();
    }
    (acc / (n - k) as f64, floored)
}

/// Without-replacement index sample for the sampled map source
/// (M clamped to the population size).
pub fn sample_map_indices(rng: &mut impl Rng, n: usize, m: usize) -> Vec<usize> {
    let m = m.min(n);
    rand::seq::index::sample(rng, n, m).into_vec()
}

/// Fit a map of the given kind on the calibration split's PITs.
pub fn posthoc_recalibrate(
    model: &MdnModel,
    x_cal: &Tensor,
    y_cal: &[f64],
    kind: MapKind,
    bandwidth: Option<f64>,
) -> Result<CalibrationMap, TrainError> {
    let pits = crate::calib::pit(model, x_cal, y_cal)?;
    Ok(CalibrationMap::build(kind, &pits, bandwidth)?)
}

/// Pick the post-hoc bandwidth minimizing the validation NLL of the
/// recalibrated model; ties go to the smaller bandwidth.
pub fn select_bandwidth(
    model: &MdnModel,
    cal_pits: &[f64],
    candidates: &[f64],
    x_val: &Tensor,
    y_val: &[f64],
    kind: MapKind,
) -> Result<f64, TrainError> {
    assert!(!candidates.is_empty(), "candidate set must be nonempty");
    let mut cands = candidates.to_vec();
    cands.sort_by(f64::total_cmp);
    let bases = model.predict(x_val)?;
    let mut best = (f64::INFINITY, cands[0]);
    for &b in &cands {
        let map = CalibrationMap::build(kind, cal_pits, Some(b))?;
        let set = DistSet::Recalibrated { bases: &bases, map: &map };
        let val = metrics::nll(&set, y_val, 1.0)?;
        if val < best.0 {
            best = (val, b);
        }
    }
    Ok(best.1)
}

/// One evaluated regularization candidate (validation metrics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    pub pce: f64,
    pub crps: f64,
}

/// Among candidates whose CRPS stays within 110% of the unregularized
/// reference, the smallest PCE wins (ties to the smaller lambda). Returns
/// 0 when nothing qualifies.
pub fn select_lambda(candidates: &[LambdaCandidate]) -> f64 {
    let reference = candidates
        .iter()
        .find(|c| c.lambda == 0.0)
        .expect("candidate set must include lambda = 0");
    let cap = 1.10 * reference.crps;
    let mut best: Option<&LambdaCandidate> = None;
    let mut sorted: Vec<&LambdaCandidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    for c in sorted {
        if c.crps <= cap {
            let better = match best {
                None => true,
                Some(cur) => c.pce < cur.pce,
            };
            if better {
                best = Some(c);
            }
        }
    }
    best.map(|c| c.lambda).unwrap_or(0.0)
}

/// Train one model with a fully resolved (alpha, bandwidth) pair.
///
/// Early stopping watches the validation NLL: for alpha > 0 that is the NLL
/// of the recalibrated model whose map is rebuilt each epoch from the full
/// training PITs; otherwise plain base NLL. The returned parameters are
/// those of the best epoch.
pub fn train(
    mdn_config: &MdnConfig,
    spec: &MethodSpec,
    alpha: f64,
    bandwidth: f64,
    data: &SplitData,
    seed: u64,
) -> Result<(MdnModel, TrainHistory), TrainError> {
    assert!(!data.y_train.is_empty() && !data.y_val.is_empty(), "train/val must be nonempty");
    if spec.ablation != AblationMode::None {
        assert!(
            matches!(spec.map_source, MapSource::Batch),
            "ablations operate on the batch map source"
        );
    }
    let mut model = MdnModel::new(*mdn_config, seed)?;
    let mut rng = crate::rng::stream(seed, &format!("train-{}", spec.name));
    let n_train = data.y_train.len();
    let batch = spec.batch_size.min(n_train);
    let drop_last = spec.drop_last_effective(alpha);
    let adam = spec.adam();
    let vasicek_window =
        spec.vasicek_window.unwrap_or_else(|| (batch as f64).sqrt().ceil() as usize);

    // learned-centers ablation: one extra parameter array of batch length
    let learned_idx = if spec.ablation == AblationMode::LearnedCenters {
        let init: Vec<f64> = (0..batch).map(|_| rng.gen_range(0.0..1.0)).collect();
        model.params_mut().insert("map_centers", Tensor::col(&init));
        Some(model.params().len() - 1)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..n_train).collect();

    // frozen-init ablation: PITs of the first minibatch under the initial
    // parameters, fixed for the whole run
    let frozen_centers: Option<Vec<f64>> = if spec.ablation == AblationMode::FrozenInit {
        let mut first = order.clone();
        first.shuffle(&mut crate::rng::stream(seed, &format!("train-{}-frozen", spec.name)));
        let take: Vec<usize> = first.into_iter().take(batch).collect();
        let (bx, by) = gather(&data.x_train, &data.y_train, &take);
        Some(crate::calib::pit(&model, &bx, &by)?)
    } else {
        None
    };

    // evenly strided training rows for the per-epoch validation map
    let val_map_rows: Vec<usize> = {
        let m = 512.min(n_train);
        (0..m).map(|i| i * n_train / m).collect()
    };

    let mut history = TrainHistory { epochs: Vec::new(), selected_epoch: 0, stopped_early: false };
    let mut stopper = EarlyStopper::new(spec.patience);
    let mut best_snapshot = model.params().snapshot();

    for epoch in 0..spec.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut spans: Vec<&[usize]> = order.chunks(batch).collect();
        if drop_last && spans.len() > 1 && spans.last().map(|s| s.len() < batch) == Some(true) {
            spans.pop();
        }
        let mut loss_acc = 0.0;
        let mut rows_acc = 0usize;
        let mut kernel_evals = 0u64;
        for span in spans {
            let (bx, by) = gather(&data.x_train, &data.y_train, span);
            // sampled map source draws its rows before building the graph
            let sampled: Option<(Tensor, Vec<f64>)> = match spec.map_source {
                MapSource::Sampled(m) if alpha != 0.0 => {
                    let idx = sample_map_indices(&mut rng, n_train, m);
                    Some(gather(&data.x_train, &data.y_train, &idx))
                }
                _ => None,
            };
            let centers = match (spec.ablation, &sampled) {
                (AblationMode::StopGrad, _) => CenterSource::Detached,
                (AblationMode::FrozenInit, _) => {
                    CenterSource::Frozen(frozen_centers.as_deref().expect("computed above"))
                }
                (AblationMode::LearnedCenters, _) => {
                    CenterSource::LearnedParam(learned_idx.expect("inserted above"))
                }
                (AblationMode::None, Some((sx, sy))) => {
                    CenterSource::External { x: sx, y: sy }
                }
                (AblationMode::None, None) => CenterSource::Batch,
            };
            let mut g = Graph::new();
            let leaves = model.params().leaves(&mut g);
            let loss_spec = LossSpec {
                alpha,
                bandwidth,
                centers,
                qreg_estimator: spec.qreg_estimator,
                vasicek_window,
            };
            let built = qrt_loss(&mut g, &model, &leaves, &bx, &by, &loss_spec)?;
            if let Err(source) = g.backward(built.loss) {
                history.selected_epoch = stopper.best_epoch();
                return Err(TrainError::Diverged { epoch, history: Box::new(history), source });
            }
            let grads: Vec<Tensor> = leaves.iter().map(|&l| g.grad_or_zeros(l)).collect();
            model.params_mut().adam_step(&grads, &adam);
            loss_acc += built.loss_value * by.len() as f64;
            rows_acc += by.len();
            kernel_evals += built.kernel_evals;
        }
        let train_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let val_bases = model.predict(&data.x_val)?;
        let val_pits = pit_of(&val_bases, &data.y_val);
        let val_pce = metrics::pce_of_pits(&val_pits, 100);
        let val_nll = if alpha > 0.0 {
            // recalibrated-model validation NLL: map from training PITs. A
            // strided subsample caps the per-epoch cost at O(val x 512)
            // kernel evaluations; the final post-hoc map is unaffected.
            let (mx, my) = gather(&data.x_train, &data.y_train, &val_map_rows);
            let train_pits = crate::calib::pit(&model, &mx, &my)?;
            let map = CalibrationMap::build(spec.posthoc_kind, &train_pits, Some(bandwidth))?;
            metrics::nll(&DistSet::Recalibrated { bases: &val_bases, map: &map }, &data.y_val, 1.0)?
        } else {
            metrics::nll(&DistSet::Base(&val_bases), &data.y_val, 1.0)?
        };
        let eval_secs = t1.elapsed().as_secs_f64();

        history.epochs.push(EpochRecord {
            epoch,
            train_nll: loss_acc / rows_acc as f64,
            val_nll,
            val_pce,
            train_secs,
            eval_secs,
            kernel_evals,
        });

        let stop = stopper.observe(epoch, val_nll);
        if stopper.improved(epoch) {
            best_snapshot = model.params().snapshot();
        }
        if stop {
            history.stopped_early = true;
            break;
        }
    }
    model.params_mut().restore(&best_snapshot);
    history.selected_epoch = stopper.best_epoch();
    Ok((model, history))
}

/// Rows of (x, y) at the given indices.
pub fn gather(x: &Tensor, y: &[f64], idx: &[usize]) -> (Tensor, Vec<f64>) {
    let d = x.cols();
    let mut bx = Tensor::zeros(idx.len(), d);
    let mut by = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..d {
            bx.set(r, c, x.get(i, c));
        }
        by.push(y[i]);
    }
    (bx, by)
}

/// Direct evaluation of the recalibrated NLL through the plain (non-graph)
/// path: a reflected map is built from the batch PITs and the mean of
/// -(log f + log phi(Z)) is evaluated pointwise. This is the second route of
/// the decomposition identity; the first is `qrt_loss` at alpha = 1.
pub fn recalibrated_nll_direct(
    mixtures: &[MixtureParams],
    ys: &[f64],
    bandwidth: f64,
) -> Result<f64, TrainError> {
    let pits = pit_of(mixtures, ys);
    let map = CalibrationMap::build(MapKind::Refl, &pits, Some(bandwidth))?;
    let mut acc = 0.0;
    for (m, (&y, &z)) in mixtures.iter().zip(ys.iter().zip(pits.iter())) {
        acc -= m.log_pdf(y) + map.log_pdf(z)?;
    }
    Ok(acc / ys.len() as f64)
}
