//! Result-record schema and the experiment runner: one (dataset, method,
//! seed) run in, one JSON-serializable record out, plus the assembly of
//! records into the comparison matrix and flat CSV tables.

use crate::calib::MapRecord;
use crate::data::{Dataset, SplitManifest, Splits, Standardizer};
use crate::mdn::{MdnConfig, MdnModel};
use crate::metrics::{self, DistSet, MetricConfig, MetricReport};
use crate::stats::ResultMatrix;
use crate::train::{
    self, AlphaSpec, BandwidthSpec, LambdaCandidate, MethodSpec, SplitData, TrainError,
    TrainHistory,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Hyperparameters actually used after tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedHyper {
    pub alpha: f64,
    /// In-loop map bandwidth (when the loss uses the map term).
    pub train_bandwidth: Option<f64>,
    /// Post-hoc map bandwidth (when the method recalibrates).
    pub posthoc_bandwidth: Option<f64>,
    /// Regularization strength for the QREG family.
    pub lambda: Option<f64>,
}

/// One tuning trial, kept for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningTrial {
    pub lambda: Option<f64>,
    pub bandwidth: Option<f64>,
    pub val_nll: f64,
    pub val_pce: f64,
    pub val_crps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub kernel_pdf_evals: u64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_secs: f64,
    pub eval_secs: f64,
    pub wall_secs: f64,
}

/// The per-(dataset, method, seed) result record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: MethodSpec,
    pub seed: u64,
    pub mdn: MdnConfig,
    pub split: SplitManifest,
    pub optimizer: OptimizerRecord,
    pub selected: SelectedHyper,
    pub tuning: Vec<TuningTrial>,
    pub history: TrainHistory,
    /// Test metrics of the base model, original target scale.
    pub base_metrics: MetricReport,
    /// Test metrics after post-hoc recalibration, when applied.
    pub recalibrated_metrics: Option<MetricReport>,
    pub posthoc_map: Option<MapRecord>,
    pub counters: Counters,
    pub timing: Timing,
}

impl RunRecord {
    /// Metric value by name, preferring the recalibrated model when present
    /// (that is the distribution the method actually ships).
    pub fn final_metric(&self, metric: &str) -> Option<f64> {
        let report = self.recalibrated_metrics.as_ref().unwrap_or(&self.base_metrics);
        match metric {
            "nll" => Some(report.nll),
            "pce" => Some(report.pce),
            "crps" => Some(report.crps),
            "sd" => Some(report.sd),
            _ => None,
        }
    }
}

/// Everything needed to execute one run.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub dataset: Dataset,
    pub method: MethodSpec,
    /// Hidden architecture; `input_dim` is overwritten from the dataset.
    pub mdn: MdnConfig,
    pub seed: u64,
    pub metric_cfg: MetricConfig,
}

fn bandwidth_default(spec: &BandwidthSpec) -> f64 {
    match spec {
        BandwidthSpec::Fixed(b) => *b,
        // fixed in-loop default when the sweep applies only post hoc
        BandwidthSpec::Tune(_) => 0.1,
    }
}

struct Trained {
    model: MdnModel,
    history: TrainHistory,
    alpha: f64,
    train_bandwidth: Option<f64>,
    lambda: Option<f64>,
    tuning: Vec<TuningTrial>,
}

/// Resolve tuning (bandwidth for fixed-alpha methods, lambda for the QREG
/// family) and train the final model.
fn train_resolved(req: &RunRequest, data: &SplitData) -> Result<Trained, TrainError> {
    let spec = &req.method;
    let mut cfg = req.mdn;
    cfg.input_dim = req.dataset.x.cols();

    match spec.alpha {
        AlphaSpec::Fixed(alpha) => {
            if alpha == 0.0 {
                let (model, history) = train::train(&cfg, spec, 0.0, 0.1, data, req.seed)?;
                return Ok(Trained {
                    model,
                    history,
                    alpha,
                    train_bandwidth: None,
                    lambda: None,
                    tuning: Vec::new(),
                });
            }
            // sweep the in-loop bandwidth by best validation NLL
            let candidates = {
                let mut c = spec.bandwidth.candidates();
                c.sort_by(f64::total_cmp);
                c
            };
            let mut best: Option<(f64, f64, MdnModel, TrainHistory)> = None;
            let mut tuning = Vec::new();
            for &b in &candidates {
                let (model, history) = train::train(&cfg, spec, alpha, b, data, req.seed)?;
                let sel = &history.epochs[history.selected_epoch];
                tuning.push(TuningTrial {
                    lambda: None,
                    bandwidth: Some(b),
                    val_nll: sel.val_nll,
                    val_pce: sel.val_pce,
                    val_crps: None,
                });
                let better = match &best {
                    None => true,
                    Some((v, ..)) => sel.val_nll < *v,
                };
                if better {
                    best = Some((sel.val_nll, b, model, history));
                }
            }
            let (_, b, model, history) = best.expect("nonempty candidate set");
            Ok(Trained {
                model,
                history,
                alpha,
                train_bandwidth: Some(b),
                lambda: None,
                tuning,
            })
        }
        AlphaSpec::Tuned => {
            // QREG family: one run per lambda (alpha = -lambda), then the
            // CRPS-capped PCE rule on validation metrics of the base model
            let in_loop_b = bandwidth_default(&spec.bandwidth);
            let mut trials = Vec::new();
            let mut runs: Vec<(f64, MdnModel, TrainHistory)> = Vec::new();
            let mut lambdas = spec.lambda_set.clone();
            lambdas.sort_by(f64::total_cmp);
            for &lambda in &lambdas {
                let (model, history) =
                    train::train(&cfg, spec, -lambda, in_loop_b, data, req.seed)?;
                let sel = &history.epochs[history.selected_epoch];
                let bases = model.predict(&data.x_val)?;
                let val_crps =
                    metrics::crps(&DistSet::Base(&bases), &data.y_val, 99, 1.0)?;
                trials.push(TuningTrial {
                    lambda: Some(lambda),
                    bandwidth: (lambda != 0.0).then_some(in_loop_b),
                    val_nll: sel.val_nll,
                    val_pce: sel.val_pce,
                    val_crps: Some(val_crps),
                });
                runs.push((lambda, model, history));
            }
            let candidates: Vec<LambdaCandidate> = trials
                .iter()
                .map(|t| LambdaCandidate {
                    lambda: t.lambda.unwrap(),
                    pce: t.val_pce,
                    crps: t.val_crps.unwrap(),
                })
                .collect();
            let lambda = train::select_lambda(&candidates);
            let pos = runs
                .iter()
                .position(|(l, ..)| *l == lambda)
                .expect("selected lambda came from the sweep");
            let (_, model, history) = runs.swap_remove(pos);
            Ok(Trained {
                model,
                history,
                alpha: -lambda,
                train_bandwidth: (lambda != 0.0).then_some(in_loop_b),
                lambda: Some(lambda),
                tuning: trials,
            })
        }
    }
}

/// Execute one (dataset, method, seed) run end to end.
pub fn run_method(req: &RunRequest) -> Result<RunRecord, TrainError> {
    let wall0 = Instant::now();
    let mut splits = Splits::new(req.dataset.n(), req.seed)?;
    splits.fold_calibration_into_train = req.method.fold_calibration_effective();
    let standardizer = Standardizer::fit(&req.dataset, &splits.effective_train());
    let data = SplitData::prepare(&req.dataset, &splits, &standardizer);

    let trained = train_resolved(req, &data)?;
    let model = &trained.model;

    let metric_cfg = MetricConfig { target_sd: data.target_sd, ..req.metric_cfg };
    let test_bases = model.predict(&data.x_test)?;
    let base_metrics = metrics::evaluate(&DistSet::Base(&test_bases), &data.y_test, &metric_cfg)?;

    let (recalibrated_metrics, posthoc_map, posthoc_bandwidth) = if req.method.posthoc {
        let cal_pits = crate::calib::pit(model, &data.x_cal, &data.y_cal)?;
        let bandwidth = if req.method.posthoc_kind.needs_bandwidth() {
            let candidates = req.method.bandwidth.candidates();
            Some(train::select_bandwidth(
                model,
                &cal_pits,
                &candidates,
                &data.x_val,
                &data.y_val,
                req.method.posthoc_kind,
            )?)
        } else {
            None
        };
        let map = crate::calib::CalibrationMap::build(req.method.posthoc_kind, &cal_pits, bandwidth)?;
        let set = DistSet::Recalibrated { bases: &test_bases, map: &map };
        let report = metrics::evaluate(&set, &data.y_test, &metric_cfg)?;
        (Some(report), Some(map.to_record()), bandwidth)
    } else {
        (None, None, None)
    };

    let adam = req.method.adam();
    let kernel_evals: u64 = trained.history.epochs.iter().map(|e| e.kernel_evals).sum();
    let train_secs: f64 = trained.history.epochs.iter().map(|e| e.train_secs).sum();
    let eval_secs: f64 = trained.history.epochs.iter().map(|e| e.eval_secs).sum();
    let epochs_run = trained.history.epochs.len();
    let mut cfg = req.mdn;
    cfg.input_dim = req.dataset.x.cols();

    Ok(RunRecord {
        dataset: req.dataset.name.clone(),
        method: req.method.clone(),
        seed: req.seed,
        mdn: cfg,
        split: splits.manifest(),
        optimizer: OptimizerRecord {
            name: "adam".to_string(),
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        },
        selected: SelectedHyper {
            alpha: trained.alpha,
            train_bandwidth: trained.train_bandwidth,
            posthoc_bandwidth,
            lambda: trained.lambda,
        },
        tuning: trained.tuning,
        history: trained.history,
        base_metrics,
        recalibrated_metrics,
        posthoc_map,
        counters: Counters { kernel_pdf_evals: kernel_evals, epochs_run },
        timing: Timing { train_secs, eval_secs, wall_secs: wall0.elapsed().as_secs_f64() },
    })
}

/// Assemble the comparison matrix for one metric from a pile of records.
/// Missing (dataset, method) cells are reported, matching the runner's
/// rectangularity contract.
pub fn matrix_from_records(
    records: &[RunRecord],
    metric: &str,
) -> Result<ResultMatrix, crate::stats::StatsError> {
    let mut datasets: Vec<String> = records.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut methods: Vec<String> = records.iter().map(|r| r.method.name.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut cells = vec![vec![Vec::new(); methods.len()]; datasets.len()];
    for r in records {
        let di = datasets.iter().position(|d| d == &r.dataset).unwrap();
        let mi = methods.iter().position(|m| m == &r.method.name).unwrap();
        if let Some(v) = r.final_metric(metric) {
            cells[di][mi].push(v);
        }
    }
    let matrix = ResultMatrix { datasets, methods, cells };
    matrix.validate()?;
    Ok(matrix)
}

/// Tidy per-epoch rows for curve plotting: one row per
/// (epoch, seed, method, metric) plus one selected-epoch marker per seed.
pub fn curve_rows(records: &[RunRecord]) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for r in records {
        for e in &r.history.epochs {
            for (metric, value) in [
                ("train_nll", e.train_nll),
                ("val_nll", e.val_nll),
                ("val_pce", e.val_pce),
            ] {
                rows.push(CurveRow {
                    dataset: r.dataset.clone(),
                    method: r.method.name.clone(),
                    seed: r.seed,
                    epoch: e.epoch,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
        rows.push(CurveRow {
            dataset: r.dataset.clone(),
            method: r.method.name.clone(),
            seed: r.seed,
            epoch: r.history.selected_epoch,
            metric: "selected_epoch".to_string(),
            value: r.history.selected_epoch as f64,
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, SynthKind};

    fn quick_request(method: &str, seed: u64) -> RunRequest {
        let mut spec = MethodSpec::preset(method).unwrap();
        spec.max_epochs = 3;
        spec.batch_size = 64;
        spec.bandwidth = BandwidthSpec::Fixed(0.1);
        spec.lambda_set = vec![0.0, 0.2];
        RunRequest {
            dataset: synth(SynthKind::LinearGaussian, 200, 7),
            method: spec,
            mdn: MdnConfig::new(1).with_hidden(1, 8).with_mixture(1),
            seed,
            metric_cfg: MetricConfig::default(),
        }
    }

    #[test]
    fn base_record_has_no_posthoc_block() {
        let rec = run_method(&quick_request("BASE", 0)).unwrap();
        assert!(rec.recalibrated_metrics.is_none());
        assert!(rec.posthoc_map.is_none());
        assert_eq!(rec.selected.alpha, 0.0);
        assert!(rec.split.fold_calibration_into_train);
        assert_eq!(rec.counters.kernel_pdf_evals, 0);
    }

    #[test]
    fn qrtc_record_has_both_metric_blocks() {
        let rec = run_method(&quick_request("QRTC", 0)).unwrap();
        assert!(rec.recalibrated_metrics.is_some());
        assert!(rec.posthoc_map.is_some());
        assert_eq!(rec.selected.alpha, 1.0);
        assert!(rec.selected.posthoc_bandwidth.is_some());
        assert!(!rec.split.fold_calibration_into_train);
        assert!(rec.counters.kernel_pdf_evals > 0);
    }

    #[test]
    fn qregc_resolves_lambda_from_the_sweep() {
        let rec = run_method(&quick_request("QREGC", 1)).unwrap();
        let lambda = rec.selected.lambda.unwrap();
        assert!(rec.method.lambda_set.contains(&lambda) || lambda == 0.0);
        assert_eq!(rec.selected.alpha, -lambda);
        assert_eq!(rec.tuning.len(), 2);
    }

    #[test]
    fn rerun_with_same_seed_reproduces_the_metrics_block() {
        let a = run_method(&quick_request("QRTC", 3)).unwrap();
        let b = run_method(&quick_request("QRTC", 3)).unwrap();
        let ja = serde_json::to_string(&a.base_metrics).unwrap();
        let jb = serde_json::to_string(&b.base_metrics).unwrap();
        assert_eq!(ja, jb);
        let ra = serde_json::to_string(&a.recalibrated_metrics).unwrap();
        let rb = serde_json::to_string(&b.recalibrated_metrics).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn record_roundtrips_through_json() {
        let rec = run_method(&quick_request("QRC", 2)).unwrap();
        let text = serde_json::to_string_pretty(&rec).unwrap();
        let back: RunRecord = serde_json::from_str(&text).unwrap();
        let again = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn matrix_assembly_flags_missing_cells() {
        let r0 = run_method(&quick_request("BASE", 0)).unwrap();
        let mut r1 = run_method(&quick_request("QRC", 0)).unwrap();
        r1.dataset = "other".to_string();
        match matrix_from_records(&[r0, r1], "nll") {
            Err(crate::stats::StatsError::MissingCell { .. }) => {}
            other => panic!("expected MissingCell, got {other:?}"),
        }
    }

    #[test]
    fn curve_rows_shape() {
        let rec = run_method(&quick_request("BASE", 0)).unwrap();
        let rows = curve_rows(&[rec.clone()]);
        let epochs = rec.history.epochs.len();
        assert_eq!(rows.len(), epochs * 3 + 1);
        let marker = rows.last().unwrap();
        assert_eq!(marker.metric, "selected_epoch");
        assert_eq!(marker.epoch, rec.history.selected_epoch);
    }
}
