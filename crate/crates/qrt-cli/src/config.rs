//! Experiment configuration file (TOML): datasets, method rows, seeds,
//! architecture, and output location.

use crate::CliError;
use qrt::calib::MapKind;
use qrt::data::{self, Dataset, LoadOptions, SynthKind};
use qrt::mdn::MdnConfig;
use qrt::train::{AblationMode, AlphaSpec, BandwidthSpec, MapSource, MethodSpec, QregEstimator};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetSection>,
    #[serde(rename = "method")]
    pub methods: Vec<MethodSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_k")]
    pub mixture_k: usize,
}

fn default_layers() -> usize {
    3
}
fn default_width() -> usize {
    128
}
fn default_k() -> usize {
    3
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden_layers: 3, hidden_width: 128, mixture_k: 3 }
    }
}

impl ModelSection {
    pub fn mdn_config(&self) -> MdnConfig {
        // input_dim is filled per dataset by the runner
        MdnConfig::new(1)
            .with_hidden(self.hidden_layers, self.hidden_width)
            .with_mixture(self.mixture_k)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    /// CSV table path (last column is the target)...
    pub path: Option<PathBuf>,
    /// ...or a synthetic family.
    pub synth: Option<String>,
    pub n: Option<usize>,
    /// Generation seed for synthetic data (fixed across runs so every seed
    /// sees the same dataset, as with a file on disk).
    pub gen_seed: Option<u64>,
    pub header: Option<bool>,
    pub max_rows: Option<usize>,
}

impl DatasetSection {
    pub fn load(&self, config_dir: &Path) -> Result<Dataset, CliError> {
        match (&self.path, &self.synth) {
            (Some(p), None) => {
                let full = if p.is_absolute() { p.clone() } else { config_dir.join(p) };
                let opts = LoadOptions { has_header: self.header, max_rows: self.max_rows };
                let mut d = data::load_table(&full, &opts)
                    .map_err(|e| CliError::Data(format!("dataset {:?}: {e}", self.name)))?;
                d.name = self.name.clone();
                Ok(d)
            }
            (None, Some(kind)) => {
                let kind: SynthKind = kind
                    .parse()
                    .map_err(|e| CliError::Config(format!("dataset {:?}: {e}", self.name)))?;
                let n = self.n.ok_or_else(|| {
                    CliError::Config(format!("dataset {:?}: synth needs n", self.name))
                })?;
                let mut d = data::synth(kind, n, self.gen_seed.unwrap_or(0));
                d.name = self.name.clone();
                Ok(d)
            }
            _ => Err(CliError::Config(format!(
                "dataset {:?}: give exactly one of path or synth",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    /// One of BASE, QRC, QREG, QREGC, QRT, QRTC, QRIC, QRGC, QRLC.
    pub preset: String,
    /// Row label; defaults to the preset name.
    pub name: Option<String>,
    pub alpha: Option<f64>,
    pub bandwidth: Option<f64>,
    pub bandwidth_set: Option<Vec<f64>>,
    pub lambda_set: Option<Vec<f64>>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub qreg_estimator: Option<String>,
    /// Map-source sample size M (Algorithm-2 style training).
    pub sampled_map: Option<usize>,
    pub posthoc_kind: Option<String>,
    pub fold_calibration_into_train: Option<bool>,
}

impl MethodSection {
    pub fn resolve(&self) -> Result<MethodSpec, CliError> {
        let mut spec = MethodSpec::preset(&self.preset).ok_or_else(|| {
            CliError::Config(format!(
                "unknown method preset {:?} (expected BASE, QRC, QREG, QREGC, QRT, QRTC, QRIC, QRGC, QRLC)",
                self.preset
            ))
        })?;
        if let Some(name) = &self.name {
            spec.name = name.clone();
        }
        if let Some(a) = self.alpha {
            spec.alpha = AlphaSpec::Fixed(a);
        }
        match (&self.bandwidth, &self.bandwidth_set) {
            (Some(b), None) => spec.bandwidth = BandwidthSpec::Fixed(*b),
            (None, Some(set)) => spec.bandwidth = BandwidthSpec::Tune(set.clone()),
            (Some(_), Some(_)) => {
                return Err(CliError::Config(format!(
                    "method {:?}: bandwidth and bandwidth_set are mutually exclusive",
                    spec.name
                )))
            }
            (None, None) => {}
        }
        if let Some(set) = &self.lambda_set {
            if !set.contains(&0.0) {
                return Err(CliError::Config(format!(
                    "method {:?}: lambda_set must contain 0 (the unregularized reference)",
                    spec.name
                )));
            }
            spec.lambda_set = set.clone();
        }
        if let Some(b) = self.batch_size {
            spec.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            spec.learning_rate = lr;
        }
        if let Some(e) = self.max_epochs {
            spec.max_epochs = e;
        }
        if let Some(p) = self.patience {
            spec.patience = p;
        }
        if let Some(est) = &self.qreg_estimator {
            spec.qreg_estimator = match est.as_str() {
                "map-entropy" => QregEstimator::MapEntropy,
                "vasicek" => QregEstimator::Vasicek,
                other => {
                    return Err(CliError::Config(format!(
                        "method {:?}: unknown qreg_estimator {other:?}",
                        spec.name
                    )))
                }
            };
        }
        if let Some(m) = self.sampled_map {
            if spec.ablation != AblationMode::None {
                return Err(CliError::Config(format!(
                    "method {:?}: sampled_map cannot combine with an ablation",
                    spec.name
                )));
            }
            spec.map_source = MapSource::Sampled(m);
        }
        if let Some(kind) = &self.posthoc_kind {
            spec.posthoc_kind = match kind.to_uppercase().as_str() {
                "EMP" => MapKind::Emp,
                "DCP" => MapKind::Dcp,
                "KDE" => MapKind::Kde,
                "TRUNC" => MapKind::Trunc,
                "REFL" => MapKind::Refl,
                other => {
                    return Err(CliError::Config(format!(
                        "method {:?}: unknown posthoc_kind {other:?}",
                        spec.name
                    )))
                }
            };
        }
        if self.fold_calibration_into_train.is_some() {
            spec.fold_calibration_into_train = self.fold_calibration_into_train;
        }
        Ok(spec)
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.methods.is_empty() {
        return Err(CliError::Config("config declares no methods".into()));
    }
    if cfg.datasets.is_empty() {
        return Err(CliError::Config("config declares no datasets".into()));
    }
    if cfg.experiment.seeds.is_empty() {
        return Err(CliError::Config("config needs at least one seed".into()));
    }
    let mut names: Vec<&str> = cfg
        .methods
        .iter()
        .map(|m| m.name.as_deref().unwrap_or(m.preset.as_str()))
        .collect();
    names.sort_unstable();
    let before = names.len();
    names.dedup();
    if names.len() != before {
        return Err(CliError::Config("method names must be unique".into()));
    }
    Ok(cfg)
}
