//! Run configuration file: a TOML document with strict unknown-key rejection.
//! Every field has a default, and a fully-defaulted file reproduces the
//! image-halves benchmark protocol (200 labeled / 1000 reference / 250-row
//! reference batches / 1000-epoch budget / 20 Monte-Carlo runs).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tap_core::error::{Result, TapError};
use tap_core::train::{MetricMode, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub theorem: TheoremSection,
    pub gen: GenSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// mnist_half, activity, or crop.
    pub name: String,
    /// IDX image/label paths (mnist_half). Defaults to data/<name>/….
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// CSV path (activity/crop). Defaults to data/<name>/<name>.csv.
    pub csv: Option<PathBuf>,
    /// Optional JSON column-schema file overriding the built-in schema.
    pub schema: Option<PathBuf>,
    /// Override per-dataset standardization (tabular: on, image halves: off).
    pub standardize: Option<bool>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "mnist_half".into(),
            images: None,
            labels: None,
            csv: None,
            schema: None,
            standardize: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: String,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// Attention temperature; absent → √d_h·(n′_z/m)^{−1/d_h} heuristic.
    pub norm_const: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "tap".into(),
            hidden_dim: 64,
            dropout_rate: 0.5,
            norm_const: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub data_batch: usize,
    pub ref_batch: usize,
    pub epochs_base: usize,
    pub mc_runs: usize,
    pub seed: u64,
    /// best5 or literal_lowest5.
    pub metric_mode: String,
    pub n_labeled: usize,
    pub n_reference: usize,
    pub eval_every: usize,
    pub jobs: usize,
    /// f32 (default; benchmark scale) or f64.
    pub precision: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            data_batch: d.data_batch,
            ref_batch: d.ref_batch,
            epochs_base: d.epochs_base,
            mc_runs: d.mc_runs,
            seed: d.seed,
            metric_mode: "best5".into(),
            n_labeled: d.n_labeled,
            n_reference: d.n_reference,
            eval_every: d.eval_every,
            jobs: d.jobs,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            sizes: tap_core::train::SWEEP_SIZES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremSection {
    /// sin_gauss, linear_gauss, or quad_gauss.
    pub problem: String,
    pub sigma: f64,
    /// Slope a of the linear problem (linear_gauss only).
    pub linear_a: f64,
    pub linear_b: f64,
    /// Bandwidth exponent: h = n^{−alpha}.
    pub alpha: f64,
    pub trials: usize,
    pub n_values: Vec<usize>,
    pub grid: Vec<f64>,
}

impl Default for TheoremSection {
    fn default() -> Self {
        let (_, n_values, alpha, trials, grid) = tap_core::nw::default_lab();
        TheoremSection {
            problem: "sin_gauss".into(),
            sigma: 0.1,
            linear_a: 0.02,
            linear_b: 0.0,
            alpha,
            trials,
            n_values,
            grid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub rows: usize,
    pub corpus_seed: u64,
    pub dir: PathBuf,
    pub class_amp_x: f64,
    pub class_amp_z: f64,
    pub style_amp_x: f64,
    pub style_amp_z: f64,
    pub noise_x: f64,
    pub noise_z: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        let d = tap_core::data::SyntheticConfig::default();
        GenSection {
            rows: d.n_rows,
            corpus_seed: d.seed,
            dir: PathBuf::from("data"),
            class_amp_x: d.class_amp_x,
            class_amp_z: d.class_amp_z,
            style_amp_x: d.style_amp_x,
            style_amp_z: d.style_amp_z,
            noise_x: d.noise_x,
            noise_z: d.noise_z,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            plots: true,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TapError::io(path.display().to_string(), e))?;
        toml::from_str(&raw).map_err(|e| TapError::Config(format!("{}: {e}", path.display())))
    }

    /// The resolved TrainConfig (after flag/env overrides have been merged into
    /// the sections).
    pub fn train_config(&self) -> Result<TrainConfig> {
        let metric_mode: MetricMode = self.train.metric_mode.parse()?;
        let cfg = TrainConfig {
            lr: self.train.lr,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_eps: self.train.adam_eps,
            data_batch: self.train.data_batch,
            ref_batch: self.train.ref_batch,
            epochs_base: self.train.epochs_base,
            mc_runs: self.train.mc_runs,
            seed: self.train.seed,
            metric_mode,
            n_labeled: self.train.n_labeled,
            n_reference: self.train.n_reference,
            eval_every: self.train.eval_every,
            jobs: self.train.jobs,
            hidden_dim: self.model.hidden_dim,
            dropout_rate: self.model.dropout_rate,
            norm_const: self.model.norm_const,
            standardize: self.dataset.standardize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gen_config(&self) -> tap_core::data::SyntheticConfig {
        tap_core::data::SyntheticConfig {
            n_rows: self.gen.rows,
            seed: self.gen.corpus_seed,
            class_amp_x: self.gen.class_amp_x,
            class_amp_z: self.gen.class_amp_z,
            style_amp_x: self.gen.style_amp_x,
            style_amp_z: self.gen.style_amp_z,
            noise_x: self.gen.noise_x,
            noise_z: self.gen.noise_z,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_paper_protocol() {
        let cfg: RunConfigFile = toml::from_str("").unwrap();
        assert_eq!(cfg.dataset.name, "mnist_half");
        assert_eq!(cfg.model.variant, "tap");
        let train = cfg.train_config().unwrap();
        assert_eq!(train.lr, 1e-4);
        assert_eq!(train.data_batch, 100);
        assert_eq!(train.ref_batch, 250);
        assert_eq!(train.epochs_base, 1000);
        assert_eq!(train.mc_runs, 20);
        assert_eq!(train.n_labeled, 200);
        assert_eq!(train.n_reference, 1000);
        assert_eq!(cfg.sweep.sizes, vec![100, 200, 250, 500, 1000]);
        assert_eq!(cfg.theorem.trials, 50);
        assert_eq!(cfg.theorem.n_values.first(), Some(&512));
        assert_eq!(cfg.theorem.n_values.last(), Some(&32768));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = toml::from_str::<RunConfigFile>("[train]\nlenrning_rate = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("lenrning_rate"),
            "error names the bad key: {err}"
        );
        assert!(
            toml::from_str::<RunConfigFile>("[nonsense]\nx = 1\n").is_err(),
            "unknown sections rejected"
        );
    }

    #[test]
    fn partial_overrides_merge_with_defaults() {
        let cfg: RunConfigFile =
            toml::from_str("[train]\nref_batch = 500\nseed = 9\n[dataset]\nname = \"crop\"\n")
                .unwrap();
        assert_eq!(cfg.train.ref_batch, 500);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.lr, 1e-4, "unspecified keys keep defaults");
        assert_eq!(cfg.dataset.name, "crop");
    }

    #[test]
    fn bad_metric_mode_is_a_config_error() {
        let cfg: RunConfigFile = toml::from_str("[train]\nmetric_mode = \"best9\"\n").unwrap();
        assert!(cfg.train_config().is_err());
    }
}
