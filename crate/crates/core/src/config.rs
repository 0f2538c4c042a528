//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SplitRatios;
use crate::diffusion::{DenoiserConfig, Phase1Config, ScheduleKind};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::eval::Scope;
use crate::missing::MechanismSpec;
use crate::recognizer::RecognizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Independent AR(1) series per feature, cut into windows.
    Synthetic {
        #[serde(default = "default_ar_coef")]
        ar_coef: f64,
        #[serde(default = "default_one")]
        noise_std: f64,
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default = "default_window")]
        window: usize,
        /// Number of training windows; the series is sized so the split
        /// yields this many.
        #[serde(default = "default_train_rows")]
        train_rows: usize,
        #[serde(default = "default_test_rows")]
        test_rows: usize,
    },
    /// `[time × features]` CSV; missing cells are original missing values.
    Csv {
        path: PathBuf,
        #[serde(default = "default_true")]
        has_header: bool,
        #[serde(default = "default_missing_token")]
        missing_token: String,
        /// Window length; `None` treats each CSV row as one sample.
        #[serde(default)]
        window: Option<usize>,
        /// Window stride; defaults to the window length.
        #[serde(default)]
        stride: Option<usize>,
    },
}

fn default_ar_coef() -> f64 {
    0.8
}
fn default_one() -> f64 {
    1.0
}
fn default_features() -> usize {
    5
}
fn default_window() -> usize {
    24
}
fn default_train_rows() -> usize {
    500
}
fn default_test_rows() -> usize {
    125
}
fn default_true() -> bool {
    true
}
fn default_missing_token() -> String {
    "NaN".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub shuffle: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.0,
            test: 0.2,
            shuffle: false,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            valid: self.valid,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.5,
            kind: ScheduleKind::Quadratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scopes: Vec<Scope>,
    /// Report metrics in data units (inverse standardization).
    pub data_units: bool,
    pub wasserstein: bool,
    /// Guidance scales for an out-of-sample sweep with the final model.
    pub guidance_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scopes: vec![Scope::OriginalInSample, Scope::OriginalOutOfSample, Scope::Artificial],
            data_units: true,
            wasserstein: true,
            guidance_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub mechanism: MechanismSpec,
    /// Apply the mechanism to column-standardized values, so thresholds
    /// such as the logistic offset are in standard-deviation units.
    #[serde(default = "default_true")]
    pub mechanism_on_standardized: bool,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub recognizer: RecognizerConfig,
    #[serde(default)]
    pub phase1: Phase1Config,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Write a checkpoint every this many EM iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.mechanism.validate()?;
        self.split.ratios().validate()?;
        self.em.validate()?;
        let p = self.phase1.artificial_fraction;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("artificial_fraction {p} outside [0, 1]")));
        }
        if self.phase1.batch_size == 0 {
            return Err(Error::Config("phase1.batch_size must be positive".into()));
        }
        if self.eval.guidance_sweep.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("guidance sweep scales must be finite and non-negative".into()));
        }
        match &self.data {
            DataSource::Synthetic {
                features,
                window,
                train_rows,
                test_rows,
                noise_std,
                ar_coef,
            } => {
                if *features == 0 || *window == 0 || *train_rows == 0 {
                    return Err(Error::Config("synthetic sizes must be positive".into()));
                }
                if *test_rows == 0 && self.split.test > 0.0 {
                    return Err(Error::Config("test_rows is 0 but a test split is requested".into()));
                }
                if noise_std.is_nan() || *noise_std <= 0.0 || !ar_coef.is_finite() {
                    return Err(Error::Config("synthetic noise_std must be positive".into()));
                }
            }
            DataSource::Csv { path, window, stride, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", path.display())));
                }
                if *window == Some(0) || *stride == Some(0) {
                    return Err(Error::Config("window and stride must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
