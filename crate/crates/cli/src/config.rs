//! Run configuration.
//!
//! The file is TOML restricted to `key = value` lines under `[section]`
//! headers. Every section and key is optional; missing keys take the
//! defaults below and unknown keys are rejected.
//!
//! ```toml
//! [paths]
//! data_dir = "data"        # synth output, manifests
//! output_dir = "out"       # index, scores, reports, tables
//!
//! [dataset]                # synthetic data, see `DatasetSpec`
//! num_ids = 50
//!
//! [split]
//! query_ratio = 0.25
//! seed = 5
//!
//! [model]                  # see `ModelConfig`
//! gamma = 0.0
//!
//! [ablation]               # zero an input or switch off a component
//! disable_centroid = false
//!
//! [fusion]
//! alpha = 0.1
//! registration = "centroid"          # or "per_tracklet"
//! shape_scoring = "min_max"          # or "cosine"
//! appearance_scoring = "min_max"     # or "negated_distance"
//!
//! [eval]
//! unmatchable = "fail"               # or "exclude"
//!
//! [train]
//! num_ids = 8
//! steps = 200
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sharc::gallery::RegistrationMode;
use sharc::losses::{Objective, ToyConfig};
use sharc::matcher::{check_alpha, AppearanceScoring, ShapeScoring, DEFAULT_ALPHA};
use sharc::metrics::Unmatchable;
use sharc::model::{Ablation, ModelConfig};
use sharc::synth::DatasetSpec;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<data_dir>/gallery.csv`.
    pub gallery_manifest: Option<PathBuf>,
    /// Defaults to `<data_dir>/query.csv`.
    pub query_manifest: Option<PathBuf>,
    /// Defaults to `<output_dir>/gallery.idx`.
    pub index: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            output_dir: "out".into(),
            gallery_manifest: None,
            query_manifest: None,
            index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    /// Share of each subject's tracklets held out as queries.
    pub query_ratio: f64,
    pub seed: u64,
}

impl Default for Split {
    fn default() -> Self {
        Self { query_ratio: 0.25, seed: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fusion {
    /// Shape weight; appearance gets `1 - alpha`.
    pub alpha: f64,
    pub registration: RegistrationMode,
    pub shape_scoring: ShapeScoring,
    pub appearance_scoring: AppearanceScoring,
}

impl Default for Fusion {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            registration: RegistrationMode::default(),
            shape_scoring: ShapeScoring::default(),
            appearance_scoring: AppearanceScoring::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eval {
    pub unmatchable: Unmatchable,
}

/// Toy trainer settings. The trainer fits hand-crafted tracklet features of a
/// `num_ids`-subject dataset drawn with the `[dataset]` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    pub num_ids: usize,
    pub objective: Objective,
    pub steps: usize,
    pub lr: f64,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub check_gradient: bool,
}

impl Default for Train {
    fn default() -> Self {
        let toy = ToyConfig::default();
        Self {
            num_ids: 8,
            objective: toy.objective,
            steps: toy.steps,
            lr: toy.lr,
            widths: toy.widths,
            seed: toy.seed,
            check_gradient: toy.check_gradient,
        }
    }
}

impl Train {
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            objective: self.objective,
            steps: self.steps,
            lr: self.lr,
            widths: self.widths.clone(),
            seed: self.seed,
            check_gradient: self.check_gradient,
        }
    }

    pub fn dataset(&self, base: &DatasetSpec) -> DatasetSpec {
        DatasetSpec { num_ids: self.num_ids, ..base.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub split: Split,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub fusion: Fusion,
    pub eval: Eval,
    pub train: Train,
}

/// Splits `section.key: reason` messages from the core validators.
fn field_error(message: String) -> CliError {
    match message.split_once(": ") {
        Some((field, reason)) => CliError::InvalidConfig { field: field.to_owned(), reason: reason.to_owned() },
        None => CliError::InvalidConfig { field: "config".into(), reason: message },
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::InvalidConfig { field: field.to_owned(), reason: reason.into() }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let field = match e.span() {
                Some(span) => key_at(text, span.start),
                None => "config".into(),
            };
            invalid(&field, e.message())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let unwrap_core = |r: sharc::Result<()>| {
            r.map_err(|e| match e {
                sharc::Error::InvalidInput(m) => field_error(m),
                other => invalid("config", other.to_string()),
            })
        };
        unwrap_core(self.dataset.validate())?;
        unwrap_core(self.model.validate())?;
        check_alpha(self.fusion.alpha).map_err(|_| invalid("fusion.alpha", "must lie in [0, 1]"))?;
        if !(self.split.query_ratio > 0.0 && self.split.query_ratio < 1.0) {
            return Err(invalid("split.query_ratio", "must lie in (0, 1)"));
        }
        if self.model.input_height != self.dataset.height {
            return Err(invalid("model.input_height", "must equal dataset.height"));
        }
        if self.model.input_width != self.dataset.width {
            return Err(invalid("model.input_width", "must equal dataset.width"));
        }
        if self.model.pyramid_depth != 3 {
            return Err(invalid("model.pyramid_depth", "the pipeline groups frames in eights, so the depth is 3"));
        }
        if self.train.num_ids < 2 {
            return Err(invalid("train.num_ids", "must be at least 2"));
        }
        if self.train.steps == 0 {
            return Err(invalid("train.steps", "must be at least 1"));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(invalid("train.lr", "must be a nonnegative number"));
        }
        if self.train.widths.is_empty() || self.train.widths.contains(&0) {
            return Err(invalid("train.widths", "must list positive widths"));
        }
        Ok(())
    }

    pub fn registration(&self) -> RegistrationMode {
        if self.ablation.disable_centroid {
            RegistrationMode::PerTracklet
        } else {
            self.fusion.registration
        }
    }
}

/// Dotted `section.key` name of the assignment enclosing byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_owned();
        }
        if offset < pos + line.len() {
            return match trimmed.split_once('=') {
                Some((key, _)) if !section.is_empty() => format!("{section}.{}", key.trim()),
                Some((key, _)) => key.trim().to_owned(),
                None if !section.is_empty() => section,
                None => "config".into(),
            };
        }
        pos += line.len();
    }
    "config".into()
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
    /// First 16 hex digits of the SHA-256 of the file bytes.
    pub hash: String,
    pub output_override: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn load(path: &Path, output_override: Option<PathBuf>) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::from_io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| invalid("config", "file is not UTF-8"))?;
        let config = RunConfig::parse(&text)?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok(Self { config, base, hash: config_hash(&bytes), output_override })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.data_dir)
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output_override {
            Some(dir) => dir.clone(),
            None => self.resolve(&self.config.paths.output_dir),
        }
    }

    pub fn gallery_manifest(&self) -> PathBuf {
        match &self.config.paths.gallery_manifest {
            Some(p) => self.resolve(p),
            None => self.data_dir().join("gallery.csv"),
        }
    }

    pub fn query_manifest(&self) -> PathBuf {
        match &self.config.paths.query_manifest {
            Some(p) => self.resolve(p),
            None => self.data_dir().join("query.csv"),
        }
    }

    pub fn index_path(&self) -> PathBuf {
        match &self.config.paths.index {
            Some(p) => self.resolve(p),
            None => self.output_dir().join("gallery.idx"),
        }
    }

    /// Comment text that heads every text output.
    pub fn header(&self) -> String {
        format!("sharc {} config={}", env!("CARGO_PKG_VERSION"), self.hash)
    }
}

pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
