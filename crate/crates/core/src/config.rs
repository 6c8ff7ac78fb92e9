//! Pipeline configuration: flat `key = value` text with `#` comments.
//!
//! Every key has a documented default; [`PipelineConfig::dump`] writes the
//! effective configuration in a form that parses back to the identical
//! value, so a dumped config re-runs to identical results. CLI flags apply
//! on top of the file through [`PipelineConfig::apply`].

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::labels::LabelChain;
use crate::sparse::ZOrientation;
use crate::synth::SpineModel;
use crate::volume::Geometry;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {0:?} set twice")]
    Duplicate(String),
    #[error("config key {key}: {reason}")]
    BadValue { key: String, reason: String },
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Everything a pipeline run is parameterized by.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Chain spec: a range `T1:T12` or comma list of canonical labels.
    pub labels: String,
    /// Whether chain z coordinates descend (head at high z) or ascend.
    pub orientation: ZOrientation,

    /// Output directory; relative artifact paths resolve against it.
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub model: PathBuf,
    pub kernels: PathBuf,
    pub dict_x: PathBuf,
    pub dict_y: PathBuf,
    pub dict_z: PathBuf,

    /// Grid dims (x y z voxels).
    pub dims: [usize; 3],
    /// Isotropic voxel spacing (mm).
    pub spacing_mm: f64,
    /// First landmark nominal position (mm).
    pub start_mm: [f64; 3],
    /// Uniform inter-vertebra gap (mm).
    pub step_mm: f64,
    /// Cubic lateral / sagittal offset coefficients.
    pub curve_x: [f64; 4],
    pub curve_y: [f64; 4],
    /// Per-landmark x/y jitter sigma (mm).
    pub jitter_mm: f64,
    /// Inclusive z window; landmarks outside are absent.
    pub fov_z_mm: [f64; 2],
    /// Additive render noise sigma.
    pub noise_sigma: f64,
    /// Leading manifest entries used for training and kernel/dictionary
    /// learning; the rest are the held-out evaluation set.
    pub train_count: usize,
    pub eval_count: usize,

    /// Encoder widths, shallow to deep.
    pub widths: Vec<usize>,
    /// Heatmap target and render blob sigma (mm).
    pub sigma_mm: f64,
    pub learning_rate: f64,
    pub epochs: usize,

    /// Presence threshold on raw network output channels.
    pub threshold: f64,
    /// Presence threshold after message passing (channels are normalized to
    /// unit sum, so maxima live on a much smaller scale).
    pub mp_threshold: f64,

    /// Message-passing mixing weight, in (0, 1).
    pub alpha: f64,
    /// Message-passing sweeps, >= 1.
    pub iterations: usize,
    /// Kernel half-width in voxels; `auto` sizes from training displacements.
    pub kernel_half_width: Option<usize>,
    /// Gaussian smoothing of learned kernels, in voxels; 0 disables.
    pub kernel_smoothing_sigma: f64,

    /// LASSO penalty; `auto` scales from the data.
    pub lambda: Option<f64>,
    /// Unpenalized translation column in the shape fit.
    pub constant_column: bool,

    /// Identification radius (mm).
    pub id_radius_mm: f64,
    /// Base seed for every derived random stream.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            labels: "T1:T12".to_string(),
            orientation: ZOrientation::Descending,
            out_dir: PathBuf::from("out"),
            manifest: PathBuf::from("manifest.csv"),
            model: PathBuf::from("model.bin"),
            kernels: PathBuf::from("kernels.bin"),
            dict_x: PathBuf::from("dict_x.csv"),
            dict_y: PathBuf::from("dict_y.csv"),
            dict_z: PathBuf::from("dict_z.csv"),
            dims: [16, 16, 48],
            spacing_mm: 4.0,
            start_mm: [30.0, 30.0, 170.0],
            step_mm: 12.0,
            curve_x: [0.0, 12.0, -20.0, 8.0],
            curve_y: [0.0, 16.0, -28.0, 12.0],
            jitter_mm: 0.8,
            fov_z_mm: [0.0, 188.0],
            noise_sigma: 0.02,
            train_count: 20,
            eval_count: 20,
            widths: vec![8, 16],
            sigma_mm: 6.0,
            learning_rate: 0.05,
            epochs: 100,
            threshold: 0.02,
            mp_threshold: 1e-4,
            alpha: 0.5,
            iterations: 3,
            kernel_half_width: None,
            kernel_smoothing_sigma: 1.0,
            lambda: None,
            constant_column: true,
            id_radius_mm: 20.0,
            seed: 42,
        }
    }
}

fn parse_numbers<T: std::str::FromStr, const N: usize>(
    key: &str,
    value: &str,
) -> Result<[T; N], ConfigError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != N {
        return Err(bad(key, format!("expected {N} values, got {}", parts.len())));
    }
    let mut out = Vec::with_capacity(N);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| bad(key, format!("bad number {p:?}")))?,
        );
    }
    Ok(out.try_into().map_err(|_| bad(key, "wrong arity")).unwrap())
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse::<T>()
        .map_err(|_| bad(key, format!("bad value {value:?}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value == "auto" {
        return Ok(None);
    }
    parse_one(key, value).map(Some)
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "auto".to_string(),
    }
}

fn fmt_list<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl PipelineConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "labels" => self.labels = value.to_string(),
            "orientation" => {
                self.orientation = match value {
                    "descending" => ZOrientation::Descending,
                    "ascending" => ZOrientation::Ascending,
                    other => {
                        return Err(bad(key, format!(
                            "expected `descending` or `ascending`, got {other:?}"
                        )))
                    }
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "manifest" => self.manifest = PathBuf::from(value),
            "model" => self.model = PathBuf::from(value),
            "kernels" => self.kernels = PathBuf::from(value),
            "dict_x" => self.dict_x = PathBuf::from(value),
            "dict_y" => self.dict_y = PathBuf::from(value),
            "dict_z" => self.dict_z = PathBuf::from(value),
            "dims" => self.dims = parse_numbers(key, value)?,
            "spacing_mm" => self.spacing_mm = parse_one(key, value)?,
            "start_mm" => self.start_mm = parse_numbers(key, value)?,
            "step_mm" => self.step_mm = parse_one(key, value)?,
            "curve_x" => self.curve_x = parse_numbers(key, value)?,
            "curve_y" => self.curve_y = parse_numbers(key, value)?,
            "jitter_mm" => self.jitter_mm = parse_one(key, value)?,
            "fov_z_mm" => self.fov_z_mm = parse_numbers(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_one(key, value)?,
            "train_count" => self.train_count = parse_one(key, value)?,
            "eval_count" => self.eval_count = parse_one(key, value)?,
            "widths" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.is_empty() {
                    return Err(bad(key, "at least one width required"));
                }
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    widths.push(
                        p.parse::<usize>()
                            .map_err(|_| bad(key, format!("bad width {p:?}")))?,
                    );
                }
                self.widths = widths;
            }
            "sigma_mm" => self.sigma_mm = parse_one(key, value)?,
            "learning_rate" => self.learning_rate = parse_one(key, value)?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "threshold" => self.threshold = parse_one(key, value)?,
            "mp_threshold" => self.mp_threshold = parse_one(key, value)?,
            "alpha" => self.alpha = parse_one(key, value)?,
            "iterations" => self.iterations = parse_one(key, value)?,
            "kernel_half_width" => self.kernel_half_width = parse_opt(key, value)?,
            "kernel_smoothing_sigma" => self.kernel_smoothing_sigma = parse_one(key, value)?,
            "lambda" => self.lambda = parse_opt(key, value)?,
            "constant_column" => self.constant_column = parse_one(key, value)?,
            "id_radius_mm" => self.id_radius_mm = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            seen.push(key.to_string());
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file.
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        PipelineConfig::parse(&text)
    }

    /// Writes the effective configuration; parses back to an equal value.
    pub fn dump(&self) -> String {
        let p = |path: &Path| path.display().to_string();
        format!(
            "# vertebra chain\n\
             labels = {}\n\
             orientation = {}\n\
             \n\
             # artifact paths (relative paths resolve against out_dir)\n\
             out_dir = {}\n\
             manifest = {}\n\
             model = {}\n\
             kernels = {}\n\
             dict_x = {}\n\
             dict_y = {}\n\
             dict_z = {}\n\
             \n\
             # synthetic data\n\
             dims = {}\n\
             spacing_mm = {}\n\
             start_mm = {}\n\
             step_mm = {}\n\
             curve_x = {}\n\
             curve_y = {}\n\
             jitter_mm = {}\n\
             fov_z_mm = {}\n\
             noise_sigma = {}\n\
             train_count = {}\n\
             eval_count = {}\n\
             \n\
             # network and training\n\
             widths = {}\n\
             sigma_mm = {}\n\
             learning_rate = {}\n\
             epochs = {}\n\
             \n\
             # presence detection\n\
             threshold = {}\n\
             mp_threshold = {}\n\
             \n\
             # message passing\n\
             alpha = {}\n\
             iterations = {}\n\
             kernel_half_width = {}\n\
             kernel_smoothing_sigma = {}\n\
             \n\
             # sparse refinement\n\
             lambda = {}\n\
             constant_column = {}\n\
             \n\
             # evaluation\n\
             id_radius_mm = {}\n\
             seed = {}\n",
            self.labels,
            match self.orientation {
                ZOrientation::Descending => "descending",
                ZOrientation::Ascending => "ascending",
            },
            p(&self.out_dir),
            p(&self.manifest),
            p(&self.model),
            p(&self.kernels),
            p(&self.dict_x),
            p(&self.dict_y),
            p(&self.dict_z),
            fmt_list(&self.dims),
            self.spacing_mm,
            fmt_list(&self.start_mm),
            self.step_mm,
            fmt_list(&self.curve_x),
            fmt_list(&self.curve_y),
            self.jitter_mm,
            fmt_list(&self.fov_z_mm),
            self.noise_sigma,
            self.train_count,
            self.eval_count,
            fmt_list(&self.widths),
            self.sigma_mm,
            self.learning_rate,
            self.epochs,
            self.threshold,
            self.mp_threshold,
            self.alpha,
            self.iterations,
            fmt_opt(&self.kernel_half_width),
            self.kernel_smoothing_sigma,
            fmt_opt(&self.lambda),
            self.constant_column,
            self.id_radius_mm,
            self.seed,
        )
    }

    /// Range-checks every hyperparameter.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chain()?;
        self.geometry()?;
        let positive = [
            ("spacing_mm", self.spacing_mm),
            ("step_mm", self.step_mm),
            ("sigma_mm", self.sigma_mm),
            ("learning_rate", self.learning_rate),
            ("threshold", self.threshold),
            ("mp_threshold", self.mp_threshold),
            ("id_radius_mm", self.id_radius_mm),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(key, format!("must be finite and > 0, got {v}")));
            }
        }
        let nonnegative = [
            ("jitter_mm", self.jitter_mm),
            ("noise_sigma", self.noise_sigma),
            ("kernel_smoothing_sigma", self.kernel_smoothing_sigma),
        ];
        for (key, v) in nonnegative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.iterations < 1 {
            return Err(bad("iterations", "must be >= 1"));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(bad("lambda", format!("must be finite and >= 0, got {l}")));
            }
        }
        if self.widths.is_empty() || self.widths.iter().any(|w| *w == 0) {
            return Err(bad("widths", "need at least one nonzero width"));
        }
        if self.train_count == 0 || self.eval_count == 0 {
            return Err(bad("train_count", "train_count and eval_count must be >= 1"));
        }
        if !(self.fov_z_mm[0].is_finite()
            && self.fov_z_mm[1].is_finite()
            && self.fov_z_mm[0] < self.fov_z_mm[1])
        {
            return Err(bad("fov_z_mm", format!("bad window {:?}", self.fov_z_mm)));
        }
        if self.start_mm.iter().any(|v| !v.is_finite())
            || self.curve_x.iter().any(|v| !v.is_finite())
            || self.curve_y.iter().any(|v| !v.is_finite())
        {
            return Err(bad("start_mm", "start and curve coefficients must be finite"));
        }
        Ok(())
    }

    /// Parsed label chain.
    pub fn chain(&self) -> Result<LabelChain, ConfigError> {
        LabelChain::parse(&self.labels).map_err(|e| bad("labels", e.to_string()))
    }

    /// Grid geometry.
    pub fn geometry(&self) -> Result<Geometry, ConfigError> {
        Geometry::isotropic(self.dims, self.spacing_mm).map_err(|e| bad("dims", e.to_string()))
    }

    /// Spine generator matching this configuration.
    pub fn spine_model(&self) -> Result<SpineModel, ConfigError> {
        let chain = self.chain()?;
        let model = SpineModel {
            labels: chain.names().to_vec(),
            start_mm: self.start_mm,
            spacing_mm: vec![self.step_mm; chain.len().saturating_sub(1)],
            curve_x: self.curve_x,
            curve_y: self.curve_y,
            jitter_mm: self.jitter_mm,
            fov_z_mm: self.fov_z_mm,
            seed: self.seed,
        };
        model.validate().map_err(|e| bad("labels", e.to_string()))?;
        Ok(model)
    }

    /// Resolves an artifact path against `out_dir` unless absolute.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }
}
