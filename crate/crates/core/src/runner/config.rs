//! Experiment configuration: defaults, the sectioned `key = value` file
//! format, and single-key overrides (the CLI funnels its flags through the
//! same path, so a flag and a file line parse identically).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::io::DataFormat;
use crate::data::Setting;
use crate::error::{Error, Result};
use crate::protocol::Method;

/// Where training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Gaussian-blob vectors generated from the experiment seed.
    Synthetic,
    /// A dataset file named by `path`.
    File,
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "file" => Ok(DataSource::File),
            other => Err(Error::Config(format!(
                "unknown data source `{other}` (expected synthetic or file)"
            ))),
        }
    }
}

/// Network family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Fully connected trunk; flattens image input automatically.
    Mlp,
    /// Convolution + pooling trunk; needs `[channels, height, width]` input.
    Conv,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "conv" => Ok(ModelKind::Conv),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected mlp or conv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    /// Class count; inferred from file data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Synthetic corpus size.
    pub samples: usize,
    /// Synthetic feature dimension.
    pub features: usize,
    /// Synthetic within-class standard deviation.
    pub noise: f64,
    /// Share of the corpus held out for test shards before partitioning.
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths of the fully connected trunk.
    pub hidden: Vec<usize>,
    /// Output channels of each convolution block.
    pub channels: Vec<usize>,
    /// Square convolution kernel size.
    pub kernel: usize,
    /// Width of the fully connected layer after the convolution blocks.
    pub conv_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub setting: Setting,
    /// Dirichlet concentration for the noniid setting.
    pub alpha: f64,
    /// Number of clients (K).
    pub clients: usize,
    /// Clients sampled per round (m).
    pub sampled: usize,
    /// Federated rounds (T).
    pub rounds: usize,
    /// Local epochs per round (E).
    pub local_epochs: usize,
    /// Evaluate every this many rounds (the final round always evaluates).
    pub eval_every: usize,
    /// The single experiment seed; every random stream derives from it.
    pub seed: u64,
    /// Wire cost of one parameter.
    pub bytes_per_param: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Rounds per released layer in the sharing schedule (f).
    pub share_frequency: usize,
    /// Whether the schedule starts with a fully frozen phase.
    pub frozen_phase: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::DoubleHead,
            setting: Setting::Iid,
            alpha: 0.5,
            clients: 10,
            sampled: 10,
            rounds: 400,
            local_epochs: 2,
            eval_every: 5,
            seed: 42,
            bytes_per_param: 4,
            learning_rate: 0.05,
            batch_size: 32,
            share_frequency: 10,
            frozen_phase: true,
            data: DataConfig {
                source: DataSource::Synthetic,
                path: None,
                format: DataFormat::Csv,
                labels_path: None,
                classes: Some(10),
                samples: 12_000,
                features: 20,
                noise: 1.5,
                holdout_fraction: 1.0 / 6.0,
            },
            model: ModelConfig {
                kind: ModelKind::Mlp,
                hidden: vec![64, 32],
                channels: vec![6, 12],
                kernel: 5,
                conv_hidden: 32,
            },
        }
    }
}

/// Known keys, grouped by the section they belong to.
const SECTIONS: &[(&str, &[&str])] = &[
    (
        "experiment",
        &[
            "method",
            "setting",
            "alpha",
            "clients",
            "sampled",
            "rounds",
            "local-epochs",
            "eval-every",
            "seed",
            "bytes-per-param",
        ],
    ),
    (
        "data",
        &[
            "source",
            "path",
            "format",
            "labels-path",
            "classes",
            "samples",
            "features",
            "noise",
            "holdout-fraction",
        ],
    ),
    ("model", &["kind", "hidden", "channels", "kernel", "conv-hidden"]),
    ("training", &["learning-rate", "batch-size"]),
    ("sharing", &["frequency", "frozen-phase"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(section, _)| *section)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` needs {what}, got `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num(key, part, "a comma-separated list of positive integers"))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("`{key}` needs true or false, got `{other}`"))),
    }
}

impl ExperimentConfig {
    /// Defaults overridden by a config file, in file order.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_file(path)?;
        Ok(config)
    }

    /// Applies every `key = value` line of a sectioned config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config(format!(
                        "{}:{line_no}: unknown section [{name}]",
                        path.display()
                    )));
                }
                section = Some(
                    SECTIONS.iter().find(|(s, _)| *s == name).map(|(s, _)| *s).unwrap(),
                );
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{line_no}: expected `key = value`, got `{line}`",
                    path.display()
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let Some(current) = section else {
                return Err(Error::Config(format!(
                    "{}:{line_no}: key `{key}` appears before any [section] header",
                    path.display()
                )));
            };
            match section_of(key) {
                Some(expected) if expected == current => {}
                Some(expected) => {
                    return Err(Error::Config(format!(
                        "{}:{line_no}: key `{key}` belongs in [{expected}], not [{current}]",
                        path.display()
                    )));
                }
                None => {
                    return Err(Error::Config(format!(
                        "{}:{line_no}: unknown key `{key}`",
                        path.display()
                    )));
                }
            }
            self.set_key(key, value)
                .map_err(|e| e.with_context(&format!("{}:{line_no}", path.display())))?;
        }
        Ok(())
    }

    /// Sets one knob from its string form. Key names are the config-file
    /// keys; the CLI reuses them as flag names.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = Method::parse(value)?,
            "setting" => self.setting = Setting::parse(value)?,
            "alpha" => self.alpha = parse_num(key, value, "a number")?,
            "clients" => self.clients = parse_num(key, value, "a positive integer")?,
            "sampled" => self.sampled = parse_num(key, value, "a positive integer")?,
            "rounds" => self.rounds = parse_num(key, value, "a positive integer")?,
            "local-epochs" => self.local_epochs = parse_num(key, value, "a positive integer")?,
            "eval-every" => self.eval_every = parse_num(key, value, "a positive integer")?,
            "seed" => self.seed = parse_num(key, value, "an unsigned integer")?,
            "bytes-per-param" => {
                self.bytes_per_param = parse_num(key, value, "a positive integer")?
            }
            "source" => self.data.source = DataSource::parse(value)?,
            "path" => self.data.path = Some(PathBuf::from(value)),
            "format" => self.data.format = DataFormat::parse(value)?,
            "labels-path" => self.data.labels_path = Some(PathBuf::from(value)),
            "classes" => self.data.classes = Some(parse_num(key, value, "a positive integer")?),
            "samples" => self.data.samples = parse_num(key, value, "a positive integer")?,
            "features" => self.data.features = parse_num(key, value, "a positive integer")?,
            "noise" => self.data.noise = parse_num(key, value, "a number")?,
            "holdout-fraction" => {
                self.data.holdout_fraction = parse_num(key, value, "a fraction in (0,1)")?
            }
            "kind" => self.model.kind = ModelKind::parse(value)?,
            "hidden" => self.model.hidden = parse_list(key, value)?,
            "channels" => self.model.channels = parse_list(key, value)?,
            "kernel" => self.model.kernel = parse_num(key, value, "a positive integer")?,
            "conv-hidden" => self.model.conv_hidden = parse_num(key, value, "a positive integer")?,
            "learning-rate" => self.learning_rate = parse_num(key, value, "a number")?,
            "batch-size" => self.batch_size = parse_num(key, value, "a positive integer")?,
            "frequency" => self.share_frequency = parse_num(key, value, "a positive integer")?,
            "frozen-phase" => self.frozen_phase = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Checks every cross-field constraint that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if self.sampled == 0 || self.sampled > self.clients {
            return Err(Error::Config(format!(
                "sampled must be between 1 and clients ({}), got {}",
                self.clients, self.sampled
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local-epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval-every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch-size must be at least 1".into()));
        }
        if self.share_frequency == 0 {
            return Err(Error::Config("frequency must be at least 1".into()));
        }
        if self.bytes_per_param == 0 {
            return Err(Error::Config("bytes-per-param must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout-fraction must be in (0,1), got {}",
                self.data.holdout_fraction
            )));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.samples == 0 || self.data.features == 0 {
                    return Err(Error::Config(
                        "synthetic data needs positive samples and features".into(),
                    ));
                }
                if self.data.classes.is_none() {
                    return Err(Error::Config("synthetic data needs `classes`".into()));
                }
            }
            DataSource::File => {
                if self.data.path.is_none() {
                    return Err(Error::Config("data source `file` needs `path`".into()));
                }
            }
        }
        if self.model.hidden.is_empty() {
            return Err(Error::Config("the trunk needs at least one hidden layer".into()));
        }
        if self.model.kind == ModelKind::Conv
            && (self.model.channels.is_empty() || self.model.kernel == 0)
        {
            return Err(Error::Config(
                "a convolutional trunk needs channels and a positive kernel".into(),
            ));
        }
        Ok(())
    }

    /// The config in its own file format (round-trips through `apply_file`).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[experiment]");
        let _ = writeln!(out, "method = {}", self.method.as_str());
        let _ = writeln!(out, "setting = {}", self.setting.as_str());
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "clients = {}", self.clients);
        let _ = writeln!(out, "sampled = {}", self.sampled);
        let _ = writeln!(out, "rounds = {}", self.rounds);
        let _ = writeln!(out, "local-epochs = {}", self.local_epochs);
        let _ = writeln!(out, "eval-every = {}", self.eval_every);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "bytes-per-param = {}", self.bytes_per_param);
        let _ = writeln!(out, "\n[data]");
        let _ = writeln!(
            out,
            "source = {}",
            match self.data.source {
                DataSource::Synthetic => "synthetic",
                DataSource::File => "file",
            }
        );
        if let Some(path) = &self.data.path {
            let _ = writeln!(out, "path = {}", path.display());
        }
        let _ = writeln!(out, "format = {}", self.data.format.as_str());
        if let Some(path) = &self.data.labels_path {
            let _ = writeln!(out, "labels-path = {}", path.display());
        }
        if let Some(classes) = self.data.classes {
            let _ = writeln!(out, "classes = {classes}");
        }
        let _ = writeln!(out, "samples = {}", self.data.samples);
        let _ = writeln!(out, "features = {}", self.data.features);
        let _ = writeln!(out, "noise = {}", self.data.noise);
        let _ = writeln!(out, "holdout-fraction = {}", self.data.holdout_fraction);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(
            out,
            "kind = {}",
            match self.model.kind {
                ModelKind::Mlp => "mlp",
                ModelKind::Conv => "conv",
            }
        );
        let join = |v: &[usize]| {
            v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(out, "hidden = {}", join(&self.model.hidden));
        let _ = writeln!(out, "channels = {}", join(&self.model.channels));
        let _ = writeln!(out, "kernel = {}", self.model.kernel);
        let _ = writeln!(out, "conv-hidden = {}", self.model.conv_hidden);
        let _ = writeln!(out, "\n[training]");
        let _ = writeln!(out, "learning-rate = {}", self.learning_rate);
        let _ = writeln!(out, "batch-size = {}", self.batch_size);
        let _ = writeln!(out, "\n[sharing]");
        let _ = writeln!(out, "frequency = {}", self.share_frequency);
        let _ = writeln!(out, "frozen-phase = {}", self.frozen_phase);
        out
    }
}
