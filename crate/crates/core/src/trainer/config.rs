//! Run configuration: line-oriented `key = value` text, `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fixedpoint::check_bits;
use crate::nn::{parse_layers, LayerKind, LayerSpec, Precision};
use crate::optim::{OptimizerConfig, OptimizerKind};

pub const REFERENCE_LAYERS: &str = "conv(8,5) relu pool conv(16,5) relu pool fc(100) relu fc(10)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Floating-point reference training.
    FpReference,
    /// Every tensor quantized with per-tensor dynamic fixed point.
    Quantized,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FpReference => "fp_reference",
            Mode::Quantized => "quantized",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp_reference" => Ok(Mode::FpReference),
            "quantized" => Ok(Mode::Quantized),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected fp_reference or quantized)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory of IDX files (see [`crate::data::load_split`]).
    Idx(PathBuf),
    /// Gaussian blobs; the first `per_class` samples of each class train,
    /// the next `test_per_class` evaluate.
    Blobs { classes: usize, per_class: usize, test_per_class: usize, dim: usize, spread: f64, seed: u64 },
}

/// Which split the per-epoch evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub layers: String,
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub gradient_bits: u32,
    pub classifier_weight_bits: Option<u32>,
    pub classifier_activation_bits: Option<u32>,
    pub classifier_gradient_bits: Option<u32>,
    pub optimizer: OptimizerConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Use at most this many training / evaluation samples (0 = all).
    pub train_limit: usize,
    pub eval_limit: usize,
    pub eval_on: EvalSplit,
    /// Write a step row every this many updates (0 = epoch rows only).
    pub metrics_interval: u64,
    /// Where metrics and checkpoints go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many updates in total (0 = run all epochs).
    pub max_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::FpReference,
            layers: REFERENCE_LAYERS.to_string(),
            weight_bits: 8,
            activation_bits: 8,
            gradient_bits: 8,
            classifier_weight_bits: None,
            classifier_activation_bits: None,
            classifier_gradient_bits: None,
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            batch_size: 32,
            seed: 0,
            data: DataSource::Idx(PathBuf::from("data/mnist-10k")),
            train_limit: 0,
            eval_limit: 0,
            eval_on: EvalSplit::Test,
            metrics_interval: 0,
            out_dir: None,
            max_steps: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bits(key: &str, value: &str) -> Result<u32> {
    let b = parse(key, value)?;
    check_bits(b).map_err(|e| Error::Config(format!("{key}: {e}")))?;
    Ok(b)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key} (expected true or false)"))),
    }
}

fn optional_bits(key: &str, value: &str) -> Result<Option<u32>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_bits(key, value).map(Some)
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key = value` lines in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Applies `key=value` overrides, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) =
                o.as_ref().split_once('=').ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt = &mut self.optimizer;
        match key {
            "mode" => self.mode = value.parse()?,
            "layers" => self.layers = value.to_string(),
            "weight_bits" => self.weight_bits = parse_bits(key, value)?,
            "activation_bits" => self.activation_bits = parse_bits(key, value)?,
            "gradient_bits" => self.gradient_bits = parse_bits(key, value)?,
            "bits" => {
                let b = parse_bits(key, value)?;
                (self.weight_bits, self.activation_bits, self.gradient_bits) = (b, b, b);
            }
            "classifier_weight_bits" => self.classifier_weight_bits = optional_bits(key, value)?,
            "classifier_activation_bits" => self.classifier_activation_bits = optional_bits(key, value)?,
            "classifier_gradient_bits" => self.classifier_gradient_bits = optional_bits(key, value)?,
            "optimizer" => opt.kind = value.parse::<OptimizerKind>().map_err(|e| Error::Config(e.to_string()))?,
            "learning_rate" => opt.learning_rate = parse(key, value)?,
            "momentum" => opt.momentum = parse(key, value)?,
            "beta1" => opt.beta1 = parse(key, value)?,
            "beta2" => opt.beta2 = parse(key, value)?,
            "epsilon" => opt.epsilon = parse(key, value)?,
            "lazy" => opt.lazy = parse_bool(key, value)?,
            "state_bits" => opt.state_bits = parse_bits(key, value)?,
            "acc_bits" => opt.acc_bits = parse_bits(key, value)?,
            "lr_decay" => opt.lr_decay = parse(key, value)?,
            "lr_decay_interval" => opt.lr_decay_interval = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data" => {
                self.data = if value == "blobs" {
                    DataSource::Blobs { classes: 10, per_class: 100, test_per_class: 100, dim: 16, spread: 3.0, seed: 0 }
                } else {
                    DataSource::Idx(PathBuf::from(value))
                }
            }
            "blobs_classes" | "blobs_per_class" | "blobs_test_per_class" | "blobs_dim" | "blobs_spread" | "blobs_seed" => {
                let DataSource::Blobs { classes, per_class, test_per_class, dim, spread, seed } = &mut self.data else {
                    return Err(Error::Config(format!("{key} needs data = blobs first")));
                };
                match key {
                    "blobs_classes" => *classes = parse(key, value)?,
                    "blobs_per_class" => *per_class = parse(key, value)?,
                    "blobs_test_per_class" => *test_per_class = parse(key, value)?,
                    "blobs_dim" => *dim = parse(key, value)?,
                    "blobs_spread" => *spread = parse(key, value)?,
                    _ => *seed = parse(key, value)?,
                }
            }
            "train_limit" => self.train_limit = parse(key, value)?,
            "eval_limit" => self.eval_limit = parse(key, value)?,
            "eval_on" => {
                self.eval_on = match value {
                    "train" => EvalSplit::Train,
                    "test" => EvalSplit::Test,
                    _ => return Err(Error::Config(format!("bad value {value:?} for eval_on (expected train or test)"))),
                }
            }
            "metrics_interval" => self.metrics_interval = parse(key, value)?,
            "out_dir" => self.out_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "max_steps" => self.max_steps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let DataSource::Blobs { classes, per_class, test_per_class, dim, spread, .. } = self.data {
            if classes < 2 || per_class == 0 || test_per_class == 0 || dim == 0 || !spread.is_finite() {
                return Err(Error::Config("blobs need >= 2 classes and positive counts".into()));
            }
        }
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.optimizer.lazy && self.optimizer.acc_bits < self.weight_bits.max(self.classifier_weight_bits.unwrap_or(0)) {
            return Err(Error::Config("acc_bits must be >= the weight bit widths".into()));
        }
        self.layer_specs().map(|_| ())
    }

    /// The layer stack with per-role bit widths; the last layer takes the
    /// classifier overrides.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let base = Precision { weight_bits: self.weight_bits, activation_bits: self.activation_bits, gradient_bits: self.gradient_bits };
        let mut layers = parse_layers(&self.layers, base)?;
        match layers.last_mut() {
            Some(last) if matches!(last.kind, LayerKind::FullyConnected { .. }) => {
                let p = &mut last.precision;
                p.weight_bits = self.classifier_weight_bits.unwrap_or(p.weight_bits);
                p.activation_bits = self.classifier_activation_bits.unwrap_or(p.activation_bits);
                p.gradient_bits = self.classifier_gradient_bits.unwrap_or(p.gradient_bits);
            }
            _ => return Err(Error::Config("the last layer must be fc(classes)".into())),
        }
        Ok(layers)
    }

    /// Canonical text form. With `with_run_control = false` the keys that
    /// only steer a run (`out_dir`, `max_steps`) are left out; checkpoints
    /// store that form so where and how long a run went do not change them.
    pub fn to_text(&self, with_run_control: bool) -> String {
        let mut s = String::new();
        let o = &self.optimizer;
        let bits = |b: Option<u32>| b.map_or("none".to_string(), |b| b.to_string());
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "weight_bits = {}", self.weight_bits);
        let _ = writeln!(s, "activation_bits = {}", self.activation_bits);
        let _ = writeln!(s, "gradient_bits = {}", self.gradient_bits);
        let _ = writeln!(s, "classifier_weight_bits = {}", bits(self.classifier_weight_bits));
        let _ = writeln!(s, "classifier_activation_bits = {}", bits(self.classifier_activation_bits));
        let _ = writeln!(s, "classifier_gradient_bits = {}", bits(self.classifier_gradient_bits));
        let _ = writeln!(s, "optimizer = {}", o.kind.name());
        let _ = writeln!(s, "learning_rate = {:?}", o.learning_rate);
        let _ = writeln!(s, "momentum = {:?}", o.momentum);
        let _ = writeln!(s, "beta1 = {:?}", o.beta1);
        let _ = writeln!(s, "beta2 = {:?}", o.beta2);
        let _ = writeln!(s, "epsilon = {:?}", o.epsilon);
        let _ = writeln!(s, "lazy = {}", o.lazy);
        let _ = writeln!(s, "state_bits = {}", o.state_bits);
        let _ = writeln!(s, "acc_bits = {}", o.acc_bits);
        let _ = writeln!(s, "lr_decay = {:?}", o.lr_decay);
        let _ = writeln!(s, "lr_decay_interval = {}", o.lr_decay_interval);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        match &self.data {
            DataSource::Idx(p) => {
                let _ = writeln!(s, "data = {}", p.display());
            }
            DataSource::Blobs { classes, per_class, test_per_class, dim, spread, seed } => {
                let _ = writeln!(s, "data = blobs");
                let _ = writeln!(s, "blobs_classes = {classes}");
                let _ = writeln!(s, "blobs_per_class = {per_class}");
                let _ = writeln!(s, "blobs_test_per_class = {test_per_class}");
                let _ = writeln!(s, "blobs_dim = {dim}");
                let _ = writeln!(s, "blobs_spread = {spread:?}");
                let _ = writeln!(s, "blobs_seed = {seed}");
            }
        }
        let _ = writeln!(s, "train_limit = {}", self.train_limit);
        let _ = writeln!(s, "eval_limit = {}", self.eval_limit);
        let _ = writeln!(s, "eval_on = {}", if self.eval_on == EvalSplit::Train { "train" } else { "test" });
        let _ = writeln!(s, "metrics_interval = {}", self.metrics_interval);
        if with_run_control {
            let _ = writeln!(s, "out_dir = {}", self.out_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default());
            let _ = writeln!(s, "max_steps = {}", self.max_steps);
        }
        s
    }
}
