//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::data::{canonical_classes, PreprocessConfig, SplitSpec};
use crate::densenet::DenseNetConfig;
use crate::error::{Error, Result};
use crate::wsl::{ClassWeightMode, HeadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate is multiplied by this every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// L2 penalty coefficient, separate from the schedule.
    pub l2: f64,
    pub seed: u64,
    /// Batch shards whose gradients are computed independently and summed.
    pub workers: usize,
    pub class_weights: ClassWeightMode,
    pub head: HeadConfig,
    pub net: DenseNetConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            l2: 0.0,
            seed: 0,
            workers: 1,
            class_weights: ClassWeightMode::Literal,
            head: HeadConfig::new(canonical_classes()),
            net: DenseNetConfig::full(),
            preprocess: PreprocessConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Toy backbone on uncropped 64×64 inputs, with `M = 4` and k values
    /// sized for 4×4 heatmaps.
    pub fn toy(class_names: Vec<String>) -> Self {
        TrainConfig {
            head: HeadConfig {
                m: 4,
                k_plus_train: 2,
                k_plus_test: 2,
                k_minus_test: 2,
                alpha: 1.0,
                class_names,
            },
            net: DenseNetConfig::toy(),
            preprocess: PreprocessConfig { resize: 64, crop: 64, ..PreprocessConfig::default() },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!("train.lr_decay_factor {} outside (0, 1]", self.lr_decay_factor)));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("train.lr_decay_every must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2 for batch norm".into()));
        }
        if self.workers == 0 || self.workers * 2 > self.batch_size {
            return Err(Error::Config(format!(
                "train.workers {} must leave every shard at least 2 samples of a {}-sample batch",
                self.workers, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("train.l2 must be nonnegative".into()));
        }
        if self.net.in_channels != 3 {
            return Err(Error::Config("net.in_channels must be 3 (grey replicated to RGB)".into()));
        }
        if !self.preprocess.crop.is_multiple_of(32) {
            return Err(Error::Config(format!("data.crop {} must be a multiple of 32", self.preprocess.crop)));
        }
        self.head.validate()?;
        self.net.validate()?;
        self.preprocess.validate()?;
        Ok(())
    }

    /// Learning rate of a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Side of the square heatmap produced for one input crop.
    pub fn heatmap_side(&self) -> usize {
        self.preprocess.crop / self.net.output_stride()
    }

    fn arch_text(&self) -> String {
        let n = &self.net;
        let mut s = String::new();
        let _ = writeln!(s, "net.in_channels = {}", n.in_channels);
        let _ = writeln!(s, "net.growth_rate = {}", n.growth_rate);
        let _ = writeln!(s, "net.block_sizes = {}", join(&n.block_sizes));
        let _ = writeln!(s, "net.init_channels = {}", n.init_channels);
        let _ = writeln!(s, "net.compression = {}", n.compression);
        let _ = writeln!(s, "net.bottleneck = {}", n.use_bottleneck);
        let _ = writeln!(s, "net.bottleneck_width = {}", n.bottleneck_width);
        let _ = writeln!(s, "net.dilation = {}", n.dilation_last_block);
        let _ = writeln!(s, "net.modified_transition = {}", n.modified_transition);
        let _ = writeln!(s, "head.m = {}", self.head.m);
        let _ = writeln!(s, "head.classes = {}", self.head.class_names.join("|"));
        s
    }

    /// SHA-256 over the keys that determine parameter shapes and names.
    /// Test-time pooling settings are excluded so they can vary per run.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.arch_text().as_bytes()).into()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "train.lr_decay_every = {}", self.lr_decay_every);
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.optimizer = {}", self.optimizer.as_str());
        let _ = writeln!(s, "train.momentum = {}", self.momentum);
        let _ = writeln!(s, "train.l2 = {}", self.l2);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.workers = {}", self.workers);
        let cw = match self.class_weights {
            ClassWeightMode::Literal => "literal",
            ClassWeightMode::Inverted => "inverted",
        };
        let _ = writeln!(s, "train.class_weights = {cw}");
        s.push_str(&self.arch_text());
        let _ = writeln!(s, "net.drop_rate = {}", self.net.drop_rate);
        let _ = writeln!(s, "head.k_plus_train = {}", self.head.k_plus_train);
        let _ = writeln!(s, "head.k_plus_test = {}", self.head.k_plus_test);
        let _ = writeln!(s, "head.k_minus_test = {}", self.head.k_minus_test);
        let _ = writeln!(s, "head.alpha = {}", self.head.alpha);
        let p = &self.preprocess;
        let _ = writeln!(s, "data.resize = {}", p.resize);
        let _ = writeln!(s, "data.crop = {}", p.crop);
        let _ = writeln!(s, "data.mean = {}", join(&p.mean));
        let _ = writeln!(s, "data.std = {}", join(&p.std));
        let sp = &self.split;
        let _ = writeln!(s, "data.train_frac = {}", sp.train);
        let _ = writeln!(s, "data.val_frac = {}", sp.val);
        let _ = writeln!(s, "data.test_frac = {}", sp.test);
        let _ = writeln!(s, "data.split_seed = {}", sp.seed);
        let _ = writeln!(s, "data.group_by_patient = {}", sp.group_by_patient);
        s
    }

    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of `self`. A `net.preset` key selects the
    /// starting backbone before other keys apply, wherever it appears.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let pairs = parse_pairs(text)?;
        let at = |line: usize| move |e: Error| Error::Parse { line, detail: e.to_string() };
        if let Some((k, v, line)) = pairs.iter().find(|(k, _, _)| k == "net.preset") {
            self.set(k, v).map_err(at(*line))?;
        }
        for (k, v, line) in pairs.iter().filter(|(k, _, _)| k != "net.preset") {
            self.set(k, v).map_err(at(*line))?;
        }
        Ok(())
    }

    /// Applies one key. Used for config files and command-line overrides;
    /// `net.preset` replaces every `net.*` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "net.preset" => {
                self.net = match v {
                    "full" => DenseNetConfig::full(),
                    "toy" => DenseNetConfig::toy(),
                    _ => return Err(bad(key, v)),
                }
            }
            "train.lr" => self.lr = num(key, v)?,
            "train.lr_decay_factor" => self.lr_decay_factor = num(key, v)?,
            "train.lr_decay_every" => self.lr_decay_every = num(key, v)?,
            "train.epochs" => self.epochs = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "momentum" => OptimizerKind::Momentum,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad(key, v)),
                }
            }
            "train.momentum" => self.momentum = num(key, v)?,
            "train.l2" => self.l2 = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.workers" => self.workers = num(key, v)?,
            "train.class_weights" => {
                self.class_weights = match v {
                    "literal" => ClassWeightMode::Literal,
                    "inverted" => ClassWeightMode::Inverted,
                    _ => return Err(bad(key, v)),
                }
            }
            "net.in_channels" => self.net.in_channels = num(key, v)?,
            "net.growth_rate" => self.net.growth_rate = num(key, v)?,
            "net.block_sizes" => self.net.block_sizes = list(key, v)?,
            "net.init_channels" => self.net.init_channels = num(key, v)?,
            "net.compression" => self.net.compression = num(key, v)?,
            "net.bottleneck" => self.net.use_bottleneck = num(key, v)?,
            "net.bottleneck_width" => self.net.bottleneck_width = num(key, v)?,
            "net.dilation" => self.net.dilation_last_block = num(key, v)?,
            "net.modified_transition" => self.net.modified_transition = num(key, v)?,
            "net.drop_rate" => self.net.drop_rate = num(key, v)?,
            "head.m" => self.head.m = num(key, v)?,
            "head.classes" => self.head.class_names = v.split('|').map(|s| s.trim().to_string()).collect(),
            "head.k_plus_train" => self.head.k_plus_train = num(key, v)?,
            "head.k_plus_test" => self.head.k_plus_test = num(key, v)?,
            "head.k_minus_test" => self.head.k_minus_test = num(key, v)?,
            "head.alpha" => self.head.alpha = num(key, v)?,
            "data.resize" => self.preprocess.resize = num(key, v)?,
            "data.crop" => self.preprocess.crop = num(key, v)?,
            "data.mean" => self.preprocess.mean = triple(key, v)?,
            "data.std" => self.preprocess.std = triple(key, v)?,
            "data.train_frac" => self.split.train = num(key, v)?,
            "data.val_frac" => self.split.val = num(key, v)?,
            "data.test_frac" => self.split.test = num(key, v)?,
            "data.split_seed" => self.split.seed = num(key, v)?,
            "data.group_by_patient" => self.split.group_by_patient = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Lines that state how ambiguous settings were interpreted, for the
    /// head of every run log and report.
    pub fn run_header(&self) -> String {
        format!(
            "lr schedule: lr x {} every {} epochs; L2 penalty {} (separate from the schedule)\n\
             class weights: {:?}; split patient-grouped: {}\n",
            self.lr_decay_factor, self.lr_decay_every, self.l2, self.class_weights, self.split.group_by_patient
        )
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("{key}: invalid value {v:?}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let items: Vec<f64> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
    items.try_into().map_err(|_| bad(key, v))
}

/// `(key, value, line)` triples; `#` starts a comment.
fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, detail: format!("expected key = value, got {line:?}") })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::toy(vec!["a".into(), "b".into()]);
        cfg.optimizer = OptimizerKind::Adam;
        cfg.class_weights = ClassWeightMode::Inverted;
        cfg.preprocess.mean = [0.25, 0.5, 0.125];
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn preset_and_comments() {
        let cfg = TrainConfig::from_text("# toy run\nnet.growth_rate = 6\nnet.preset = toy  # small\n").unwrap();
        assert_eq!(cfg.net.growth_rate, 6);
        assert_eq!(cfg.net.block_sizes, vec![2, 2, 2, 2]);
        assert!(matches!(TrainConfig::from_text("a.b = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::from_text("\nnonsense"), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::from_text("train.lr = fast").is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        for e in 0..10 {
            assert_eq!(cfg.lr_at(e), 0.002);
        }
        for e in 10..20 {
            assert_eq!(cfg.lr_at(e), 0.002 * 0.1);
        }
        assert_eq!(cfg.lr_at(25), 0.002 * 0.1f64.powi(2));
    }

    #[test]
    fn hash_ignores_test_time_settings() {
        let a = TrainConfig::toy(vec!["a".into()]);
        let mut b = a.clone();
        b.head.alpha = 0.25;
        b.head.k_minus_test = 7;
        b.epochs = 3;
        assert_eq!(a.hash(), b.hash());
        b.head.m = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 16;
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 0.1;
        cfg.lr_decay_factor = 1.5;
        assert!(cfg.validate().is_err());
    }
}
