//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::embedding::default_sizes;
use crate::error::{LsanError, Result};
use crate::model::{ModelConfig, VariantKind};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "LSAN_OUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Base for every relative path below.
    pub root: PathBuf,
    /// Raw interaction log read by `prepare-data`.
    pub input: PathBuf,
    /// Prepared dataset directory.
    pub dataset: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
    pub dim: usize,
    pub kernel: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub num_bases: usize,
    pub m1: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: VariantKind,
    pub attention_k: usize,
    /// Item count when no dataset is at hand; 0 takes it from the dataset.
    pub num_items: usize,
    /// Context table rows when no dataset is at hand; 0 takes them from the dataset.
    pub context_rows: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            root: PathBuf::from("."),
            input: PathBuf::from("interactions.tsv"),
            dataset: PathBuf::from("dataset"),
            out: PathBuf::from("runs"),
            dim: 128,
            kernel: 5,
            heads: 2,
            layers: 1,
            max_len: 50,
            num_bases: 2,
            m1: 2,
            lambda: 1e-5,
            lr: 1e-3,
            batch: 256,
            epochs: 200,
            patience: 10,
            seed: 42,
            variant: VariantKind::Full,
            attention_k: 10,
            num_items: 0,
            context_rows: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LsanError::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "root" => self.root = value.into(),
            "input" => self.input = value.into(),
            "dataset" => self.dataset = value.into(),
            "out" => self.out = value.into(),
            "dim" => self.dim = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "num_bases" => self.num_bases = parse(key, value)?,
            "m1" => self.m1 = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "attention_k" => self.attention_k = parse(key, value)?,
            "num_items" => self.num_items = parse(key, value)?,
            "context_rows" => self.context_rows = parse(key, value)?,
            other => return Err(LsanError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LsanError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LsanError::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies `key=value` overrides, then the output directory variable.
    pub fn resolve(mut self, overrides: &[String], env_out: Option<String>) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| LsanError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        if let Some(out) = env_out.filter(|s| !s.is_empty()) {
            self.out = out.into();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("dim", self.dim),
            ("kernel", self.kernel),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
            ("num_bases", self.num_bases),
            ("m1", self.m1),
            ("batch", self.batch),
            ("patience", self.patience),
            ("attention_k", self.attention_k),
        ] {
            if v == 0 {
                return Err(LsanError::Config(format!("{k} must be positive")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(LsanError::Config(format!("kernel {} must be odd", self.kernel)));
        }
        self.train_config().validate()
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn input_path(&self) -> PathBuf {
        self.path(&self.input)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.path(&self.dataset)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path(&self.out)
    }

    pub fn model_config(&self, num_items: usize, context_rows: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            num_items,
            context_rows,
            dim: self.dim,
            kernel: self.kernel,
            heads: self.heads,
            layers: self.layers,
            max_len: self.max_len,
            sizes: default_sizes(num_items, self.num_bases, self.m1)?,
            variant: self.variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..Default::default()
            },
            lambda: self.lambda,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience.max(1),
        }
    }

    /// Every hyperparameter as `key = value` lines in a fixed order. Paths are
    /// left out so relocating a run does not change its hash.
    pub fn hyperparameters(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "num_bases = {}", self.num_bases);
        let _ = writeln!(s, "m1 = {}", self.m1);
        let _ = writeln!(s, "lambda = {:e}", self.lambda);
        let _ = writeln!(s, "lr = {:e}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "attention_k = {}", self.attention_k);
        let _ = writeln!(s, "num_items = {}", self.num_items);
        let _ = writeln!(s, "context_rows = {}", self.context_rows);
        s
    }

    /// The full resolved configuration, loadable by [`RunConfig::parse_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, p) in [("root", &self.root), ("input", &self.input), ("dataset", &self.dataset), ("out", &self.out)] {
            let _ = writeln!(s, "{k} = {}", p.display());
        }
        s + &self.hyperparameters()
    }

    /// SHA-256 of [`RunConfig::hyperparameters`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.hyperparameters().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}
