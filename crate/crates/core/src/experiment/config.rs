//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::channel::budget_for_rate;
use crate::data::{ShapeTemplate, SyntheticSpec};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;
use crate::train::TrainConfig;
use crate::vit::{AttentionScale, VitConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl StageConfig {
    fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::with_lr(self.lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub data_seed: u64,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub attention_scale: AttentionScale,
    pub rates: Vec<f64>,
    pub alphas: Vec<f64>,
    pub beta: f64,
    pub encoder: StageConfig,
    pub decoder: StageConfig,
    pub classifier: StageConfig,
    pub finetune: StageConfig,
    /// Run the classifier stages after the decoders.
    pub run_classifier: bool,
    /// Also train one decoder per seed on unmasked tokens.
    pub bypass_baseline: bool,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vit = VitConfig::default();
        let data = SyntheticSpec::default();
        Self {
            experiment: "toy".into(),
            num_classes: data.num_classes,
            train_per_class: data.per_class,
            test_per_class: 16,
            height: data.height,
            width: data.width,
            patch: data.patch,
            data_seed: data.seed,
            embed_dim: vit.embed_dim,
            heads: vit.heads,
            layers: vit.layers,
            mlp_hidden: vit.mlp_hidden,
            attention_scale: vit.attention_scale,
            rates: vec![1.0, 0.75, 0.5, 0.25],
            alphas: vec![1.0, 0.85],
            beta: 0.3,
            encoder: StageConfig::new(30, 8, 2e-3),
            decoder: StageConfig::new(30, 16, 5e-4),
            classifier: StageConfig::new(30, 16, 2e-3),
            finetune: StageConfig::new(30, 16, 5e-4),
            run_classifier: true,
            bypass_baseline: false,
            seeds: vec![0],
            out_dir: PathBuf::from("runs/toy"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => {
                if value.is_empty() || value.contains([',', '\n', '"']) {
                    return Err(Error::Config(format!(
                        "experiment name {value:?} not usable in CSV"
                    )));
                }
                self.experiment = value.to_string();
            }
            "num_classes" => self.num_classes = parse(key, value)?,
            "train_per_class" => self.train_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "attention_scale" => {
                self.attention_scale = match value {
                    "embed" => AttentionScale::Embed,
                    "head" => AttentionScale::Head,
                    _ => {
                        return Err(Error::Config(format!(
                            "attention_scale: expected embed or head, got {value:?}"
                        )))
                    }
                }
            }
            "rates" => self.rates = parse_list(key, value)?,
            "alphas" => self.alphas = parse_list(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "run_classifier" => self.run_classifier = parse_bool(key, value)?,
            "bypass_baseline" => self.bypass_baseline = parse_bool(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                let (name, field) = key
                    .rsplit_once('_')
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let st = match name {
                    "encoder" => &mut self.encoder,
                    "decoder" => &mut self.decoder,
                    "classifier" => &mut self.classifier,
                    "finetune" => &mut self.finetune,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                };
                match field {
                    "epochs" => st.epochs = parse(key, value)?,
                    "batch" => st.batch_size = parse(key, value)?,
                    "lr" => st.lr = parse(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Rejects any configuration that would fail after training started.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > ShapeTemplate::ALL.len() {
            return bad(format!(
                "num_classes {} outside 2..={}",
                self.num_classes,
                ShapeTemplate::ALL.len()
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class image counts must be positive".into());
        }
        self.vit().validate()?;
        self.decoder_config().validate()?;
        if self.rates.is_empty() {
            return bad("rates is empty".into());
        }
        for &r in &self.rates {
            budget_for_rate(r, 1).map_err(|_| Error::Config(format!("rate {r} outside (0, 1]")))?;
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad(format!(
                "alphas [{}] must be non-empty and in [0, 1]",
                join(&self.alphas)
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut distinct = self.seeds.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        for (name, st) in self.stages() {
            st.train()
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    fn stages(&self) -> [(&'static str, &StageConfig); 4] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("classifier", &self.classifier),
            ("finetune", &self.finetune),
        ]
    }

    pub fn vit(&self) -> VitConfig {
        VitConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden,
            num_classes: self.num_classes,
            patch: self.patch,
            height: self.height,
            width: self.width,
            attention_scale: self.attention_scale,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            embed_dim: self.embed_dim,
            rows: self.height.checked_div(self.patch).unwrap_or(0),
            cols: self.width.checked_div(self.patch).unwrap_or(0),
            patch: self.patch,
        }
    }

    pub fn train_data(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            per_class: self.train_per_class,
            height: self.height,
            width: self.width,
            patch: self.patch,
            seed: crate::seed::derive_seed(self.data_seed, &[crate::seed::stream::TRAIN_DATA]),
        }
    }

    pub fn test_data(&self) -> SyntheticSpec {
        SyntheticSpec {
            per_class: self.test_per_class,
            seed: crate::seed::derive_seed(self.data_seed, &[crate::seed::stream::TEST_DATA]),
            ..self.train_data()
        }
    }

    /// Canonical `key = value` rendering; [`ExperimentConfig::parse`] of it
    /// gives back an equal config.
    pub fn render(&self) -> String {
        let scale = match self.attention_scale {
            AttentionScale::Embed => "embed",
            AttentionScale::Head => "head",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("experiment", self.experiment.clone());
        kv("num_classes", self.num_classes.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("patch", self.patch.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("mlp_hidden", self.mlp_hidden.to_string());
        kv("attention_scale", scale.to_string());
        kv("rates", join(&self.rates));
        kv("alphas", join(&self.alphas));
        kv("beta", self.beta.to_string());
        for (name, st) in self.stages() {
            kv(&format!("{name}_epochs"), st.epochs.to_string());
            kv(&format!("{name}_batch"), st.batch_size.to_string());
            kv(&format!("{name}_lr"), st.lr.to_string());
        }
        kv("run_classifier", self.run_classifier.to_string());
        kv("bypass_baseline", self.bypass_baseline.to_string());
        kv("seeds", join(&self.seeds));
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    /// SHA-256 of the canonical rendering, lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
