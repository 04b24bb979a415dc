//! `key = value` run configuration for `train` and `init`.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! or repeated keys are rejected. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use concatenet::model::ModelConfig;
use concatenet::trainer::TrainConfig;

/// Every accepted key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.channels", "feature channels C (multiple of 4)"),
    ("model.bands", "gammatone bands B (divisible by 2^depth)"),
    ("model.depth", "encoder/decoder levels"),
    ("model.bins", "STFT bins K; window = 2(K-1), hop = window/2"),
    ("model.nlr_channels", "channels in the refinement stack"),
    ("model.sample_rate", "sample rate in Hz"),
    ("model.seed", "parameter initialization seed"),
    ("train.lr", "Adam step size"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.eps", "Adam epsilon"),
    ("train.batch_size", "examples per step"),
    ("train.segment_s", "training segment length in seconds"),
    ("train.steps", "total optimizer steps"),
    ("train.seed", "batch sampling seed"),
    ("train.snr_low", "lowest training SNR in dB"),
    ("train.snr_high", "highest training SNR in dB"),
    ("train.nlr_enabled", "train with the refinement stage (true/false)"),
    ("train.checkpoint_every", "checkpoint period in steps (0: final only)"),
    ("train.grad_clip", "global gradient-norm clip (0: off)"),
    ("train.lr_decay", "learning-rate factor per decay period"),
    ("train.lr_decay_every", "decay period in steps (0: constant rate)"),
    ("data.manifest", "corpus manifest; speech/background columns are used"),
    ("data.synth_items", "synthetic corpus size when no manifest is given"),
    ("data.synth_seconds", "synthetic item length in seconds"),
    ("data.synth_seed", "synthetic corpus seed"),
    ("out_dir", "directory for train_log.csv and checkpoints"),
    ("resume", "checkpoint to continue training from"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth { items: usize, seconds: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            init_seed: 0,
            train: TrainConfig::default(),
            data: DataSource::Synth {
                items: 16,
                seconds: 5.0,
                seed: 0,
            },
            out_dir: PathBuf::from("run"),
            resume: None,
        }
    }
}

/// Splits config text into key/value pairs, rejecting malformed lines,
/// unknown keys and duplicates.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        check_key(k).map_err(|e| format!("line {}: {e}", i + 1))?;
        if let Some(prev) = seen.insert(k.to_string(), i + 1) {
            return Err(format!("line {}: `{k}` already set on line {prev}", i + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn check_key(k: &str) -> Result<(), String> {
    if KEYS.iter().any(|(name, _)| *name == k) {
        Ok(())
    } else {
        Err(format!("unknown key `{k}`"))
    }
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{k}`: cannot parse `{v}`"))
}

fn boolean(k: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{k}`: expected true or false, got `{v}`")),
    }
}

impl RunConfig {
    /// Applies pairs in order; paths are joined onto `base`.
    pub fn apply(&mut self, pairs: &[(String, String)], base: &Path) -> Result<(), String> {
        let (mut items, mut seconds, mut seed) = match self.data {
            DataSource::Synth { items, seconds, seed } => (items, seconds, seed),
            DataSource::Manifest(_) => (16, 5.0, 0),
        };
        let mut manifest = match &self.data {
            DataSource::Manifest(p) => Some(p.clone()),
            DataSource::Synth { .. } => None,
        };
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            let m = &mut self.model;
            let t = &mut self.train;
            match k {
                "model.channels" => m.channels = num(k, v)?,
                "model.bands" => m.bands = num(k, v)?,
                "model.depth" => m.depth = num(k, v)?,
                "model.bins" => m.bins = num(k, v)?,
                "model.nlr_channels" => m.nlr_channels = num(k, v)?,
                "model.sample_rate" => m.sample_rate = num(k, v)?,
                "model.seed" => self.init_seed = num(k, v)?,
                "train.lr" => t.lr = num(k, v)?,
                "train.beta1" => t.beta1 = num(k, v)?,
                "train.beta2" => t.beta2 = num(k, v)?,
                "train.eps" => t.eps = num(k, v)?,
                "train.batch_size" => t.batch_size = num(k, v)?,
                "train.segment_s" => t.segment_s = num(k, v)?,
                "train.steps" => t.steps = num(k, v)?,
                "train.seed" => t.seed = num(k, v)?,
                "train.snr_low" => t.snr_low = num(k, v)?,
                "train.snr_high" => t.snr_high = num(k, v)?,
                "train.nlr_enabled" => t.nlr_enabled = boolean(k, v)?,
                "train.checkpoint_every" => t.checkpoint_every = num(k, v)?,
                "train.grad_clip" => t.grad_clip = num(k, v)?,
                "train.lr_decay" => t.lr_decay = num(k, v)?,
                "train.lr_decay_every" => t.lr_decay_every = num(k, v)?,
                "data.manifest" => manifest = Some(base.join(v)),
                "data.synth_items" => items = num(k, v)?,
                "data.synth_seconds" => seconds = num(k, v)?,
                "data.synth_seed" => seed = num(k, v)?,
                "out_dir" => self.out_dir = base.join(v),
                "resume" => self.resume = Some(base.join(v)),
                _ => return Err(format!("unknown key `{k}`")),
            }
        }
        self.data = match manifest {
            Some(p) => DataSource::Manifest(p),
            None => DataSource::Synth { items, seconds, seed },
        };
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if let DataSource::Synth { items, seconds, .. } = self.data {
            if items == 0 {
                return Err("data.synth_items must be positive".into());
            }
            if !(seconds >= self.train.segment_s) {
                return Err(format!(
                    "data.synth_seconds ({seconds}) must be at least train.segment_s ({})",
                    self.train.segment_s
                ));
            }
        }
        Ok(())
    }
}

/// Reference text listing every key, used in `--help`.
pub fn keys_help() -> String {
    let w = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEYS.iter().map(|(k, d)| format!("  {k:<w$}  {d}\n")).collect()
}
