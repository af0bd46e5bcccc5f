//! One flat JSON object holding every tunable of every command. Unknown keys
//! are rejected; missing keys take the desk-scale defaults.
//!
//! ```json
//! { "seed": 7, "dim": 32, "epochs": 5, "metric": "psnr", "threshold": 3.0 }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crossval::CrossValConfig;
use crate::encoder::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::pipeline::ExtractConfig;
use crate::proxy::{MetricConfig, PairingConfig, DEFAULT_TIMEOUT_SECS};
use crate::ridge::ALPHA_GRID;
use crate::rmvit::{Pooling, RmvitConfig};
use crate::seeding;
use crate::synth::{Degradation, SynthConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // synthetic corpus
    pub sources: usize,
    pub kinds: Vec<Degradation>,
    pub severities: Vec<u32>,
    pub width: usize,
    pub height: usize,
    pub frames: usize,

    // extraction
    pub rotations: Vec<u8>,

    // frozen encoder; its width is `dim`
    pub encoder: EncoderKind,
    pub encoder_index: Option<PathBuf>,

    // RMViT
    pub dim: usize,
    pub memory_tokens: usize,
    pub segment_len: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pooling: Pooling,

    // proxy scoring and pairing
    pub metric: String,
    pub metric_command: Option<String>,
    pub metric_pattern: Option<String>,
    pub metric_timeout_secs: u64,
    pub metric_repeat_check: bool,
    pub threshold: f64,
    pub workers: usize,

    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub tau: f64,

    // evaluation
    pub folds: usize,
    pub repeats: usize,
    pub inner_folds: usize,
    pub alpha_grid: Vec<f64>,
    pub fit_intercept: bool,

    // sweep
    pub sweep_memory_tokens: Vec<usize>,
    pub sweep_segment_lens: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let model = RmvitConfig::default();
        let train = TrainConfig::default();
        let cv = CrossValConfig::default();
        Self {
            seed: 0,
            sources: synth.sources,
            kinds: synth.kinds,
            severities: synth.severities,
            width: synth.width,
            height: synth.height,
            frames: synth.frames,
            rotations: vec![0],
            encoder: EncoderKind::SeededProjection,
            encoder_index: None,
            dim: model.dim,
            memory_tokens: model.memory_tokens,
            segment_len: model.segment_len,
            depth: model.depth,
            heads: model.heads,
            ffn_mult: model.ffn_mult,
            pooling: model.pooling,
            metric: "psnr".into(),
            metric_command: None,
            metric_pattern: None,
            metric_timeout_secs: DEFAULT_TIMEOUT_SECS,
            metric_repeat_check: false,
            threshold: 3.0,
            workers: 1,
            batch_size: train.batch_size,
            epochs: train.epochs,
            base_lr: train.base_lr,
            warmup_epochs: train.warmup_epochs,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            lambda1: train.lambda1,
            tau: train.tau,
            folds: cv.folds,
            repeats: cv.repeats,
            inner_folds: cv.inner_folds,
            alpha_grid: ALPHA_GRID.to_vec(),
            fit_intercept: true,
            sweep_memory_tokens: vec![2, 4],
            sweep_segment_lens: vec![2, 4],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides; values are JSON, with bare words taken
    /// as strings (`metric=vmaf`, `rotations=[0,1]`, `base_lr=0.02`).
    pub fn with_overrides(&self, pairs: &[String]) -> Result<Self> {
        let mut obj = serde_json::to_value(self)?;
        let map = obj.as_object_mut().expect("config serialises to an object");
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            let v = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            map.insert(k.to_string(), v);
        }
        serde_json::from_value(obj).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        self.pairing().validate()?;
        if self.encoder == EncoderKind::Precomputed && self.encoder_index.is_none() {
            return Err(Error::Config("encoder `precomputed` needs encoder_index".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            sources: self.sources,
            kinds: self.kinds.clone(),
            severities: self.severities.clone(),
            width: self.width,
            height: self.height,
            frames: self.frames,
        }
    }

    pub fn extract(&self) -> ExtractConfig {
        ExtractConfig { rotations: self.rotations.clone(), seed: self.seed }
    }

    /// The encoder's weights are derived from the run seed.
    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            kind: self.encoder,
            dim: self.dim,
            seed: seeding::derive(self.seed, "encoder"),
            index: self.encoder_index.clone(),
        }
    }

    pub fn model(&self) -> RmvitConfig {
        RmvitConfig {
            dim: self.dim,
            memory_tokens: self.memory_tokens,
            segment_len: self.segment_len,
            depth: self.depth,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            pooling: self.pooling,
        }
    }

    pub fn metric(&self) -> MetricConfig {
        MetricConfig {
            name: self.metric.clone(),
            command: self.metric_command.clone(),
            pattern: self.metric_pattern.clone(),
            timeout_secs: self.metric_timeout_secs,
            repeat_check: self.metric_repeat_check,
        }
    }

    pub fn pairing(&self) -> PairingConfig {
        PairingConfig { threshold: self.threshold, metric_name: self.metric.clone() }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: seeding::derive(self.seed, "train"),
            lambda1: self.lambda1,
            tau: self.tau,
        }
    }

    pub fn crossval(&self) -> CrossValConfig {
        CrossValConfig {
            folds: self.folds,
            repeats: self.repeats,
            inner_folds: self.inner_folds,
            alpha_grid: self.alpha_grid.clone(),
            fit_intercept: self.fit_intercept,
            seed: seeding::derive(self.seed, "crossval"),
        }
    }
}
