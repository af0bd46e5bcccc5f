//! Contrastive training of RMViT and both heads on cached frame embeddings.
//!
//! An epoch is one pass over the full-resolution enhanced patches in a
//! seeded random order, `B` at a time (a trailing partial batch is
//! dropped). Each batch is completed with the `B` down-sampled counterparts
//! and takes exactly one SGD-with-momentum step. The learning rate follows
//! [`lr_at`] per step.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::{BatchAnnotations, LossWeights};
use crate::manifest::Manifest;
use crate::model;
use crate::nn::ParamStore;
use crate::rmvit::RmvitConfig;
use crate::schedule::lr_at;
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 30,
            base_lr: 0.01,
            warmup_epochs: 3.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            lambda1: 1.0,
            tau: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if self.epochs == 0 || !(self.warmup_epochs >= 0.0) || self.warmup_epochs >= self.epochs as f64 {
            return bad(format!("need 0 ≤ warmup_epochs < epochs, got {} and {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and ≥ 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay ≥ 0".into());
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { tau: self.tau, lambda1: self.lambda1 }
    }

    pub fn lr(&self, epoch_frac: f64) -> f64 {
        lr_at(epoch_frac, self.base_lr, self.warmup_epochs, self.epochs as f64)
    }
}

/// One trainable anchor: a labelled full patch and its down counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolItem {
    pub full_id: String,
    pub down_id: String,
    pub source_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingPool {
    pub items: Vec<PoolItem>,
}

impl TrainingPool {
    /// Every enhanced full row, which must be scored and have a down row.
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let mut down: HashMap<&str, &str> = HashMap::new();
        for r in &m.rows {
            if r.resolution == crate::patch::Resolution::Down {
                if let Some(parent) = &r.reference_link {
                    down.insert(parent, &r.patch_id);
                }
            }
        }
        let items = m
            .full_enhanced()
            .map(|r| {
                Ok(PoolItem {
                    full_id: r.patch_id.clone(),
                    down_id: down
                        .get(r.patch_id.as_str())
                        .ok_or_else(|| Error::MissingReference(format!("{} has no down counterpart", r.patch_id)))?
                        .to_string(),
                    source_id: r.source_id.clone(),
                    score: r.proxy_score.ok_or_else(|| {
                        Error::Invalid(format!("patch `{}` has no proxy score; run label", r.patch_id))
                    })?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Every patch id training reads, full and down.
    pub fn patch_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().flat_map(|i| [i.full_id.as_str(), i.down_id.as_str()])
    }
}

/// Ids of a `2B` batch (full items then their counterparts, in order) and
/// the annotations the loss needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub ann: BatchAnnotations,
}

pub fn build_batch(pool: &TrainingPool, indices: &[usize]) -> Result<Batch> {
    let items: Vec<&PoolItem> = indices
        .iter()
        .map(|&i| pool.items.get(i).ok_or_else(|| Error::Invalid(format!("pool index {i} out of range"))))
        .collect::<Result<_>>()?;
    let ids = items.iter().map(|p| p.full_id.clone()).chain(items.iter().map(|p| p.down_id.clone())).collect();
    let ann = BatchAnnotations::new(
        items.iter().map(|p| p.source_id.clone()).collect(),
        items.iter().map(|p| p.score).collect(),
    )?;
    Ok(Batch { ids, ann })
}

/// `B` distinct anchors drawn uniformly.
pub fn sample_batch<R: Rng + ?Sized>(pool: &TrainingPool, b: usize, rng: &mut R) -> Result<Batch> {
    if pool.len() < b {
        return Err(Error::Insufficient(format!("{} full patches for a batch of {b}", pool.len())));
    }
    build_batch(pool, &rand::seq::index::sample(rng, pool.len(), b).into_vec())
}

/// The anchor order of one epoch, chunked into batches of `b`.
pub fn epoch_batches(pool_len: usize, b: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if pool_len < b {
        return Err(Error::Insufficient(format!("{pool_len} full patches for a batch of {b}")));
    }
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(&mut seeding::rng(seed, &format!("epoch-{epoch}")));
    Ok(order.chunks_exact(b).map(<[usize]>::to_vec).collect())
}

/// Everything needed to continue training exactly where it stopped. The
/// shuffling stream of each epoch is derived from `(seed, epoch)`, so the
/// epoch counter doubles as the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub best_loss: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl TrainState {
    pub fn new(model_cfg: &RmvitConfig, seed: u64) -> Result<Self> {
        let params = model::init_params(model_cfg, seed)?;
        let mut momentum = ParamStore::new();
        for (k, t) in params.iter() {
            momentum.insert(k.clone(), Tensor::zeros(t.shape()));
        }
        Ok(Self { epoch: 0, step: 0, params, momentum, best_loss: None, curve: Vec::new() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub quality_skipped: usize,
    /// True when the batch had no content anchors and only the quality term
    /// was optimised.
    pub content_skipped: bool,
    pub grad_norm: f64,
}

/// `v ← μv + (g + λ_wd·θ)`, `θ ← θ − lr·v`, computed in f64 and stored as
/// f32.
pub fn momentum_step(
    params: &mut [f32],
    velocity: &mut [f32],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        let m = momentum * f64::from(*v) + g + weight_decay * f64::from(*p);
        *v = m as f32;
        *p = (f64::from(*p) - lr * m) as f32;
    }
}

/// Forward, backward and one momentum-SGD update:
/// `v ← μv + (∇ + λ_wd·θ)`, `θ ← θ − lr·v`.
pub fn train_step(
    state: &mut TrainState,
    model_cfg: &RmvitConfig,
    cfg: &TrainConfig,
    threshold: f64,
    items: &[Tensor],
    ann: &BatchAnnotations,
    lr: f64,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g, true);
    let out = model::batch_loss(&mut g, model_cfg, &bound, items, ann, threshold, &cfg.weights())?;
    let loss = g.value(out.loss).scalar();
    if !loss.is_finite() {
        return Err(Error::Diverged { step: state.step, loss });
    }
    let grads = g.backward(out.loss)?;
    let mut sq = 0.0;
    for (name, var) in bound.iter() {
        let p = state.params.get_mut(name)?;
        let v = state.momentum.get_mut(name)?;
        let zeros;
        let grad = match grads.get(*var) {
            Some(gv) => gv.data(),
            None => {
                zeros = vec![0.0; p.data().len()];
                &zeros
            }
        };
        sq += grad.iter().map(|g| g * g).sum::<f64>();
        momentum_step(p.data_mut(), v.data_mut(), grad, lr, cfg.momentum, cfg.weight_decay);
    }
    state.step += 1;
    Ok(StepOutcome {
        loss,
        quality_skipped: out.quality.skipped(),
        content_skipped: out.content.is_none(),
        grad_norm: sq.sqrt(),
    })
}

pub struct FitInputs<'a> {
    pub manifest: &'a Manifest,
    /// `T × D` frame embeddings per patch id.
    pub embeddings: &'a HashMap<String, Tensor>,
    pub encoder: &'a Encoder,
    pub model: &'a RmvitConfig,
    pub train: &'a TrainConfig,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub curve: Vec<CurvePoint>,
    pub epoch_losses: Vec<f64>,
    pub content_skipped_steps: usize,
    pub quality_skipped_anchors: usize,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CURVE: &str = "loss_curve.csv";

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `loss_curve.csv` text; `origin` only labels errors.
pub fn parse_curve(text: &str, origin: &Path) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (i, r) in csv::Reader::from_reader(text.as_bytes()).deserialize().enumerate() {
        out.push(r.map_err(|e| Error::parse(origin, i + 2, e.to_string()))?);
    }
    Ok(out)
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_curve(&fs::read_to_string(path)?, path)
}

fn to_checkpoint(state: &TrainState, inputs: &FitInputs<'_>, fingerprint: &str) -> Result<Checkpoint> {
    Ok(Checkpoint {
        meta: CheckpointMeta {
            model: inputs.model.clone(),
            encoder: Some(inputs.encoder.spec().clone()),
            encoder_fingerprint: fingerprint.to_string(),
            epoch: state.epoch,
            step: state.step,
            best_loss: state.best_loss,
            params: Default::default(),
            momentum: Default::default(),
            extra: serde_json::json!({ "train": inputs.train, "threshold": inputs.threshold }),
        },
        params: state.params.clone(),
        momentum: Some(state.momentum.clone()),
    })
}

/// Restores a training checkpoint written by [`fit`], including its loss
/// history.
pub fn resume_state(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let ck = checkpoint::load(dir)?;
    let momentum = ck.momentum.ok_or_else(|| Error::Invalid("checkpoint has no optimiser state".into()))?;
    let curve = read_curve(&dir.join(LOSS_CURVE))?;
    let state = TrainState {
        epoch: ck.meta.epoch,
        step: ck.meta.step,
        params: ck.params,
        momentum,
        best_loss: ck.meta.best_loss,
        curve,
    };
    Ok((state, ck.meta))
}

fn dump_divergence(out: &Path, step: u64, lr: f64, loss: f64, ids: &[String], state: &TrainState) -> Result<PathBuf> {
    let norms: serde_json::Map<String, serde_json::Value> = state
        .params
        .iter()
        .map(|(k, t)| {
            (k.clone(), serde_json::json!(t.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()))
        })
        .collect();
    let path = out.join("diverged.json");
    let body = serde_json::json!({
        "step": step, "lr": lr, "loss": if loss.is_finite() { serde_json::json!(loss) } else { serde_json::json!(loss.to_string()) },
        "batch": ids, "param_norms": norms,
    });
    fs::write(&path, serde_json::to_vec_pretty(&body)?)?;
    Ok(path)
}

/// Trains until `train.epochs`, starting from `resume` if given. Writes the
/// checkpoint (with loss history) at every epoch end and the loss curve
/// CSV into `out`.
pub fn fit(inputs: &FitInputs<'_>, out: &Path, resume: Option<TrainState>) -> Result<FitOutcome> {
    fit_until(inputs, out, resume, inputs.train.epochs)
}

/// [`fit`] that stops after epoch `stop` (the schedule still spans
/// `train.epochs`), leaving a checkpoint a later call can resume from.
pub fn fit_until(inputs: &FitInputs<'_>, out: &Path, resume: Option<TrainState>, stop: usize) -> Result<FitOutcome> {
    let cfg = inputs.train;
    cfg.validate()?;
    inputs.model.validate()?;
    let fingerprint = inputs.encoder.fingerprint();
    if inputs.encoder.dim() != inputs.model.dim {
        return Err(Error::Config(format!(
            "encoder emits {}-d embeddings but the model is {}-d",
            inputs.encoder.dim(),
            inputs.model.dim
        )));
    }
    let pool = TrainingPool::from_manifest(inputs.manifest)?;
    for id in pool.patch_ids() {
        if !inputs.embeddings.contains_key(id) {
            return Err(Error::MissingKey(format!("embedding for `{id}`")));
        }
    }
    let steps_per_epoch = epoch_batches(pool.len(), cfg.batch_size, cfg.seed, 0)?.len();
    fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(inputs.model, cfg.seed)?,
    };
    let mut content_skipped_steps = 0;
    let mut quality_skipped_anchors = 0;
    let mut epoch_losses = Vec::new();
    while state.epoch < cfg.epochs.min(stop) {
        let batches = epoch_batches(pool.len(), cfg.batch_size, cfg.seed, state.epoch)?;
        let mut sum = 0.0;
        for (k, idx) in batches.iter().enumerate() {
            let batch = build_batch(&pool, idx)?;
            let items: Vec<Tensor> = batch.ids.iter().map(|id| inputs.embeddings[id].clone()).collect();
            let epoch_frac = state.epoch as f64 + k as f64 / steps_per_epoch as f64;
            let lr = cfg.lr(epoch_frac);
            let step = state.step;
            let o = match train_step(&mut state, inputs.model, cfg, inputs.threshold, &items, &batch.ann, lr) {
                Ok(o) => o,
                Err(e @ (Error::Diverged { .. } | Error::NonFinite(_))) => {
                    let loss = if let Error::Diverged { loss, .. } = e { loss } else { f64::NAN };
                    let dump = dump_divergence(out, step, lr, loss, &batch.ids, &state)?;
                    log::error!("training diverged at step {step} ({e}); diagnostics in {}", dump.display());
                    return Err(Error::Diverged { step, loss });
                }
                Err(e) => return Err(e),
            };
            content_skipped_steps += usize::from(o.content_skipped);
            quality_skipped_anchors += o.quality_skipped;
            sum += o.loss;
            state.curve.push(CurvePoint { step, epoch: epoch_frac, lr, loss: o.loss });
        }
        let mean = sum / batches.len() as f64;
        epoch_losses.push(mean);
        state.best_loss = Some(state.best_loss.map_or(mean, |b: f64| b.min(mean)));
        state.epoch += 1;
        log::info!("epoch {}/{} mean loss {mean:.6}", state.epoch, cfg.epochs);

        let ck_dir = out.join(CHECKPOINT_DIR);
        checkpoint::save(&ck_dir, &to_checkpoint(&state, inputs, &fingerprint)?)?;
        write_curve(&ck_dir.join(LOSS_CURVE), &state.curve)?;
        write_curve(&out.join(LOSS_CURVE), &state.curve)?;
    }
    if inputs.encoder.fingerprint() != fingerprint {
        return Err(Error::Invalid("encoder weights changed during training".into()));
    }
    if state.curve.is_empty() {
        return Err(Error::Invalid("no training steps were taken".into()));
    }
    Ok(FitOutcome {
        checkpoint: out.join(CHECKPOINT_DIR),
        loss_curve: out.join(LOSS_CURVE),
        curve: state.curve,
        epoch_losses,
        content_skipped_steps,
        quality_skipped_anchors,
    })
}
