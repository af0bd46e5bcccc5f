//! The `rmtbvqa` command line: each subcommand is one pipeline stage and
//! writes `run.json` (resolved config, seed, version, arguments) into its
//! output directory before doing any work.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rmtbvqa::autograd::Fault;
use rmtbvqa::config::RunConfig;
use rmtbvqa::encoder::Encoder;
use rmtbvqa::pipeline::{self, MANIFEST};
use rmtbvqa::trainer::{self, FitInputs, TrainingPool};
use rmtbvqa::{checkpoint, crossval, labels, manifest, proxy, selfcheck, synth};

/// Environment variable holding the external metric command template.
pub const METRIC_ENV: &str = "RMTBVQA_METRIC_CMD";

#[derive(Debug, Parser)]
#[command(name = "rmtbvqa", version, about = "Recurrent-memory transformer BVQA pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file (flat object; unknown keys are errors).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Config override, `key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of degraded videos, references and labels.
    SynthData,
    /// Cut videos into patches with down-sampled counterparts and rotations.
    Extract {
        #[arg(long)]
        videos: PathBuf,
    },
    /// Score every full-resolution patch against its reference.
    Label {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train RMViT and the heads on a labelled manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from a training checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute one video embedding per listed video.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        videos: PathBuf,
        /// Use only the first N frames of each video.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Repeated source-split cross-validation of ridge on video embeddings.
    Evaluate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Train once per (memory tokens, segment length) cell; report final losses.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Gradient, closed-form and rank-statistic self-tests.
    Selfcheck {
        /// Corrupt the softmax backward pass to prove the check notices.
        #[arg(long)]
        inject_fault: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Extract { .. } => "extract",
            Command::Label { .. } => "label",
            Command::Train { .. } => "train",
            Command::Embed { .. } => "embed",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::Selfcheck { .. } => "selfcheck",
        }
    }
}

/// File config, then `--set`, then `--seed`, then the metric environment
/// variable (which may fill an unset command but not contradict one).
pub fn resolve_config(common: &Common, metric_env: Option<String>) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        if common.overrides.iter().any(|o| o.starts_with("seed=")) {
            bail!("--seed and --set seed=… both given");
        }
        cfg.seed = s;
    }
    if let Some(cmd) = metric_env.filter(|c| !c.trim().is_empty()) {
        match &cfg.metric_command {
            None => cfg.metric_command = Some(cmd),
            Some(c) if *c == cmd => {}
            Some(c) => bail!("metric_command `{c}` conflicts with {METRIC_ENV}=`{cmd}`"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let args: Vec<String> = std::env::args().collect();
    let body = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "args": args,
        "config": cfg,
    });
    fs::write(out.join("run.json"), serde_json::to_vec_pretty(&body)?)?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn dir_of(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).filter(|d| !d.as_os_str().is_empty()).unwrap_or_else(|| PathBuf::from("."))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common, std::env::var(METRIC_ENV).ok())?;
    let out = &cli.common.out;
    write_run_manifest(out, cli.command.name(), &cfg)?;
    match &cli.command {
        Command::SynthData => synth_data(&cfg, out),
        Command::Extract { videos } => extract(&cfg, videos, out),
        Command::Label { manifest } => label(&cfg, manifest, out),
        Command::Train { manifest, resume } => train(&cfg, manifest, resume.as_deref(), out).map(|_| ()),
        Command::Embed { checkpoint, videos, frames } => embed(&cfg, checkpoint, videos, *frames, out),
        Command::Evaluate { embeddings, labels, repeats } => evaluate(&cfg, embeddings, labels, *repeats, out),
        Command::Sweep { manifest } => sweep(&cfg, manifest, out),
        Command::Selfcheck { inject_fault } => self_check(*inject_fault, out),
    }
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = synth::generate_corpus(&cfg.synth(), cfg.seed, out)?;
    ensure!(rmtbvqa::video::read_video_list(&corpus.video_list)?.len() == corpus.entries.len());
    ensure!(labels::read_labels(&corpus.labels)?.len() == corpus.label_rows.len());
    println!("wrote {} videos to {}", corpus.entries.len(), out.display());
    Ok(())
}

fn extract(cfg: &RunConfig, videos: &Path, out: &Path) -> Result<()> {
    let m = pipeline::extract_dataset(videos, out, &cfg.extract())?;
    let back = manifest::read(&out.join(MANIFEST))?;
    back.validate()?;
    back.validate_files(out)?;
    ensure!(back == m, "manifest did not round-trip");
    println!("wrote {} patches to {}", m.rows.len(), out.display());
    Ok(())
}

fn label(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let src = dir_of(manifest_path);
    let m = manifest::read(manifest_path)?;
    let mut labelled = proxy::label_manifest(&m, &src, &cfg.metric(), cfg.workers)?;
    let same_dir = fs::canonicalize(&src)? == fs::canonicalize(out)?;
    if !same_dir {
        let abs = fs::canonicalize(&src)?;
        for r in &mut labelled.rows {
            r.path = abs.join(&r.path);
        }
    }
    let dest = out.join(MANIFEST);
    manifest::write(&dest, &labelled)?;
    let back = manifest::read(&dest)?;
    ensure!(pipeline::unscored(&back) == 0, "some full-resolution patches are unscored");
    println!("scored {} patches with {}", back.rows.len(), cfg.metric);
    Ok(())
}

/// Loads the manifest, builds (or reuses) the patch embedding cache in
/// `cache`, and returns what `fit` needs.
fn training_inputs(
    cfg: &RunConfig,
    manifest_path: &Path,
    cache: &Path,
) -> Result<(manifest::Manifest, HashMap<String, rmtbvqa::Tensor>, Encoder)> {
    let m = manifest::read(manifest_path)?;
    if let Some(metric) = m.meta.get("metric") {
        if *metric != cfg.metric {
            return Err(rmtbvqa::Error::MetricMismatch(metric.clone(), cfg.metric.clone()).into());
        }
    }
    let enc = Encoder::new(&cfg.encoder_spec())?;
    let pool = TrainingPool::from_manifest(&m)?;
    let emb = pipeline::patch_embeddings(&m, &dir_of(manifest_path), pool.patch_ids(), &enc, cache)?;
    Ok((m, emb, enc))
}

pub fn train(cfg: &RunConfig, manifest_path: &Path, resume: Option<&Path>, out: &Path) -> Result<trainer::FitOutcome> {
    let (m, emb, enc) = training_inputs(cfg, manifest_path, &out.join("patch_embeddings"))?;
    let state = match resume {
        Some(dir) => {
            let (state, meta) = trainer::resume_state(dir)?;
            ensure!(meta.model == cfg.model(), "checkpoint model config differs from the run config");
            ensure!(meta.encoder_fingerprint == enc.fingerprint(), "checkpoint was trained with a different encoder");
            Some(state)
        }
        None => None,
    };
    let (model, train) = (cfg.model(), cfg.train());
    let inputs = FitInputs {
        manifest: &m,
        embeddings: &emb,
        encoder: &enc,
        model: &model,
        train: &train,
        threshold: cfg.threshold,
    };
    let outcome = trainer::fit(&inputs, out, state)?;
    checkpoint::load(&outcome.checkpoint)?;
    let final_loss = outcome.curve.last().map(|p| p.loss);
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "steps": outcome.curve.len(),
            "final_step_loss": final_loss,
            "epoch_losses": outcome.epoch_losses,
            "content_skipped_steps": outcome.content_skipped_steps,
            "quality_skipped_anchors": outcome.quality_skipped_anchors,
            "encoder_fingerprint": enc.fingerprint(),
        }),
    )?;
    println!("trained {} steps; checkpoint in {}", outcome.curve.len(), outcome.checkpoint.display());
    Ok(outcome)
}

fn embed(cfg: &RunConfig, ck_dir: &Path, videos: &Path, frames: Option<usize>, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ck_dir)?;
    let spec = ck.meta.encoder.clone().unwrap_or_else(|| cfg.encoder_spec());
    let enc = Encoder::new(&spec)?;
    ensure!(enc.fingerprint() == ck.meta.encoder_fingerprint, "encoder does not match the checkpoint's");
    let vectors = pipeline::embed_videos(videos, &enc, &ck.meta.model, &ck.params, frames)?;
    pipeline::write_hv(out, &vectors)?;
    let back = pipeline::read_hv(out)?;
    ensure!(back.len() == vectors.len(), "duplicate video ids in the list");
    println!("embedded {} videos ({}-d)", vectors.len(), ck.meta.model.dim);
    Ok(())
}

fn evaluate(cfg: &RunConfig, emb_dir: &Path, labels_path: &Path, repeats: Option<usize>, out: &Path) -> Result<()> {
    let hv = pipeline::read_hv(emb_dir)?;
    let rows = labels::read_labels(labels_path)?;
    let videos = pipeline::join_labels(&rows, &hv)?;
    let mut cv = cfg.crossval();
    if let Some(r) = repeats {
        cv.repeats = r;
    }
    let report = crossval::cross_validate(&videos, &cv)?;
    crossval::write_folds_csv(&out.join("folds.csv"), &report)?;
    crossval::write_summary_csv(&out.join("summary.csv"), &report)?;
    let table = crossval::summary_table(&report);
    fs::write(out.join("summary.txt"), &table)?;
    write_json(&out.join("report.json"), &serde_json::to_value(&report)?)?;
    let overall = report.folds.iter().filter(|f| f.mode == "overall").count();
    ensure!(overall == cv.folds * cv.repeats, "expected {} overall fold entries, got {overall}", cv.folds * cv.repeats);
    print!("{table}");
    Ok(())
}

fn sweep(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    ensure!(!cfg.sweep_memory_tokens.is_empty() && !cfg.sweep_segment_lens.is_empty(), "empty sweep grid");
    let (m, emb, enc) = training_inputs(cfg, manifest_path, &out.join("patch_embeddings"))?;
    let train = cfg.train();
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["memory_tokens", "segment_len", "final_loss", "steps"])?;
    for &mt in &cfg.sweep_memory_tokens {
        for &n in &cfg.sweep_segment_lens {
            let model = rmtbvqa::rmvit::RmvitConfig { memory_tokens: mt, segment_len: n, ..cfg.model() };
            let inputs = FitInputs {
                manifest: &m,
                embeddings: &emb,
                encoder: &enc,
                model: &model,
                train: &train,
                threshold: cfg.threshold,
            };
            let cell = out.join("cells").join(format!("m{mt}_n{n}"));
            let o = trainer::fit(&inputs, &cell, None)?;
            let last = *o.epoch_losses.last().expect("at least one epoch");
            println!("M={mt} N={n}: final epoch loss {last:.6}");
            w.write_record([mt.to_string(), n.to_string(), format!("{last:.9}"), o.curve.len().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn self_check(inject_fault: bool, out: &Path) -> Result<()> {
    let fault = inject_fault.then_some(Fault::SoftmaxGradScale(1.5));
    let results = selfcheck::run_all(fault);
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    write_json(
        &out.join("selfcheck.json"),
        &json!(results
            .iter()
            .map(|r| json!({"name": r.name, "passed": r.passed, "detail": r.detail}))
            .collect::<Vec<_>>()),
    )?;
    ensure!(failed == 0, "{failed} self-check(s) failed");
    Ok(())
}
