//! Repeated k-fold cross-validation of ridge on frozen video embeddings,
//! with folds split by source so no content appears on both sides.
//!
//! Each repeat draws a fresh source split. Within a training fold, α is
//! picked from the grid by an inner source-split validation (lowest pooled
//! squared error). Per-subset numbers are reported two ways:
//!
//! * `filtered` — the overall model's test-fold predictions, restricted to
//!   the subset's videos;
//! * `local` — a separate cross-validation run on the subset alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ridge::{ridge_fit, RidgeModel, ALPHA_GRID};
use crate::seeding;
use crate::stats::{mean, plcc, srcc, std_dev};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledVideo {
    pub video_id: String,
    pub source_id: String,
    pub subset_tag: String,
    pub embedding: Vec<f64>,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValConfig {
    pub folds: usize,
    pub repeats: usize,
    pub inner_folds: usize,
    pub alpha_grid: Vec<f64>,
    pub fit_intercept: bool,
    pub seed: u64,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        Self { folds: 5, repeats: 100, inner_folds: 4, alpha_grid: ALPHA_GRID.to_vec(), fit_intercept: true, seed: 0 }
    }
}

/// Video indices per fold. Sources are sorted, shuffled with `seed` and
/// dealt round-robin, so every source lands in exactly one fold.
pub fn split_by_source(videos: &[LabeledVideo], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut sources: Vec<&str> =
        videos.iter().map(|v| v.source_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 folds, got {k}")));
    }
    if sources.len() < k {
        return Err(Error::Insufficient(format!("{} sources for {k} folds", sources.len())));
    }
    sources.shuffle(&mut seeding::rng(seed, "source-split"));
    let fold_of: BTreeMap<&str, usize> = sources.iter().enumerate().map(|(i, s)| (*s, i % k)).collect();
    let mut folds = vec![Vec::new(); k];
    for (i, v) in videos.iter().enumerate() {
        folds[fold_of[v.source_id.as_str()]].push(i);
    }
    Ok(folds)
}

fn fit(videos: &[LabeledVideo], idx: &[usize], alpha: f64, intercept: bool) -> Result<RidgeModel> {
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| videos[i].embedding.clone()).collect();
    let y: Vec<f64> = idx.iter().map(|&i| videos[i].mos).collect();
    ridge_fit(&xs, &y, alpha, intercept)
}

/// The grid value with the lowest pooled out-of-fold squared error on
/// `train`; ties go to the larger α. Falls back to the largest α when the
/// training set has too few sources for an inner split.
pub fn select_alpha(videos: &[LabeledVideo], train: &[usize], cfg: &CrossValConfig, seed: u64) -> Result<f64> {
    let largest = cfg.alpha_grid.iter().copied().fold(f64::NAN, f64::max);
    let subset: Vec<LabeledVideo> = train.iter().map(|&i| videos[i].clone()).collect();
    let n_sources = subset.iter().map(|v| v.source_id.as_str()).collect::<BTreeSet<_>>().len();
    let k = cfg.inner_folds.min(n_sources);
    if k < 2 || cfg.alpha_grid.len() == 1 {
        return Ok(largest);
    }
    let inner = split_by_source(&subset, k, seed)?;
    let mut best = (f64::INFINITY, largest);
    for &alpha in &cfg.alpha_grid {
        let mut sse = 0.0;
        for (f, test) in inner.iter().enumerate() {
            let tr: Vec<usize> =
                inner.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.clone()).collect();
            let Ok(m) = fit(&subset, &tr, alpha, cfg.fit_intercept) else {
                sse = f64::INFINITY;
                break;
            };
            sse += test.iter().map(|&i| (m.predict_one(&subset[i].embedding) - subset[i].mos).powi(2)).sum::<f64>();
        }
        if sse < best.0 || (sse == best.0 && alpha > best.1) {
            best = (sse, alpha);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub mode: String,
    pub subset: String,
    pub repeat: usize,
    pub fold: usize,
    pub split_seed: u64,
    pub n_test: usize,
    pub alpha: f64,
    /// `None` when the fold's scores or predictions are constant.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub subset: String,
    pub folds_used: usize,
    pub folds_undefined: usize,
    pub srcc_mean: f64,
    pub srcc_sd: f64,
    pub plcc_mean: f64,
    pub plcc_sd: f64,
    /// Mean over repeats of SRCC computed on all out-of-fold predictions.
    pub pooled_srcc_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub config: CrossValConfig,
    pub split_seeds: Vec<u64>,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
    /// Subsets skipped in `local` mode, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl CrossValReport {
    pub fn summary_for(&self, mode: &str, subset: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.mode == mode && r.subset == subset)
    }

    pub fn overall(&self) -> Option<&SummaryRow> {
        self.summary_for("overall", "all")
    }
}

fn correlations(pred: &[f64], mos: &[f64]) -> (Option<f64>, Option<f64>) {
    (srcc(pred, mos).ok(), plcc(pred, mos).ok())
}

struct Run {
    folds: Vec<FoldResult>,
    /// Out-of-fold predictions per repeat, indexed like `videos`.
    oof: Vec<Vec<f64>>,
}

fn run(videos: &[LabeledVideo], cfg: &CrossValConfig, seeds: &[u64], mode: &str, subset: &str) -> Result<Run> {
    let mut folds = Vec::new();
    let mut oof = Vec::new();
    for (r, &seed) in seeds.iter().enumerate() {
        let split = split_by_source(videos, cfg.folds, seed)?;
        let mut pred = vec![f64::NAN; videos.len()];
        for (f, test) in split.iter().enumerate() {
            let train: Vec<usize> =
                split.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.clone()).collect();
            let alpha = select_alpha(videos, &train, cfg, seeding::derive(seed, &format!("inner-{f}")))?;
            let model = fit(videos, &train, alpha, cfg.fit_intercept)?;
            let p: Vec<f64> = test.iter().map(|&i| model.predict_one(&videos[i].embedding)).collect();
            let m: Vec<f64> = test.iter().map(|&i| videos[i].mos).collect();
            for (&i, &v) in test.iter().zip(&p) {
                pred[i] = v;
            }
            let (s, pl) = correlations(&p, &m);
            folds.push(FoldResult {
                mode: mode.into(),
                subset: subset.into(),
                repeat: r,
                fold: f,
                split_seed: seed,
                n_test: test.len(),
                alpha,
                srcc: s,
                plcc: pl,
            });
        }
        oof.push(pred);
    }
    Ok(Run { folds, oof })
}

fn summarise(mode: &str, subset: &str, folds: &[FoldResult], pooled: &[f64]) -> SummaryRow {
    let s: Vec<f64> = folds.iter().filter_map(|f| f.srcc).collect();
    let p: Vec<f64> = folds.iter().filter_map(|f| f.plcc).collect();
    let or_nan = |v: &[f64], f: fn(&[f64]) -> f64| if v.is_empty() { f64::NAN } else { f(v) };
    SummaryRow {
        mode: mode.into(),
        subset: subset.into(),
        folds_used: s.len(),
        folds_undefined: folds.len() - s.len(),
        srcc_mean: or_nan(&s, mean),
        srcc_sd: or_nan(&s, std_dev),
        plcc_mean: or_nan(&p, mean),
        plcc_sd: or_nan(&p, std_dev),
        pooled_srcc_mean: or_nan(pooled, mean),
    }
}

/// Runs the whole protocol. The embeddings are inputs only: nothing but the
/// ridge weights is fitted.
pub fn cross_validate(videos: &[LabeledVideo], cfg: &CrossValConfig) -> Result<CrossValReport> {
    if cfg.repeats == 0 || cfg.alpha_grid.is_empty() || cfg.alpha_grid.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Config("cross-validation needs repeats ≥ 1 and a non-negative alpha grid".into()));
    }
    if videos.iter().any(|v| !v.mos.is_finite()) {
        return Err(Error::NonFinite("mos"));
    }
    let seeds: Vec<u64> = (0..cfg.repeats).map(|r| seeding::derive(cfg.seed, &format!("repeat-{r}"))).collect();
    let overall = run(videos, cfg, &seeds, "overall", "all")?;
    let mos: Vec<f64> = videos.iter().map(|v| v.mos).collect();
    let pooled_all: Vec<f64> = overall.oof.iter().filter_map(|p| srcc(p, &mos).ok()).collect();

    let mut folds = overall.folds.clone();
    let mut summary = vec![summarise("overall", "all", &overall.folds, &pooled_all)];
    let mut skipped = Vec::new();
    let subsets: BTreeSet<&str> = videos.iter().map(|v| v.subset_tag.as_str()).collect();
    if subsets.len() > 1 {
        for tag in subsets {
            let members: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].subset_tag == tag).collect();

            // Overall splits, filtered to this subset.
            let mut filtered = Vec::new();
            let mut pooled = Vec::new();
            for (r, &seed) in seeds.iter().enumerate() {
                let split = split_by_source(videos, cfg.folds, seed)?;
                for (f, test) in split.iter().enumerate() {
                    let ids: Vec<usize> = test.iter().copied().filter(|i| videos[*i].subset_tag == tag).collect();
                    let p: Vec<f64> = ids.iter().map(|&i| overall.oof[r][i]).collect();
                    let m: Vec<f64> = ids.iter().map(|&i| videos[i].mos).collect();
                    let (s, pl) = correlations(&p, &m);
                    let base = &overall.folds[r * cfg.folds + f];
                    filtered.push(FoldResult {
                        mode: "filtered".into(),
                        subset: tag.into(),
                        n_test: ids.len(),
                        srcc: s,
                        plcc: pl,
                        ..base.clone()
                    });
                }
                let p: Vec<f64> = members.iter().map(|&i| overall.oof[r][i]).collect();
                let m: Vec<f64> = members.iter().map(|&i| videos[i].mos).collect();
                pooled.extend(srcc(&p, &m).ok());
            }
            summary.push(summarise("filtered", tag, &filtered, &pooled));
            folds.extend(filtered);

            // Independent cross-validation on the subset alone.
            let local: Vec<LabeledVideo> = members.iter().map(|&i| videos[i].clone()).collect();
            match run(&local, cfg, &seeds, "local", tag) {
                Ok(lr) => {
                    let lm: Vec<f64> = local.iter().map(|v| v.mos).collect();
                    let pooled: Vec<f64> = lr.oof.iter().filter_map(|p| srcc(p, &lm).ok()).collect();
                    summary.push(summarise("local", tag, &lr.folds, &pooled));
                    folds.extend(lr.folds);
                }
                Err(Error::Insufficient(msg)) => skipped.push((tag.to_string(), msg)),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(CrossValReport { config: cfg.clone(), split_seeds: seeds, folds, summary, skipped })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_folds_csv(path: &Path, r: &CrossValReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "subset", "repeat", "fold", "split_seed", "n_test", "alpha", "srcc", "plcc"])?;
    for f in &r.folds {
        w.write_record([
            f.mode.clone(),
            f.subset.clone(),
            f.repeat.to_string(),
            f.fold.to_string(),
            f.split_seed.to_string(),
            f.n_test.to_string(),
            f.alpha.to_string(),
            fmt_opt(f.srcc),
            fmt_opt(f.plcc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, r: &CrossValReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in &r.summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table of the summary rows.
pub fn summary_table(r: &CrossValReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<9} {:<12} {:>6} {:>17} {:>17} {:>11}",
        "mode", "subset", "folds", "SRCC mean±sd", "PLCC mean±sd", "pooled SRCC"
    );
    for s in &r.summary {
        let _ = writeln!(
            out,
            "{:<9} {:<12} {:>6} {:>8.4}±{:<8.4} {:>8.4}±{:<8.4} {:>11.4}",
            s.mode, s.subset, s.folds_used, s.srcc_mean, s.srcc_sd, s.plcc_mean, s.plcc_sd, s.pooled_srcc_mean
        );
    }
    for (tag, why) in &r.skipped {
        let _ = writeln!(out, "local/{tag} skipped: {why}");
    }
    out
}
