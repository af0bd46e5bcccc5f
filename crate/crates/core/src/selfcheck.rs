//! Fast internal consistency checks: gradients against finite differences,
//! loss closed forms, rank statistics against brute force and the learning
//! rate schedule. Used by the `selfcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Fault, Graph};
use crate::error::Result;
use crate::gradcheck::{check_params_with, GradCheckConfig};
use crate::loss::{self, BatchAnnotations, LossWeights};
use crate::model;
use crate::rmvit::RmvitConfig;
use crate::schedule::lr_at;
use crate::stats;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// FD check of the full batch loss on a tiny model. `fault` corrupts the
/// analytic backward pass, which this check must catch.
pub fn gradients(fault: Option<Fault>) -> Result<CheckResult> {
    let cfg =
        RmvitConfig { dim: 8, memory_tokens: 2, segment_len: 2, depth: 1, heads: 2, ffn_mult: 2, ..Default::default() };
    let params = model::init_params(&cfg, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items: Vec<Tensor> = (0..4)
        .map(|_| Tensor::matrix(4, cfg.dim, (0..4 * cfg.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect::<Result<_>>()?;
    let ann = BatchAnnotations::new(vec!["a".into(), "a".into()], vec![30.0, 40.0])?;
    let weights = LossWeights::default();
    let loss =
        |g: &mut Graph, p: &crate::nn::Bound| Ok(model::batch_loss(g, &cfg, p, &items, &ann, 3.0, &weights)?.loss);
    let report = check_params_with(
        &params,
        &loss,
        |g| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
        },
        &GradCheckConfig::default(),
    )?;
    Ok(result(
        "gradients",
        report.passed(),
        format!(
            "{} elements, {} mismatches, max |err| {:.2e}",
            report.checked,
            report.failures.len(),
            report.max_abs_err
        ),
    ))
}

/// All-identical representations: quality loss `log(2B−1)`, content loss
/// `log(B−1)`.
pub fn closed_forms() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for b in 2..=4usize {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2 * b, 3, vec![1.0; 6 * b])?);
        let ann = BatchAnnotations::new(vec!["s".into(); b], (0..b).map(|i| 100.0 * i as f64).collect())?;
        let q = loss::quality_loss(&mut g, z, &ann.quality_positives(1.0), 0.1)?;
        for v in q.values(&g).into_iter().flatten() {
            worst = worst.max((v - ((2 * b - 1) as f64).ln()).abs());
        }
        let c = g.constant(Tensor::matrix(b, 3, vec![1.0; 3 * b])?);
        let ch = g.constant(Tensor::matrix(b, 3, vec![1.0; 3 * b])?);
        let t = loss::content_loss(&mut g, c, ch, &ann.content_positives(), 0.1)?;
        for v in t.values(&g).into_iter().flatten() {
            worst = worst.max((v - ((b - 1) as f64).ln()).abs());
        }
    }
    Ok(result("loss closed forms", worst < 1e-5, format!("max deviation {worst:.2e}")))
}

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (saa, sbb) = (a.iter().map(|x| x * x).sum::<f64>(), b.iter().map(|x| x * x).sum::<f64>());
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

pub fn rank_statistics() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(3..20);
        // integer draws make ties common
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6))).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (Ok(s), Ok(p)) = (stats::srcc(&a, &b), stats::plcc(&a, &b)) else { continue };
        worst = worst.max((s - brute_pearson(&brute_ranks(&a), &brute_ranks(&b))).abs());
        worst = worst.max((p - brute_pearson(&a, &b)).abs());
    }
    Ok(result("rank statistics", worst < 1e-9, format!("max deviation {worst:.2e}")))
}

pub fn schedule() -> CheckResult {
    let (base, w, e) = (0.00025, 10.0, 150.0);
    let ok = lr_at(0.0, base, w, e) == 0.0
        && lr_at(w, base, w, e) == base
        && lr_at(e, base, w, e) < 1e-9 * base
        && (lr_at(w - 1e-9, base, w, e) - lr_at(w + 1e-9, base, w, e)).abs() < 1e-12;
    result(
        "lr schedule",
        ok,
        format!("lr(0)={}, lr(w)={}, lr(E)={:e}", lr_at(0.0, base, w, e), lr_at(w, base, w, e), lr_at(e, base, w, e)),
    )
}

/// Runs every check; a check that errors counts as failed.
pub fn run_all(fault: Option<Fault>) -> Vec<CheckResult> {
    let wrap = |name: &'static str, r: Result<CheckResult>| r.unwrap_or_else(|e| result(name, false, e.to_string()));
    vec![
        wrap("gradients", gradients(fault)),
        wrap("loss closed forms", closed_forms()),
        wrap("rank statistics", rank_statistics()),
        schedule(),
    ]
}
