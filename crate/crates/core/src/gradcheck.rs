//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{Bound, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, rel_tol: 1e-2, abs_tol: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub failures: Vec<GradMismatch>,
    /// Parameters whose analytic gradient was identically zero.
    pub zero_grad_params: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn agrees(analytic: f64, numeric: f64, cfg: &GradCheckConfig) -> bool {
    let err = (analytic - numeric).abs();
    err <= cfg.abs_tol || err <= cfg.rel_tol * analytic.abs().max(numeric.abs())
}

/// Checks every element of every parameter in `params`.
///
/// `loss` builds a scalar on a fresh graph from bound parameters; it is run
/// once with trainable leaves for the analytic gradient and twice per
/// element with constant leaves for the central difference.
pub fn check_params<F>(params: &ParamStore, loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    check_params_with(params, &loss, |_| {}, cfg)
}

/// Like [`check_params`], with a hook to configure the analytic graph.
pub fn check_params_with<F, H>(
    params: &ParamStore,
    loss: &F,
    setup: H,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
    H: FnOnce(&mut Graph),
{
    let mut g = Graph::new();
    setup(&mut g);
    let bound = params.bind(&mut g, true);
    let l = loss(&mut g, &bound)?;
    let grads = g.backward(l)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let l = loss(&mut g, &b)?;
        Ok(g.value(l).scalar())
    };

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let var = bound.var(&name)?;
        let n = params.get(&name)?.numel();
        let analytic: Vec<f64> = grads.get(var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        if analytic.iter().all(|&v| v == 0.0) {
            report.zero_grad_params.push(name.clone());
        }
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            let plus = orig + cfg.step;
            let minus = orig - cfg.step;
            probe.get_mut(&name)?.data_mut()[i] = plus;
            let lp = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = minus;
            let lm = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (lp - lm) / f64::from(plus - minus);
            let a = analytic[i];
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if !agrees(a, numeric, cfg) {
                report.failures.push(GradMismatch { param: name.clone(), index: i, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}
