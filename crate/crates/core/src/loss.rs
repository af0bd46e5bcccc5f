//! Quality-aware and content-aware InfoNCE losses and their combination.
//!
//! A batch holds `2B` items: rows `0..B` are full-resolution patches, row
//! `B + i` is the down-sampled counterpart of row `i`. Only full-resolution
//! rows act as anchors.
//!
//! Quality loss for anchor `i` with positive set `P_i`:
//!
//! ```text
//! L_i = -1/|P_i| Σ_{j∈P_i} log( exp(φ(z_i,z_j)/τ) / Σ_{k≠i, k<2B} exp(φ(z_i,z_k)/τ) )
//! ```
//!
//! Content loss for anchor `i` with same-source set `C_i ⊆ 0..B \ {i}`:
//!
//! ```text
//! L_i = -1/|C_i| Σ_{j∈C_i} log( (e(c_i,c_j) + e(c_i,ĉ_j)) / Σ_{k≠i, k<B} (e(c_i,c_k) + e(c_i,ĉ_k)) )
//! ```
//!
//! with `e(a,b) = exp(φ(a,b)/τ)` and `φ` the cosine similarity. Anchors
//! with an empty positive set are skipped rather than counted as zero.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tau: 0.1, lambda1: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be finite and ≥ 0, got {}", self.lambda1)));
        }
        Ok(())
    }
}

/// Per-item labels of a `2B` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchAnnotations {
    /// Source of each full-resolution item; counterparts share it.
    pub sources: Vec<String>,
    /// Proxy score of each full-resolution item; counterparts inherit it.
    pub scores: Vec<f64>,
}

impl BatchAnnotations {
    pub fn new(sources: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if sources.len() != scores.len() {
            return Err(Error::Shape(format!("{} sources vs {} scores", sources.len(), scores.len())));
        }
        if sources.len() < 2 {
            return Err(Error::Invalid("a batch needs at least two full-resolution items".into()));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("non-finite proxy score {s}")));
        }
        Ok(Self { sources, scores })
    }

    /// `B`, the number of full-resolution items.
    pub fn full(&self) -> usize {
        self.sources.len()
    }

    /// `2B`.
    pub fn len(&self) -> usize {
        2 * self.full()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counterpart(&self, i: usize) -> usize {
        let b = self.full();
        if i < b {
            i + b
        } else {
            i - b
        }
    }

    pub fn score(&self, i: usize) -> f64 {
        self.scores[i % self.full()]
    }

    pub fn source(&self, i: usize) -> &str {
        &self.sources[i % self.full()]
    }

    /// Quality positives of each anchor: its counterpart, plus every other
    /// item (either resolution) whose score is within `threshold`.
    pub fn quality_positives(&self, threshold: f64) -> Vec<Vec<usize>> {
        (0..self.full())
            .map(|i| {
                (0..self.len())
                    .filter(|&j| {
                        j != i && (j == self.counterpart(i) || (self.score(i) - self.score(j)).abs() <= threshold)
                    })
                    .collect()
            })
            .collect()
    }

    /// Content positives of each anchor: other full-resolution items cut
    /// from the same source.
    pub fn content_positives(&self) -> Vec<Vec<usize>> {
        (0..self.full())
            .map(|i| (0..self.full()).filter(|&j| j != i && self.sources[j] == self.sources[i]).collect())
            .collect()
    }
}

/// Per-anchor loss values on the graph.
#[derive(Clone, Debug)]
pub struct LossTerm {
    /// `B × 1`; skipped anchors hold 0.
    pub per_anchor: Var,
    pub active: Vec<bool>,
}

impl LossTerm {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn skipped(&self) -> usize {
        self.active.len() - self.active_count()
    }

    /// Per-anchor values, `None` for skipped anchors.
    pub fn values(&self, g: &Graph) -> Vec<Option<f64>> {
        let v = g.value(self.per_anchor).data();
        self.active.iter().zip(v).map(|(&a, &x)| a.then_some(x)).collect()
    }

    /// Mean over active anchors.
    pub fn mean(&self, g: &mut Graph) -> Result<Var> {
        let n = self.active_count();
        if n == 0 {
            return Err(Error::AllAnchorsSkipped("loss"));
        }
        let w = self.active.iter().map(|&a| if a { 1.0 / n as f64 } else { 0.0 }).collect();
        g.weighted_sum(self.per_anchor, w)
    }
}

fn positive_weights(positives: &[Vec<usize>], width: usize) -> (Vec<f64>, Vec<bool>) {
    let mut w = vec![0.0; positives.len() * width];
    let mut active = Vec::with_capacity(positives.len());
    for (i, set) in positives.iter().enumerate() {
        active.push(!set.is_empty());
        for &j in set {
            w[i * width + j] = -1.0 / set.len() as f64;
        }
    }
    (w, active)
}

/// Quality-aware loss over `z` (`2B × d`) with anchor positive sets from
/// [`BatchAnnotations::quality_positives`].
pub fn quality_loss(g: &mut Graph, z: Var, positives: &[Vec<usize>], tau: f64) -> Result<LossTerm> {
    let n = g.value(z).rows();
    let b = positives.len();
    if n != 2 * b {
        return Err(Error::Shape(format!("{n} quality representations for {b} anchors")));
    }
    if positives.iter().flatten().any(|&j| j >= n) {
        return Err(Error::Invalid("positive index out of range".into()));
    }
    if positives.iter().enumerate().any(|(i, s)| s.contains(&i)) {
        return Err(Error::Invalid("an anchor cannot be its own positive".into()));
    }
    let zn = g.l2_normalize_rows(z)?;
    let anchors = g.slice_rows(zn, 0, b)?;
    let znt = g.transpose(zn)?;
    let sim = g.matmul(anchors, znt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let mask = (0..b * n).map(|idx| idx / n != idx % n).collect();
    let log_p = g.masked_log_softmax_rows(logits, mask)?;
    let (w, active) = positive_weights(positives, n);
    if !active.contains(&true) {
        return Err(Error::AllAnchorsSkipped("quality"));
    }
    let per_anchor = g.row_dot(log_p, w)?;
    Ok(LossTerm { per_anchor, active })
}

/// Content-aware loss over the content representations `c` and the
/// predicted ones `c_hat` (both `B × d`) with anchor sets from
/// [`BatchAnnotations::content_positives`].
pub fn content_loss(g: &mut Graph, c: Var, c_hat: Var, positives: &[Vec<usize>], tau: f64) -> Result<LossTerm> {
    let b = positives.len();
    if g.value(c).rows() != b || g.value(c_hat).rows() != b {
        return Err(Error::Shape(format!("content representations must have {b} rows")));
    }
    if positives.iter().enumerate().any(|(i, s)| s.contains(&i) || s.iter().any(|&j| j >= b)) {
        return Err(Error::Invalid("content positives must be other full-resolution items".into()));
    }
    let (w, active) = positive_weights(positives, b);
    if !active.contains(&true) {
        return Err(Error::AllAnchorsSkipped("content"));
    }
    let cn = g.l2_normalize_rows(c)?;
    let hn = g.l2_normalize_rows(c_hat)?;
    let cnt = g.transpose(cn)?;
    let hnt = g.transpose(hn)?;
    let s_cc = g.matmul(cn, cnt)?;
    let s_ch = g.matmul(cn, hnt)?;
    let sim = g.concat_cols(&[s_cc, s_ch])?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let width = 2 * b;
    let mask = (0..b * width).map(|idx| (idx % width) % b != idx / width).collect();
    let log_p = g.masked_log_softmax_rows(logits, mask)?;
    let left = g.slice_cols(log_p, 0, b)?;
    let right = g.slice_cols(log_p, b, b)?;
    // log((e_cc + e_ch) / den) = logaddexp(log(e_cc/den), log(e_ch/den))
    let pair = g.log_add_exp(left, right)?;
    let per_anchor = g.row_dot(pair, w)?;
    Ok(LossTerm { per_anchor, active })
}

/// `mean(L^quality) + λ₁·mean(L^content)`, each mean over its own active
/// anchors. With no content anchors the quality mean alone is returned.
pub fn total_loss(g: &mut Graph, quality: &LossTerm, content: Option<&LossTerm>, lambda1: f64) -> Result<Var> {
    let q = quality.mean(g)?;
    match content {
        Some(c) if lambda1 != 0.0 && c.active_count() > 0 => {
            let cm = c.mean(g)?;
            let cm = g.scale(cm, lambda1)?;
            g.add(q, cm)
        }
        _ => Ok(q),
    }
}

/// The same combination on plain per-anchor values.
pub fn combine(quality: &[Option<f64>], content: &[Option<f64>], lambda1: f64) -> Result<f64> {
    let mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let q = mean(quality).ok_or(Error::AllAnchorsSkipped("quality"))?;
    Ok(match mean(content) {
        Some(c) if lambda1 != 0.0 => q + lambda1 * c,
        _ => q,
    })
}
