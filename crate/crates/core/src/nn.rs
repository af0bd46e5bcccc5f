//! Named parameters and the small set of layers the model is built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Trainable parameters keyed by dotted name (`rmvit.blocks.0.attn.wqkv`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on the graph. With `trainable = false` the
    /// leaves are constants, which is what finite-difference probes want.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("std is positive");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Adds `{prefix}.w` (`in × out`, std `1/√in`) and zero `{prefix}.b`.
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, inp: usize, out: usize) {
    store.insert(format!("{prefix}.w"), normal_tensor(rng, &[inp, out], 1.0 / (inp as f32).sqrt()));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[1, dim], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, dim]));
}

/// `x · W + b` for `x: L × in`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Parameters of one attention layer: fused `qkv` projection (`D × 3D`)
/// and output projection (`D × D`), each with a bias row.
pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    init_linear(store, rng, &format!("{prefix}.qkv"), dim, 3 * dim);
    init_linear(store, rng, &format!("{prefix}.out"), dim, dim);
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
///
/// Each head sees a `D / heads` slice of the query, key and value
/// projections; head outputs are concatenated and passed through the output
/// projection.
pub fn multi_head_attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let d = g.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("attention: dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores)?;
        outs.push(g.matmul(attn, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, p, &format!("{prefix}.out"), cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_exposes_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "a", 4);
        assert_eq!(store.count(), 4 * 12 + 12 + 16 + 4);
        let mut g = Graph::new();
        let b = store.bind(&mut g, true);
        assert!(b.var("a.qkv.w").is_ok());
        assert!(matches!(b.var("nope"), Err(Error::MissingKey(_))));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "a", 6);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[2, 6]));
        assert!(multi_head_attention(&mut g, &b, "a", x, 4).is_err());
    }
}
