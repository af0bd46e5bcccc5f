//! Recurrent Memory Vision Transformer.
//!
//! A video of `T` frame embeddings is cut into `S = ⌊T/N⌋` segments of `N`
//! frames (a trailing partial segment is dropped). Each segment is processed
//! by the same pre-norm ViT stack together with `M` memory tokens; the
//! memory slots of the output become the memory input of the next segment.
//! The video embedding is the mean over the final memory and every
//! processed frame token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};
use crate::tensor::Tensor;

/// How the video embedding is pooled from processed tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final memory plus every processed frame token.
    #[default]
    AllFrames,
    /// Final memory plus the processed frames of the last two segments.
    LastTwoSegments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmvitConfig {
    pub dim: usize,
    pub memory_tokens: usize,
    pub segment_len: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for RmvitConfig {
    /// Desk-scale model.
    fn default() -> Self {
        Self { dim: 64, memory_tokens: 4, segment_len: 4, depth: 2, heads: 4, ffn_mult: 2, pooling: Pooling::AllFrames }
    }
}

impl RmvitConfig {
    /// The full-size configuration: 2048-wide tokens, 12 memory tokens,
    /// 12-frame segments, 8 blocks of 64 heads.
    pub fn full_scale() -> Self {
        Self {
            dim: 2048,
            memory_tokens: 12,
            segment_len: 12,
            depth: 8,
            heads: 64,
            ffn_mult: 2,
            pooling: Pooling::AllFrames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.memory_tokens == 0 || self.segment_len == 0 || self.depth == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("memory_tokens, segment_len, depth and ffn_mult must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.memory_tokens + self.segment_len
    }
}

pub const MEMORY: &str = "rmvit.memory";
pub const POSITIONS: &str = "rmvit.pos";

fn block_prefix(i: usize) -> String {
    format!("rmvit.blocks.{i}")
}

/// Seeded parameters. The initial memory starts at zero and is trainable;
/// positional embeddings are unit-variance so the zero memory slots still
/// reach the first layer norm with a well-conditioned spread.
pub fn init_params(cfg: &RmvitConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let mut store = ParamStore::new();
    store.insert(MEMORY, Tensor::zeros(&[cfg.memory_tokens, d]));
    store.insert(POSITIONS, nn::normal_tensor(&mut rng, &[cfg.tokens_per_segment(), d], 1.0));
    for i in 0..cfg.depth {
        let p = block_prefix(i);
        nn::init_layer_norm(&mut store, &format!("{p}.ln1"), d);
        nn::init_attention(&mut store, &mut rng, &format!("{p}.attn"), d);
        nn::init_layer_norm(&mut store, &format!("{p}.ln2"), d);
        nn::init_linear(&mut store, &mut rng, &format!("{p}.ffn.fc1"), d, cfg.ffn_mult * d);
        nn::init_linear(&mut store, &mut rng, &format!("{p}.ffn.fc2"), cfg.ffn_mult * d, d);
    }
    Ok(store)
}

/// The trainable initial memory `M × D`.
pub fn init_memory(p: &Bound) -> Result<Var> {
    p.var(MEMORY)
}

fn vit_block(g: &mut Graph, cfg: &RmvitConfig, p: &Bound, i: usize, x: Var) -> Result<Var> {
    let pre = block_prefix(i);
    let h = nn::layer_norm(g, p, &format!("{pre}.ln1"), x)?;
    let a = nn::multi_head_attention(g, p, &format!("{pre}.attn"), h, cfg.heads)?;
    let x = g.add(x, a)?;
    let h = nn::layer_norm(g, p, &format!("{pre}.ln2"), x)?;
    let h = nn::linear(g, p, &format!("{pre}.ffn.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = nn::linear(g, p, &format!("{pre}.ffn.fc2"), h)?;
    g.add(x, h)
}

/// One recurrent iteration: `[mem ∘ frames] + pos → ViT → (mem', frames')`.
pub fn process_segment(g: &mut Graph, cfg: &RmvitConfig, p: &Bound, mem: Var, frames: Var) -> Result<(Var, Var)> {
    let (m, d) = g.value(mem).shape();
    let (n, fd) = g.value(frames).shape();
    if m != cfg.memory_tokens || d != cfg.dim {
        return Err(Error::Shape(format!("memory is {m}×{d}, expected {}×{}", cfg.memory_tokens, cfg.dim)));
    }
    if n != cfg.segment_len || fd != cfg.dim {
        return Err(Error::Shape(format!("segment is {n}×{fd}, expected {}×{}", cfg.segment_len, cfg.dim)));
    }
    let tokens = g.concat_rows(&[mem, frames])?;
    let mut x = g.add(tokens, p.var(POSITIONS)?)?;
    for i in 0..cfg.depth {
        x = vit_block(g, cfg, p, i, x)?;
    }
    let mem_out = g.slice_rows(x, 0, m)?;
    let frames_out = g.slice_rows(x, m, n)?;
    Ok((mem_out, frames_out))
}

/// Graph handles for one processed video.
#[derive(Clone, Debug)]
pub struct VideoVars {
    /// Pooled video embedding `1 × D`.
    pub h_v: Var,
    /// Memory entering the last segment (the initial memory when `S = 1`).
    pub mem_prev: Var,
    /// Memory produced by the last segment.
    pub mem_last: Var,
    /// Processed frame tokens of the last segment, `N × D`.
    pub last_frames_out: Var,
    pub segments: usize,
    pub frames_used: usize,
    pub pooled_tokens: usize,
}

/// Runs the recurrence over a `T × D` block of frame embeddings.
pub fn forward_video(g: &mut Graph, cfg: &RmvitConfig, p: &Bound, frames: Var) -> Result<VideoVars> {
    let (t, d) = g.value(frames).shape();
    if d != cfg.dim {
        return Err(Error::Shape(format!("frame embeddings are {d}-d, model expects {}", cfg.dim)));
    }
    let n = cfg.segment_len;
    if t < n {
        return Err(Error::Invalid(format!("video has {t} frames, fewer than one segment of {n}")));
    }
    let segments = t / n;
    let mut mem = init_memory(p)?;
    let mut mem_prev = mem;
    let mut outs = Vec::with_capacity(segments);
    for s in 0..segments {
        let seg = g.slice_rows(frames, s * n, n)?;
        mem_prev = mem;
        let (m_out, f_out) = process_segment(g, cfg, p, mem, seg)?;
        mem = m_out;
        outs.push(f_out);
    }
    let last_frames_out = *outs.last().expect("at least one segment");
    let pooled_from: Vec<Var> = match cfg.pooling {
        Pooling::AllFrames => std::iter::once(mem).chain(outs.iter().copied()).collect(),
        Pooling::LastTwoSegments => {
            std::iter::once(mem).chain(outs[outs.len().saturating_sub(2)..].iter().copied()).collect()
        }
    };
    let pooled = g.concat_rows(&pooled_from)?;
    let pooled_tokens = g.value(pooled).rows();
    let h_v = g.mean_rows(pooled)?;
    Ok(VideoVars { h_v, mem_prev, mem_last: mem, last_frames_out, segments, frames_used: segments * n, pooled_tokens })
}

/// Concrete outputs of [`forward_video`].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub h_v: Tensor,
    pub mem_prev: Tensor,
    pub last_frames_out: Tensor,
    pub segments: usize,
    pub frames_used: usize,
    pub pooled_tokens: usize,
}

/// Inference-only forward pass over a `T × D` frame-embedding matrix.
pub fn embed_video(cfg: &RmvitConfig, params: &ParamStore, frames: &Tensor) -> Result<VideoEmbedding> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(frames.clone());
    let out = forward_video(&mut g, cfg, &p, f)?;
    Ok(VideoEmbedding {
        h_v: g.tensor(out.h_v),
        mem_prev: g.tensor(out.mem_prev),
        last_frames_out: g.tensor(out.last_frames_out),
        segments: out.segments,
        frames_used: out.frames_used,
        pooled_tokens: out.pooled_tokens,
    })
}
