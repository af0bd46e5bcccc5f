//! Projector `g`, content predictor `f` and the content embedding.
//!
//! `g` maps a `D`-wide embedding to the 128-wide space both contrastive
//! losses live in. `f` guesses the final content embedding from the memory
//! that entered the last segment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};

/// Width of the quality and content representations.
pub const PROJ_DIM: usize = 128;

const PROJ: &str = "head.proj";
const PRED: &str = "head.pred";

/// Seeded projector and predictor parameters for embedding width `dim`.
pub fn init_params(dim: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    nn::init_linear(&mut store, &mut rng, &format!("{PROJ}.fc1"), dim, dim);
    nn::init_linear(&mut store, &mut rng, &format!("{PROJ}.fc2"), dim, PROJ_DIM);
    nn::init_linear(&mut store, &mut rng, &format!("{PRED}.fc1"), dim, dim);
    nn::init_linear(&mut store, &mut rng, &format!("{PRED}.fc2"), dim, dim);
    store
}

/// `g`: Linear(D→D) → ReLU → Linear(D→128), applied row-wise.
pub fn project(g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
    let h = nn::linear(g, p, &format!("{PROJ}.fc1"), h)?;
    let h = g.relu(h)?;
    nn::linear(g, p, &format!("{PROJ}.fc2"), h)
}

/// `f`: mean over the `M` memory tokens, then Linear → ReLU → Linear.
pub fn predict_content(g: &mut Graph, p: &Bound, mem_prev: Var) -> Result<Var> {
    let h = g.mean_rows(mem_prev)?;
    let h = nn::linear(g, p, &format!("{PRED}.fc1"), h)?;
    let h = g.relu(h)?;
    nn::linear(g, p, &format!("{PRED}.fc2"), h)
}

/// Mean of the last segment's processed frame tokens.
pub fn content_embedding(g: &mut Graph, last_frames_out: Var) -> Result<Var> {
    g.mean_rows(last_frames_out)
}

/// Normalised dot product of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
