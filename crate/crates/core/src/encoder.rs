//! Frozen per-frame spatial encoders.
//!
//! * `seeded_projection` — area-average the frame to 32×32×3, scale to
//!   `[0, 1]`, multiply by a seeded `D × 3072` Gaussian matrix
//!   (entries N(0, 1/3072)). Linear, bias-free.
//! * `tiny_conv` — area-average to 256×256×3, three zero-mean 3×3 stride-2
//!   convolutions with ReLU (3→8→16→32 channels, 256→128→64→32 pixels). The
//!   spatial mean of every channel of every layer (56 values) goes through a
//!   seeded `D × 56` projection. Global pooling keeps the output about
//!   texture statistics rather than where content sits in the frame.
//! * `precomputed` — a lookup table of externally produced embeddings.
//!
//! None of these have trainable parameters; [`Encoder::fingerprint`] hashes
//! everything the output depends on so callers can prove it never changed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::Pixels;
use crate::rmtt;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SeededProjection,
    TinyConv,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub dim: usize,
    pub seed: u64,
    /// Index CSV for the `precomputed` kind.
    #[serde(default)]
    pub index: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { kind: EncoderKind::SeededProjection, dim: 64, seed: 0, index: None }
    }
}

const PROJ_GRID: usize = 32;
const CONV_GRID: usize = 256;
const CONV_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// One frame as three `H × W` planes of values in `0..=255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, planes: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || planes.len() != 3 * height * width {
            return Err(Error::Shape(format!("{} values for a {height}×{width}×3 frame", planes.len())));
        }
        Ok(Self { height, width, planes })
    }

    pub fn from_pixels(p: &Pixels, t: usize) -> Self {
        Self { height: p.height, width: p.width, planes: p.frame(t).iter().map(|&v| f32::from(v)).collect() }
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self { planes: self.planes.iter().map(|v| v * k).collect(), ..self.clone() }
    }
}

/// Per-axis weights of an exact area resample from `n` cells to `m`.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < n {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((j, overlap / scale));
                }
                j += 1;
            }
            w
        })
        .collect()
}

/// Area-average resample of each plane to `size × size`.
pub fn area_pool(f: &Frame, size: usize) -> Vec<f64> {
    let wy = area_weights(f.height, size);
    let wx = area_weights(f.width, size);
    let mut out = vec![0f64; 3 * size * size];
    let mut rows = vec![0f64; size * f.width];
    for c in 0..3 {
        let plane = &f.planes[c * f.height * f.width..(c + 1) * f.height * f.width];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for (i, ws) in wy.iter().enumerate() {
            for &(j, w) in ws {
                for x in 0..f.width {
                    rows[i * f.width + x] += w * f64::from(plane[j * f.width + x]);
                }
            }
        }
        for i in 0..size {
            for (k, ws) in wx.iter().enumerate() {
                out[(c * size + i) * size + k] = ws.iter().map(|&(x, w)| w * rows[i * f.width + x]).sum();
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    w: Vec<f64>,
}

impl Conv {
    /// 3×3, stride 2, zero padding 1, ReLU. Input/output are `[c][h][w]`
    /// with even `size`, so only the top row / left column touch padding.
    fn forward(&self, x: &[f64], size: usize) -> Vec<f64> {
        let out = size / 2;
        let mut y = vec![0f64; self.cout * out * out];
        for (o, yo) in y.chunks_exact_mut(out * out).enumerate() {
            for i in 0..self.cin {
                let xi = &x[i * size * size..(i + 1) * size * size];
                for ky in 0..3 {
                    let oy0 = usize::from(ky == 0);
                    for kx in 0..3 {
                        let ox0 = usize::from(kx == 0);
                        let w = self.w[((o * self.cin + i) * 3 + ky) * 3 + kx];
                        for oy in oy0..out {
                            let row = &xi[(2 * oy + ky - 1) * size..][..size];
                            let dst = &mut yo[oy * out..(oy + 1) * out];
                            for ox in ox0..out {
                                dst[ox] += w * row[2 * ox + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Projection { w: Vec<f64> },
    TinyConv { convs: Vec<Conv>, w: Vec<f64> },
    Precomputed { table: EmbeddingTable },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    kind: Kind,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| f64::from(d.sample(rng) as f32)).collect()
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f32> {
    let n = x.len();
    (0..rows).map(|r| w[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() as f32).collect()
}

impl Encoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let kind = match spec.kind {
            EncoderKind::SeededProjection => {
                let n = 3 * PROJ_GRID * PROJ_GRID;
                Kind::Projection { w: gaussian(&mut rng, spec.dim * n, (1.0 / n as f64).sqrt()) }
            }
            EncoderKind::TinyConv => {
                let convs = CONV_CHANNELS
                    .windows(2)
                    .map(|c| {
                        let (cin, cout) = (c[0], c[1]);
                        let fan = 9 * cin;
                        let mut w = gaussian(&mut rng, cout * fan, (2.0 / fan as f64).sqrt());
                        for filt in w.chunks_exact_mut(fan) {
                            let mean = filt.iter().sum::<f64>() / fan as f64;
                            filt.iter_mut().for_each(|v| *v -= mean);
                        }
                        Conv { cin, cout, w }
                    })
                    .collect();
                let n: usize = CONV_CHANNELS[1..].iter().sum();
                Kind::TinyConv { convs, w: gaussian(&mut rng, spec.dim * n, (1.0 / n as f64).sqrt()) }
            }
            EncoderKind::Precomputed => {
                let path = spec
                    .index
                    .as_ref()
                    .ok_or_else(|| Error::Config("precomputed encoder needs an index path".into()))?;
                Kind::Precomputed { table: EmbeddingTable::load(path, spec.dim)? }
            }
        };
        Ok(Self { spec: spec.clone(), kind })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn encode_frame(&self, f: &Frame) -> Result<Vec<f32>> {
        match &self.kind {
            Kind::Projection { w } => {
                let x: Vec<f64> = area_pool(f, PROJ_GRID).into_iter().map(|v| v / 255.0).collect();
                Ok(matvec(w, &x, self.spec.dim))
            }
            Kind::TinyConv { convs, w } => {
                let mut x: Vec<f64> = area_pool(f, CONV_GRID).into_iter().map(|v| v / 255.0).collect();
                let mut size = CONV_GRID;
                let mut pooled = Vec::new();
                for c in convs {
                    x = c.forward(&x, size);
                    size /= 2;
                    let area = (size * size) as f64;
                    pooled.extend(x.chunks_exact(size * size).map(|ch| ch.iter().sum::<f64>() / area));
                }
                Ok(matvec(w, &pooled, self.spec.dim))
            }
            Kind::Precomputed { .. } => {
                Err(Error::Invalid("the precomputed encoder looks frames up by patch id; use encode_patch".into()))
            }
        }
    }

    /// One embedding per frame, as a `T × D` matrix. The precomputed kind
    /// ignores `pixels` and returns the stored rows for `patch_id`.
    pub fn encode_patch(&self, patch_id: &str, pixels: Option<&Pixels>) -> Result<Tensor> {
        if let Kind::Precomputed { table } = &self.kind {
            return table.patch(patch_id);
        }
        let p = pixels.ok_or_else(|| Error::Invalid(format!("no pixels supplied for `{patch_id}`")))?;
        let mut data = Vec::with_capacity(p.frames * self.spec.dim);
        for t in 0..p.frames {
            data.extend(self.encode_frame(&Frame::from_pixels(p, t))?);
        }
        Tensor::matrix(p.frames, self.spec.dim, data)
    }

    /// SHA-256 over the spec and every weight (or table entry).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(
            serde_json::to_vec(&(self.spec.kind, self.spec.dim, self.spec.seed, PROJ_GRID, CONV_GRID))
                .expect("spec serialises"),
        );
        let mut feed = |xs: &[f64]| xs.iter().for_each(|v| h.update(v.to_le_bytes()));
        match &self.kind {
            Kind::Projection { w } => feed(w),
            Kind::TinyConv { convs, w } => {
                convs.iter().for_each(|c| feed(&c.w));
                feed(w);
            }
            Kind::Precomputed { table } => {
                for ((id, t), v) in &table.rows {
                    h.update(id.as_bytes());
                    h.update(t.to_le_bytes());
                    v.iter().for_each(|x| h.update(x.to_le_bytes()));
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// One row of the precomputed-embedding index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub patch_id: String,
    pub frame_idx: usize,
    pub tensor_path: PathBuf,
    pub row: usize,
}

pub fn parse_index(text: &str, origin: &Path) -> Result<Vec<IndexRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::parse(origin, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["patch_id", "frame_idx", "tensor_path", "row"] {
        return Err(Error::parse(origin, 1, "header must be patch_id,frame_idx,tensor_path,row"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<IndexRow>().enumerate() {
        let r = rec.map_err(|e| Error::parse(origin, i + 2, e.to_string()))?;
        if r.patch_id.is_empty() {
            return Err(Error::parse(origin, i + 2, "empty patch_id"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_index(path: &Path, rows: &[IndexRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["patch_id", "frame_idx", "tensor_path", "row"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Embeddings keyed by `(patch_id, frame_idx)`.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<(String, usize), Vec<f32>>,
}

impl EmbeddingTable {
    /// Reads an index CSV and the RMTT matrices it points to (paths relative
    /// to the index). Every matrix must be `n × dim`.
    pub fn load(index: &Path, dim: usize) -> Result<Self> {
        if !index.exists() {
            return Err(Error::MissingFile(index.to_path_buf()));
        }
        let entries = parse_index(&fs::read_to_string(index)?, index)?;
        let base = index.parent().unwrap_or(Path::new("."));
        let mut files: HashMap<PathBuf, Tensor> = HashMap::new();
        let mut rows = BTreeMap::new();
        for e in entries {
            let path = base.join(&e.tensor_path);
            if !files.contains_key(&path) {
                let t = rmtt::read(&path)?;
                if t.ndim() != 2 || t.cols() != dim {
                    return Err(Error::Shape(format!(
                        "{} holds {:?} embeddings, expected n×{dim}",
                        path.display(),
                        t.shape()
                    )));
                }
                files.insert(path.clone(), t);
            }
            let t = &files[&path];
            if e.row >= t.rows() {
                return Err(Error::Invalid(format!("row {} out of range in {}", e.row, path.display())));
            }
            if rows.insert((e.patch_id.clone(), e.frame_idx), t.row_slice(e.row).to_vec()).is_some() {
                return Err(Error::DuplicateId(format!("{}#{}", e.patch_id, e.frame_idx)));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, patch_id: &str, frame: usize) -> Result<&[f32]> {
        self.rows
            .get(&(patch_id.to_string(), frame))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingKey(format!("{patch_id}#{frame}")))
    }

    /// Frames `0..n` of a patch, stacked; frame 0 must exist and indices
    /// must be contiguous.
    pub fn patch(&self, patch_id: &str) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut n = 0;
        while let Ok(v) = self.get(patch_id, n) {
            data.extend_from_slice(v);
            n += 1;
        }
        if n == 0 {
            return Err(Error::MissingKey(format!("{patch_id}#0")));
        }
        Tensor::matrix(n, self.dim, data)
    }
}

/// Writes one `T × D` RMTT per patch plus the index CSV into `dir`.
pub fn write_table(dir: &Path, patches: &[(String, Tensor)]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for (id, t) in patches {
        let rel = PathBuf::from(format!("{id}.rmtt"));
        rmtt::write(&dir.join(&rel), t)?;
        rows.extend((0..t.rows()).map(|r| IndexRow {
            patch_id: id.clone(),
            frame_idx: r,
            tensor_path: rel.clone(),
            row: r,
        }));
    }
    let index = dir.join("index.csv");
    write_index(&index, &rows)?;
    Ok(index)
}
