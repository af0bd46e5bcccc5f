//! Spatio-temporal training patches.
//!
//! Videos are cut on a non-overlapping grid of `256 × 256 × 72` windows
//! whose spatial origin is offset by a seeded random amount per video.
//! Patch pixels are stored channel-planar, `[T, 3, H, W]`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rmtt;
use crate::seeding;
use crate::tensor::Tensor;
use crate::video::RawVideo;

pub const PATCH_SIZE: usize = 256;
pub const DOWN_SIZE: usize = 128;
pub const PATCH_FRAMES: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Full,
    Down,
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resolution::Full => "full",
            Resolution::Down => "down",
        })
    }
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Resolution::Full),
            "down" => Ok(Resolution::Down),
            _ => Err(format!("resolution must be `full` or `down`, got `{s}`")),
        }
    }
}

/// 8-bit pixels in `[T, 3, H, W]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixels {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Pixels {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let n = [frames, 3, height, width].iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0);
        if n != Some(data.len()) {
            return Err(Error::Shape(format!("{} bytes for a {frames}×3×{height}×{width} patch", data.len())));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        3 * self.plane()
    }

    /// Frame `t` as three consecutive `H × W` planes.
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> u8 {
        self.data[((t * 3 + c) * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, 3, self.height, self.width], self.data.iter().map(|&v| f32::from(v)).collect())
            .expect("pixel shape is valid")
    }

    /// Accepts only `[T, 3, H, W]` tensors of integers in `0..=255`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[frames, c, height, width] = t.shape() else {
            return Err(Error::Shape(format!("patch tensor must be [T,3,H,W], got {:?}", t.shape())));
        };
        if c != 3 {
            return Err(Error::Shape(format!("patch tensor has {c} channels")));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Invalid(format!("patch value {v} is not an integer in 0..=255")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(frames, height, width, data)
    }
}

/// Stored as a u8 RMTT of shape `[T, 3, H, W]`.
pub fn write_pixels(path: &Path, p: &Pixels) -> Result<()> {
    rmtt::write_bytes(path, &rmtt::encode_u8(&[p.frames, 3, p.height, p.width], &p.data)?)
}

pub fn decode_pixels(bytes: &[u8]) -> Result<Pixels> {
    let (dtype, shape, payload) = rmtt::decode_raw(bytes)?;
    if dtype != rmtt::DTYPE_U8 {
        return Pixels::from_tensor(&rmtt::decode(bytes)?);
    }
    let &[frames, c, height, width] = shape.as_slice() else {
        return Err(Error::Shape(format!("patch tensor must be [T,3,H,W], got {shape:?}")));
    };
    if c != 3 {
        return Err(Error::Shape(format!("patch tensor has {c} channels")));
    }
    Pixels::new(frames, height, width, payload.to_vec())
}

/// Reads either the u8 layout or an f32 tensor of whole numbers.
pub fn read_pixels(path: &Path) -> Result<Pixels> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_pixels(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub source_id: String,
    pub enhancement_tag: String,
    pub resolution: Resolution,
    /// For enhanced full patches, the co-located reference patch; for down
    /// patches, the full patch they were reduced from.
    pub reference_link: Option<String>,
    pub proxy_score: Option<f64>,
    pub pixels: Pixels,
}

/// Top-left corner and first frame of one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub t: usize,
}

impl Window {
    pub fn id(&self) -> String {
        format!("x{}_y{}_t{}", self.x, self.y, self.t)
    }
}

/// Every whole `size × size × frames_per` window of a grid starting at
/// `(ox, oy)`; time is cut from frame 0 in non-overlapping strides.
pub fn grid_windows(width: usize, height: usize, frames: usize, ox: usize, oy: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut t = 0;
    while t + PATCH_FRAMES <= frames {
        let mut y = oy;
        while y + PATCH_SIZE <= height {
            let mut x = ox;
            while x + PATCH_SIZE <= width {
                out.push(Window { x, y, t });
                x += PATCH_SIZE;
            }
            y += PATCH_SIZE;
        }
        t += PATCH_FRAMES;
    }
    out
}

/// Seeded grid origin for a video, chosen so the grid keeps as many whole
/// windows as the zero-offset grid.
pub fn grid_offset(video_id: &str, width: usize, height: usize, seed: u64) -> (usize, usize) {
    let mut rng = seeding::rng(seed, &format!("grid/{video_id}"));
    let ox = rng.random_range(0..=width % PATCH_SIZE);
    let oy = rng.random_range(0..=height % PATCH_SIZE);
    (ox, oy)
}

/// Cuts one window out of a video.
pub fn cut(v: &RawVideo, w: Window) -> Result<Pixels> {
    if w.x + PATCH_SIZE > v.width || w.y + PATCH_SIZE > v.height || w.t + PATCH_FRAMES > v.frames {
        return Err(Error::Invalid(format!("window {} falls outside {}×{}×{}", w.id(), v.width, v.height, v.frames)));
    }
    let n = PATCH_SIZE;
    let mut data = vec![0u8; PATCH_FRAMES * 3 * n * n];
    for dt in 0..PATCH_FRAMES {
        for c in 0..3 {
            for dy in 0..n {
                let dst = ((dt * 3 + c) * n + dy) * n;
                for dx in 0..n {
                    data[dst + dx] = v.data[v.index(w.t + dt, w.y + dy, w.x + dx, c)];
                }
            }
        }
    }
    Pixels::new(PATCH_FRAMES, n, n, data)
}

/// Checks that a video (and its reference, if any) can yield a window.
pub fn check_extractable(v: &RawVideo, reference: Option<&RawVideo>) -> Result<()> {
    if let Some(r) = reference {
        if !v.same_dims(r) {
            return Err(Error::Shape(format!(
                "video is {}×{}×{} but its reference is {}×{}×{}",
                v.width, v.height, v.frames, r.width, r.height, r.frames
            )));
        }
    }
    if v.width < PATCH_SIZE || v.height < PATCH_SIZE || v.frames < PATCH_FRAMES {
        return Err(Error::Insufficient(format!(
            "{}×{}×{} video is smaller than one {PATCH_SIZE}×{PATCH_SIZE}×{PATCH_FRAMES} window",
            v.width, v.height, v.frames
        )));
    }
    Ok(())
}

/// Labels carried by every patch cut from one video.
#[derive(Clone, Debug)]
pub struct VideoLabels<'a> {
    pub video_id: &'a str,
    pub source_id: &'a str,
    pub enhancement_tag: &'a str,
}

pub const REFERENCE_TAG: &str = "reference";

/// All windows of `v` with their co-located reference patches.
pub fn extract_patches(
    v: &RawVideo,
    reference: Option<&RawVideo>,
    labels: &VideoLabels<'_>,
    seed: u64,
) -> Result<Vec<(PatchRecord, Option<PatchRecord>)>> {
    check_extractable(v, reference)?;
    let (ox, oy) = grid_offset(labels.video_id, v.width, v.height, seed);
    grid_windows(v.width, v.height, v.frames, ox, oy)
        .into_iter()
        .map(|w| {
            let patch_id = format!("{}_{}", labels.video_id, w.id());
            let ref_patch = reference
                .map(|r| -> Result<PatchRecord> {
                    Ok(PatchRecord {
                        patch_id: format!("{patch_id}_ref"),
                        source_id: labels.source_id.to_string(),
                        enhancement_tag: REFERENCE_TAG.to_string(),
                        resolution: Resolution::Full,
                        reference_link: None,
                        proxy_score: None,
                        pixels: cut(r, w)?,
                    })
                })
                .transpose()?;
            let enh = PatchRecord {
                patch_id,
                source_id: labels.source_id.to_string(),
                enhancement_tag: labels.enhancement_tag.to_string(),
                resolution: Resolution::Full,
                reference_link: ref_patch.as_ref().map(|r| r.patch_id.clone()),
                proxy_score: None,
                pixels: cut(v, w)?,
            };
            Ok((enh, ref_patch))
        })
        .collect()
}

/// 2×2 box average per frame and channel, rounding halves up.
pub fn downsample_pixels(p: &Pixels) -> Result<Pixels> {
    if !p.width.is_multiple_of(2) || !p.height.is_multiple_of(2) {
        return Err(Error::Shape(format!("cannot halve {}×{}", p.width, p.height)));
    }
    let (h, w) = (p.height / 2, p.width / 2);
    let mut data = Vec::with_capacity(p.frames * 3 * h * w);
    for t in 0..p.frames {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let s = u16::from(p.at(t, c, 2 * y, 2 * x))
                        + u16::from(p.at(t, c, 2 * y, 2 * x + 1))
                        + u16::from(p.at(t, c, 2 * y + 1, 2 * x))
                        + u16::from(p.at(t, c, 2 * y + 1, 2 * x + 1));
                    data.push(((s + 2) / 4) as u8);
                }
            }
        }
    }
    Pixels::new(p.frames, h, w, data)
}

/// The down-sampled counterpart of a full-resolution patch.
pub fn downsample_patch(p: &PatchRecord) -> Result<PatchRecord> {
    if p.resolution != Resolution::Full {
        return Err(Error::Invalid(format!("patch `{}` is already down-sampled", p.patch_id)));
    }
    Ok(PatchRecord {
        patch_id: format!("{}_down", p.patch_id),
        source_id: p.source_id.clone(),
        enhancement_tag: p.enhancement_tag.clone(),
        resolution: Resolution::Down,
        reference_link: Some(p.patch_id.clone()),
        proxy_score: p.proxy_score,
        pixels: downsample_pixels(&p.pixels)?,
    })
}

/// Counter-clockwise rotation by `90·k` degrees of every frame: the pixel
/// at `(x, y)` moves to `(y, H − 1 − x)`.
pub fn rotate_pixels(p: &Pixels, k: u8) -> Result<Pixels> {
    if p.width != p.height {
        return Err(Error::Shape(format!("rotation needs a square patch, got {}×{}", p.width, p.height)));
    }
    let mut cur = p.clone();
    let n = p.width;
    for _ in 0..k % 4 {
        let mut next = vec![0u8; cur.data.len()];
        for plane in 0..cur.frames * 3 {
            let o = plane * n * n;
            for y in 0..n {
                for x in 0..n {
                    next[o + (n - 1 - x) * n + y] = cur.data[o + y * n + x];
                }
            }
        }
        cur.data = next;
    }
    Ok(cur)
}

/// Rotated copy with a new id; labels and links are kept.
pub fn augment_rotate(p: &PatchRecord, k: u8) -> Result<PatchRecord> {
    let k = k % 4;
    Ok(PatchRecord {
        patch_id: if k == 0 { p.patch_id.clone() } else { format!("{}_rot{}", p.patch_id, 90 * u32::from(k)) },
        pixels: rotate_pixels(&p.pixels, k)?,
        ..p.clone()
    })
}
