//! Synthetic source videos and graded degradations.
//!
//! Sources are procedural: drifting coloured gratings over a smooth
//! gradient, with a few moving soft blobs. Degradations stand in for real
//! enhancement artefacts and are graded by an integer severity, where
//! severity 0 is always the identity.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{self, LabelRow};
use crate::seeding;
use crate::video::{self, RawVideo, VideoEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    /// Additive Gaussian noise, σ = 10·s grey levels.
    Noise,
    /// Gaussian blur, σ = 0.8·s pixels.
    Blur,
    /// Contrast ×(1 − 0.15·s) about mid-grey plus a +10·s brightness shift.
    BrightnessContrast,
    /// Per-frame random translation of up to 2·s pixels (camera shake).
    Jitter,
}

impl Degradation {
    pub fn name(self) -> &'static str {
        match self {
            Degradation::Noise => "noise",
            Degradation::Blur => "blur",
            Degradation::BrightnessContrast => "brightness_contrast",
            Degradation::Jitter => "jitter",
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Degradation::Noise, Degradation::Blur, Degradation::BrightnessContrast, Degradation::Jitter]
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown degradation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sources: usize,
    pub kinds: Vec<Degradation>,
    pub severities: Vec<u32>,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sources: 6,
            kinds: vec![Degradation::Noise],
            severities: vec![1, 2, 3, 4],
            width: 256,
            height: 256,
            frames: 72,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.kinds.is_empty() || self.severities.is_empty() {
            return Err(Error::Config("synth needs at least one source, kind and severity".into()));
        }
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config("synth video dimensions must be positive".into()));
        }
        Ok(())
    }

    fn max_severity(&self) -> u32 {
        self.severities.iter().copied().max().unwrap_or(0)
    }

    /// Quality label for a severity: 100 for pristine, falling linearly so
    /// that the worst configured severity sits one step above 0.
    pub fn mos(&self, severity: u32) -> f64 {
        let steps = f64::from(self.max_severity() + 1);
        100.0 * (steps - f64::from(severity)) / steps
    }
}

struct Grating {
    freq: f64,
    cos_t: f64,
    sin_t: f64,
    phase: f64,
    drift: f64,
    amp: [f64; 3],
}

struct Blob {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    amp: [f64; 3],
}

/// A procedural source video; identical `(seed, source_id)` give identical
/// bytes.
pub fn source_video(seed: u64, source_id: &str, width: usize, height: usize, frames: usize) -> Result<RawVideo> {
    let mut rng = seeding::rng(seed, &format!("source/{source_id}"));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let grad: [f64; 2] = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
    let gratings: Vec<Grating> = (0..rng.random_range(3..6))
        .map(|_| {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Grating {
                freq: rng.random_range(0.02..0.18) * std::f64::consts::TAU,
                cos_t: t.cos(),
                sin_t: t.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                drift: rng.random_range(-0.3..0.3),
                amp: std::array::from_fn(|_| rng.random_range(5.0..30.0)),
            }
        })
        .collect();
    let (w, h) = (width as f64, height as f64);
    let mut blobs: Vec<Blob> = (0..rng.random_range(2..5))
        .map(|_| Blob {
            x: rng.random_range(0.0..w),
            y: rng.random_range(0.0..h),
            vx: rng.random_range(-2.0..2.0),
            vy: rng.random_range(-2.0..2.0),
            radius: rng.random_range(0.05..0.2) * w.min(h),
            amp: std::array::from_fn(|_| rng.random_range(-70.0..70.0)),
        })
        .collect();

    let mut v = RawVideo::filled(width, height, frames, 0)?;
    for t in 0..frames {
        let ft = t as f64;
        let frame = v.frame_mut(t);
        for y in 0..height {
            let fy = y as f64;
            for x in 0..width {
                let fx = x as f64;
                let mut px = [0.0; 3];
                let ramp = grad[0] * (fx / w - 0.5) + grad[1] * (fy / h - 0.5);
                for c in 0..3 {
                    px[c] = base[c] + ramp;
                }
                for g in &gratings {
                    let s = (g.freq * (fx * g.cos_t + fy * g.sin_t) + g.phase + g.drift * ft).sin();
                    for c in 0..3 {
                        px[c] += g.amp[c] * s;
                    }
                }
                for b in &blobs {
                    let d2 = (fx - b.x).powi(2) + (fy - b.y).powi(2);
                    let k = (-d2 / (2.0 * b.radius * b.radius)).exp();
                    for c in 0..3 {
                        px[c] += b.amp[c] * k;
                    }
                }
                let o = (y * width + x) * 3;
                for c in 0..3 {
                    frame[o + c] = to_u8(px[c]);
                }
            }
        }
        for b in &mut blobs {
            b.x = (b.x + b.vx).rem_euclid(w);
            b.y = (b.y + b.vy).rem_euclid(h);
        }
    }
    Ok(v)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Applies one degradation at the given severity. `seed` drives the random
/// parts (noise, jitter offsets).
pub fn degrade(v: &RawVideo, kind: Degradation, severity: u32, seed: u64) -> RawVideo {
    if severity == 0 {
        return v.clone();
    }
    let s = f64::from(severity);
    let mut rng = seeding::rng(seed, &format!("degrade/{kind}/{severity}"));
    let mut out = v.clone();
    match kind {
        Degradation::Noise => {
            let n = Normal::new(0.0, 10.0 * s).expect("positive sigma");
            for p in &mut out.data {
                *p = to_u8(f64::from(*p) + n.sample(&mut rng));
            }
        }
        Degradation::Blur => {
            for t in 0..v.frames {
                gaussian_blur(v.frame(t), out.frame_mut(t), v.width, v.height, 0.8 * s);
            }
        }
        Degradation::BrightnessContrast => {
            let k = (1.0 - 0.15 * s).max(0.0);
            for p in &mut out.data {
                *p = to_u8((f64::from(*p) - 128.0) * k + 128.0 + 10.0 * s);
            }
        }
        Degradation::Jitter => {
            let r = 2 * severity as i64;
            for t in 0..v.frames {
                let dx = rng.random_range(-r..=r);
                let dy = rng.random_range(-r..=r);
                translate(v.frame(t), out.frame_mut(t), v.width, v.height, dx, dy);
            }
        }
    }
    out
}

fn gaussian_blur(src: &[u8], dst: &mut [u8], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let xx = clampi(x as i64 + k as i64 - radius, w);
                    acc += wt * f64::from(src[(y * w + xx) * 3 + c]);
                }
                tmp[(y * w + x) * 3 + c] = acc / norm;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let yy = clampi(y as i64 + k as i64 - radius, h);
                    acc += wt * tmp[(yy * w + x) * 3 + c];
                }
                dst[(y * w + x) * 3 + c] = to_u8(acc / norm);
            }
        }
    }
}

fn translate(src: &[u8], dst: &mut [u8], w: usize, h: usize, dx: i64, dy: i64) {
    for y in 0..h {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            let (o, i) = ((y * w + x) * 3, (sy * w + sx) * 3);
            dst[o..o + 3].copy_from_slice(&src[i..i + 3]);
        }
    }
}

/// What [`generate_corpus`] wrote.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub video_list: PathBuf,
    pub labels: PathBuf,
    pub entries: Vec<VideoEntry>,
    pub label_rows: Vec<LabelRow>,
}

/// Writes `references/<source>.rmtv`, `videos/<source>_<kind>_<s>.rmtv`,
/// `videos.csv` and `labels.csv` under `out`.
pub fn generate_corpus(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<Corpus> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let mut label_rows = Vec::new();
    for i in 0..cfg.sources {
        let source_id = format!("src{i:02}");
        let reference = source_video(seed, &source_id, cfg.width, cfg.height, cfg.frames)?;
        let ref_rel = PathBuf::from("references").join(format!("{source_id}.rmtv"));
        video::write(&out.join(&ref_rel), &reference)?;
        for &kind in &cfg.kinds {
            for &s in &cfg.severities {
                let video_id = format!("{source_id}_{kind}_{s}");
                let degraded = degrade(&reference, kind, s, seeding::derive(seed, &video_id));
                let rel = PathBuf::from("videos").join(format!("{video_id}.rmtv"));
                video::write(&out.join(&rel), &degraded)?;
                log::debug!("wrote {video_id}");
                entries.push(VideoEntry {
                    video_id: video_id.clone(),
                    source_id: source_id.clone(),
                    enhancement_tag: format!("{kind}_{s}"),
                    path: rel,
                    reference_path: Some(ref_rel.clone()),
                });
                label_rows.push(LabelRow {
                    video_id,
                    subset_tag: kind.name().to_string(),
                    source_id: source_id.clone(),
                    mos: cfg.mos(s),
                });
            }
        }
    }
    let video_list = out.join("videos.csv");
    video::write_video_list(&video_list, &entries)?;
    let labels_path = out.join("labels.csv");
    labels::write_labels(&labels_path, &label_rows)?;
    Ok(Corpus { video_list, labels: labels_path, entries, label_rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_are_deterministic_and_distinct() {
        let a = source_video(1, "s", 16, 8, 3).unwrap();
        assert_eq!(a, source_video(1, "s", 16, 8, 3).unwrap());
        assert_ne!(a, source_video(1, "t", 16, 8, 3).unwrap());
    }

    #[test]
    fn severity_zero_is_identity() {
        let v = source_video(2, "s", 16, 16, 2).unwrap();
        for k in [Degradation::Noise, Degradation::Blur, Degradation::BrightnessContrast, Degradation::Jitter] {
            assert_eq!(degrade(&v, k, 0, 5), v);
            assert_ne!(degrade(&v, k, 3, 5), v, "{k}");
        }
    }

    #[test]
    fn mos_falls_with_severity() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.mos(0), 100.0);
        assert_eq!(cfg.mos(1), 80.0);
        assert_eq!(cfg.mos(4), 20.0);
    }
}
