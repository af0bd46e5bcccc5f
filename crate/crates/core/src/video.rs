//! Raw RGB24 videos and the `RMTV` container.
//!
//! An `RMTV` file is one ASCII header line `RMTV <width> <height> <frames>\n`
//! followed by `width·height·3·frames` bytes: frames in order, each frame
//! row-major with interleaved RGB.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &str = "RMTV";
/// Header lines longer than this are rejected before any allocation.
const MAX_HEADER: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVideo {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Frame-major, row-major, interleaved RGB.
    pub data: Vec<u8>,
}

impl RawVideo {
    pub fn new(width: usize, height: usize, frames: usize, data: Vec<u8>) -> Result<Self> {
        let n = frame_bytes(width, height)
            .and_then(|f| f.checked_mul(frames))
            .filter(|_| frames > 0)
            .ok_or_else(|| Error::Invalid(format!("bad video dimensions {width}×{height}×{frames}")))?;
        if data.len() != n {
            return Err(Error::Invalid(format!("video data is {} bytes, expected {n}", data.len())));
        }
        Ok(Self { width, height, frames, data })
    }

    pub fn filled(width: usize, height: usize, frames: usize, value: u8) -> Result<Self> {
        let n = frame_bytes(width, height).and_then(|f| f.checked_mul(frames)).unwrap_or(0);
        Self::new(width, height, frames, vec![value; n])
    }

    pub fn frame_len(&self) -> usize {
        self.width * self.height * 3
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Byte offset of channel `c` at `(x, y)` in frame `t`.
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * 3 + c
    }

    pub fn same_dims(&self, other: &RawVideo) -> bool {
        (self.width, self.height, self.frames) == (other.width, other.height, other.frames)
    }
}

fn frame_bytes(width: usize, height: usize) -> Option<usize> {
    if width == 0 || height == 0 {
        return None;
    }
    width.checked_mul(height)?.checked_mul(3)
}

pub fn encode(v: &RawVideo) -> Vec<u8> {
    let mut out = format!("{MAGIC} {} {} {}\n", v.width, v.height, v.frames).into_bytes();
    out.extend_from_slice(&v.data);
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawVideo> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("RMTV", "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("RMTV", "header is not UTF-8"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::format("RMTV", "bad magic"));
    }
    let mut dim = |name: &str| -> Result<usize> {
        let s = parts.next().ok_or_else(|| Error::format("RMTV", format!("missing {name}")))?;
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::format("RMTV", format!("bad {name} {s:?}")));
        }
        s.parse().map_err(|_| Error::format("RMTV", format!("{name} out of range")))
    };
    let (w, h, f) = (dim("width")?, dim("height")?, dim("frames")?);
    if parts.next().is_some() {
        return Err(Error::format("RMTV", "trailing header fields"));
    }
    let expected = frame_bytes(w, h)
        .and_then(|n| n.checked_mul(f))
        .filter(|_| f > 0)
        .ok_or_else(|| Error::format("RMTV", format!("bad dimensions {w}×{h}×{f}")))?;
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(Error::format("RMTV", format!("payload is {} bytes, header says {expected}", payload.len())));
    }
    RawVideo::new(w, h, f, payload.to_vec())
}

pub fn write(path: &Path, v: &RawVideo) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(format!("{MAGIC} {} {} {}\n", v.width, v.height, v.frames).as_bytes())?;
    f.write_all(&v.data)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<RawVideo> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// One row of a video list: an enhanced (or degraded) video and, when
/// known, the reference it was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub source_id: String,
    pub enhancement_tag: String,
    pub path: PathBuf,
    #[serde(default, deserialize_with = "empty_path")]
    pub reference_path: Option<PathBuf>,
}

fn empty_path<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<PathBuf>, D::Error> {
    let s = String::deserialize(d)?;
    Ok((!s.is_empty()).then(|| PathBuf::from(s)))
}

/// Parses a video-list CSV. Relative paths stay relative; resolve them
/// against the list's directory with [`resolve`].
pub fn parse_video_list(text: &str, origin: &Path) -> Result<Vec<VideoEntry>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out: Vec<VideoEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in rdr.deserialize::<VideoEntry>().enumerate() {
        let line = i + 2;
        let e = rec.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        if e.video_id.is_empty() || e.source_id.is_empty() {
            return Err(Error::parse(origin, line, "empty video_id or source_id"));
        }
        if !seen.insert(e.video_id.clone()) {
            return Err(Error::DuplicateId(e.video_id));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn read_video_list(path: &Path) -> Result<Vec<VideoEntry>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_video_list(&fs::read_to_string(path)?, path)
}

pub fn write_video_list(path: &Path, entries: &[VideoEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "source_id", "enhancement_tag", "path", "reference_path"])?;
    for e in entries {
        let r = e.reference_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        w.write_record([&e.video_id, &e.source_id, &e.enhancement_tag, &e.path.display().to_string(), &r])?;
    }
    w.flush()?;
    Ok(())
}

/// Resolves a path from a list file against the list's directory.
pub fn resolve(list: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        list.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = RawVideo::new(2, 1, 2, (0..12).collect()).unwrap();
        let bytes = encode(&v);
        assert!(bytes.starts_with(b"RMTV 2 1 2\n"));
        assert_eq!(decode(&bytes).unwrap(), v);
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            &b"RMTV 2 1 2"[..],
            b"RMTX 1 1 1\n...",
            b"RMTV 1 1 1\n..",
            b"RMTV 1 1 1\n....",
            b"RMTV 0 1 1\n",
            b"RMTV +1 1 1\n...",
            b"RMTV 1 1 1 1\n...",
            b"RMTV 99999999999999999999 1 1\n",
        ] {
            assert!(decode(bad).is_err(), "{:?}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn video_list_reports_line_numbers() {
        let text = "video_id,source_id,enhancement_tag,path,reference_path\na,s,noise,a.rmtv,\nb,s\n";
        match parse_video_list(text, Path::new("x.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "video_id,source_id,enhancement_tag,path,reference_path\na,s,n,a,\na,s,n,a,\n";
        assert!(matches!(parse_video_list(dup, Path::new("x.csv")), Err(Error::DuplicateId(_))));
    }
}
