//! Subjective-score CSV: `video_id,subset_tag,source_id,mos`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub video_id: String,
    pub subset_tag: String,
    pub source_id: String,
    pub mos: f64,
}

pub fn parse_labels(text: &str, origin: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::parse(origin, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["video_id", "subset_tag", "source_id", "mos"] {
        return Err(Error::parse(origin, 1, format!("unexpected header {headers:?}")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<LabelRow>().enumerate() {
        let line = i + 2;
        let r = rec.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        if r.video_id.is_empty() || r.source_id.is_empty() {
            return Err(Error::parse(origin, line, "empty video_id or source_id"));
        }
        if !r.mos.is_finite() {
            return Err(Error::parse(origin, line, "mos must be finite"));
        }
        if !seen.insert(r.video_id.clone()) {
            return Err(Error::DuplicateId(r.video_id));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_labels(&fs::read_to_string(path)?, path)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["video_id", "subset_tag", "source_id", "mos"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
