//! Patch manifest: a CSV file with a `#key=value` comment preamble.
//!
//! ```text
//! #seed=7
//! #metric=psnr
//! patch_id,source_id,enhancement_tag,resolution_tag,role,reference_link,proxy_score,path
//! v1_x0_y0_t0,src00,noise_1,full,enhanced,v1_x0_y0_t0_ref,31.5,patches/v1_x0_y0_t0.rmtt
//! ```
//!
//! `reference_link` names the co-located reference patch for enhanced full
//! rows and the full-resolution parent for down rows. Paths are relative to
//! the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patch::Resolution;

pub const HEADER: [&str; 8] =
    ["patch_id", "source_id", "enhancement_tag", "resolution_tag", "role", "reference_link", "proxy_score", "path"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Enhanced,
    Reference,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Enhanced => "enhanced",
            Role::Reference => "reference",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "enhanced" => Ok(Role::Enhanced),
            "reference" => Ok(Role::Reference),
            _ => Err(format!("role must be `enhanced` or `reference`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub patch_id: String,
    pub source_id: String,
    pub enhancement_tag: String,
    pub resolution: Resolution,
    pub role: Role,
    pub reference_link: Option<String>,
    pub proxy_score: Option<f64>,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    /// Preamble entries, e.g. `seed` and `metric`.
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn get(&self, patch_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.patch_id == patch_id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.rows.iter().enumerate().map(|(i, r)| (r.patch_id.as_str(), i)).collect()
    }

    /// Enhanced full-resolution rows: the anchors training draws from.
    pub fn full_enhanced(&self) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(|r| r.role == Role::Enhanced && r.resolution == Resolution::Full)
    }

    /// The down row whose parent is `patch_id`.
    pub fn down_of(&self, patch_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.resolution == Resolution::Down && r.reference_link.as_deref() == Some(patch_id))
    }

    /// Id uniqueness and link structure: every link resolves; down rows
    /// point at a full enhanced row with the same source and tag.
    pub fn validate(&self) -> Result<()> {
        let idx = self.index();
        if idx.len() != self.rows.len() {
            let mut seen = HashSet::new();
            let dup = self.rows.iter().find(|r| !seen.insert(&r.patch_id)).expect("a duplicate exists");
            return Err(Error::DuplicateId(dup.patch_id.clone()));
        }
        for r in &self.rows {
            let Some(link) = &r.reference_link else {
                if r.resolution == Resolution::Down {
                    return Err(Error::MissingReference(r.patch_id.clone()));
                }
                continue;
            };
            let target = idx
                .get(link.as_str())
                .map(|&i| &self.rows[i])
                .ok_or_else(|| Error::Invalid(format!("patch `{}` links to unknown patch `{link}`", r.patch_id)))?;
            let ok = match (r.resolution, r.role) {
                (Resolution::Down, _) => {
                    target.resolution == Resolution::Full
                        && target.role == Role::Enhanced
                        && target.source_id == r.source_id
                        && target.enhancement_tag == r.enhancement_tag
                }
                (Resolution::Full, Role::Enhanced) => target.role == Role::Reference && target.source_id == r.source_id,
                (Resolution::Full, Role::Reference) => false,
            };
            if !ok {
                return Err(Error::Invalid(format!("patch `{}` has an inconsistent link to `{link}`", r.patch_id)));
            }
        }
        Ok(())
    }

    /// Checks that every row's file exists, relative to `base`.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        for r in &self.rows {
            let p = base.join(&r.path);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
        Ok(())
    }
}

fn opt_str(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

pub fn parse(text: &str, origin: &Path) -> Result<Manifest> {
    let mut meta = BTreeMap::new();
    let mut preamble = 0;
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let Some(kv) = line.strip_prefix('#') else { break };
        preamble += 1;
        body_start += line.len();
        let kv = kv.trim_end_matches(['\n', '\r']);
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, preamble, format!("preamble line `#{kv}` is not key=value")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text[body_start..].as_bytes());
    let mut records = rdr.records();
    let header_line = preamble + 1;
    let rows = match records.next() {
        None => Vec::new(),
        Some(h) => {
            let h = h.map_err(|e| Error::parse(origin, header_line, e.to_string()))?;
            if h.iter().collect::<Vec<_>>() != HEADER {
                return Err(Error::parse(origin, header_line, format!("header must be {}", HEADER.join(","))));
            }
            let mut rows = Vec::new();
            for (i, rec) in records.enumerate() {
                let fallback = header_line + 1 + i;
                let rec = rec.map_err(|e| {
                    let line = e.position().map_or(fallback, |p| preamble + p.line() as usize);
                    Error::parse(origin, line, e.to_string())
                })?;
                let line = rec.position().map_or(fallback, |p| preamble + p.line() as usize);
                if rec.len() != HEADER.len() {
                    return Err(Error::parse(origin, line, format!("{} fields, expected {}", rec.len(), HEADER.len())));
                }
                let bad = |m: String| Error::parse(origin, line, m);
                let proxy_score = match &rec[6] {
                    "" => None,
                    s => Some(
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| bad(format!("proxy_score `{s}` is not a finite number")))?,
                    ),
                };
                if rec[0].is_empty() || rec[1].is_empty() || rec[7].is_empty() {
                    return Err(bad("patch_id, source_id and path are required".into()));
                }
                rows.push(ManifestRow {
                    patch_id: rec[0].to_string(),
                    source_id: rec[1].to_string(),
                    enhancement_tag: rec[2].to_string(),
                    resolution: rec[3].parse().map_err(bad)?,
                    role: rec[4].parse().map_err(bad)?,
                    reference_link: opt_str(&rec[5]),
                    proxy_score,
                    path: PathBuf::from(&rec[7]),
                });
            }
            rows
        }
    };
    let m = Manifest { meta, rows };
    let mut seen = HashSet::new();
    if let Some(dup) = m.rows.iter().find(|r| !seen.insert(r.patch_id.as_str())) {
        return Err(Error::DuplicateId(dup.patch_id.clone()));
    }
    Ok(m)
}

pub fn read(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse(&fs::read_to_string(path)?, path)
}

pub fn to_string(m: &Manifest) -> Result<String> {
    let mut out = Vec::new();
    for (k, v) in &m.meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Invalid(format!("preamble entry `{k}` cannot be written")));
        }
        writeln!(out, "#{k}={v}")?;
    }
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
        w.write_record(HEADER)?;
        for r in &m.rows {
            w.write_record([
                r.patch_id.as_str(),
                &r.source_id,
                &r.enhancement_tag,
                &r.resolution.to_string(),
                &r.role.to_string(),
                r.reference_link.as_deref().unwrap_or(""),
                &r.proxy_score.map(|s| s.to_string()).unwrap_or_default(),
                &r.path.display().to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(String::from_utf8(out).expect("csv output is UTF-8"))
}

/// Writes atomically: a sibling temp file renamed over the target.
pub fn write(path: &Path, m: &Manifest) -> Result<()> {
    let text = to_string(m)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
