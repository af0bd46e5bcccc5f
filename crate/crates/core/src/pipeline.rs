//! Dataset-level steps: patch extraction, embedding caches, whole-video
//! embeddings and joining them with subjective scores.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crossval::LabeledVideo;
use crate::encoder::{self, EmbeddingTable, Encoder, Frame};
use crate::error::{Error, Result};
use crate::labels::LabelRow;
use crate::manifest::{self, Manifest, ManifestRow, Role};
use crate::nn::ParamStore;
use crate::patch::{self, PatchRecord, Resolution, VideoLabels};
use crate::rmtt;
use crate::rmvit::{self, RmvitConfig};
use crate::tensor::Tensor;
use crate::video::{self, RawVideo};

pub const PATCH_DIR: &str = "patches";
pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Quarter turns applied as augmentation; `0` keeps the original.
    pub rotations: Vec<u8>,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { rotations: vec![0], seed: 0 }
    }
}

fn row(p: &PatchRecord, role: Role) -> ManifestRow {
    ManifestRow {
        patch_id: p.patch_id.clone(),
        source_id: p.source_id.clone(),
        enhancement_tag: p.enhancement_tag.clone(),
        resolution: p.resolution,
        role,
        reference_link: p.reference_link.clone(),
        proxy_score: p.proxy_score,
        path: PathBuf::from(PATCH_DIR).join(format!("{}.rmtt", p.patch_id)),
    }
}

/// Cuts every listed video into windows, adds rotations and down-sampled
/// counterparts, writes the pixels under `out/patches/` and the manifest to
/// `out/manifest.csv`. Videos are processed one at a time.
pub fn extract_dataset(list: &Path, out: &Path, cfg: &ExtractConfig) -> Result<Manifest> {
    if cfg.rotations.is_empty() || cfg.rotations.iter().any(|&k| k > 3) {
        return Err(Error::Config("rotations must be a non-empty subset of 0..=3".into()));
    }
    let mut rotations = cfg.rotations.clone();
    rotations.sort_unstable();
    rotations.dedup();
    let entries = video::read_video_list(list)?;
    let mut m = Manifest::default();
    m.meta.insert("seed".into(), cfg.seed.to_string());
    m.meta.insert("rotations".into(), rotations.iter().map(u8::to_string).collect::<Vec<_>>().join(" "));
    let write = |p: &PatchRecord, role: Role, m: &mut Manifest| -> Result<()> {
        let r = row(p, role);
        patch::write_pixels(&out.join(&r.path), &p.pixels)?;
        m.rows.push(r);
        Ok(())
    };
    for e in &entries {
        let v = video::read(&video::resolve(list, &e.path))?;
        let reference = e.reference_path.as_ref().map(|p| video::read(&video::resolve(list, p))).transpose()?;
        let labels =
            VideoLabels { video_id: &e.video_id, source_id: &e.source_id, enhancement_tag: &e.enhancement_tag };
        for (enh, ref_patch) in patch::extract_patches(&v, reference.as_ref(), &labels, cfg.seed)? {
            for &k in &rotations {
                let mut enh_k = patch::augment_rotate(&enh, k)?;
                if let Some(r) = &ref_patch {
                    let ref_k = patch::augment_rotate(r, k)?;
                    enh_k.reference_link = Some(ref_k.patch_id.clone());
                    write(&ref_k, Role::Reference, &mut m)?;
                }
                let down = patch::downsample_patch(&enh_k)?;
                write(&enh_k, Role::Enhanced, &mut m)?;
                write(&down, Role::Enhanced, &mut m)?;
            }
        }
        log::info!("extracted {}", e.video_id);
    }
    m.validate()?;
    manifest::write(&out.join(MANIFEST), &m)?;
    Ok(m)
}

const CACHE_META: &str = "encoder.json";

/// Frame embeddings for every patch in `ids`, cached under `dir` and keyed
/// by the encoder fingerprint; a cache from another encoder is rebuilt.
pub fn patch_embeddings<'a>(
    m: &Manifest,
    base: &Path,
    ids: impl IntoIterator<Item = &'a str>,
    enc: &Encoder,
    dir: &Path,
) -> Result<HashMap<String, Tensor>> {
    let fingerprint = enc.fingerprint();
    let ids: Vec<&str> = ids.into_iter().collect();
    let meta = dir.join(CACHE_META);
    if meta.is_file() && fs::read_to_string(&meta)?.trim() == fingerprint {
        if let Ok(table) = EmbeddingTable::load(&dir.join("index.csv"), enc.dim()) {
            if let Ok(found) = ids.iter().map(|id| Ok((id.to_string(), table.patch(id)?))).collect::<Result<_>>() {
                return Ok(found);
            }
        }
        log::info!("embedding cache in {} is incomplete; rebuilding", dir.display());
    }
    let idx = m.index();
    let mut out = Vec::with_capacity(ids.len());
    for id in &ids {
        let r = idx.get(id).map(|&i| &m.rows[i]).ok_or_else(|| Error::MissingKey(format!("patch `{id}`")))?;
        let pixels = match enc.spec().kind {
            encoder::EncoderKind::Precomputed => None,
            _ => Some(patch::read_pixels(&base.join(&r.path))?),
        };
        out.push((id.to_string(), enc.encode_patch(id, pixels.as_ref())?));
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    encoder::write_table(dir, &out)?;
    fs::write(&meta, &fingerprint)?;
    Ok(out.into_iter().collect())
}

/// Planar frame `t` of an interleaved RGB video.
pub fn video_frame(v: &RawVideo, t: usize) -> Frame {
    let plane = v.width * v.height;
    let mut planes = vec![0f32; 3 * plane];
    for (i, px) in v.frame(t).chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * plane + i] = f32::from(px[c]);
        }
    }
    Frame { height: v.height, width: v.width, planes }
}

/// `T × D` embeddings of the first `frames` frames (all when `None`).
pub fn encode_video(enc: &Encoder, video_id: &str, v: &RawVideo, frames: Option<usize>) -> Result<Tensor> {
    if enc.spec().kind == encoder::EncoderKind::Precomputed {
        let t = enc.encode_patch(video_id, None)?;
        let n = frames.unwrap_or(t.rows()).min(t.rows());
        return Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec());
    }
    let n = frames.unwrap_or(v.frames).min(v.frames);
    let mut data = Vec::with_capacity(n * enc.dim());
    for t in 0..n {
        data.extend(enc.encode_frame(&video_frame(v, t))?);
    }
    Tensor::matrix(n, enc.dim(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoVector {
    pub video_id: String,
    pub h_v: Vec<f32>,
    pub frames_used: usize,
}

/// Whole-video embeddings `h_v` for every entry of a video list.
pub fn embed_videos(
    list: &Path,
    enc: &Encoder,
    model: &RmvitConfig,
    params: &ParamStore,
    frames: Option<usize>,
) -> Result<Vec<VideoVector>> {
    let mut out = Vec::new();
    for e in video::read_video_list(list)? {
        let v = video::read(&video::resolve(list, &e.path))?;
        let x = encode_video(enc, &e.video_id, &v, frames)?;
        let emb = rmvit::embed_video(model, params, &x)?;
        out.push(VideoVector { video_id: e.video_id, h_v: emb.h_v.data().to_vec(), frames_used: emb.frames_used });
    }
    Ok(out)
}

pub const HV_TENSOR: &str = "hv.rmtt";
pub const HV_INDEX: &str = "hv.csv";

/// Writes `hv.rmtt` (`n × D`) and `hv.csv` (`video_id,row`) into `dir`.
pub fn write_hv(dir: &Path, vectors: &[VideoVector]) -> Result<()> {
    let d = vectors.first().map_or(0, |v| v.h_v.len());
    if d == 0 || vectors.iter().any(|v| v.h_v.len() != d) {
        return Err(Error::Shape("video embeddings must be non-empty and share a width".into()));
    }
    fs::create_dir_all(dir)?;
    let data = vectors.iter().flat_map(|v| v.h_v.iter().copied()).collect();
    rmtt::write(&dir.join(HV_TENSOR), &Tensor::matrix(vectors.len(), d, data)?)?;
    let mut w = csv::Writer::from_path(dir.join(HV_INDEX))?;
    w.write_record(["video_id", "row"])?;
    for (i, v) in vectors.iter().enumerate() {
        w.write_record([v.video_id.as_str(), &i.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hv(dir: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let t = rmtt::read(&dir.join(HV_TENSOR))?;
    t.expect_matrix("video embeddings")?;
    let index = dir.join(HV_INDEX);
    if !index.is_file() {
        return Err(Error::MissingFile(index));
    }
    #[derive(Deserialize)]
    struct Row {
        video_id: String,
        row: usize,
    }
    let mut out = BTreeMap::new();
    for (i, r) in csv::Reader::from_path(&index)?.deserialize::<Row>().enumerate() {
        let r = r.map_err(|e| Error::parse(&index, i + 2, e.to_string()))?;
        if r.row >= t.rows() {
            return Err(Error::parse(&index, i + 2, format!("row {} out of range", r.row)));
        }
        let v = t.row_slice(r.row).iter().map(|&x| f64::from(x)).collect();
        if out.insert(r.video_id.clone(), v).is_some() {
            return Err(Error::DuplicateId(r.video_id));
        }
    }
    Ok(out)
}

/// Pairs each labelled video with its embedding. Every label needs one.
pub fn join_labels(labels: &[LabelRow], hv: &BTreeMap<String, Vec<f64>>) -> Result<Vec<LabeledVideo>> {
    let out = labels
        .iter()
        .map(|l| {
            Ok(LabeledVideo {
                video_id: l.video_id.clone(),
                source_id: l.source_id.clone(),
                subset_tag: l.subset_tag.clone(),
                embedding: hv
                    .get(&l.video_id)
                    .ok_or_else(|| Error::MissingKey(format!("embedding for `{}`", l.video_id)))?
                    .clone(),
                mos: l.mos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let unused = hv.len().saturating_sub(out.len());
    if unused > 0 {
        log::warn!("{unused} embedded videos have no label and are ignored");
    }
    Ok(out)
}

/// Rows of the manifest that are still unscored full-resolution patches.
pub fn unscored(m: &Manifest) -> usize {
    m.rows.iter().filter(|r| r.resolution == Resolution::Full && r.proxy_score.is_none()).count()
}
