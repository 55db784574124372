//! Tracklet ingestion, 8-frame grouping, centroid registration and the
//! on-disk gallery index.
//!
//! Index files (`SHRCIDX1`) are little-endian: the 8-byte magic, `u32` entry
//! count, then per entry a `u32`-length-prefixed UTF-8 subject id, `u32` shape
//! dimension, f32 shape centroid, `u32` appearance dimension, f32 appearance
//! centroid and `u32` source count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aae::AppearanceEmbedding;
use crate::encoders::{SilhouetteInput, SkeletonFrame, SmplParams};
use crate::error::{check_dim, Error, Result};
use crate::io::{LeReader, LeWriter};
use crate::math::{FeatureGrid, Vector};
use crate::model::Model;
use crate::scalar::Real;

pub const INDEX_MAGIC: &[u8; 8] = b"SHRCIDX1";
pub const GROUP_SIZE: usize = 8;
pub const PSEUDO_VIDEO_CLOTHING: &str = "mixed";

/// All modality inputs for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub silhouette: SilhouetteInput<T>,
    pub smpl: SmplParams<T>,
    pub skeleton: SkeletonFrame<T>,
    /// `H × W × 3` RGB crop.
    pub appearance: FeatureGrid<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletRecord<T> {
    pub tracklet_id: String,
    pub subject_id: String,
    pub clothing_id: String,
    pub frames: Vec<Frame<T>>,
}

impl<T: Real> TrackletRecord<T> {
    pub fn new(tracklet_id: &str, subject_id: &str, clothing_id: &str, frames: Vec<Frame<T>>) -> Result<Self> {
        if tracklet_id.is_empty() || subject_id.is_empty() || clothing_id.is_empty() {
            return Err(Error::InvalidInput("tracklet ids must be non-empty".into()));
        }
        if frames.is_empty() {
            return Err(Error::EmptyInput("tracklet frames"));
        }
        Ok(Self {
            tracklet_id: tracklet_id.to_owned(),
            subject_id: subject_id.to_owned(),
            clothing_id: clothing_id.to_owned(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Index groups of exactly `group` frames covering `0..n`.
///
/// Consecutive frames are grouped; a trailing group shorter than `group`
/// (including the only group when `n < group`) is filled by cycling through
/// its own members.
pub fn chunk_frames_with(n: usize, group: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyInput("frame sequence"));
    }
    assert!(group > 0, "group size must be positive");
    Ok((0..n)
        .step_by(group)
        .map(|start| {
            let len = group.min(n - start);
            (0..group).map(|i| start + i % len).collect()
        })
        .collect())
}

pub fn chunk_frames(n: usize) -> Result<Vec<Vec<usize>>> {
    chunk_frames_with(n, GROUP_SIZE)
}

/// A single still image of a known subject.
#[derive(Debug, Clone, PartialEq)]
pub struct StillFrame<T> {
    pub subject_id: String,
    pub frame: Frame<T>,
}

/// Combines stills of one subject, in order, into a tracklet.
pub fn build_pseudo_video<T: Real>(tracklet_id: &str, stills: Vec<StillFrame<T>>) -> Result<TrackletRecord<T>> {
    let subject = stills.first().ok_or(Error::EmptyInput("pseudo-video stills"))?.subject_id.clone();
    if let Some(other) = stills.iter().find(|s| s.subject_id != subject) {
        return Err(Error::SubjectMismatch(subject, other.subject_id.clone()));
    }
    let frames = stills.into_iter().map(|s| s.frame).collect();
    TrackletRecord::new(tracklet_id, &subject, PSEUDO_VIDEO_CLOTHING, frames)
}

/// Flat shape and appearance vectors of one tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletEmbedding<T> {
    pub tracklet_id: String,
    pub subject_id: String,
    pub shape: Vector<T>,
    pub appearance: Vector<T>,
}

/// Runs both branches on a tracklet.
///
/// The shape branch sees the whole sequence. The appearance branch encodes
/// every frame once, aggregates each 8-frame group and averages the groups.
pub fn embed_tracklet<T: Real>(model: &Model<T>, record: &TrackletRecord<T>) -> Result<TrackletEmbedding<T>> {
    if record.frames.is_empty() {
        return Err(Error::EmptyInput("tracklet frames"));
    }
    let ablation = model.ablation;
    let (h, w) = (record.frames[0].silhouette.height(), record.frames[0].silhouette.width());
    let silhouettes: Vec<SilhouetteInput<T>> = record
        .frames
        .iter()
        .map(|f| if ablation.drop_silhouette { SilhouetteInput::empty(h, w) } else { f.silhouette.clone() })
        .collect();
    let smpl: Vec<SmplParams<T>> = record
        .frames
        .iter()
        .map(|f| if ablation.drop_shape3d { SmplParams::zeros() } else { f.smpl.clone() })
        .collect();
    let skeleton: Vec<SkeletonFrame<T>> = record
        .frames
        .iter()
        .map(|f| if ablation.drop_skeleton { SkeletonFrame::zeros() } else { f.skeleton.clone() })
        .collect();
    let shape = model.shape.embed(&silhouettes, &smpl, &skeleton)?.to_vector();

    let encoded = record
        .frames
        .iter()
        .map(|f| model.appearance.encode(&f.appearance))
        .collect::<Result<Vec<_>>>()?;
    let groups = chunk_frames_with(encoded.len(), model.aggregator.group_size())?
        .into_iter()
        .map(|idx| {
            let group: Vec<FeatureGrid<T>> = idx.iter().map(|&i| encoded[i].clone()).collect();
            model.aggregator.embed_group(&group)
        })
        .collect::<Result<Vec<_>>>()?;
    let appearance = AppearanceEmbedding::mean_of(&groups)?.to_vector(model.config.normalize_parts);

    Ok(TrackletEmbedding {
        tracklet_id: record.tracklet_id.clone(),
        subject_id: record.subject_id.clone(),
        shape,
        appearance,
    })
}

/// Embeds tracklets in parallel; output order follows input order.
pub fn embed_all<T: Real>(model: &Model<T>, records: &[TrackletRecord<T>]) -> Result<Vec<TrackletEmbedding<T>>> {
    records.par_iter().map(|r| embed_tracklet(model, r)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    /// One averaged entry per subject.
    #[default]
    Centroid,
    /// One entry per tracklet; subjects are scored by their best tracklet.
    PerTracklet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry<T> {
    pub subject_id: String,
    pub shape: Vector<T>,
    pub appearance: Vector<T>,
    /// Number of tracklets averaged into this entry.
    pub count: usize,
}

/// Gallery entries sorted by subject id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GalleryIndex<T> {
    pub entries: Vec<GalleryEntry<T>>,
}

impl<T: Real> GalleryIndex<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.subject_id.clone()).collect()
    }

    pub fn get(&self, subject_id: &str) -> Option<&GalleryEntry<T>> {
        self.entries.iter().find(|e| e.subject_id == subject_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::default();
        w.bytes(INDEX_MAGIC);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.u32(e.subject_id.len() as u32);
            w.bytes(e.subject_id.as_bytes());
            w.u32(e.shape.dim() as u32);
            w.f32s(e.shape.as_slice());
            w.u32(e.appearance.dim() as u32);
            w.f32s(e.appearance.as_slice());
            w.u32(e.count as u32);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes.strip_prefix(INDEX_MAGIC.as_slice()).ok_or("bad magic")?;
        let mut r = LeReader::new(rest);
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let subject_id = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_owned();
            let shape_dim = r.u32()? as usize;
            let shape = Vector::new(r.f32_vec(shape_dim)?).map_err(|e| e.to_string())?;
            let app_dim = r.u32()? as usize;
            let appearance = Vector::new(r.f32_vec(app_dim)?).map_err(|e| e.to_string())?;
            let count = r.u32()? as usize;
            if count == 0 {
                return Err("zero source count".into());
            }
            entries.push(GalleryEntry { subject_id, shape, appearance, count });
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(Self { entries })
    }
}

/// Writes the index, quantizing centroids to f32.
pub fn save_index<T: Real>(index: &GalleryIndex<T>, path: &Path) -> Result<()> {
    fs::write(path, index.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_index<T: Real>(path: &Path) -> Result<GalleryIndex<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GalleryIndex::from_bytes(&bytes).map_err(|reason| Error::corrupt(path, reason))
}

/// Builds the index from precomputed embeddings. The result does not depend
/// on the order of `embeddings`.
pub fn register_embeddings<T: Real>(
    embeddings: &[TrackletEmbedding<T>],
    mode: RegistrationMode,
) -> Result<GalleryIndex<T>> {
    let mut by_subject: BTreeMap<&str, Vec<&TrackletEmbedding<T>>> = BTreeMap::new();
    for e in embeddings {
        by_subject.entry(e.subject_id.as_str()).or_default().push(e);
    }
    let mut entries = Vec::new();
    for (subject, mut members) in by_subject {
        let (sd, ad) = (members[0].shape.dim(), members[0].appearance.dim());
        for m in &members {
            check_dim(sd, m.shape.dim())?;
            check_dim(ad, m.appearance.dim())?;
        }
        match mode {
            RegistrationMode::Centroid => {
                let shapes: Vec<&Vector<T>> = members.iter().map(|m| &m.shape).collect();
                let apps: Vec<&Vector<T>> = members.iter().map(|m| &m.appearance).collect();
                entries.push(GalleryEntry {
                    subject_id: subject.to_owned(),
                    shape: Vector::mean_of(&shapes)?,
                    appearance: Vector::mean_of(&apps)?,
                    count: members.len(),
                });
            }
            RegistrationMode::PerTracklet => {
                members.sort_by(|a, b| a.tracklet_id.cmp(&b.tracklet_id));
                entries.extend(members.into_iter().map(|m| GalleryEntry {
                    subject_id: subject.to_owned(),
                    shape: m.shape.clone(),
                    appearance: m.appearance.clone(),
                    count: 1,
                }));
            }
        }
    }
    Ok(GalleryIndex { entries })
}

pub fn register<T: Real>(
    tracklets: &[TrackletRecord<T>],
    model: &Model<T>,
    mode: RegistrationMode,
) -> Result<GalleryIndex<T>> {
    if tracklets.is_empty() {
        return Err(Error::EmptyInput("gallery tracklets"));
    }
    register_embeddings(&embed_all(model, tracklets)?, mode)
}

/// One row of a tracklet manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub tracklet_id: String,
    pub subject_id: String,
    pub clothing_id: String,
    /// Frame container path, relative to the manifest's directory unless absolute.
    pub frames_path: String,
}

/// Writes a manifest, optionally preceded by a `# ` comment line.
pub fn write_manifest(path: &Path, rows: &[ManifestRow], comment: Option<&str>) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_owned(), source };
    let mut buf = Vec::new();
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(&mut buf);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let csv_err = |source| Error::Csv { path: path.to_owned(), source };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) => Error::io(path, std::io::Error::new(io.kind(), io.to_string())),
        _ => csv_err(e),
    })?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["tracklet_id", "subject_id", "clothing_id", "frames_path"] {
        return Err(Error::InvalidInput(format!("{}: unexpected manifest header", path.display())));
    }
    r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>().map_err(csv_err)
}

/// Resolves a row's container path against the manifest location.
pub fn resolve_frames_path(manifest: &Path, row: &ManifestRow) -> PathBuf {
    let p = Path::new(&row.frames_path);
    if p.is_absolute() {
        p.to_owned()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}
