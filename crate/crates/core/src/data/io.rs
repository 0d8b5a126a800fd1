//! Dataset directory layout:
//!
//! ```text
//! dir/manifest.json      {task_id, D, k_true?, videos: [{video_id, feature_file, gt_file?}]}
//! dir/features/<id>.uavf "UAVF", u32 version, u32 T, u32 D, T·D f32 (all little-endian)
//! dir/gt/<id>.json       {segments: [{action, start, end}]}, action -1 = null
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_segments, Dataset, FeatureSequence, Segment};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"UAVF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    task_id: String,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k_true: Option<usize>,
    videos: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    video_id: String,
    feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_file: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SegmentRecord {
    action: i64,
    start: usize,
    end: usize,
}

/// JSON body shared by ground-truth and prediction files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentsFile {
    segments: Vec<SegmentRecord>,
}

impl SegmentsFile {
    pub fn from_segments(segs: &[Segment]) -> Self {
        SegmentsFile {
            segments: segs
                .iter()
                .map(|s| SegmentRecord {
                    action: s.action.map_or(-1, |a| a as i64),
                    start: s.start,
                    end: s.end,
                })
                .collect(),
        }
    }

    pub fn to_segments(&self) -> std::result::Result<Vec<Segment>, String> {
        self.segments
            .iter()
            .map(|r| {
                let action = match r.action {
                    -1 => None,
                    a if a >= 0 => Some(a as usize),
                    a => return Err(format!("invalid action {a}")),
                };
                Ok(Segment {
                    action,
                    start: r.start,
                    end: r.end,
                })
            })
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + features.data().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &buf)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"UAVF\""));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let expected = HEADER_LEN + t * d * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {t}x{d} features, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(t, d, data)
}

pub fn save_segments(path: &Path, segs: &[Segment]) -> Result<()> {
    let json = serde_json::to_vec_pretty(&SegmentsFile::from_segments(segs))
        .map_err(|e| Error::format(path, 0, e.to_string()))?;
    write_file(path, &json)
}

pub fn load_segments(path: &Path) -> Result<Vec<Segment>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: SegmentsFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(path, e.column() as u64, e.to_string()))?;
    file.to_segments().map_err(|m| Error::format(path, 0, m))
}

/// File-system safe stem for a video id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ds.videos.len());
    for (i, v) in ds.videos.iter().enumerate() {
        let stem = file_stem(&v.video_id);
        let feature_file = format!("features/{stem}.uavf");
        write_features(&dir.join(&feature_file), &v.features)?;
        let gt_file = match &ds.ground_truth {
            Some(gt) => {
                let name = format!("gt/{stem}.json");
                save_segments(&dir.join(&name), &gt[i])?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            video_id: v.video_id.clone(),
            feature_file,
            gt_file,
        });
    }
    let manifest = Manifest {
        task_id: ds.task_id.clone(),
        dim: ds.feature_dim,
        k_true: ds.k_true,
        videos: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format(&path, 0, e.to_string()))?;
    write_file(&path, &json)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&mpath, 0, "missing manifest"),
        _ => Error::io(&mpath, e),
    })?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&mpath, e.column() as u64, e.to_string()))?;

    let with_gt = manifest.videos.iter().filter(|v| v.gt_file.is_some()).count();
    if with_gt != 0 && with_gt != manifest.videos.len() {
        return Err(Error::format(
            &mpath,
            0,
            "ground truth must be given for all videos or none",
        ));
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut gt = Vec::new();
    for entry in &manifest.videos {
        let fpath = dir.join(&entry.feature_file);
        let features = read_features(&fpath)?;
        if features.cols() != manifest.dim {
            return Err(Error::format(
                &fpath,
                12,
                format!("feature dim {} differs from manifest D={}", features.cols(), manifest.dim),
            ));
        }
        if let Some(g) = &entry.gt_file {
            let gpath = dir.join(g);
            let segs = load_segments(&gpath)?;
            if let Some(msg) = check_segments(&segs, features.rows(), manifest.k_true) {
                return Err(Error::Validation(format!("{}: {msg}", gpath.display())));
            }
            gt.push(segs);
        }
        videos.push(FeatureSequence {
            video_id: entry.video_id.clone(),
            task_id: manifest.task_id.clone(),
            features,
        });
    }
    Ok(Dataset {
        task_id: manifest.task_id,
        feature_dim: manifest.dim,
        videos,
        ground_truth: (with_gt > 0).then_some(gt),
        k_true: manifest.k_true,
    })
}
