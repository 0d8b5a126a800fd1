//! Feature-sequence datasets, their on-disk layout, and a synthetic
//! generator of instructional-video-like feature data.

mod io;
mod synth;
mod validate;

pub use io::{
    file_stem, load_dataset, load_segments, read_features, save_dataset, save_segments, write_features,
    SegmentsFile, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{generate_synthetic, Ordering, SynthConfig};
pub use validate::{check_segments, validate, Violation};

use crate::labeling::{Labeling, Run};
use crate::numcore::Matrix;

/// One video: `T × D` per-frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub task_id: String,
    pub features: Matrix,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }
}

/// Half-open interval `[start, end)` labeled with an action; `None` is null.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub action: Option<usize>,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Converts covering segments to a per-frame labeling (null becomes `k`).
pub fn segments_to_labeling(segments: &[Segment], k: usize) -> Labeling {
    let runs: Vec<Run> = segments
        .iter()
        .map(|s| Run {
            symbol: s.action.unwrap_or(k),
            start: s.start,
            end: s.end,
        })
        .collect();
    Labeling::from_runs(&runs, k)
}

pub fn labeling_to_segments(l: &Labeling) -> Vec<Segment> {
    l.runs()
        .into_iter()
        .map(|r| Segment {
            action: (r.symbol < l.k()).then_some(r.symbol),
            start: r.start,
            end: r.end,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub feature_dim: usize,
    pub videos: Vec<FeatureSequence>,
    /// Ground-truth segments, parallel to `videos` when present.
    pub ground_truth: Option<Vec<Vec<Segment>>>,
    pub k_true: Option<usize>,
}

impl Dataset {
    /// Ground-truth class count: `k_true`, else the largest action index + 1.
    pub fn num_classes(&self) -> Option<usize> {
        self.k_true.or_else(|| {
            self.ground_truth.as_ref().map(|gt| {
                gt.iter()
                    .flatten()
                    .filter_map(|s| s.action)
                    .max()
                    .map_or(0, |m| m + 1)
            })
        })
    }

    pub fn gt_labelings(&self) -> Option<Vec<Labeling>> {
        let k = self.num_classes()?;
        self.ground_truth
            .as_ref()
            .map(|gt| gt.iter().map(|s| segments_to_labeling(s, k)).collect())
    }

    pub fn mean_len(&self) -> f64 {
        if self.videos.is_empty() {
            return 0.0;
        }
        self.videos.iter().map(FeatureSequence::len).sum::<usize>() as f64 / self.videos.len() as f64
    }
}
