use super::{Dataset, Segment};

/// One broken invariant, tied to a video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub video_id: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.video_id, self.rule)
    }
}

/// Checks that `segments` are sorted, contiguous and cover `[0, t)`, and that
/// every action is below `k` (when known). Returns the first problem found.
pub fn check_segments(segments: &[Segment], t: usize, k: Option<usize>) -> Option<String> {
    let mut cursor = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.start >= s.end {
            return Some(format!("segment {i} is empty or reversed ({}..{})", s.start, s.end));
        }
        if s.start < cursor {
            return Some(format!("segment {i} overlaps its predecessor at frame {}", s.start));
        }
        if s.start > cursor {
            return Some(format!("gap before segment {i}: frames {cursor}..{}", s.start));
        }
        if let (Some(a), Some(k)) = (s.action, k) {
            if a >= k {
                return Some(format!("segment {i} has action {a} >= k_true {k}"));
            }
        }
        cursor = s.end;
    }
    if cursor != t {
        return Some(format!("segments cover [0, {cursor}) but video has {t} frames"));
    }
    None
}

/// Every violated dataset invariant; empty iff the dataset is well-formed.
pub fn validate(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |video_id: &str, rule: String| {
        out.push(Violation {
            video_id: video_id.to_string(),
            rule,
        })
    };
    for v in &ds.videos {
        if v.len() == 0 {
            push(&v.video_id, "video has no frames".into());
        }
        if v.dim() != ds.feature_dim {
            push(
                &v.video_id,
                format!("feature dim {} differs from dataset dim {}", v.dim(), ds.feature_dim),
            );
        }
        if !v.features.is_finite() {
            push(&v.video_id, "non-finite feature value".into());
        }
    }
    if let Some(gt) = &ds.ground_truth {
        if gt.len() != ds.videos.len() {
            push(
                "<dataset>",
                format!("ground truth lists {} videos, dataset has {}", gt.len(), ds.videos.len()),
            );
        }
        for (v, segs) in ds.videos.iter().zip(gt) {
            if let Some(msg) = check_segments(segs, v.len(), ds.k_true) {
                push(&v.video_id, msg);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn dataset() -> Dataset {
        let mut cfg = SynthConfig::new(3);
        cfg.n_videos = 4;
        generate_synthetic(&cfg).unwrap()
    }

    #[test]
    fn fresh_dataset_is_valid() {
        assert!(validate(&dataset()).is_empty());
    }

    #[test]
    fn overlap_is_reported_once() {
        let mut ds = dataset();
        let gt = ds.ground_truth.as_mut().unwrap();
        gt[1][1].start -= 3;
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].video_id, "video_0001");
        assert!(v[0].rule.contains("overlap"));
    }

    #[test]
    fn nan_is_reported_once() {
        let mut ds = dataset();
        ds.videos[2].features.set(0, 0, f64::NAN);
        ds.videos[2].features.set(3, 1, f64::NAN);
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("non-finite"));
    }
}
