//! Cross-video matching of segments labeled with the same action.
//!
//! Segments are represented by the mean of their per-frame vectors: raw
//! features when the objective enters the ranking cost, classification-head
//! hidden activations when it enters the training loss.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::labeling::Labeling;
use crate::model::{classify_graph, ModelParams};
use crate::numcore::{NodeId, Rng, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Triplet,
    #[default]
    Contrastive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    None,
    Cost,
    #[default]
    Loss,
    Both,
}

impl Placement {
    pub fn in_cost(self) -> bool {
        matches!(self, Placement::Cost | Placement::Both)
    }

    pub fn in_loss(self) -> bool {
        matches!(self, Placement::Loss | Placement::Both)
    }
}

fn d_margin() -> f64 {
    1.0
}
fn d_weight() -> f64 {
    0.1
}
fn d_max() -> usize {
    64
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossVideoConfig {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_weight")]
    pub loss_weight: f64,
    #[serde(default = "d_max")]
    pub max_triplets_per_batch: usize,
    /// Clamp the triplet objective at zero. Off gives the raw difference.
    #[serde(default = "d_true")]
    pub hinge: bool,
}

impl Default for CrossVideoConfig {
    fn default() -> Self {
        CrossVideoConfig {
            objective: Objective::Contrastive,
            placement: Placement::Loss,
            margin: d_margin(),
            loss_weight: d_weight(),
            max_triplets_per_batch: d_max(),
            hinge: true,
        }
    }
}

impl CrossVideoConfig {
    pub fn disabled() -> Self {
        CrossVideoConfig {
            placement: Placement::None,
            ..Default::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config("cross_video.margin must be > 0".into()));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(Error::Config("cross_video.loss_weight must be >= 0".into()));
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `max(0, ‖a − p‖ − ‖a − n‖ + α)`, or the raw difference when `hinge` is off.
pub fn triplet_objective(a: &[f64], p: &[f64], n: &[f64], alpha: f64, hinge: bool) -> Result<f64> {
    let v = dist(a, p)? - dist(a, n)? + alpha;
    Ok(if hinge { v.max(0.0) } else { v })
}

/// `½‖a − p‖ + ½ max(0, α − ‖a − n‖)`.
pub fn contrastive_objective(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> Result<f64> {
    Ok(0.5 * dist(a, p)? + 0.5 * (alpha - dist(a, n)?).max(0.0))
}

pub fn objective(cfg: &CrossVideoConfig, a: &[f64], p: &[f64], n: &[f64]) -> Result<f64> {
    match cfg.objective {
        Objective::Triplet => triplet_objective(a, p, n, cfg.margin, cfg.hinge),
        Objective::Contrastive => contrastive_objective(a, p, n, cfg.margin),
    }
}

/// A non-null segment of one batch video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentRef {
    pub video: usize,
    pub action: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: SegmentRef,
    pub positive: SegmentRef,
    pub negative: SegmentRef,
}

fn segments(labelings: &[Labeling]) -> Vec<SegmentRef> {
    labelings
        .iter()
        .enumerate()
        .flat_map(|(v, l)| {
            l.non_null_runs().into_iter().map(move |r| SegmentRef {
                video: v,
                action: r.symbol,
                start: r.start,
                end: r.end,
            })
        })
        .collect()
}

/// Samples anchor/positive/negative segment triplets.
///
/// Every non-null segment whose action also occurs in another video serves
/// once as an anchor (only segments of `anchor_video`, if given). Its
/// positive is drawn uniformly from same-action segments of other videos,
/// its negative uniformly from other-action segments of any video. The
/// result is shuffled and truncated to `max_triplets_per_batch`.
pub fn sample_triplets(labelings: &[Labeling], cfg: &CrossVideoConfig, rng: &mut Rng, anchor_video: Option<usize>) -> Vec<Triplet> {
    let segs = segments(labelings);
    let mut out = Vec::new();
    for a in &segs {
        if anchor_video.is_some_and(|v| v != a.video) {
            continue;
        }
        let pos: Vec<&SegmentRef> = segs.iter().filter(|s| s.action == a.action && s.video != a.video).collect();
        let neg: Vec<&SegmentRef> = segs.iter().filter(|s| s.action != a.action).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        out.push(Triplet {
            anchor: *a,
            positive: *pos[rng.below(pos.len())],
            negative: *neg[rng.below(neg.len())],
        });
    }
    rng.shuffle(&mut out);
    out.truncate(cfg.max_triplets_per_batch);
    out
}

fn feature_mean(video: &FeatureSequence, s: &SegmentRef) -> Vec<f64> {
    let mut m = vec![0.0; video.dim()];
    for t in s.start..s.end {
        for (o, v) in m.iter_mut().zip(video.frame(t)) {
            *o += v;
        }
    }
    let inv = 1.0 / (s.end - s.start) as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Mean objective over `triplets` on raw feature segment means (0 if empty).
pub fn cross_video_cost(videos: &[&FeatureSequence], triplets: &[Triplet], cfg: &CrossVideoConfig) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for tr in triplets {
        let e = |s: &SegmentRef| feature_mean(videos[s.video], s);
        sum += objective(cfg, &e(&tr.anchor), &e(&tr.positive), &e(&tr.negative))?;
    }
    Ok(sum / triplets.len() as f64)
}

/// Differentiable mean objective on classification-head hidden activations.
///
/// Only frames inside sampled segments are pushed through the head. Empty
/// triplet lists give the constant 0.
pub fn cross_video_loss(
    tape: &mut Tape<'_>,
    model: &ModelParams,
    videos: &[&FeatureSequence],
    triplets: &[Triplet],
    cfg: &CrossVideoConfig,
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let mut embed: HashMap<SegmentRef, NodeId> = HashMap::new();
    let mut get = |tape: &mut Tape<'_>, s: &SegmentRef| -> Result<NodeId> {
        if let Some(&n) = embed.get(s) {
            return Ok(n);
        }
        let video = videos[s.video];
        model.check_video_dim(video.dim())?;
        let mut hs = Vec::with_capacity(s.end - s.start);
        for t in s.start..s.end {
            hs.push(classify_graph(tape, video.frame(t))?.0);
        }
        let n = tape.mean(&hs)?;
        embed.insert(*s, n);
        Ok(n)
    };
    let alpha = cfg.margin;
    let mut terms = Vec::with_capacity(triplets.len());
    for tr in triplets {
        let a = get(tape, &tr.anchor)?;
        let p = get(tape, &tr.positive)?;
        let n = get(tape, &tr.negative)?;
        let dp = tape.sub(a, p);
        let dp = tape.norm(dp);
        let dn = tape.sub(a, n);
        let dn = tape.norm(dn);
        let term = match cfg.objective {
            Objective::Triplet => {
                let neg = tape.scale(dn, -1.0);
                let diff = tape.add(dp, neg);
                let v = tape.add_const(diff, &[alpha]);
                if cfg.hinge {
                    tape.relu(v)
                } else {
                    v
                }
            }
            Objective::Contrastive => {
                let neg = tape.scale(dn, -1.0);
                let gap = tape.add_const(neg, &[alpha]);
                let gap = tape.relu(gap);
                tape.weighted_sum(&[dp, gap], 0.5)
            }
        };
        terms.push(term);
    }
    Ok(tape.weighted_sum(&terms, 1.0 / terms.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::numcore::{finite_diff_check, Matrix, ParamSet};

    #[test]
    fn triplet_examples() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_objective(&a, &a, &a, 1.0, true).unwrap(), 1.0);
        assert_eq!(triplet_objective(&a, &a, &[1.0, 0.0], 1.0, true).unwrap(), 0.0);
        assert_eq!(triplet_objective(&a, &a, &[2.0, 0.0], 1.0, true).unwrap(), 0.0);
        assert_eq!(triplet_objective(&a, &a, &[2.0, 0.0], 1.0, false).unwrap(), -1.0);
        assert!(triplet_objective(&a, &a, &[1.0], 1.0, true).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let a = [0.0, 0.0];
        assert_eq!(contrastive_objective(&a, &a, &[3.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_objective(&a, &a, &a, 1.0).unwrap(), 0.5);
        assert_eq!(contrastive_objective(&a, &[0.0, 2.0], &a, 1.0).unwrap(), 1.5);
        assert!(contrastive_objective(&a, &[1.0], &a, 1.0).is_err());
    }

    fn lab(v: &[usize], k: usize) -> Labeling {
        Labeling::new(v.to_vec(), k)
    }

    #[test]
    fn sampling_rules() {
        let cfg = CrossVideoConfig::default();
        let mut rng = Rng::new(0);
        assert!(sample_triplets(&[lab(&[0, 0, 1, 1], 2)], &cfg, &mut rng, None).is_empty());
        let two = [lab(&[0, 0, 2, 1, 1], 2), lab(&[0, 2, 2, 1, 1], 2)];
        let tr = sample_triplets(&two, &cfg, &mut rng, None);
        assert!(tr.len() >= 2);
        for t in &tr {
            assert_ne!(t.anchor.video, t.positive.video);
            assert_eq!(t.anchor.action, t.positive.action);
            assert_ne!(t.anchor.action, t.negative.action);
            for s in [t.anchor, t.positive, t.negative] {
                assert!(s.action < 2);
            }
        }
        let only = sample_triplets(&two, &cfg, &mut rng, Some(1));
        assert!(only.iter().all(|t| t.anchor.video == 1));
        let capped = CrossVideoConfig { max_triplets_per_batch: 1, ..cfg };
        assert_eq!(sample_triplets(&two, &capped, &mut rng, None).len(), 1);
    }

    fn noiseless(order: &[usize]) -> FeatureSequence {
        // action a is the unit vector e_a, 4 frames each
        let mut rows = Vec::new();
        for &a in order {
            for _ in 0..4 {
                let mut r = vec![0.0; 3];
                r[a] = 1.0;
                rows.push(r);
            }
        }
        FeatureSequence {
            video_id: "v".into(),
            task_id: "t".into(),
            features: Matrix::from_rows(&rows).unwrap(),
        }
    }

    #[test]
    fn feature_cost_prefers_consistent_labels() {
        let cfg = CrossVideoConfig { objective: Objective::Triplet, ..Default::default() };
        let v = noiseless(&[0, 1, 2]);
        let videos = [&v, &v];
        let good = lab(&[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2], 3);
        let swapped = lab(&[1, 1, 1, 1, 0, 0, 0, 0, 2, 2, 2, 2], 3);
        let cost = |ls: &[Labeling]| {
            let mut total = 0.0;
            for seed in 0..20 {
                let tr = sample_triplets(ls, &cfg, &mut Rng::new(seed), None);
                total += cross_video_cost(&videos, &tr, &cfg).unwrap();
            }
            total
        };
        let consistent = cost(&[good.clone(), good.clone()]);
        assert!(consistent < 1e-12, "{consistent}");
        assert!(cost(&[good, swapped]) > consistent);
        assert_eq!(cross_video_cost(&videos, &[], &cfg).unwrap(), 0.0);
    }

    fn tiny_model() -> ModelParams {
        let cfg = ModelConfig {
            n_states: 4,
            state_dim: 3,
            hidden_dim: 5,
            candidates: 4,
            ..ModelConfig::new(3, 3)
        };
        init_model(&cfg, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn empty_loss_is_zero_with_zero_gradient() {
        let m = tiny_model();
        let v = noiseless(&[0, 1]);
        let mut tape = Tape::new(&m.params);
        let l = cross_video_loss(&mut tape, &m, &[&v], &[], &CrossVideoConfig::default()).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert!(tape.backward(l).unwrap().is_zero());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let m = tiny_model();
        let mut rng = Rng::new(9);
        let mk = |rng: &mut Rng| FeatureSequence {
            video_id: "v".into(),
            task_id: "t".into(),
            features: Matrix::from_vec(8, 3, (0..24).map(|_| rng.normal()).collect()).unwrap(),
        };
        let (v0, v1) = (mk(&mut rng), mk(&mut rng));
        let ls = [lab(&[0, 0, 1, 1, 3, 2, 2, 2], 3), lab(&[0, 1, 1, 1, 2, 2, 3, 3], 3)];
        for objective in [Objective::Triplet, Objective::Contrastive] {
            // large margin keeps the hinges active away from their kinks
            let cfg = CrossVideoConfig { objective, margin: 5.0, ..Default::default() };
            let tr = sample_triplets(&ls, &cfg, &mut Rng::new(1), None);
            assert!(!tr.is_empty());
            let f = |ps: &ParamSet| {
                let mm = ModelParams { params: ps.clone(), ..m.clone() };
                let mut tape = Tape::new(ps);
                let l = cross_video_loss(&mut tape, &mm, &[&v0, &v1], &tr, &cfg)?;
                Ok((tape.scalar(l), tape.backward(l)?))
            };
            let err = finite_diff_check(f, &m.params, 1e-4).unwrap();
            assert!(err < 1e-5, "{objective:?}: {err}");
        }
    }
}
