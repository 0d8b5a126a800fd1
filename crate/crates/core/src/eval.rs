//! Evaluation: Hungarian matching of predicted symbols to ground-truth
//! classes, then frame accuracy (MoF), Jaccard, interval F1 and confusion.
//!
//! Null is never matched. A frame where both ground truth and prediction are
//! null is ignored by MoF; every other frame counts.

use serde::{Deserialize, Serialize};

use crate::data::{labeling_to_segments, Segment};
use crate::error::{Error, Result};
use crate::labeling::Labeling;

/// Maximum-weight assignment of rows to columns of a rectangular matrix.
///
/// Returns the column of each row (`None` for rows left unassigned when
/// there are more rows than columns) and the total weight.
pub fn hungarian_max(w: &[Vec<u64>]) -> (Vec<Option<usize>>, u64) {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return (vec![None; rows], 0);
    }
    let max = w.iter().flatten().copied().max().unwrap_or(0) as i64;
    // minimization on `max − w`, padded with zero-weight dummies
    let cost = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            max - w[i][j] as i64
        } else {
            max
        }
    };
    // 1-indexed potentials formulation, O(n³)
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![None; rows];
    let mut total = 0;
    for j in 1..=n {
        let i = p[j] - 1;
        if i < rows && j - 1 < cols {
            assign[i] = Some(j - 1);
            total += w[i][j - 1];
        }
    }
    (assign, total)
}

/// Injective map from predicted symbols to ground-truth classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping {
    /// `pred_to_true[s]` for each non-null predicted symbol.
    pub pred_to_true: Vec<Option<usize>>,
    pub k_true: usize,
}

impl Mapping {
    pub fn identity(k: usize) -> Self {
        Mapping {
            pred_to_true: (0..k).map(Some).collect(),
            k_true: k,
        }
    }

    /// Class of predicted symbol `s`; null and unmatched symbols give `None`.
    pub fn map(&self, s: usize) -> Option<usize> {
        self.pred_to_true.get(s).copied().flatten()
    }
}

/// Pooled `k_pred × k_true` overlap counts over non-null frames.
pub fn overlap_matrix(preds: &[Labeling], gts: &[Labeling]) -> Result<Vec<Vec<u64>>> {
    let (kp, kt) = ks(preds, gts)?;
    let mut m = vec![vec![0u64; kt]; kp];
    for (p, g) in preds.iter().zip(gts) {
        same_len(p, g)?;
        for (&a, &b) in p.symbols().iter().zip(g.symbols()) {
            if !p.is_null(a) && !g.is_null(b) {
                m[a][b] += 1;
            }
        }
    }
    Ok(m)
}

fn ks(preds: &[Labeling], gts: &[Labeling]) -> Result<(usize, usize)> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let kp = preds.first().map_or(0, Labeling::k);
    let kt = gts.first().map_or(0, Labeling::k);
    if preds.iter().any(|p| p.k() != kp) || gts.iter().any(|g| g.k() != kt) {
        return Err(Error::invalid("inconsistent symbol counts across videos"));
    }
    Ok((kp, kt))
}

fn same_len(p: &Labeling, g: &Labeling) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::invalid(format!("prediction has {} frames, ground truth {}", p.len(), g.len())));
    }
    Ok(())
}

/// Task-level Hungarian matching over all videos.
pub fn match_pooled(preds: &[Labeling], gts: &[Labeling]) -> Result<Mapping> {
    let (_, kt) = ks(preds, gts)?;
    let (assign, _) = hungarian_max(&overlap_matrix(preds, gts)?);
    Ok(Mapping { pred_to_true: assign, k_true: kt })
}

pub fn mof(pred: &Labeling, gt: &Labeling, mapping: &Mapping) -> Result<f64> {
    let (c, n) = mof_counts(pred, gt, mapping)?;
    Ok(if n == 0 { 0.0 } else { c as f64 / n as f64 })
}

fn mof_counts(pred: &Labeling, gt: &Labeling, mapping: &Mapping) -> Result<(u64, u64)> {
    same_len(pred, gt)?;
    let (mut correct, mut total) = (0, 0);
    for (&a, &b) in pred.symbols().iter().zip(gt.symbols()) {
        if gt.is_null(b) && pred.is_null(a) {
            continue;
        }
        total += 1;
        if !gt.is_null(b) && mapping.map(a) == Some(b) {
            correct += 1;
        }
    }
    Ok((correct, total))
}

/// Per-class intersection and union frame counts.
fn iou_counts(pred: &Labeling, gt: &Labeling, mapping: &Mapping, inter: &mut [u64], union: &mut [u64]) -> Result<()> {
    same_len(pred, gt)?;
    for (&a, &b) in pred.symbols().iter().zip(gt.symbols()) {
        let pa = if pred.is_null(a) { None } else { mapping.map(a) };
        let gb = (!gt.is_null(b)).then_some(b);
        match (pa, gb) {
            (Some(x), Some(y)) if x == y => {
                inter[x] += 1;
                union[x] += 1;
            }
            (x, y) => {
                if let Some(x) = x {
                    union[x] += 1;
                }
                if let Some(y) = y {
                    union[y] += 1;
                }
            }
        }
    }
    Ok(())
}

fn mean_iou(inter: &[u64], union: &[u64]) -> f64 {
    let used: Vec<f64> = inter
        .iter()
        .zip(union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if used.is_empty() {
        0.0
    } else {
        used.iter().sum::<f64>() / used.len() as f64
    }
}

/// Per-class frame IoU averaged over classes present in either labeling.
pub fn jaccard(pred: &Labeling, gt: &Labeling, mapping: &Mapping) -> Result<f64> {
    let mut inter = vec![0; mapping.k_true];
    let mut union = vec![0; mapping.k_true];
    iou_counts(pred, gt, mapping, &mut inter, &mut union)?;
    Ok(mean_iou(&inter, &union))
}

/// When a predicted segment counts as a detection of a ground-truth one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Rule {
    /// The predicted segment's midpoint frame lies inside the GT segment.
    #[default]
    Midpoint,
    /// Intersection over union of the two intervals is at least 0.5.
    Overlap,
}

fn hits(p: &Segment, g: &Segment, rule: F1Rule) -> bool {
    match rule {
        F1Rule::Midpoint => {
            let mid = (p.start + p.end - 1) / 2;
            g.start <= mid && mid < g.end
        }
        F1Rule::Overlap => {
            let inter = p.end.min(g.end).saturating_sub(p.start.max(g.start));
            let union = p.end.max(g.end) - p.start.min(g.start);
            2 * inter >= union
        }
    }
}

/// `(true positives, predicted segments, GT segments)` over non-null segments.
fn f1_counts(pred: &[Segment], gt: &[Segment], mapping: &Mapping, rule: F1Rule) -> (usize, usize, usize) {
    let gts: Vec<&Segment> = gt.iter().filter(|s| s.action.is_some()).collect();
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    let mut n_pred = 0;
    for p in pred.iter().filter(|s| s.action.is_some()) {
        n_pred += 1;
        let Some(class) = p.action.and_then(|a| mapping.map(a)) else {
            continue;
        };
        if let Some(i) = (0..gts.len()).find(|&i| !taken[i] && gts[i].action == Some(class) && hits(p, gts[i], rule)) {
            taken[i] = true;
            tp += 1;
        }
    }
    (tp, n_pred, gts.len())
}

fn f1_from(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn interval_f1(pred: &[Segment], gt: &[Segment], mapping: &Mapping, rule: F1Rule) -> f64 {
    let (tp, np, ng) = f1_counts(pred, gt, mapping, rule);
    f1_from(tp, np, ng)
}

/// `k_true × (k_true + 1)` counts over non-null GT frames; the last column
/// collects frames predicted null or with an unmatched symbol.
pub fn confusion(pred: &Labeling, gt: &Labeling, mapping: &Mapping) -> Result<Vec<Vec<u64>>> {
    let kt = mapping.k_true;
    let mut m = vec![vec![0u64; kt + 1]; kt];
    add_confusion(pred, gt, mapping, &mut m)?;
    Ok(m)
}

fn add_confusion(pred: &Labeling, gt: &Labeling, mapping: &Mapping, m: &mut [Vec<u64>]) -> Result<()> {
    same_len(pred, gt)?;
    let kt = mapping.k_true;
    for (&a, &b) in pred.symbols().iter().zip(gt.symbols()) {
        if gt.is_null(b) {
            continue;
        }
        let col = if pred.is_null(a) { None } else { mapping.map(a) };
        m[b][col.unwrap_or(kt)] += 1;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mof,
    Jaccard,
    F1,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mof" => Ok(Metric::Mof),
            "jaccard" => Ok(Metric::Jaccard),
            "f1" => Ok(Metric::F1),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Ground-truth class per predicted symbol, `-1` when unmatched.
    pub mapping: Vec<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mof: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("gt");
        for j in 0..k {
            s.push_str(&format!(",{j}"));
        }
        s.push_str(",unmatched\n");
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Metrics pooled over all videos under one mapping.
pub fn evaluate_with(preds: &[Labeling], gts: &[Labeling], mapping: &Mapping, metrics: &[Metric], rule: F1Rule) -> Result<EvalReport> {
    ks(preds, gts)?;
    let kt = mapping.k_true;
    let (mut c, mut n) = (0, 0);
    let mut inter = vec![0; kt];
    let mut union = vec![0; kt];
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let mut conf = vec![vec![0u64; kt + 1]; kt];
    for (p, g) in preds.iter().zip(gts) {
        let (a, b) = mof_counts(p, g, mapping)?;
        c += a;
        n += b;
        iou_counts(p, g, mapping, &mut inter, &mut union)?;
        let (x, y, z) = f1_counts(&labeling_to_segments(p), &labeling_to_segments(g), mapping, rule);
        tp += x;
        np += y;
        ng += z;
        add_confusion(p, g, mapping, &mut conf)?;
    }
    let want = |m| metrics.contains(&m);
    Ok(EvalReport {
        mapping: mapping.pred_to_true.iter().map(|m| m.map_or(-1, |c| c as i64)).collect(),
        mof: want(Metric::Mof).then(|| if n == 0 { 0.0 } else { c as f64 / n as f64 }),
        jaccard: want(Metric::Jaccard).then(|| mean_iou(&inter, &union)),
        f1: want(Metric::F1).then(|| f1_from(tp, np, ng)),
        confusion: conf,
    })
}

/// Pooled Hungarian matching followed by pooled metrics.
pub fn evaluate(preds: &[Labeling], gts: &[Labeling], metrics: &[Metric], rule: F1Rule) -> Result<EvalReport> {
    let mapping = match_pooled(preds, gts)?;
    evaluate_with(preds, gts, &mapping, metrics, rule)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..40).prop_flat_map(|t| (proptest::collection::vec(0usize..=3, t), proptest::collection::vec(0usize..=3, t)))
    }

    proptest! {
        #[test]
        fn hungarian_mof_beats_other_mappings((p, g) in pair(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let pred = Labeling::new(p, 3);
            let gt = Labeling::new(g, 3);
            let best = match_pooled(&[pred.clone()], &[gt.clone()]).unwrap();
            let other = Mapping { pred_to_true: perm.into_iter().map(Some).collect(), k_true: 3 };
            prop_assert!(mof(&pred, &gt, &best).unwrap() + 1e-12 >= mof(&pred, &gt, &other).unwrap());
        }

        #[test]
        fn metrics_in_unit_interval_and_permutation_invariant((p, g) in pair(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let pred = Labeling::new(p, 3);
            let gt = Labeling::new(g, 3);
            let r = evaluate(&[pred.clone()], &[gt.clone()], &[Metric::Mof, Metric::Jaccard, Metric::F1], F1Rule::Midpoint).unwrap();
            for v in [r.mof, r.jaccard, r.f1] {
                let v = v.unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let apply = |l: &Labeling| Labeling::new(l.symbols().iter().map(|&s| if s < 3 { perm[s] } else { s }).collect(), 3);
            let r2 = evaluate(&[apply(&pred)], &[apply(&gt)], &[Metric::Mof], F1Rule::Midpoint).unwrap();
            prop_assert!((r.mof.unwrap() - r2.mof.unwrap()).abs() < 1e-12);
            // optimal mappings can tie; under the conjugated mapping Jaccard is exactly invariant
            let m = match_pooled(&[pred.clone()], &[gt.clone()]).unwrap();
            let mut conj = vec![None; 3];
            for (s, c) in m.pred_to_true.iter().enumerate() {
                conj[perm[s]] = c.map(|c| perm[c]);
            }
            let conj = Mapping { pred_to_true: conj, k_true: 3 };
            let j1 = jaccard(&pred, &gt, &m).unwrap();
            let j2 = jaccard(&apply(&pred), &apply(&gt), &conj).unwrap();
            prop_assert!((j1 - j2).abs() < 1e-12);
        }
    }
}
