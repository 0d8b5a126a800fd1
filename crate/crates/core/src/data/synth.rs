use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, Segment};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Fixed,
    #[default]
    Partial,
    Random,
}

fn default_dim() -> usize {
    16
}
fn default_videos() -> usize {
    30
}
fn default_mean_len() -> f64 {
    20.0
}
fn default_noise() -> f64 {
    0.25
}
fn default_task() -> String {
    "synthetic".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub k: usize,
    #[serde(default = "default_dim", alias = "D")]
    pub feature_dim: usize,
    #[serde(default = "default_videos")]
    pub n_videos: usize,
    #[serde(default = "default_mean_len")]
    pub mean_len: f64,
    #[serde(default)]
    pub len_jitter: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub ordering: Ordering,
    #[serde(default)]
    pub null_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task_id: String,
}

impl SynthConfig {
    pub fn new(k: usize) -> Self {
        SynthConfig {
            k,
            feature_dim: default_dim(),
            n_videos: default_videos(),
            mean_len: default_mean_len(),
            len_jitter: 0.0,
            noise_sigma: default_noise(),
            ordering: Ordering::Partial,
            null_prob: 0.0,
            seed: 0,
            task_id: default_task(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.n_videos == 0 {
            return bad("n_videos must be >= 1");
        }
        if !(self.mean_len >= 2.0) {
            return bad("mean_len must be >= 2");
        }
        if !(self.len_jitter >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("len_jitter and noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.null_prob) {
            return bad("null_prob must be in [0, 1]");
        }
        Ok(())
    }
}

const MAX_PROTOTYPE_TRIES: usize = 1000;
const PARTIAL_SWAP_PROB: f64 = 0.3;

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

fn draw_prototypes(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let min_sep = 4.0 * cfg.noise_sigma;
    for _ in 0..MAX_PROTOTYPE_TRIES {
        let protos: Vec<Vec<f64>> = (0..cfg.k)
            .map(|_| loop {
                let v: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break v.iter().map(|x| to_f32_precision(x / n)).collect();
                }
            })
            .collect();
        let ok = protos.iter().enumerate().all(|(i, a)| {
            protos[i + 1..].iter().all(|b| {
                let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                d >= min_sep && d > 0.0
            })
        });
        if ok {
            return Ok(protos);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} prototypes in {} dims with separation {}",
        cfg.k, cfg.feature_dim, min_sep
    )))
}

fn action_order(cfg: &SynthConfig, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.k).collect();
    match cfg.ordering {
        Ordering::Fixed => {}
        Ordering::Partial => {
            for i in 0..cfg.k - 1 {
                if rng.bernoulli(PARTIAL_SWAP_PROB) {
                    order.swap(i, i + 1);
                }
            }
        }
        Ordering::Random => rng.shuffle(&mut order),
    }
    order
}

fn segment_len(cfg: &SynthConfig, rng: &mut Rng) -> usize {
    let jitter = if cfg.len_jitter > 0.0 {
        rng.uniform_range(-cfg.len_jitter, cfg.len_jitter)
    } else {
        0.0
    };
    (cfg.mean_len + jitter).round().max(1.0) as usize
}

/// Draws a dataset of `n_videos` videos, each containing every action once.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.check()?;
    let root = Rng::new(cfg.seed);
    let protos = draw_prototypes(cfg, &mut root.substream(&[1]))?;
    let zero = vec![0.0; cfg.feature_dim];

    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut gt = Vec::with_capacity(cfg.n_videos);
    for v in 0..cfg.n_videos {
        let mut rng = root.substream(&[2, v as u64]);
        let order = action_order(cfg, &mut rng);
        let mut segs = Vec::new();
        let mut t = 0;
        for (j, &a) in order.iter().enumerate() {
            if j > 0 && cfg.null_prob > 0.0 && rng.bernoulli(cfg.null_prob) {
                let len = segment_len(cfg, &mut rng);
                segs.push(Segment { action: None, start: t, end: t + len });
                t += len;
            }
            let len = segment_len(cfg, &mut rng);
            segs.push(Segment { action: Some(a), start: t, end: t + len });
            t += len;
        }
        let mut features = Matrix::zeros(t, cfg.feature_dim);
        for s in &segs {
            let proto = s.action.map_or(&zero, |a| &protos[a]);
            for f in s.start..s.end {
                for (x, p) in features.row_mut(f).iter_mut().zip(proto) {
                    let noise = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * rng.normal()
                    } else {
                        0.0
                    };
                    *x = to_f32_precision(p + noise);
                }
            }
        }
        videos.push(FeatureSequence {
            video_id: format!("video_{v:04}"),
            task_id: cfg.task_id.clone(),
            features,
        });
        gt.push(segs);
    }
    Ok(Dataset {
        task_id: cfg.task_id.clone(),
        feature_dim: cfg.feature_dim,
        videos,
        ground_truth: Some(gt),
        k_true: Some(cfg.k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;

    #[test]
    fn noiseless_frames_equal_prototypes() {
        let mut cfg = SynthConfig::new(4);
        cfg.noise_sigma = 0.0;
        cfg.n_videos = 3;
        let ds = generate_synthetic(&cfg).unwrap();
        for (v, segs) in ds.videos.iter().zip(ds.ground_truth.as_ref().unwrap()) {
            for s in segs {
                assert_eq!(s.len(), 20);
                for t in s.start + 1..s.end {
                    assert_eq!(v.frame(t), v.frame(s.start));
                }
            }
        }
    }

    #[test]
    fn fixed_ordering_is_identical_across_videos() {
        let mut cfg = SynthConfig::new(6);
        cfg.ordering = Ordering::Fixed;
        cfg.n_videos = 2;
        let ds = generate_synthetic(&cfg).unwrap();
        let gt = ds.ground_truth.unwrap();
        let order = |s: &Vec<Segment>| s.iter().filter_map(|x| x.action).collect::<Vec<_>>();
        assert_eq!(order(&gt[0]), order(&gt[1]));
    }

    #[test]
    fn seeded_generation_is_bitwise_reproducible() {
        let mut cfg = SynthConfig::new(5);
        cfg.seed = 99;
        cfg.len_jitter = 4.0;
        cfg.null_prob = 0.5;
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn generated_data_is_valid_and_each_action_once() {
        let mut cfg = SynthConfig::new(5);
        cfg.ordering = Ordering::Random;
        cfg.null_prob = 0.7;
        cfg.len_jitter = 5.0;
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(validate(&ds).is_empty());
        for segs in ds.ground_truth.as_ref().unwrap() {
            let mut seen = vec![0; 5];
            for s in segs.iter().filter_map(|s| s.action) {
                seen[s] += 1;
            }
            assert_eq!(seen, vec![1; 5]);
        }
    }

    #[test]
    fn impossible_separation_is_an_error() {
        let mut cfg = SynthConfig::new(3);
        cfg.feature_dim = 1;
        cfg.noise_sigma = 0.1;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn noiseless_nearest_prototype_is_perfect() {
        let mut cfg = SynthConfig::new(5);
        cfg.noise_sigma = 0.0;
        cfg.null_prob = 0.3;
        let ds = generate_synthetic(&cfg).unwrap();
        let gt = ds.ground_truth.as_ref().unwrap();
        // recover prototypes from the first video's segments
        let mut protos = vec![None; 5];
        for s in &gt[0] {
            if let Some(a) = s.action {
                protos[a] = Some(ds.videos[0].frame(s.start).to_vec());
            }
        }
        let protos: Vec<Vec<f64>> = protos.into_iter().map(Option::unwrap).collect();
        for (v, segs) in ds.videos.iter().zip(gt) {
            for s in segs.iter().filter(|s| s.action.is_some()) {
                for t in s.start..s.end {
                    let f = v.frame(t);
                    let best = (0..5)
                        .min_by(|&a, &b| {
                            let da: f64 = f.iter().zip(&protos[a]).map(|(x, y)| (x - y).powi(2)).sum();
                            let db: f64 = f.iter().zip(&protos[b]).map(|(x, y)| (x - y).powi(2)).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    assert_eq!(Some(best), s.action);
                }
            }
        }
    }
}
