//! Self-labeling training loop.
//!
//! Each mini-batch runs an E-step (sample candidate rollouts per video, rank
//! them, keep the cheapest) followed by an M-step (one SGD step on the
//! cross-entropy of the model's outputs against the kept labels). After
//! every `length_update_every` epochs the learned length model is refit from
//! greedy segmentations of all videos.
//!
//! All randomness comes from stateless substreams of the run seed keyed by
//! epoch and video, so a resumed run matches an uninterrupted one bit for
//! bit.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TRAIN_MAGIC, TRAIN_VERSION};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crossvideo::{cross_video_cost, cross_video_loss, sample_triplets, CrossVideoConfig};
use crate::data::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::labeling::Labeling;
use crate::model::rollout::ParamCache;
use crate::model::{classify_frames, greedy_segment, init_model, video_loss_graph, ModelConfig, ModelParams, Rollout};
use crate::numcore::{sgd_momentum_step, Gradients, OptimState, Rng, Tape};
use crate::par::{map_range, Exec};
use crate::ranking::{argmin_first, combine_costs, cost_total, update_length_params, CostBreakdown, LengthModel, RankingConfig};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_CANDIDATES: u64 = 3;
const TAG_RANDOM: u64 = 4;
const TAG_CV_COST: u64 = 5;
const TAG_CV_LOSS: u64 = 6;

/// How the E-step picks a candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Minimal ranking cost.
    #[default]
    Cost,
    /// Uniformly random candidate (ablation baseline).
    Random,
}

fn d_epochs() -> usize {
    500
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_clip() -> Option<f64> {
    Some(10.0)
}
fn d_one() -> usize {
    1
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub ranking: RankingConfig,
    #[serde(default)]
    pub cross_video: CrossVideoConfig,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint every this many epochs (0 disables periodic checkpoints).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "d_one")]
    pub length_update_every: usize,
    /// Whether frames labeled null count as cross-entropy targets.
    #[serde(default = "d_true")]
    pub null_as_target: bool,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub exec: Exec,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            base_lr: d_lr(),
            momentum: d_momentum(),
            clip_norm: d_clip(),
            model,
            ranking: RankingConfig::default(),
            cross_video: CrossVideoConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            length_update_every: 1,
            null_as_target: true,
            selection: Selection::Cost,
            exec: Exec::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.length_update_every == 0 {
            return Err(Error::Config("batch_size and length_update_every must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        self.model.check()?;
        self.ranking.check()?;
        self.cross_video.check()
    }

    pub fn steps_per_epoch(&self, n_videos: usize) -> usize {
        n_videos.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_videos: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(n_videos)) as u64
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub opt: OptimState,
    pub lengths: LengthModel,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.check()?;
        let model = init_model(&cfg.model, &mut Rng::new(cfg.seed).substream(&[TAG_INIT]))?;
        let mut opt = OptimState::new(&model.params, cfg.base_lr, cfg.momentum, cfg.total_steps(ds.videos.len()));
        opt.clip_norm = cfg.clip_norm;
        let k = cfg.model.k;
        let lengths = LengthModel::from_config(&cfg.ranking.length, k, ds.mean_len() / k as f64);
        Ok(TrainState { model, opt, lengths, epoch: 0 })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_cost: f64,
    pub mean_loss: f64,
    pub mean_cross_video_loss: f64,
    /// Mean number of runs (null runs included) in the selected labelings.
    pub mean_runs: f64,
    /// Selected labelings with no non-null frame.
    #[serde(default)]
    pub null_only_selected: usize,
    pub lr: f64,
    pub length_mean: Vec<f64>,
    pub length_sigma: Vec<f64>,
    pub wall_time_s: f64,
}

/// The candidate kept for one video.
#[derive(Clone, Debug)]
pub struct Selected {
    /// Index into the batch's video list.
    pub video: usize,
    pub candidate: usize,
    pub rollout: Rollout,
    pub cost: CostBreakdown,
}

impl Selected {
    pub fn labeling(&self) -> &Labeling {
        &self.rollout.symbols
    }
}

/// E-step for one batch. `rngs[i]` is the candidate stream of `videos[i]`.
///
/// Videos shorter than two frames are skipped with a warning.
pub fn self_label_batch(
    model: &ModelParams,
    videos: &[&FeatureSequence],
    rngs: &[Rng],
    cfg: &TrainConfig,
    lengths: &LengthModel,
) -> Result<Vec<Selected>> {
    if videos.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if rngs.len() != videos.len() {
        return Err(Error::invalid("one rng per video required"));
    }
    for v in videos {
        model.check_video_dim(v.dim())?;
    }
    let keep: Vec<usize> = (0..videos.len())
        .filter(|&i| {
            let ok = videos[i].len() >= 2;
            if !ok {
                log::warn!("skipping video {} with {} frame(s)", videos[i].video_id, videos[i].len());
            }
            ok
        })
        .collect();
    let exec = cfg.exec;
    let m = cfg.model.candidates;
    let cache = ParamCache::new(model);
    let frames = map_range(exec, keep.len(), |j| cache.frames(videos[keep[j]]));
    let probs = map_range(exec, keep.len(), |j| classify_frames(model, videos[keep[j]]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let scored = map_range(exec, keep.len() * m, |n| {
        let (j, c) = (n / m, n % m);
        let mut r = rngs[keep[j]].substream(&[c as u64]);
        let ro = cache.rollout(&frames[j], Some(&mut r));
        let cost = cost_total(&ro.symbols, &probs[j], &cfg.ranking, lengths, None);
        cost.map(|c| (ro, c))
    });
    let mut per_video: Vec<Vec<(Rollout, CostBreakdown)>> = (0..keep.len()).map(|_| Vec::with_capacity(m)).collect();
    for (n, s) in scored.into_iter().enumerate() {
        per_video[n / m].push(s?);
    }

    let mut chosen = Vec::with_capacity(keep.len());
    for (j, cands) in per_video.iter().enumerate() {
        let c = match cfg.selection {
            Selection::Cost => argmin_first(&cands.iter().map(|(_, c)| c.total).collect::<Vec<_>>())?,
            Selection::Random => rngs[keep[j]].substream(&[TAG_RANDOM]).below(m),
        };
        chosen.push(c);
    }

    // Cross-video term in the cost: re-rank each video's candidates against
    // the other videos' current choices.
    let cv = &cfg.cross_video;
    if cv.placement.in_cost() && cfg.selection == Selection::Cost && keep.len() > 1 {
        let base: Vec<Labeling> = chosen.iter().enumerate().map(|(j, &c)| per_video[j][c].0.symbols.clone()).collect();
        let kept_videos: Vec<&FeatureSequence> = keep.iter().map(|&i| videos[i]).collect();
        let k = cfg.model.k;
        let updates = map_range(exec, keep.len(), |j| -> Result<(usize, Vec<f64>)> {
            let mut totals = Vec::with_capacity(m);
            for (c, (ro, cost)) in per_video[j].iter().enumerate() {
                let mut ls = base.clone();
                ls[j] = ro.symbols.clone();
                let mut r = rngs[keep[j]].substream(&[TAG_CV_COST, c as u64]);
                let tr = sample_triplets(&ls, cv, &mut r, Some(j));
                let term = cv.loss_weight * cross_video_cost(&kept_videos, &tr, cv)?;
                let total = combine_costs(&cfg.ranking, k, ro.symbols.non_null_count(), cost.occurrence, cost.length, cost.probability, term);
                totals.push(total);
            }
            Ok((argmin_first(&totals)?, totals))
        });
        for (j, u) in updates.into_iter().enumerate() {
            let (c, totals) = u?;
            chosen[j] = c;
            let cost = &mut per_video[j][c].1;
            cost.cross_video = totals[c] - (cost.total - cost.cross_video);
            cost.total = totals[c];
        }
    }

    Ok(per_video
        .into_iter()
        .zip(chosen)
        .enumerate()
        .map(|(j, (mut cands, c))| {
            let (rollout, cost) = cands.swap_remove(c);
            Selected { video: keep[j], candidate: c, rollout, cost }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-video loss (without the cross-video term).
    pub loss: f64,
    pub cross_video_loss: f64,
    pub lr: f64,
}

/// Loss and gradient for one batch without touching the parameters.
pub fn batch_gradients(
    model: &ModelParams,
    videos: &[&FeatureSequence],
    selections: &[Selected],
    cfg: &TrainConfig,
    cv_rng: &Rng,
) -> Result<(f64, f64, Gradients)> {
    if selections.is_empty() {
        return Ok((0.0, 0.0, model.params.zeros_like()));
    }
    let per_video = map_range(cfg.exec, selections.len(), |i| -> Result<(f64, Gradients)> {
        let s = &selections[i];
        let mut tape = Tape::new(&model.params);
        let l = video_loss_graph(&mut tape, model, videos[s.video], &s.rollout, &s.rollout.symbols, cfg.null_as_target, None)?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on video {}", videos[s.video].video_id)));
        }
        Ok((value, tape.backward(l)?))
    });
    let inv = 1.0 / selections.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for r in per_video {
        let (l, g) = r?;
        loss += l;
        grads.add_scaled(&g, inv);
    }
    loss *= inv;

    let cv = &cfg.cross_video;
    let mut cv_loss = 0.0;
    if cv.placement.in_loss() && cv.loss_weight > 0.0 {
        let labelings: Vec<Labeling> = selections.iter().map(|s| s.rollout.symbols.clone()).collect();
        let batch_videos: Vec<&FeatureSequence> = selections.iter().map(|s| videos[s.video]).collect();
        let tr = sample_triplets(&labelings, cv, &mut cv_rng.clone(), None);
        if !tr.is_empty() {
            let mut tape = Tape::new(&model.params);
            let l = cross_video_loss(&mut tape, model, &batch_videos, &tr, cv)?;
            cv_loss = tape.scalar(l);
            if !cv_loss.is_finite() {
                return Err(Error::Numeric("non-finite cross-video loss".into()));
            }
            grads.add_scaled(&tape.backward(l)?, cv.loss_weight);
        }
    }
    Ok((loss, cv_loss, grads))
}

/// M-step: one optimizer update on the selected labels.
pub fn optimize_step(
    model: &mut ModelParams,
    videos: &[&FeatureSequence],
    selections: &[Selected],
    opt: &mut OptimState,
    cfg: &TrainConfig,
    cv_rng: &Rng,
) -> Result<StepStats> {
    let (loss, cv_loss, grads) = batch_gradients(model, videos, selections, cfg, cv_rng)?;
    let lr = sgd_momentum_step(&mut model.params, &grads, opt)?;
    Ok(StepStats { loss, cross_video_loss: cv_loss, lr })
}

/// Greedy segmentations of every video.
pub fn segment_all(model: &ModelParams, videos: &[FeatureSequence], exec: Exec) -> Result<Vec<Rollout>> {
    map_range(exec, videos.len(), |i| greedy_segment(model, &videos[i])).into_iter().collect()
}

fn check_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if ds.videos.is_empty() {
        return Err(Error::invalid("dataset has no videos"));
    }
    if ds.feature_dim != cfg.model.feature_dim {
        return Err(Error::Validation(format!(
            "dataset feature dim {} does not match model feature dim {}",
            ds.feature_dim, cfg.model.feature_dim
        )));
    }
    Ok(())
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochRecord>)> {
    check_dataset(ds, cfg)?;
    let mut state = TrainState::init(cfg, ds)?;
    let mut log = Vec::new();
    train_from(ds, cfg, &mut state, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((state, log))
}

/// Continues `state` up to `cfg.epochs`, calling `on_epoch` after each epoch.
pub fn train_from<F>(ds: &Dataset, cfg: &TrainConfig, state: &mut TrainState, mut on_epoch: F) -> Result<()>
where
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    cfg.check()?;
    check_dataset(ds, cfg)?;
    if state.model.config != cfg.model {
        return Err(Error::Config("model config differs from the checkpoint's".into()));
    }
    let expected = cfg.total_steps(ds.videos.len());
    if state.opt.total_steps != expected {
        return Err(Error::Config(format!(
            "checkpoint schedule has {} steps, config implies {expected}",
            state.opt.total_steps
        )));
    }
    let root = Rng::new(cfg.seed);
    let n = ds.videos.len();
    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let e = state.epoch as u64;
        let mut order: Vec<usize> = (0..n).collect();
        root.substream(&[TAG_SHUFFLE, e]).shuffle(&mut order);

        let (mut cost_sum, mut runs_sum, mut counted, mut null_only) = (0.0, 0usize, 0usize, 0usize);
        let (mut loss_sum, mut cv_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut lr = state.opt.current_lr()?;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let videos: Vec<&FeatureSequence> = chunk.iter().map(|&i| &ds.videos[i]).collect();
            let rngs: Vec<Rng> = chunk.iter().map(|&i| root.substream(&[TAG_CANDIDATES, e, i as u64])).collect();
            let sel = self_label_batch(&state.model, &videos, &rngs, cfg, &state.lengths)?;
            for s in &sel {
                cost_sum += s.cost.total;
                runs_sum += s.rollout.symbols.runs().len();
                null_only += usize::from(s.rollout.symbols.non_null_count() == 0);
            }
            counted += sel.len();
            let cv_rng = root.substream(&[TAG_CV_LOSS, e, b as u64]);
            let stats = optimize_step(&mut state.model, &videos, &sel, &mut state.opt, cfg, &cv_rng)?;
            loss_sum += stats.loss;
            cv_sum += stats.cross_video_loss;
            lr = stats.lr;
            batches += 1;
        }

        state.epoch += 1;
        if state.lengths.learned && state.epoch % cfg.length_update_every == 0 {
            let segs: Vec<Labeling> = segment_all(&state.model, &ds.videos, cfg.exec)?
                .into_iter()
                .map(|r| r.symbols)
                .collect();
            state.lengths = update_length_params(&state.lengths, &segs);
        }
        let denom = |x: usize| x.max(1) as f64;
        let record = EpochRecord {
            epoch: state.epoch,
            mean_cost: cost_sum / denom(counted),
            mean_loss: loss_sum / denom(batches),
            mean_cross_video_loss: cv_sum / denom(batches),
            mean_runs: runs_sum as f64 / denom(counted),
            null_only_selected: null_only,
            lr,
            length_mean: state.lengths.mean.clone(),
            length_sigma: state.lengths.sigma.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} cost {:.4} loss {:.4} runs {:.2} lr {:.5}",
            record.epoch,
            record.mean_cost,
            record.mean_loss,
            record.mean_runs,
            record.lr
        );
        on_epoch(state, &record)?;
    }
    Ok(())
}
