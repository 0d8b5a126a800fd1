//! Tape-free forward passes used for candidate generation and inference.
//!
//! The first layers of the selector and action head act on concatenated
//! `[state ‖ frame ‖ rule]` inputs, so their products are cached per state,
//! per rule and per frame and summed at each step. The summation order is
//! the one the tape uses, so replaying a rollout on a tape reproduces its
//! values exactly.

use super::{ModelParams, ACT_B1, ACT_B2, ACT_W1, ACT_W2, CLS_B1, CLS_B2, CLS_W1, CLS_W2, INITIAL_STATE, RULE_EMB, SEL_B1, SEL_B2, SEL_W1, SEL_W2, STATE_EMB};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::labeling::Labeling;
use crate::numcore::matrix::combine_partials;
use crate::numcore::ops::{argmax, perturbed, softmax_unchecked};
use crate::numcore::Rng;
use crate::par::{map_range, Exec};

/// One application of the state model at a single frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub action_dist: Vec<f64>,
    pub rule_logits: Vec<f64>,
    pub rule: usize,
    pub next_state: usize,
}

/// A full pass of the state model over a video.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub symbols: Labeling,
    /// `T × n_outputs` action distributions.
    pub action_dists: Vec<Vec<f64>>,
    pub rule_choices: Vec<usize>,
    /// `T + 1` states, starting at the initial state.
    pub state_path: Vec<usize>,
    /// Gumbel noise drawn at each step; `None` for greedy rollouts.
    pub noise: Option<Vec<Vec<f64>>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.action_dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_dists.is_empty()
    }
}

fn tanh_vec(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.tanh());
    v
}

/// Per-state and per-rule products of the first-layer weights.
pub(crate) struct ParamCache<'a> {
    model: &'a ModelParams,
    sel_state: Vec<Vec<f64>>,
    act_state: Vec<Vec<f64>>,
    act_rule: Vec<Vec<f64>>,
}

/// Per-frame products of the first-layer weights.
pub(crate) struct FrameCache {
    sel: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl<'a> ParamCache<'a> {
    pub(crate) fn new(model: &'a ModelParams) -> Self {
        let p = &model.params;
        let sd = model.config.state_dim;
        let d = model.config.feature_dim;
        let emb = p.get(STATE_EMB);
        let remb = p.get(RULE_EMB);
        ParamCache {
            model,
            sel_state: emb.iter_rows().map(|s| p.get(SEL_W1).partial_matvec(0, s)).collect(),
            act_state: emb.iter_rows().map(|s| p.get(ACT_W1).partial_matvec(0, s)).collect(),
            act_rule: remb
                .iter_rows()
                .map(|r| p.get(ACT_W1).partial_matvec(sd + d, r))
                .collect(),
        }
    }

    pub(crate) fn frames(&self, video: &FeatureSequence) -> FrameCache {
        let p = &self.model.params;
        let sd = self.model.config.state_dim;
        FrameCache {
            sel: video
                .features
                .iter_rows()
                .map(|f| p.get(SEL_W1).partial_matvec(sd, f))
                .collect(),
            act: video
                .features
                .iter_rows()
                .map(|f| p.get(ACT_W1).partial_matvec(sd, f))
                .collect(),
        }
    }

    fn rule_logits(&self, state: usize, sel_frame: &[f64]) -> Vec<f64> {
        let p = &self.model.params;
        let h = tanh_vec(combine_partials(
            &[&self.sel_state[state], sel_frame],
            p.get(SEL_B1).data(),
        ));
        combine_partials(&[&p.get(SEL_W2).partial_matvec(0, &h)], p.get(SEL_B2).data())
    }

    fn action_dist(&self, state: usize, rule: usize, act_frame: &[f64]) -> Vec<f64> {
        let p = &self.model.params;
        let g = state * self.model.config.rules_per_state + rule;
        let h = tanh_vec(combine_partials(
            &[&self.act_state[state], act_frame, &self.act_rule[g]],
            p.get(ACT_B1).data(),
        ));
        let logits = combine_partials(&[&p.get(ACT_W2).partial_matvec(0, &h)], p.get(ACT_B2).data());
        softmax_unchecked(&logits)
    }

    fn step(&self, state: usize, sel_frame: &[f64], act_frame: &[f64], noise: Option<&[f64]>) -> StepOutput {
        let rule_logits = self.rule_logits(state, sel_frame);
        let rule = match noise {
            Some(g) => argmax(&softmax_unchecked(&perturbed(
                &rule_logits,
                g,
                self.model.config.temperature,
            ))),
            None => argmax(&rule_logits),
        };
        StepOutput {
            action_dist: self.action_dist(state, rule, act_frame),
            rule_logits,
            rule,
            next_state: self.model.next_state_of(state, rule),
        }
    }

    /// Rolls out over all frames; draws Gumbel noise from `rng` when given.
    pub(crate) fn rollout(&self, frames: &FrameCache, mut rng: Option<&mut Rng>) -> Rollout {
        let cfg = &self.model.config;
        let t_len = frames.sel.len();
        let mut state = INITIAL_STATE;
        let mut out = Rollout {
            symbols: Labeling::new(Vec::new(), cfg.k),
            action_dists: Vec::with_capacity(t_len),
            rule_choices: Vec::with_capacity(t_len),
            state_path: vec![state],
            noise: rng.as_ref().map(|_| Vec::with_capacity(t_len)),
        };
        let mut symbols = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let noise: Option<Vec<f64>> = rng
                .as_mut()
                .map(|r| (0..cfg.rules_per_state).map(|_| r.gumbel()).collect());
            let s = self.step(state, &frames.sel[t], &frames.act[t], noise.as_deref());
            symbols.push(argmax(&s.action_dist));
            out.action_dists.push(s.action_dist);
            out.rule_choices.push(s.rule);
            state = s.next_state;
            out.state_path.push(state);
            if let (Some(all), Some(n)) = (out.noise.as_mut(), noise) {
                all.push(n);
            }
        }
        out.symbols = Labeling::new(symbols, cfg.k);
        out
    }
}

/// Single application of the model at `state` for frame feature `f_t`.
pub fn step(model: &ModelParams, state: usize, f_t: &[f64], rng: &mut Rng, stochastic: bool) -> Result<StepOutput> {
    let cfg = &model.config;
    if state >= cfg.n_states {
        return Err(Error::invalid(format!("state {state} out of range ({} states)", cfg.n_states)));
    }
    model.check_video_dim(f_t.len())?;
    let p = &model.params;
    let sd = cfg.state_dim;
    let emb = p.get(STATE_EMB).row(state);
    let sel_state = p.get(SEL_W1).partial_matvec(0, emb);
    let sel_frame = p.get(SEL_W1).partial_matvec(sd, f_t);
    let h = tanh_vec(combine_partials(&[&sel_state, &sel_frame], p.get(SEL_B1).data()));
    let rule_logits = combine_partials(&[&p.get(SEL_W2).partial_matvec(0, &h)], p.get(SEL_B2).data());
    let rule = if stochastic {
        let noise: Vec<f64> = (0..cfg.rules_per_state).map(|_| rng.gumbel()).collect();
        argmax(&softmax_unchecked(&perturbed(&rule_logits, &noise, cfg.temperature)))
    } else {
        argmax(&rule_logits)
    };
    let g = state * cfg.rules_per_state + rule;
    let act_state = p.get(ACT_W1).partial_matvec(0, emb);
    let act_frame = p.get(ACT_W1).partial_matvec(sd, f_t);
    let act_rule = p.get(ACT_W1).partial_matvec(sd + cfg.feature_dim, p.get(RULE_EMB).row(g));
    let h = tanh_vec(combine_partials(&[&act_state, &act_frame, &act_rule], p.get(ACT_B1).data()));
    let logits = combine_partials(&[&p.get(ACT_W2).partial_matvec(0, &h)], p.get(ACT_B2).data());
    Ok(StepOutput {
        action_dist: softmax_unchecked(&logits),
        rule_logits,
        rule,
        next_state: model.next_state_of(state, rule),
    })
}

/// One rollout; stochastic when `rng` is given, greedy otherwise.
pub fn rollout(model: &ModelParams, video: &FeatureSequence, rng: Option<&mut Rng>) -> Result<Rollout> {
    model.check_video_dim(video.dim())?;
    let cache = ParamCache::new(model);
    Ok(cache.rollout(&cache.frames(video), rng))
}

/// `m` independent stochastic rollouts; candidate `c` draws from `rng.substream([c])`.
pub fn generate_candidates(model: &ModelParams, video: &FeatureSequence, m: usize, rng: &Rng, exec: Exec) -> Result<Vec<Rollout>> {
    model.check_video_dim(video.dim())?;
    let cache = ParamCache::new(model);
    Ok(generate_with_cache(&cache, video, m, rng, exec))
}

pub(crate) fn generate_with_cache(cache: &ParamCache<'_>, video: &FeatureSequence, m: usize, rng: &Rng, exec: Exec) -> Vec<Rollout> {
    let frames = cache.frames(video);
    map_range(exec, m, |c| {
        let mut r = rng.substream(&[c as u64]);
        cache.rollout(&frames, Some(&mut r))
    })
}

/// Deterministic rollout taking the most probable rule at every step.
pub fn greedy_segment(model: &ModelParams, video: &FeatureSequence) -> Result<Rollout> {
    rollout(model, video, None)
}

/// Hidden (penultimate) activations of the classification head for one frame.
pub fn classify_hidden(model: &ModelParams, f: &[f64]) -> Vec<f64> {
    let p = &model.params;
    tanh_vec(combine_partials(&[&p.get(CLS_W1).partial_matvec(0, f)], p.get(CLS_B1).data()))
}

/// Per-frame `p(a | f)` rows from the classification head.
pub fn classify_frames(model: &ModelParams, video: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
    model.check_video_dim(video.dim())?;
    let p = &model.params;
    Ok(video
        .features
        .iter_rows()
        .map(|f| {
            let h = classify_hidden(model, f);
            softmax_unchecked(&combine_partials(
                &[&p.get(CLS_W2).partial_matvec(0, &h)],
                p.get(CLS_B2).data(),
            ))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::numcore::Matrix;

    fn setup() -> (ModelParams, FeatureSequence) {
        let mut cfg = ModelConfig::new(4, 6);
        cfg.n_states = 10;
        cfg.state_dim = 8;
        cfg.hidden_dim = 8;
        let m = init_model(&cfg, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(9);
        let data = (0..30 * 6).map(|_| rng.normal()).collect();
        let video = FeatureSequence {
            video_id: "v".into(),
            task_id: "t".into(),
            features: Matrix::from_vec(30, 6, data).unwrap(),
        };
        (m, video)
    }

    #[test]
    fn deterministic_step_is_repeatable() {
        let (m, v) = setup();
        let a = step(&m, 3, v.frame(0), &mut Rng::new(1), false).unwrap();
        let b = step(&m, 3, v.frame(0), &mut Rng::new(2), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.next_state, m.next_state_of(3, a.rule));
        assert!(step(&m, 10, v.frame(0), &mut Rng::new(1), false).is_err());
    }

    #[test]
    fn dominant_rule_logit_is_sampled() {
        let (mut m, v) = setup();
        // zero the selector's hidden path and bias the output towards rule 0
        m.params.get_mut(crate::model::SEL_W2).fill(0.0);
        let b2 = m.params.get_mut(SEL_B2);
        b2.data_mut().copy_from_slice(&[10.0, -10.0, -10.0]);
        let mut rng = Rng::new(4);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| step(&m, 2, v.frame(1), &mut rng, true).unwrap().rule == 0)
            .count();
        assert!(hits as f64 / n as f64 > 0.999);
    }

    #[test]
    fn step_agrees_with_cached_rollout() {
        let (m, v) = setup();
        let r = greedy_segment(&m, &v).unwrap();
        let mut state = INITIAL_STATE;
        for t in 0..v.len() {
            let s = step(&m, state, v.frame(t), &mut Rng::new(0), false).unwrap();
            assert_eq!(s.action_dist, r.action_dists[t]);
            assert_eq!(s.rule, r.rule_choices[t]);
            state = s.next_state;
            assert_eq!(state, r.state_path[t + 1]);
        }
    }

    #[test]
    fn candidates_have_expected_shape_and_reproduce() {
        let (m, v) = setup();
        let rng = Rng::new(77);
        let a = generate_candidates(&m, &v, 32, &rng, Exec::Parallel).unwrap();
        let b = generate_candidates(&m, &v, 32, &rng, Exec::Sequential).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        for r in &a {
            assert_eq!(r.len(), v.len());
            assert_eq!(r.state_path.len(), v.len() + 1);
            assert!(r.symbols.symbols().iter().all(|&s| s < m.config.n_outputs()));
            for (t, d) in r.action_dists.iter().enumerate() {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(r.symbols.symbols()[t], argmax(d));
            }
            for t in 0..v.len() {
                assert_eq!(r.state_path[t + 1], m.next_state_of(r.state_path[t], r.rule_choices[t]));
            }
        }
    }

    #[test]
    fn greedy_is_repeatable_and_self_consistent() {
        let (m, v) = setup();
        let a = greedy_segment(&m, &v).unwrap();
        assert_eq!(a, greedy_segment(&m, &v).unwrap());
        assert!(a.noise.is_none());
        for (t, d) in a.action_dists.iter().enumerate() {
            assert_eq!(a.symbols.symbols()[t], argmax(d));
        }
    }

    #[test]
    fn near_zero_temperature_candidates_match_greedy() {
        let (mut m, v) = setup();
        m.config.temperature = 1e-9;
        // scale logits up so the noise cannot flip the argmax
        m.params.get_mut(SEL_W2).data_mut().iter_mut().for_each(|x| *x *= 1e4);
        let g = greedy_segment(&m, &v).unwrap();
        for c in generate_candidates(&m, &v, 8, &Rng::new(1), Exec::Sequential).unwrap() {
            assert_eq!(c.symbols, g.symbols);
        }
    }

    #[test]
    fn classification_rows_are_distributions_and_order_free() {
        let (m, v) = setup();
        let rows = classify_frames(&m, &v).unwrap();
        for r in &rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut rev = v.clone();
        let mut data = Vec::new();
        for t in (0..v.len()).rev() {
            data.extend_from_slice(v.frame(t));
        }
        rev.features = Matrix::from_vec(v.len(), v.dim(), data).unwrap();
        let rrows = classify_frames(&m, &rev).unwrap();
        for t in 0..v.len() {
            assert_eq!(rows[t], rrows[v.len() - 1 - t]);
        }
    }
}
