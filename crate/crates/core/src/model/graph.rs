//! Tape replays of rollouts and the per-video self-labeling loss.

use super::{Rollout, ModelParams, ACT_B1, ACT_B2, ACT_W1, ACT_W2, CLS_B1, CLS_B2, CLS_W1, CLS_W2, INITIAL_STATE, RULE_EMB, SEL_B1, SEL_B2, SEL_W1, SEL_W2, STATE_EMB};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::labeling::Labeling;
use crate::numcore::{NodeId, Tape};

pub struct RolloutGraph {
    /// Action distribution node per frame.
    pub action_probs: Vec<NodeId>,
    /// Soft Gumbel samples at each step, usable as frozen anchors.
    pub soft: Vec<Vec<f64>>,
}

/// Re-runs `rollout` on `tape` with its recorded rule choices and noise.
///
/// Rule selection goes through the straight-through estimator: the one-hot
/// choice weights the rule embedding and the candidate next-state
/// embeddings, so gradients reach the selector. `anchors` freezes the soft
/// samples (see [`Tape::gumbel_straight_through`]).
pub fn rollout_graph(
    tape: &mut Tape<'_>,
    model: &ModelParams,
    video: &FeatureSequence,
    rollout: &Rollout,
    anchors: Option<&[Vec<f64>]>,
) -> Result<RolloutGraph> {
    let cfg = &model.config;
    if rollout.len() != video.len() {
        return Err(Error::invalid(format!(
            "rollout has {} frames, video {}",
            rollout.len(),
            video.len()
        )));
    }
    let r_n = cfg.rules_per_state;
    let zeros = vec![0.0; r_n];
    let mut state = INITIAL_STATE;
    let mut state_node = tape.param_row(STATE_EMB, state);
    let mut out = RolloutGraph {
        action_probs: Vec::with_capacity(video.len()),
        soft: Vec::with_capacity(video.len()),
    };
    for t in 0..video.len() {
        let f = tape.input(video.frame(t));
        let h = tape.affine(&[state_node, f], SEL_W1, SEL_B1)?;
        let h = tape.tanh(h);
        let z = tape.affine(&[h], SEL_W2, SEL_B2)?;
        let noise = rollout.noise.as_ref().map_or(zeros.as_slice(), |n| n[t].as_slice());
        let st = tape.gumbel_straight_through(
            z,
            noise,
            cfg.temperature,
            Some(rollout.rule_choices[t]),
            anchors.map(|a| a[t].as_slice()),
        )?;
        out.soft.push(tape.value(st.soft).to_vec());

        let rule_rows = (0..r_n).map(|r| state * r_n + r).collect();
        let rule_node = tape.weighted_rows(RULE_EMB, rule_rows, st.node)?;
        let ha = tape.affine(&[state_node, f, rule_node], ACT_W1, ACT_B1)?;
        let ha = tape.tanh(ha);
        let logits = tape.affine(&[ha], ACT_W2, ACT_B2)?;
        out.action_probs.push(tape.softmax(logits));

        let next_rows = (0..r_n).map(|r| model.next_state_of(state, r)).collect();
        state_node = tape.weighted_rows(STATE_EMB, next_rows, st.node)?;
        state = rollout.state_path[t + 1];
    }
    Ok(out)
}

/// Classification head on one frame: `(hidden, probabilities)` nodes.
pub fn classify_graph(tape: &mut Tape<'_>, f: &[f64]) -> Result<(NodeId, NodeId)> {
    let x = tape.input(f);
    let h = tape.affine(&[x], CLS_W1, CLS_B1)?;
    let h = tape.tanh(h);
    let logits = tape.affine(&[h], CLS_W2, CLS_B2)?;
    Ok((h, tape.softmax(logits)))
}

/// Mean over frames of `CE(a_t, ŝ_t) + CE(p_t, ŝ_t)`.
///
/// Null targets are skipped unless `null_as_target`; with no counted frame
/// the loss is the constant 0.
pub fn video_loss_graph(
    tape: &mut Tape<'_>,
    model: &ModelParams,
    video: &FeatureSequence,
    rollout: &Rollout,
    target: &Labeling,
    null_as_target: bool,
    anchors: Option<&[Vec<f64>]>,
) -> Result<NodeId> {
    if target.len() != video.len() {
        return Err(Error::invalid("target labeling length differs from video"));
    }
    let rg = rollout_graph(tape, model, video, rollout, anchors)?;
    let mut terms = Vec::with_capacity(2 * video.len());
    for (t, &s) in target.symbols().iter().enumerate() {
        if target.is_null(s) && !null_as_target {
            continue;
        }
        if s >= model.config.n_outputs() {
            return Err(Error::invalid(format!("target symbol {s} has no output class")));
        }
        terms.push(tape.cross_entropy(rg.action_probs[t], s)?);
        let (_, p) = classify_graph(tape, video.frame(t))?;
        terms.push(tape.cross_entropy(p, s)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let frames = (terms.len() / 2) as f64;
    Ok(tape.weighted_sum(&terms, 1.0 / frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{classify_frames, generate_candidates, greedy_segment, init_model, ModelConfig};
    use crate::numcore::{finite_diff_check, Matrix, ParamSet, Rng};
    use crate::par::Exec;

    fn tiny() -> (ModelParams, FeatureSequence) {
        let cfg = ModelConfig {
            k: 2,
            feature_dim: 3,
            n_states: 4,
            rules_per_state: 2,
            use_null: true,
            state_dim: 3,
            hidden_dim: 4,
            temperature: 1.0,
            candidates: 4,
        };
        let m = init_model(&cfg, &mut Rng::new(8)).unwrap();
        let mut rng = Rng::new(2);
        let data = (0..6 * 3).map(|_| rng.normal()).collect();
        let v = FeatureSequence {
            video_id: "v".into(),
            task_id: "t".into(),
            features: Matrix::from_vec(6, 3, data).unwrap(),
        };
        (m, v)
    }

    #[test]
    fn replay_reproduces_cached_rollout_exactly() {
        let (m, v) = tiny();
        let cands = generate_candidates(&m, &v, 4, &Rng::new(1), Exec::Sequential).unwrap();
        let mut rollouts = cands;
        rollouts.push(greedy_segment(&m, &v).unwrap());
        for r in &rollouts {
            let mut tape = Tape::new(&m.params);
            let g = rollout_graph(&mut tape, &m, &v, r, None).unwrap();
            for (t, &node) in g.action_probs.iter().enumerate() {
                assert_eq!(tape.value(node), r.action_dists[t].as_slice());
            }
        }
        let p = classify_frames(&m, &v).unwrap();
        let mut tape = Tape::new(&m.params);
        for t in 0..v.len() {
            let (_, node) = classify_graph(&mut tape, v.frame(t)).unwrap();
            assert_eq!(tape.value(node), p[t].as_slice());
        }
    }

    #[test]
    fn uniform_outputs_give_two_ln_n_loss() {
        let (mut m, v) = tiny();
        // zero the output layers so both heads are uniform over 3 symbols
        for id in [ACT_W2, ACT_B2, CLS_W2, CLS_B2] {
            m.params.get_mut(id).fill(0.0);
        }
        let r = greedy_segment(&m, &v).unwrap();
        let target = Labeling::new(vec![0, 1, 2, 0, 1, 2], 2);
        let mut tape = Tape::new(&m.params);
        let l = video_loss_graph(&mut tape, &m, &v, &r, &target, true, None).unwrap();
        assert!((tape.scalar(l) - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (m, v) = tiny();
        let r = generate_candidates(&m, &v, 1, &Rng::new(3), Exec::Sequential).unwrap().remove(0);
        let target = Labeling::new(vec![0, 0, 2, 1, 1, 1], 2);
        let anchors = {
            let mut tape = Tape::new(&m.params);
            rollout_graph(&mut tape, &m, &v, &r, None).unwrap().soft
        };
        let f = |ps: &ParamSet| {
            let mm = ModelParams { params: ps.clone(), ..m.clone() };
            let mut tape = Tape::new(ps);
            let l = video_loss_graph(&mut tape, &mm, &v, &r, &target, true, Some(&anchors))?;
            Ok((tape.scalar(l), tape.backward(l)?))
        };
        let err = finite_diff_check(f, &m.params, 1e-4).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
