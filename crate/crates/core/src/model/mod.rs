//! The stochastic autoregressive state model.
//!
//! A finite set of latent states, each with a small bank of rules. At every
//! frame the current state's embedding is concatenated with the frame
//! feature and a shared selector network scores the state's rules; one rule
//! is drawn with Gumbel-Softmax (or taken greedily at inference). The chosen
//! rule fixes the next state through a fixed random table and, together with
//! the state and frame, feeds the action head that emits the frame's action
//! distribution. A separate per-frame classification head gives `p(a | f)`.

pub(crate) mod checkpoint;
mod graph;
pub(crate) mod rollout;

pub use checkpoint::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use graph::{classify_graph, rollout_graph, video_loss_graph, RolloutGraph};
pub use rollout::{
    classify_frames, classify_hidden, generate_candidates, greedy_segment, rollout, step, Rollout,
    StepOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, ParamId, ParamSet, Rng};

pub const STATE_EMB: ParamId = ParamId(0);
pub const RULE_EMB: ParamId = ParamId(1);
pub const SEL_W1: ParamId = ParamId(2);
pub const SEL_B1: ParamId = ParamId(3);
pub const SEL_W2: ParamId = ParamId(4);
pub const SEL_B2: ParamId = ParamId(5);
pub const ACT_W1: ParamId = ParamId(6);
pub const ACT_B1: ParamId = ParamId(7);
pub const ACT_W2: ParamId = ParamId(8);
pub const ACT_B2: ParamId = ParamId(9);
pub const CLS_W1: ParamId = ParamId(10);
pub const CLS_B1: ParamId = ParamId(11);
pub const CLS_W2: ParamId = ParamId(12);
pub const CLS_B2: ParamId = ParamId(13);

fn d_states() -> usize {
    50
}
fn d_rules() -> usize {
    3
}
fn d_dim() -> usize {
    64
}
fn d_true() -> bool {
    true
}
fn d_temperature() -> f64 {
    1.0
}
fn d_candidates() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of action symbols `k`.
    pub k: usize,
    pub feature_dim: usize,
    #[serde(default = "d_states")]
    pub n_states: usize,
    #[serde(default = "d_rules")]
    pub rules_per_state: usize,
    #[serde(default = "d_true")]
    pub use_null: bool,
    #[serde(default = "d_dim")]
    pub state_dim: usize,
    #[serde(default = "d_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Candidate rollouts per video during self-labeling (`M`).
    #[serde(default = "d_candidates")]
    pub candidates: usize,
}

impl ModelConfig {
    pub fn new(k: usize, feature_dim: usize) -> Self {
        ModelConfig {
            k,
            feature_dim,
            n_states: d_states(),
            rules_per_state: d_rules(),
            use_null: true,
            state_dim: d_dim(),
            hidden_dim: d_dim(),
            temperature: d_temperature(),
            candidates: d_candidates(),
        }
    }

    /// Output classes of both heads: `k` actions plus the null class if enabled.
    pub fn n_outputs(&self) -> usize {
        self.k + usize::from(self.use_null)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 1 {
            return bad("k must be >= 1".into());
        }
        if self.feature_dim == 0 || self.state_dim == 0 || self.hidden_dim == 0 {
            return bad("feature_dim, state_dim and hidden_dim must be >= 1".into());
        }
        if self.n_states == 0 {
            return bad("n_states must be >= 1".into());
        }
        if self.rules_per_state < 2 {
            return bad("rules_per_state must be >= 2".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.candidates == 0 {
            return bad("candidates must be >= 1".into());
        }
        if self.n_states <= self.k {
            log::warn!("n_states ({}) <= k ({}); more states than actions is recommended", self.n_states, self.k);
        }
        if self.candidates < 8 {
            log::warn!("fewer than 8 candidates per video ({})", self.candidates);
        }
        Ok(())
    }
}

/// Learnable arrays plus the fixed `(state, rule) → state` table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Indexed by `state * rules_per_state + rule`.
    pub next_state: Vec<usize>,
}

pub const INITIAL_STATE: usize = 0;

fn uniform_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform_range(-scale, scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn dense(ps: &mut ParamSet, name: &str, out: usize, fan_in: usize, rng: &mut Rng) {
    let s = 1.0 / (fan_in as f64).sqrt();
    ps.add(format!("{name}.w"), uniform_matrix(out, fan_in, s, rng));
    ps.add(format!("{name}.b"), Matrix::zeros(out, 1));
}

/// Parameter shapes in storage order, for checkpoint validation.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let (sd, d, h, r, o) = (cfg.state_dim, cfg.feature_dim, cfg.hidden_dim, cfg.rules_per_state, cfg.n_outputs());
    vec![
        (cfg.n_states, sd),
        (cfg.n_states * r, sd),
        (h, sd + d),
        (h, 1),
        (r, h),
        (r, 1),
        (h, sd + d + sd),
        (h, 1),
        (o, h),
        (o, 1),
        (h, d),
        (h, 1),
        (o, h),
        (o, 1),
    ]
}

/// Random initialization: weights `U(−s, s)` with `s = 1/√fan_in` (lookup
/// tables count as fan-in 1), zero biases, uniform next-state table.
pub fn init_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.check()?;
    let (sd, d, h) = (cfg.state_dim, cfg.feature_dim, cfg.hidden_dim);
    let n_rules = cfg.n_states * cfg.rules_per_state;
    let mut ps = ParamSet::new();
    // embedding tables act on one-hot inputs, so fan_in is the row count
    let se = 1.0 / (cfg.n_states as f64).sqrt();
    let re = 1.0 / (n_rules as f64).sqrt();
    ps.add("state_embeddings", uniform_matrix(cfg.n_states, sd, se, rng));
    ps.add("rule_embeddings", uniform_matrix(n_rules, sd, re, rng));
    dense(&mut ps, "rule_selector.0", h, sd + d, rng);
    dense(&mut ps, "rule_selector.1", cfg.rules_per_state, h, rng);
    dense(&mut ps, "action_head.0", h, sd + d + sd, rng);
    dense(&mut ps, "action_head.1", cfg.n_outputs(), h, rng);
    dense(&mut ps, "classification_head.0", h, d, rng);
    dense(&mut ps, "classification_head.1", cfg.n_outputs(), h, rng);
    debug_assert_eq!(
        ps.mats().iter().map(Matrix::shape).collect::<Vec<_>>(),
        param_shapes(cfg)
    );
    let next_state = (0..n_rules).map(|_| rng.below(cfg.n_states)).collect();
    Ok(ModelParams {
        config: cfg.clone(),
        params: ps,
        next_state,
    })
}

impl ModelParams {
    pub fn next_state_of(&self, state: usize, rule: usize) -> usize {
        self.next_state[state * self.config.rules_per_state + rule]
    }

    /// Symbol index used for the null class (equals `k`).
    pub fn null_symbol(&self) -> usize {
        self.config.k
    }

    pub fn check_video_dim(&self, dim: usize) -> Result<()> {
        if dim != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "video feature dim {dim} does not match model feature dim {}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }
}
