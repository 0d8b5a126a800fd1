//! SGD with momentum under a cosine learning-rate schedule.

use super::matrix::Matrix;
use super::tape::{Gradients, ParamSet};
use crate::error::{Error, Result};

pub fn cosine_lr(step: u64, total_steps: u64, base: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule of {total_steps} steps"
        )));
    }
    if total_steps == 0 {
        return Ok(base);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Matrix>,
    pub base_lr: f64,
    pub momentum: f64,
    pub total_steps: u64,
    pub step: u64,
    /// Global L2 clip applied to gradients before the update; `None` disables.
    pub clip_norm: Option<f64>,
}

impl OptimState {
    pub fn new(params: &ParamSet, base_lr: f64, momentum: f64, total_steps: u64) -> Self {
        OptimState {
            velocity: params
                .mats()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            base_lr,
            momentum,
            total_steps,
            step: 0,
            clip_norm: Some(10.0),
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }
}

/// One momentum step: `v ← m·v + g`, `p ← p − lr(step)·v`. Returns the lr used.
pub fn sgd_momentum_step(params: &mut ParamSet, grads: &Gradients, opt: &mut OptimState) -> Result<f64> {
    if params.len() != grads.mats().len() || params.len() != opt.velocity.len() {
        return Err(Error::invalid("optimizer: parameter/gradient count mismatch"));
    }
    for ((p, g), v) in params.mats().iter().zip(grads.mats()).zip(&opt.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::invalid(format!(
                "optimizer: shape mismatch {:?} vs {:?} vs {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    let lr = opt.current_lr()?;
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let clip = match opt.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((p, g), v) in params
        .mats_mut()
        .iter_mut()
        .zip(grads.mats())
        .zip(opt.velocity.iter_mut())
    {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = opt.momentum * *vv + clip * gv;
            *pv -= lr * *vv;
        }
    }
    opt.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Matrix::from_vec(1, 1, vec![v]).unwrap());
        ps
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, 0.3).unwrap();
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_zero_velocity_is_noop() {
        let mut ps = one_param(2.5);
        let g = ps.zeros_like();
        let mut opt = OptimState::new(&ps, 0.1, 0.9, 10);
        sgd_momentum_step(&mut ps, &g, &mut opt).unwrap();
        assert_eq!(ps.mats()[0].get(0, 0), 2.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut ps = one_param(1.0);
        let mut g = ps.zeros_like();
        g.mats_mut()[0].set(0, 0, 2.0);
        let mut opt = OptimState::new(&ps, 0.1, 0.0, 1000);
        sgd_momentum_step(&mut ps, &g, &mut opt).unwrap();
        assert!((ps.mats()[0].get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_carries_velocity() {
        let mut ps = one_param(1.0);
        let g = ps.zeros_like();
        let mut opt = OptimState::new(&ps, 0.1, 0.9, 1000);
        opt.velocity[0].set(0, 0, 1.0);
        sgd_momentum_step(&mut ps, &g, &mut opt).unwrap();
        assert!((ps.mats()[0].get(0, 0) - (1.0 - 0.09)).abs() < 1e-15);
    }

    #[test]
    fn gradients_are_clipped_to_global_norm() {
        let mut ps = one_param(0.0);
        let mut g = ps.zeros_like();
        g.mats_mut()[0].set(0, 0, 100.0);
        let mut opt = OptimState::new(&ps, 0.1, 0.0, 1000);
        sgd_momentum_step(&mut ps, &g, &mut opt).unwrap();
        assert!((ps.mats()[0].get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = one_param(0.0);
        let mut other = ParamSet::new();
        other.add("q", Matrix::zeros(2, 1));
        let g = other.zeros_like();
        let mut opt = OptimState::new(&ps, 0.1, 0.9, 10);
        assert!(sgd_momentum_step(&mut ps, &g, &mut opt).is_err());
    }
}
