//! Plain (tape-free) numeric kernels.

use super::matrix::{combine_partials, Matrix};
use super::rng::Rng;
use crate::error::{Error, Result};

/// Probability clamp applied inside `ln` for cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::invalid(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    Ok(combine_partials(&[&w.partial_matvec(0, x)], b))
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(n: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// Result of one Gumbel-Softmax draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub index: usize,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Perturbed logits `(z + g) / tau` for a given noise vector.
pub(crate) fn perturbed(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    logits
        .iter()
        .zip(noise)
        .map(|(z, g)| (z + g) * (1.0 / temperature))
        .collect()
}

pub fn gumbel_softmax_sample(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<GumbelSample> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("gumbel-softmax of empty logits"));
    }
    let noise: Vec<f64> = (0..logits.len()).map(|_| rng.gumbel()).collect();
    let soft = softmax_unchecked(&perturbed(logits, &noise, temperature));
    let index = argmax(&soft);
    Ok(GumbelSample {
        index,
        hard: one_hot(logits.len(), index),
        soft,
        noise,
    })
}

pub fn cross_entropy(pred: &[f64], target: usize) -> Result<f64> {
    let p = pred.get(target).ok_or_else(|| {
        Error::invalid(format!("target {target} out of range for {} classes", pred.len()))
    })?;
    Ok(-p.max(PROB_EPS).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_examples() {
        let id = Matrix::identity(2);
        assert_eq!(affine(&[1.0, 2.0], &id, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(affine(&[9.0, -4.0], &zero, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(affine(&[1.0, 2.0], &w, &[0.0, 1.0]).unwrap(), vec![3.0, 5.0]);
        assert!(affine(&[1.0], &w, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[2.5, 2.5, 2.5]).unwrap();
        assert!(p.iter().all(|&v| close(v, 1.0 / 3.0, 1e-12)));
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(p[0], 0.25, 1e-12) && close(p[1], 0.75, 1e-12));
        let p = softmax(&[0.0, 100.0]).unwrap();
        assert!(p[0] < 1e-40 && close(p[1], 1.0, 1e-12));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert!(close(cross_entropy(&[0.25; 4], 2).unwrap(), 4f64.ln(), 1e-12));
        assert!(close(cross_entropy(&[0.5, 0.5], 1).unwrap(), 2f64.ln(), 1e-12));
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(close(cross_entropy(&[1.0, 0.0], 1).unwrap(), -(PROB_EPS.ln()), 1e-9));
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut rng = Rng::new(0);
        assert!(gumbel_softmax_sample(&[0.0, 0.0], 0.0, &mut rng).is_err());
        assert!(gumbel_softmax_sample(&[0.0, 0.0], -1.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_monte_carlo_frequencies() {
        let mut rng = Rng::new(11);
        let n = 10_000;
        let mut dominant = 0;
        let mut symmetric = 0;
        for _ in 0..n {
            let s = gumbel_softmax_sample(&[10.0, -10.0], 1.0, &mut rng).unwrap();
            assert_eq!(s.hard.iter().sum::<f64>(), 1.0);
            assert_eq!(s.hard.iter().filter(|&&v| v == 1.0).count(), 1);
            assert!((s.soft.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            dominant += (s.index == 0) as usize;
            let s = gumbel_softmax_sample(&[0.0, 0.0], 1.0, &mut rng).unwrap();
            symmetric += (s.index == 0) as usize;
        }
        assert!(dominant as f64 / n as f64 > 0.999);
        let f = symmetric as f64 / n as f64;
        assert!((0.47..=0.53).contains(&f), "frequency {f}");
    }
}
