use super::tape::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// Largest componentwise relative error between the analytic gradient and
/// central differences `(f(p+ε) − f(p−ε)) / 2ε`.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// parameters. The relative error uses `max(|analytic|, |numeric|, 1e-8)`
/// as denominator.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, epsilon: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f(p) = {value}")));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (pi, mat) in params.mats().iter().enumerate() {
        for idx in 0..mat.data().len() {
            let orig = mat.data()[idx];
            probe.mats_mut()[pi].data_mut()[idx] = orig + epsilon;
            let (plus, _) = f(&probe)?;
            probe.mats_mut()[pi].data_mut()[idx] = orig - epsilon;
            let (minus, _) = f(&probe)?;
            probe.mats_mut()[pi].data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric("non-finite value during finite differences".into()));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.mats()[pi].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::matrix::Matrix;
    use crate::numcore::tape::Tape;

    fn square(ps: &ParamSet) -> Result<(f64, Gradients)> {
        let p = ps.mats()[0].get(0, 0);
        let mut g = ps.zeros_like();
        g.mats_mut()[0].set(0, 0, 2.0 * p);
        Ok((p * p, g))
    }

    #[test]
    fn square_at_three() {
        let mut ps = ParamSet::new();
        ps.add("p", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let err = finite_diff_check(square, &ps, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut ps = ParamSet::new();
        ps.add("p", Matrix::from_vec(1, 2, vec![3.0, -1.0]).unwrap());
        let err = finite_diff_check(|ps| Ok((4.0, ps.zeros_like())), &ps, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite() {
        let mut ps = ParamSet::new();
        ps.add("p", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        assert!(finite_diff_check(square, &ps, 1e-2).is_err());
        assert!(finite_diff_check(|ps| Ok((f64::NAN, ps.zeros_like())), &ps, 1e-5).is_err());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut ps = ParamSet::new();
        ps.add("p", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let err = finite_diff_check(
            |ps| {
                let (v, mut g) = square(ps)?;
                g.scale(0.5);
                Ok((v, g))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn tape_network_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add(
            "w",
            Matrix::from_rows(&[vec![0.3, -0.2, 0.1], vec![0.5, 0.4, -0.6]]).unwrap(),
        );
        let b = ps.add("b", Matrix::from_vec(2, 1, vec![0.1, -0.1]).unwrap());
        let f = |ps: &ParamSet| {
            let mut t = Tape::new(ps);
            let x = t.input(&[1.0, -2.0, 0.5]);
            let h = t.affine(&[x], w, b)?;
            let h = t.tanh(h);
            let p = t.softmax(h);
            let l = t.cross_entropy(p, 1)?;
            Ok((t.scalar(l), t.backward(l)?))
        };
        assert!(finite_diff_check(f, &ps, 1e-6).unwrap() < 1e-5);
    }
}
