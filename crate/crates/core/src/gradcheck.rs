//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function of `x` with central
/// differences of step `h`, returning the largest relative error over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut g = Graph::new();
    let input = g.parameter(x.clone());
    let loss = f(&mut g, input)?;
    let analytic = g.backward(loss)?.wrt(input);

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(point);
        let out = f(&mut g, input)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_no_error() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = finite_diff_check(|g, x| Ok(g.sum(x)), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares_at_one_two() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let f = |g: &mut Graph, x: Var| {
            let sq = g.hadamard(x, x)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let v = g.parameter(x.clone());
        let loss = f(&mut g, v).unwrap();
        assert_eq!(g.backward(loss).unwrap().wrt(v).data(), &[2.0, 4.0]);
        assert!(finite_diff_check(f, &x, 1e-6).unwrap() < 1e-8);
    }
}
