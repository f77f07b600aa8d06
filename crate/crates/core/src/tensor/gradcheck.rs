//! Central finite differences, used as the oracle for every backward rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Element, Tensor};
use crate::error::Result;

/// Floor for the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Default step for coordinate `x`: `1e-5·max(1, |x|)`.
pub fn default_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Derivative of `f` at `x` along coordinate `i` by central differences.
pub fn finite_difference_coord<F>(f: &F, x: &Tensor<f64>, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    let fp = f(&Tensor::new(plus, x.shape())?)?.item()?;
    let fm = f(&Tensor::new(minus, x.shape())?)?.item()?;
    Ok((fp - fm) / (2.0 * h))
}

/// Gradient of the scalar function `f` at `x`, one coordinate at a time.
///
/// `h = None` uses [`default_step`] per coordinate.
pub fn finite_difference_grad<F>(f: F, x: &Tensor<f64>, h: Option<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let grad = (0..x.numel())
        .map(|i| {
            let step = h.unwrap_or_else(|| default_step(x.data()[i]));
            finite_difference_coord(&f, x, i, step)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(grad, x.shape())
}

/// `max|a−b| / max(‖a‖∞, ‖b‖∞, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(REL_ERR_FLOOR, f64::max);
    diff / scale
}

/// Reverse-mode gradient of `f` at `x`.
pub fn analytic_grad<F>(f: F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = x.with_requires_grad(true);
    f(&leaf)?.backward()?;
    Ok(leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
}

/// Relative error between the reverse-mode and finite-difference gradients.
pub fn check_gradient<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let analytic = analytic_grad(&f, x)?;
    let numeric = finite_difference_grad(&f, x, None)?;
    Ok(relative_error(&analytic, numeric.data()))
}

/// Standard-normal tensor scaled by `scale`, reproducible from `seed`.
pub fn random_tensor<T: Element>(shape: &[usize], seed: u64, scale: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z * scale)
        })
        .collect();
    Tensor::new(data, shape).expect("random tensor shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = random_tensor::<f64>(&[4, 3], 1, 2.0);
        let g = finite_difference_grad(|t| t.sum(), &x, None).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![3.0], &[1]).unwrap();
        let g = finite_difference_grad(|t| t.square()?.sum(), &x, None).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_infinity_norm() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
    }
}
