//! Mean-reduced losses returning `(value, gradient w.r.t. the first argument)`.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean absolute difference. The subgradient at `a == b` is zero.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if a.shape() != b.shape() {
        return shape_err("l1_loss", a.shape(), b.shape());
    }
    let n = T::from_f64(a.len().max(1) as f64);
    let mut total = T::zero();
    let grad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x - y;
            total += d.abs();
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((total / n, Tensor::from_vec(a.shape(), grad)?))
}

/// Binary cross-entropy averaged over elements; `labels` are 0 or 1.
///
/// The gradient is zero where the clamp is active.
pub fn bce_loss<T: Scalar>(predictions: &[T], labels: &[T]) -> Result<(T, Vec<T>)> {
    if predictions.len() != labels.len() {
        return shape_err("bce_loss", &[predictions.len()], &[labels.len()]);
    }
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::one() - lo;
    let n = T::from_f64(predictions.len().max(1) as f64);
    let mut total = T::zero();
    let grad = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let clamped = p.max(lo).min(hi);
            total -= y * clamped.ln() + (T::one() - y) * (T::one() - clamped).ln();
            if p < lo || p > hi {
                T::zero()
            } else {
                (clamped - y) / (clamped * (T::one() - clamped)) / n
            }
        })
        .collect();
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap();
        let (v, g) = l1_loss(&a, &b).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g.data(), &[0.5, -0.5]);
        let (z, gz) = l1_loss(&a, &a).unwrap();
        assert_eq!(z, 0.0);
        assert!(gz.data().iter().all(|&x| x == 0.0));
        assert!(l1_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        for y in [0.0, 1.0] {
            let (v, _) = bce_loss(&[0.5f64], &[y]).unwrap();
            assert!((v - ln2).abs() < 1e-12);
        }
        let (v, _) = bce_loss(&[1.0 - 1e-7f64], &[1.0]).unwrap();
        assert!(v > 0.0 && v < 1.1e-7);
        let (v, _) = bce_loss(&[0.8f64], &[0.0]).unwrap();
        assert!((v - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn bce_is_finite_at_saturation() {
        let (v, g) = bce_loss(&[0.0f32, 1.0], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn bce_averages_over_batch() {
        let (v, _) = bce_loss(&[0.9f64, 0.2, 0.6], &[1.0, 0.0, 0.0]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((v - want).abs() < 1e-12);
    }
}
