//! Central finite-difference check of reverse-mode gradients (64-bit only).

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Tensors larger than this are checked at a random subset of coordinates.
    pub max_coords_per_tensor: usize,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as denominator.
    pub abs_floor: f64,
    /// One-sided estimates that disagree with the central one by more than
    /// this relative amount (beyond roundoff) mean the window straddles a
    /// kink; the step is then shrunk tenfold, up to `kink_retries` times.
    pub kink_tolerance: f64,
    pub kink_retries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords_per_tensor: 64,
            abs_floor: 1e-6,
            kink_tolerance: 1e-5,
            kink_retries: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// Coordinates left out because no step size gave a smooth window.
    pub kinks_skipped: usize,
    /// `(tensor index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    /// Within tolerance, with at most one in ten sampled coordinates lost
    /// to kinks.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.coords_checked > 0 && self.kinks_skipped * 9 <= self.coords_checked && self.max_rel_error <= tolerance
    }
}

/// Compares `analytic` gradients against finite differences of `loss`.
///
/// Each sampled coordinate is probed at `x ± step` and `x ± 2·step`. The
/// forward and backward one-sided second-order estimates must agree with the
/// central estimate; otherwise a kink lies in the window and the step is
/// shrunk tenfold, up to `kink_retries` times, before the coordinate is
/// given up.
pub fn grad_check<F>(
    loss: F,
    tensors: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != tensors.len() {
        return Err(NnError::InvalidArgument {
            op: "grad_check",
            detail: format!("{} gradients for {} tensors", analytic.len(), tensors.len()),
        });
    }
    let center = loss(tensors)?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut work = tensors.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
        worst: None,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != tensors[ti].shape() {
            return Err(NnError::ShapeMismatch {
                op: "grad_check",
                expected: tensors[ti].shape().to_vec(),
                actual: grad.shape().to_vec(),
            });
        }
        let n = tensors[ti].len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords_per_tensor).into_vec()
        };
        for idx in coords {
            let a = grad.data()[idx];
            let mut numeric = None;
            let mut step = cfg.step;
            for _ in 0..=cfg.kink_retries {
                let mut at = |offset: f64| -> Result<f64> {
                    let orig = tensors[ti].data()[idx];
                    work[ti].data_mut()[idx] = orig + offset;
                    let v = loss(&work);
                    work[ti].data_mut()[idx] = orig;
                    v
                };
                let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
                let central = (p1 - m1) / (2.0 * step);
                let forward = (-3.0 * center + 4.0 * p1 - p2) / (2.0 * step);
                let backward = (3.0 * center - 4.0 * m1 + m2) / (2.0 * step);
                let scale = central.abs().max(forward.abs()).max(backward.abs()).max(cfg.abs_floor);
                let spread = (forward - central).abs().max((backward - central).abs());
                let magnitude = [center, p1, m1, p2, m2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let roundoff = 4.0 * f64::EPSILON * magnitude / step;
                if spread <= cfg.kink_tolerance * scale + roundoff {
                    numeric = Some(central);
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.kinks_skipped += 1;
                continue;
            };
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let cube = |t: &[Tensor<f64>]| Ok(t[0].data().iter().map(|x| x * x * x).sum());
        let ok = grad_check(cube, std::slice::from_ref(&x), &[x.map(|x| 3.0 * x * x)], &GradCheckConfig::default()).unwrap();
        assert!(ok.passes(1e-8), "{ok:?}");
        let bad = grad_check(cube, std::slice::from_ref(&x), &[x.map(|x| 2.0 * x * x)], &GradCheckConfig::default()).unwrap();
        assert!(!bad.passes(1e-2));
    }

    #[test]
    fn kinks_are_skipped_not_blamed() {
        let x = Tensor::from_vec(&[2], vec![1e-7, 0.5]).unwrap();
        let abs = |t: &[Tensor<f64>]| Ok(t[0].data().iter().map(|x| x.abs()).sum());
        let cfg = GradCheckConfig {
            kink_retries: 0,
            ..GradCheckConfig::default()
        };
        let r = grad_check(abs, std::slice::from_ref(&x), &[x.map(f64::signum)], &cfg).unwrap();
        assert_eq!(r.kinks_skipped, 1);
        assert_eq!(r.coords_checked, 1);
        assert!(r.max_rel_error <= 1e-10);
        assert!(!r.passes(1e-10));
    }
}
