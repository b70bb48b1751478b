#![allow(dead_code)]

use hfsig::evalkit::Eer;
use rand::Rng;

/// Threshold sweep by direct counting at every candidate.
pub fn brute_force_eer(pos: &[f64], neg: &[f64]) -> Eer {
    let mut all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut sweep: Vec<(f64, f64, f64)> = Vec::new();
    let mut thresholds = vec![all[0]];
    for i in 1..all.len() {
        thresholds.push((all[i - 1] + all[i]) / 2.0);
    }
    for &t in &thresholds {
        let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
        let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
        sweep.push((t, far, frr));
    }
    sweep.push((*all.last().unwrap(), 0.0, 1.0));
    for i in 0..sweep.len() {
        let (t, far, frr) = sweep[i];
        if far == frr {
            return Eer { eer: far, threshold: t };
        }
        if far < frr {
            let (t0, far0, frr0) = sweep[i - 1];
            let w = (far0 - frr0) / ((far0 - frr0) - (far - frr));
            return Eer {
                eer: far0 + w * (far - far0),
                threshold: t0 + w * (t - t0),
            };
        }
    }
    unreachable!()
}

/// Random score sets; every other instance draws from a coarse grid so that
/// ties are common.
pub fn random_instance<R: Rng>(rng: &mut R, index: usize) -> (Vec<f64>, Vec<f64>) {
    let total = rng.random_range(2..=1000);
    let n_pos = rng.random_range(1..total);
    let shift: f64 = rng.random_range(-0.3..0.6);
    let draw = |rng: &mut R, bias: f64| -> f64 {
        let v: f64 = (rng.random::<f64>() + bias).clamp(0.0, 1.0);
        if index % 2 == 0 { (v * 20.0).round() / 20.0 } else { v }
    };
    let pos = (0..n_pos).map(|_| draw(rng, shift)).collect();
    let neg = (0..total - n_pos).map(|_| draw(rng, 0.0)).collect();
    (pos, neg)
}
