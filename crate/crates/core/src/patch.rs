//! Fixed-size HF magnitude patches consumed by both networks.
//!
//! A patch is 128 HF bins × 256 frames. Longer clips are cut into patches
//! that overlap by half; shorter ones are zero padded. Magnitudes are
//! divided by `√Σw²` so that white noise with standard deviation σ reads
//! roughly σ per bin.

use hfsig_nn::{Scalar, Tensor};
use thiserror::Error;

use num_complex::Complex64;

use crate::dsp::{istft_samples, split_bands, stft_samples, DspError, HfMagnitude, HfPhase, LfBand, Spectrogram, StftParams};

pub const PATCH_BINS: usize = 128;
pub const PATCH_FRAMES: usize = 256;
pub const PATCH_STEP: usize = PATCH_FRAMES / 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("patch must be {PATCH_BINS}x{PATCH_FRAMES} values, got {0}")]
    WrongSize(usize),
    #[error("patch contains a negative or non-finite magnitude at {0}")]
    BadValue(usize),
    #[error("HF band has {0} bins, need at least {PATCH_BINS}")]
    TooFewBins(usize),
    #[error("{0} patches supplied for a layout of {1}")]
    CountMismatch(usize, usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Non-negative HF magnitude grid, bin-major (`[bin][frame]`).
#[derive(Debug, Clone, PartialEq)]
pub struct HfPatch {
    values: Vec<f32>,
}

impl HfPatch {
    pub fn new(values: Vec<f32>) -> Result<Self, PatchError> {
        if values.len() != PATCH_BINS * PATCH_FRAMES {
            return Err(PatchError::WrongSize(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PatchError::BadValue(i));
        }
        Ok(HfPatch { values })
    }

    pub fn zeros() -> Self {
        HfPatch {
            values: vec![0.0; PATCH_BINS * PATCH_FRAMES],
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * PATCH_FRAMES + frame]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// `[1, 128, 256]` tensor view.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, PATCH_BINS, PATCH_FRAMES],
            self.values.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("patch size is fixed")
    }

    /// Accepts a `[1,128,256]` tensor, clamping tiny negatives and NaNs to 0.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, PatchError> {
        if t.len() != PATCH_BINS * PATCH_FRAMES {
            return Err(PatchError::WrongSize(t.len()));
        }
        HfPatch::new(
            t.data()
                .iter()
                .map(|v| {
                    let x = Scalar::to_f64(*v) as f32;
                    if x.is_finite() && x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
    }
}

/// Log compression applied to magnitudes before either network sees them.
pub fn compress<T: Scalar>(x: &Tensor<T>, floor: f64) -> Tensor<T> {
    let inv = T::from_f64(1.0 / floor);
    x.map(|v| (v.max(T::zero()) * inv).ln_1p())
}

/// Derivative of [`compress`] with respect to its input, evaluated at `x`.
pub fn compress_grad<T: Scalar>(x: T, floor: f64) -> T {
    T::one() / (x.max(T::zero()) + T::from_f64(floor))
}

/// Start frames of the patches that cover `frames` frames.
pub fn patch_starts(frames: usize) -> Vec<usize> {
    if frames <= PATCH_FRAMES {
        return vec![0];
    }
    let n = (frames - PATCH_FRAMES).div_ceil(PATCH_STEP) + 1;
    (0..n).map(|i| i * PATCH_STEP).collect()
}

pub fn magnitude_scale(spec_window_power: f64) -> f64 {
    1.0 / spec_window_power.sqrt()
}

/// Spectrogram split into the pieces signing needs.
#[derive(Debug, Clone)]
pub struct PatchedSpectrogram {
    pub lf: LfBand,
    pub hf_magnitude: HfMagnitude,
    pub hf_phase: HfPhase,
    pub patches: Vec<HfPatch>,
    pub starts: Vec<usize>,
    scale: f64,
}

pub fn extract_patches(spec: &Spectrogram, cutoff_hz: f64) -> Result<PatchedSpectrogram, PatchError> {
    let (lf, hf_magnitude, hf_phase) = split_bands(spec, cutoff_hz)?;
    if hf_magnitude.bins < PATCH_BINS {
        return Err(PatchError::TooFewBins(hf_magnitude.bins));
    }
    let scale = magnitude_scale(spec.params().window_power());
    let starts = patch_starts(spec.frames());
    let patches = starts
        .iter()
        .map(|&s| {
            let mut v = vec![0.0f32; PATCH_BINS * PATCH_FRAMES];
            for b in 0..PATCH_BINS {
                for f in 0..PATCH_FRAMES {
                    let t = s + f;
                    if t < hf_magnitude.frames {
                        v[b * PATCH_FRAMES + f] = (hf_magnitude.get(b, t) * scale) as f32;
                    }
                }
            }
            HfPatch { values: v }
        })
        .collect();
    Ok(PatchedSpectrogram {
        lf,
        hf_magnitude,
        hf_phase,
        patches,
        starts,
        scale,
    })
}

/// Linear crossfade weight of frame `f` inside a patch.
fn crossfade(f: usize) -> f64 {
    (f + 1).min(PATCH_FRAMES - f) as f64
}

impl PatchedSpectrogram {
    /// Writes `replacement` patches back over the first 128 HF bins,
    /// blending overlaps, and reassembles the full spectrogram. Bins above
    /// the patch band keep their original magnitudes.
    pub fn reassemble(&self, replacement: &[HfPatch]) -> Result<Spectrogram, PatchError> {
        if replacement.len() != self.starts.len() {
            return Err(PatchError::CountMismatch(replacement.len(), self.starts.len()));
        }
        let frames = self.hf_magnitude.frames;
        let mut acc = vec![0.0f64; PATCH_BINS * frames];
        let mut weight = vec![0.0f64; frames];
        for (patch, &s) in replacement.iter().zip(&self.starts) {
            for f in 0..PATCH_FRAMES {
                let t = s + f;
                if t >= frames {
                    break;
                }
                let w = crossfade(f);
                weight[t] += w;
                for b in 0..PATCH_BINS {
                    acc[b * frames + t] += w * patch.get(b, f) as f64;
                }
            }
        }
        let mut hf = self.hf_magnitude.clone();
        for b in 0..PATCH_BINS {
            for t in 0..frames {
                *hf.get_mut(b, t) = acc[b * frames + t] / weight[t] / self.scale;
            }
        }
        Ok(crate::dsp::recombine(&self.lf, &hf, &self.hf_phase)?)
    }
}

/// What an STFT of the resynthesized audio shows in one patch after its
/// magnitudes were replaced, with the original phase kept.
///
/// Writing new magnitudes under old phases gives an inconsistent
/// spectrogram; resynthesis followed by analysis projects it back onto the
/// consistent ones. The change is linear in the magnitude offset, so only
/// the phases and the patch geometry are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchResynthesis {
    phase: Vec<f32>,
    valid_frames: usize,
    signal_len: usize,
    first_bin: usize,
    params: StftParams,
    sample_rate: u32,
}

/// Output of [`PatchResynthesis::apply`] with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Resynthesized<T> {
    pub output: Tensor<T>,
    coeffs: Vec<Complex64>,
}

impl PatchResynthesis {
    fn unit(&self, i: usize) -> Complex64 {
        Complex64::from_polar(1.0, self.phase[i] as f64)
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    /// Resynthesis and analysis of patch-grid coefficients, restricted to
    /// the patch again.
    fn project(&self, grid: &[Complex64]) -> Result<Vec<Complex64>, PatchError> {
        let bins = self.params.bins();
        let mut data = vec![Complex64::new(0.0, 0.0); bins * PATCH_FRAMES];
        for b in 0..PATCH_BINS {
            for f in 0..self.valid_frames {
                data[(self.first_bin + b) * PATCH_FRAMES + f] = grid[b * PATCH_FRAMES + f];
            }
        }
        let spec = Spectrogram::from_parts(self.params, self.sample_rate, self.signal_len, bins, PATCH_FRAMES, data)?;
        let x = istft_samples(&spec)?;
        let back = stft_samples(&x, self.sample_rate, self.params)?;
        let mut out = vec![Complex64::new(0.0, 0.0); PATCH_BINS * PATCH_FRAMES];
        let frames = back.frames().min(self.valid_frames);
        for b in 0..PATCH_BINS {
            for f in 0..frames {
                out[b * PATCH_FRAMES + f] = back.coeff(self.first_bin + b, f);
            }
        }
        Ok(out)
    }

    /// Magnitudes seen after resynthesizing `modified` in place of `original`.
    pub fn apply<T: Scalar>(&self, original: &Tensor<T>, modified: &Tensor<T>) -> Result<Resynthesized<T>, PatchError> {
        let n = PATCH_BINS * PATCH_FRAMES;
        if original.len() != n || modified.len() != n {
            return Err(PatchError::WrongSize(original.len().max(modified.len())));
        }
        let (o, m) = (original.data(), modified.data());
        let mut delta = vec![Complex64::new(0.0, 0.0); n];
        for b in 0..PATCH_BINS {
            for f in 0..self.valid_frames {
                let i = b * PATCH_FRAMES + f;
                delta[i] = self.unit(i) * Scalar::to_f64(m[i] - o[i]);
            }
        }
        let mut coeffs = self.project(&delta)?;
        let mut out = vec![T::zero(); n];
        for b in 0..PATCH_BINS {
            for f in 0..PATCH_FRAMES {
                let i = b * PATCH_FRAMES + f;
                if f < self.valid_frames {
                    coeffs[i] += self.unit(i) * Scalar::to_f64(o[i]);
                    out[i] = T::from_f64(coeffs[i].norm());
                } else {
                    coeffs[i] = Complex64::new(0.0, 0.0);
                }
            }
        }
        Ok(Resynthesized {
            output: Tensor::from_vec(modified.shape(), out).expect("patch size"),
            coeffs,
        })
    }

    /// Gradient with respect to `modified` given the gradient at the output.
    pub fn backward<T: Scalar>(&self, forward: &Resynthesized<T>, grad: &Tensor<T>) -> Result<Tensor<T>, PatchError> {
        let n = PATCH_BINS * PATCH_FRAMES;
        if grad.len() != n {
            return Err(PatchError::WrongSize(grad.len()));
        }
        let g: Vec<Complex64> = forward
            .coeffs
            .iter()
            .zip(grad.data())
            .map(|(z, &g)| {
                let m = z.norm();
                if m > 0.0 {
                    z * (Scalar::to_f64(g) / m)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        let back = self.project(&g)?;
        let mut out = vec![T::zero(); n];
        for b in 0..PATCH_BINS {
            for f in 0..self.valid_frames {
                let i = b * PATCH_FRAMES + f;
                out[i] = T::from_f64((self.unit(i).conj() * back[i]).re);
            }
        }
        Ok(Tensor::from_vec(grad.shape(), out).expect("patch size"))
    }
}

impl PatchedSpectrogram {
    /// Resynthesis model of patch `index`. Each patch is treated as if the
    /// audio started at its first frame.
    pub fn resynthesis(&self, index: usize) -> Option<PatchResynthesis> {
        let start = *self.starts.get(index)?;
        let layout = self.lf.layout;
        let hop = layout.params.hop;
        let valid_frames = (self.hf_magnitude.frames - start).min(PATCH_FRAMES);
        let signal_len = layout
            .signal_len
            .saturating_sub(start * hop)
            .min((PATCH_FRAMES - 1) * hop)
            .max(layout.params.n_fft);
        let mut phase = vec![0.0f32; PATCH_BINS * PATCH_FRAMES];
        for b in 0..PATCH_BINS {
            for f in 0..valid_frames {
                phase[b * PATCH_FRAMES + f] = self.hf_phase.unit(b, start + f).arg() as f32;
            }
        }
        Some(PatchResynthesis {
            phase,
            valid_frames,
            signal_len,
            first_bin: self.hf_magnitude.first_bin,
            params: layout.params,
            sample_rate: layout.sample_rate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::AudioClip;
    use crate::dsp::{stft, StftParams};

    #[test]
    fn starts_cover_frames() {
        assert_eq!(patch_starts(10), vec![0]);
        assert_eq!(patch_starts(256), vec![0]);
        assert_eq!(patch_starts(257), vec![0, 128]);
        assert_eq!(patch_starts(384), vec![0, 128]);
        assert_eq!(patch_starts(385), vec![0, 128, 256]);
        for frames in 1..2000 {
            let s = patch_starts(frames);
            assert!(s.last().unwrap() + PATCH_FRAMES >= frames);
        }
    }

    #[test]
    fn patch_validation() {
        assert!(HfPatch::new(vec![0.0; 10]).is_err());
        let mut v = vec![0.0; PATCH_BINS * PATCH_FRAMES];
        v[5] = -1.0;
        assert_eq!(HfPatch::new(v), Err(PatchError::BadValue(5)));
    }

    #[test]
    fn identity_reassembly_round_trips() {
        let samples: Vec<f64> = (0..100_000).map(|i| (i as f64 * 0.731).sin() * 0.3).collect();
        let clip = AudioClip::from_clamped(samples, 16000).unwrap();
        let spec = stft(&clip, StftParams::default()).unwrap();
        let p = extract_patches(&spec, 4000.0).unwrap();
        assert_eq!(p.starts.len(), patch_starts(spec.frames()).len());
        assert!(p.starts.len() > 1);
        let back = p.reassemble(&p.patches).unwrap();
        for (a, b) in back.data().iter().zip(spec.data()) {
            assert!((a - b).norm() <= 1e-5 * b.norm().max(1e-3));
        }
    }
}
