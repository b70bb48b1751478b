//! STFT / ISTFT with a periodic Hann window, HF/LF band splitting and
//! per-band energy profiles.
//!
//! Frames are centred: frame `t` covers samples `[t·hop − n_fft/2, t·hop + n_fft/2)`
//! with zeros outside the clip, and there is one frame for every `t` whose
//! window starts before the end of the clip. Trailing silence therefore only
//! ever adds all-zero frames.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;

/// Magnitudes below this power floor are reported at `DB_FLOOR`.
pub const DB_FLOOR: f64 = -120.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("n_fft must be a power of two >= 4, got {0}")]
    BadFftSize(usize),
    #[error("clip has {len} samples, shorter than one window of {n_fft}")]
    ClipTooShort { len: usize, n_fft: usize },
    #[error("spectrogram has {actual} bins, params imply {expected}")]
    BinCount { expected: usize, actual: usize },
    #[error("cutoff {cutoff_hz} Hz outside (0, {nyquist} Hz)")]
    BadCutoff { cutoff_hz: f64, nyquist: f64 },
    #[error("band width must be positive, got {0}")]
    BadBandWidth(f64),
    #[error("band shapes do not line up: {0}")]
    ShapeMismatch(String),
    #[error("csv export failed: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftParams {
    /// Hann window with 50 % overlap.
    pub fn new(n_fft: usize) -> Result<Self, DspError> {
        if n_fft < 4 || !n_fft.is_power_of_two() {
            return Err(DspError::BadFftSize(n_fft));
        }
        Ok(StftParams {
            n_fft,
            hop: n_fft / 2,
            window: Window::Hann,
        })
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let canonical = StftParams::new(self.n_fft)?;
        if *self != canonical {
            return Err(DspError::BadFftSize(self.n_fft));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        hann(self.n_fft)
    }

    /// `Σ w²`, the white-noise power gain of the analysis window.
    pub fn window_power(&self) -> f64 {
        hann(self.n_fft).iter().map(|w| w * w).sum()
    }

    pub fn frame_count(&self, len: usize) -> usize {
        (len + self.n_fft / 2).div_ceil(self.hop)
    }
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams::new(512).expect("512 is a power of two")
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex one-sided spectrogram stored bin-major: `coeff(bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    params: StftParams,
    sample_rate: u32,
    signal_len: usize,
    bins: usize,
    frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn from_parts(
        params: StftParams,
        sample_rate: u32,
        signal_len: usize,
        bins: usize,
        frames: usize,
        data: Vec<Complex64>,
    ) -> Result<Self, DspError> {
        if data.len() != bins * frames {
            return Err(DspError::ShapeMismatch(format!(
                "{} coefficients for {bins}x{frames}",
                data.len()
            )));
        }
        Ok(Spectrogram {
            params,
            sample_rate,
            signal_len,
            bins,
            frames,
            data,
        })
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.params.n_fft as f64
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn coeff(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn coeff_mut(&mut self, bin: usize, frame: usize) -> &mut Complex64 {
        &mut self.data[bin * self.frames + frame]
    }

    /// All frames of one bin.
    pub fn bin_row(&self, bin: usize) -> &[Complex64] {
        &self.data[bin * self.frames..(bin + 1) * self.frames]
    }

    pub fn bin_row_mut(&mut self, bin: usize) -> &mut [Complex64] {
        &mut self.data[bin * self.frames..(bin + 1) * self.frames]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// Short-time Fourier transform of `clip`.
pub fn stft(clip: &AudioClip, params: StftParams) -> Result<Spectrogram, DspError> {
    let x: Vec<f64> = clip.samples().iter().map(|&v| v as f64).collect();
    stft_samples(&x, clip.sample_rate(), params)
}

/// [`stft`] of raw samples, without the clip invariants.
pub fn stft_samples(x: &[f64], sample_rate: u32, params: StftParams) -> Result<Spectrogram, DspError> {
    params.validate()?;
    let n = params.n_fft;
    if x.len() < n {
        return Err(DspError::ClipTooShort { len: x.len(), n_fft: n });
    }
    let window = params.window();
    let fft = forward_plan(n);
    let frames = params.frame_count(x.len());
    let bins = params.bins();
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = (t * params.hop) as isize - (n / 2) as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let v = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize] * window[i]
            } else {
                0.0
            };
            *slot = Complex64::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            data[k * frames + t] = buf[k];
        }
    }
    Ok(Spectrogram {
        params,
        sample_rate,
        signal_len: x.len(),
        bins,
        frames,
        data,
    })
}

/// Weighted overlap-add inverse: each sample is `Σ w·frame / Σ w²`, so the
/// round trip is exact wherever a window covers the sample.
pub fn istft(spec: &Spectrogram) -> Result<AudioClip, DspError> {
    let samples = istft_samples(spec)?;
    Ok(AudioClip::from_clamped(samples, spec.sample_rate).expect("positive sample rate"))
}

/// [`istft`] without clamping or rounding to `f32`.
pub fn istft_samples(spec: &Spectrogram) -> Result<Vec<f64>, DspError> {
    let params = spec.params;
    params.validate()?;
    if spec.bins != params.bins() {
        return Err(DspError::BinCount {
            expected: params.bins(),
            actual: spec.bins,
        });
    }
    let n = params.n_fft;
    let window = params.window();
    let inverse = FftPlanner::new().plan_fft_inverse(n);
    let len = spec.signal_len;
    let mut acc = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); inverse.get_inplace_scratch_len()];
    for t in 0..spec.frames {
        for k in 0..=n / 2 {
            let c = spec.coeff(k, t);
            buf[k] = c;
            if k > 0 && k < n / 2 {
                buf[n - k] = c.conj();
            }
        }
        // DC and Nyquist of a real signal are real.
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        inverse.process_with_scratch(&mut buf, &mut scratch);
        let start = (t * params.hop) as isize - (n / 2) as isize;
        for (i, c) in buf.iter().enumerate() {
            let idx = start + i as isize;
            if idx < 0 || idx as usize >= len {
                continue;
            }
            let idx = idx as usize;
            acc[idx] += window[i] * c.re / n as f64;
            norm[idx] += window[i] * window[i];
        }
    }
    Ok(acc
        .iter()
        .zip(&norm)
        .map(|(&a, &w)| if w > 1e-10 { a / w } else { 0.0 })
        .collect())
}

/// Time/format metadata shared by the pieces of a band split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecLayout {
    pub params: StftParams,
    pub sample_rate: u32,
    pub signal_len: usize,
    pub frames: usize,
}

/// Complex bins `0..cutoff_bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct LfBand {
    pub layout: SpecLayout,
    pub cutoff_bin: usize,
    pub coeffs: Vec<Complex64>,
}

/// Magnitudes of bins `first_bin..bins`, bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HfMagnitude {
    pub first_bin: usize,
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl HfMagnitude {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn get_mut(&mut self, bin: usize, frame: usize) -> &mut f64 {
        &mut self.values[bin * self.frames + frame]
    }
}

/// Phase of the HF bins, kept as the original coefficients so that an
/// unmodified magnitude reassembles bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HfPhase {
    pub first_bin: usize,
    pub bins: usize,
    pub frames: usize,
    reference: Vec<Complex64>,
}

impl HfPhase {
    pub fn angle(&self, bin: usize, frame: usize) -> f64 {
        self.reference[bin * self.frames + frame].arg()
    }

    /// Unit phasor; bins with zero magnitude get phase 0.
    pub fn unit(&self, bin: usize, frame: usize) -> Complex64 {
        let r = self.reference[bin * self.frames + frame];
        let m = r.norm();
        if m > 0.0 {
            r / m
        } else {
            Complex64::new(1.0, 0.0)
        }
    }

    fn apply(&self, idx: usize, magnitude: f64) -> Complex64 {
        let r = self.reference[idx];
        let m = r.norm();
        if m > 0.0 {
            r * (magnitude / m)
        } else {
            Complex64::new(magnitude, 0.0)
        }
    }
}

/// First bin whose centre frequency is at or above `cutoff_hz`.
pub fn cutoff_bin(params: StftParams, sample_rate: u32, cutoff_hz: f64) -> usize {
    (cutoff_hz * params.n_fft as f64 / sample_rate as f64).ceil() as usize
}

/// Splits into complex LF bins and magnitude/phase HF bins at `cutoff_hz`.
pub fn split_bands(spec: &Spectrogram, cutoff_hz: f64) -> Result<(LfBand, HfMagnitude, HfPhase), DspError> {
    if !(cutoff_hz > 0.0 && cutoff_hz < spec.nyquist()) {
        return Err(DspError::BadCutoff {
            cutoff_hz,
            nyquist: spec.nyquist(),
        });
    }
    let cut = cutoff_bin(spec.params, spec.sample_rate, cutoff_hz).min(spec.bins - 1);
    let split_at = cut * spec.frames;
    let (lo, hi) = spec.data.split_at(split_at);
    let layout = SpecLayout {
        params: spec.params,
        sample_rate: spec.sample_rate,
        signal_len: spec.signal_len,
        frames: spec.frames,
    };
    let hf_bins = spec.bins - cut;
    Ok((
        LfBand {
            layout,
            cutoff_bin: cut,
            coeffs: lo.to_vec(),
        },
        HfMagnitude {
            first_bin: cut,
            bins: hf_bins,
            frames: spec.frames,
            values: hi.iter().map(|c| c.norm()).collect(),
        },
        HfPhase {
            first_bin: cut,
            bins: hf_bins,
            frames: spec.frames,
            reference: hi.to_vec(),
        },
    ))
}

/// Inverse of [`split_bands`] with (possibly modified) HF magnitudes.
pub fn recombine(lf: &LfBand, hf_magnitude: &HfMagnitude, hf_phase: &HfPhase) -> Result<Spectrogram, DspError> {
    let frames = lf.layout.frames;
    let consistent = hf_magnitude.first_bin == lf.cutoff_bin
        && hf_phase.first_bin == lf.cutoff_bin
        && hf_magnitude.bins == hf_phase.bins
        && hf_magnitude.frames == frames
        && hf_phase.frames == frames
        && lf.coeffs.len() == lf.cutoff_bin * frames
        && hf_magnitude.values.len() == hf_magnitude.bins * frames;
    if !consistent {
        return Err(DspError::ShapeMismatch(format!(
            "lf cutoff {} x {frames} frames vs hf from bin {} ({}x{})",
            lf.cutoff_bin, hf_magnitude.first_bin, hf_magnitude.bins, hf_magnitude.frames
        )));
    }
    let bins = lf.cutoff_bin + hf_magnitude.bins;
    let expected = lf.layout.params.bins();
    if bins != expected {
        return Err(DspError::BinCount { expected, actual: bins });
    }
    let mut data = lf.coeffs.clone();
    data.extend(
        hf_magnitude
            .values
            .iter()
            .enumerate()
            .map(|(i, &m)| hf_phase.apply(i, m)),
    );
    Ok(Spectrogram {
        params: lf.layout.params,
        sample_rate: lf.layout.sample_rate,
        signal_len: lf.layout.signal_len,
        bins,
        frames,
        data,
    })
}

/// Mean energy per fixed-width frequency band, in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandProfile {
    pub band_width_hz: f64,
    pub energies_db: Vec<f64>,
}

impl BandProfile {
    pub fn band_edges(&self, index: usize) -> (f64, f64) {
        let lo = index as f64 * self.band_width_hz;
        (lo, lo + self.band_width_hz)
    }

    pub fn argmax(&self) -> usize {
        self.energies_db
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &e)| if e > best.1 { (i, e) } else { best })
            .0
    }
}

pub fn to_db(power: f64) -> f64 {
    if power > 0.0 {
        (10.0 * power.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Linear mean band powers (normalized by the window power gain, so white
/// noise of variance σ² reads σ² in every band).
pub fn band_powers(spec: &Spectrogram, band_width_hz: f64) -> Result<Vec<f64>, DspError> {
    if !(band_width_hz > 0.0 && band_width_hz.is_finite()) {
        return Err(DspError::BadBandWidth(band_width_hz));
    }
    let n_bands = (spec.nyquist() / band_width_hz).floor() as usize;
    let gain = spec.params.window_power();
    let mut sums = vec![0.0; n_bands];
    let mut counts = vec![0usize; n_bands];
    for k in 0..spec.bins {
        let band = (k as f64 * spec.bin_hz() / band_width_hz).floor() as usize;
        if band >= n_bands {
            continue;
        }
        sums[band] += spec.bin_row(k).iter().map(|c| c.norm_sqr()).sum::<f64>();
        counts[band] += spec.frames;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 / gain } else { 0.0 })
        .collect())
}

pub fn band_energy_profile(spec: &Spectrogram, band_width_hz: f64) -> Result<BandProfile, DspError> {
    Ok(BandProfile {
        band_width_hz,
        energies_db: band_powers(spec, band_width_hz)?.into_iter().map(to_db).collect(),
    })
}

/// One row of the band CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band_start_hz: f64,
    pub band_end_hz: f64,
    pub mean_energy_db: f64,
    pub cohort_label: String,
}

pub fn band_rows(profile: &BandProfile, cohort_label: &str) -> Vec<BandRow> {
    profile
        .energies_db
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let (lo, hi) = profile.band_edges(i);
            BandRow {
                band_start_hz: lo,
                band_end_hz: hi,
                mean_energy_db: e,
                cohort_label: cohort_label.to_string(),
            }
        })
        .collect()
}

pub fn write_band_csv<W: Write>(out: W, rows: &[BandRow]) -> Result<(), DspError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| DspError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| DspError::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, len: usize) -> AudioClip {
        AudioClip::from_clamped((0..len).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()), 16000).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(StftParams::new(500).is_err());
        let p = StftParams::default();
        assert_eq!((p.n_fft, p.hop, p.bins()), (512, 256, 257));
        assert!((p.window_power() - 192.0).abs() < 1e-9);
    }

    #[test]
    fn short_clip_rejected() {
        let clip = AudioClip::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(stft(&clip, StftParams::default()), Err(DspError::ClipTooShort { .. })));
    }

    #[test]
    fn zeros_in_zeros_out() {
        let clip = AudioClip::new(vec![0.0; 4000], 16000).unwrap();
        let s = stft(&clip, StftParams::default()).unwrap();
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 4000);
        assert!(back.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn trailing_silence_adds_only_zero_frames() {
        let clip = sine(700.0, 0.5, 5000);
        let mut padded = clip.samples().to_vec();
        padded.extend(std::iter::repeat_n(0.0, 255));
        let padded = AudioClip::new(padded, 16000).unwrap();
        let a = stft(&clip, StftParams::default()).unwrap();
        let b = stft(&padded, StftParams::default()).unwrap();
        for k in 0..a.bins() {
            for t in 0..b.frames() {
                let want = if t < a.frames() { a.coeff(k, t) } else { Complex64::new(0.0, 0.0) };
                assert_eq!(b.coeff(k, t), want);
            }
        }
    }

    #[test]
    fn split_then_recombine_is_exact() {
        let clip = sine(1000.0, 0.8, 8000);
        let s = stft(&clip, StftParams::default()).unwrap();
        let (lf, hf, ph) = split_bands(&s, 4000.0).unwrap();
        assert_eq!(lf.cutoff_bin, 128);
        assert_eq!((hf.first_bin, hf.bins), (128, 129));
        assert_eq!(recombine(&lf, &hf, &ph).unwrap(), s);
    }

    #[test]
    fn scaling_hf_magnitude() {
        let noise: Vec<f64> = (0..8000).map(|i| ((i * 7919 % 1000) as f64 / 1000.0 - 0.5) * 0.5).collect();
        let s = stft(&AudioClip::from_clamped(noise, 16000).unwrap(), StftParams::default()).unwrap();
        let (lf, hf, ph) = split_bands(&s, 4000.0).unwrap();

        let mut zero = hf.clone();
        zero.values.iter_mut().for_each(|v| *v = 0.0);
        let z = recombine(&lf, &zero, &ph).unwrap();
        for k in 0..s.bins() {
            for t in 0..s.frames() {
                if k < 128 {
                    assert_eq!(z.coeff(k, t), s.coeff(k, t));
                } else {
                    assert_eq!(z.coeff(k, t).norm(), 0.0);
                }
            }
        }

        let mut double = hf.clone();
        double.values.iter_mut().for_each(|v| *v *= 2.0);
        let d = recombine(&lf, &double, &ph).unwrap();
        for k in 128..s.bins() {
            for t in 0..s.frames() {
                let (orig, new) = (s.coeff(k, t), d.coeff(k, t));
                assert!((new.norm() - 2.0 * orig.norm()).abs() <= 1e-12 * orig.norm().max(1.0));
                if orig.norm() > 1e-9 {
                    assert!((new.arg() - orig.arg()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn recombine_rejects_mismatched_shapes() {
        let s = stft(&sine(440.0, 0.5, 4000), StftParams::default()).unwrap();
        let (lf, mut hf, ph) = split_bands(&s, 4000.0).unwrap();
        hf.values.pop();
        assert!(recombine(&lf, &hf, &ph).is_err());
        let (_, hf2, _) = split_bands(&s, 3000.0).unwrap();
        assert!(recombine(&lf, &hf2, &ph).is_err());
        assert!(split_bands(&s, 9000.0).is_err());
        assert!(split_bands(&s, 0.0).is_err());
    }

    #[test]
    fn istft_rejects_wrong_bin_count() {
        let s = stft(&sine(440.0, 0.5, 4000), StftParams::default()).unwrap();
        let bad = Spectrogram::from_parts(
            s.params(),
            16000,
            s.signal_len(),
            100,
            s.frames(),
            vec![Complex64::new(0.0, 0.0); 100 * s.frames()],
        )
        .unwrap();
        assert!(matches!(istft(&bad), Err(DspError::BinCount { .. })));
    }

    #[test]
    fn zero_spectrogram_profile_is_floor() {
        let clip = AudioClip::new(vec![0.0; 4000], 16000).unwrap();
        let p = band_energy_profile(&stft(&clip, StftParams::default()).unwrap(), 600.0).unwrap();
        assert_eq!(p.energies_db.len(), 13);
        assert!(p.energies_db.iter().all(|&e| e == DB_FLOOR));
        assert!(band_energy_profile(&stft(&clip, StftParams::default()).unwrap(), 0.0).is_err());
    }

    #[test]
    fn band_csv_has_schema_columns() {
        let p = BandProfile {
            band_width_hz: 600.0,
            energies_db: vec![-10.0, -20.0],
        };
        let mut buf = Vec::new();
        write_band_csv(&mut buf, &band_rows(&p, "original")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("band_start_hz,band_end_hz,mean_energy_db,cohort_label"));
        assert_eq!(lines.next(), Some("0.0,600.0,-10.0,original"));
    }
}
