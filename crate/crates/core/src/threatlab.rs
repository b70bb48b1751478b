//! Attack channel and synthetic speech corpus.
//!
//! The clone proxy mimics what voice-cloning vocoders do to a recording:
//! content above a low-pass cutoff is replaced by a faint noise floor.

use std::f64::consts::PI;
use std::fs;
use std::path::{Component, Path, PathBuf};

use hfsig_nn::{Scalar, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_wav, resample, write_wav, AudioClip, ClipError, WavError, CANONICAL_RATE};
use crate::dsp::{istft, stft, DspError, Spectrogram, StftParams};
use crate::keydp::default_user_id;
use crate::patch::{PATCH_BINS, PATCH_FRAMES};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ThreatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: WavError,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Clip(#[from] ClipError),
}

pub type Result<T> = std::result::Result<T, ThreatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ThreatError + '_ {
    move |source| ThreatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A ChaCha stream dedicated to one purpose under a shared seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of one clone-proxy application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub lp_cutoff_hz: f64,
    /// Replacement noise level relative to the clip RMS.
    pub hf_noise_floor_db: f64,
    pub gain_jitter_db: f64,
    /// Roll-off of the replacement noise above the cutoff.
    pub noise_tilt_db_per_khz: f64,
}

impl AttackParams {
    pub const LP_RANGE_HZ: (f64, f64) = (3000.0, 6000.0);
    pub const GAIN_JITTER_BOUND_DB: f64 = 1.0;
    pub const DEFAULT_NOISE_FLOOR_DB: f64 = -50.0;
    pub const DEFAULT_NOISE_TILT: f64 = 3.0;

    /// Draws the per-clip cutoff and gain jitter.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (lo, hi) = Self::LP_RANGE_HZ;
        let j = Self::GAIN_JITTER_BOUND_DB;
        AttackParams {
            lp_cutoff_hz: rng.random_range(lo..=hi),
            hf_noise_floor_db: Self::DEFAULT_NOISE_FLOOR_DB,
            gain_jitter_db: rng.random_range(-j..=j),
            noise_tilt_db_per_khz: Self::DEFAULT_NOISE_TILT,
        }
    }

    pub fn validate(&self, nyquist: f64) -> Result<()> {
        if !(self.lp_cutoff_hz > 0.0 && self.lp_cutoff_hz < nyquist) {
            return Err(ThreatError::Params(format!(
                "lp_cutoff_hz {} must lie in (0, {nyquist})",
                self.lp_cutoff_hz
            )));
        }
        if !(self.hf_noise_floor_db < 0.0) {
            return Err(ThreatError::Params("hf_noise_floor_db must be negative".into()));
        }
        if !self.gain_jitter_db.is_finite() || !self.noise_tilt_db_per_khz.is_finite() {
            return Err(ThreatError::Params("non-finite gain or tilt".into()));
        }
        Ok(())
    }

    pub fn gain(&self) -> f64 {
        10f64.powf(self.gain_jitter_db / 20.0)
    }

    /// Standard deviation of the white-noise-equivalent floor at `freq_hz`.
    fn noise_sigma(&self, clip_rms: f64, freq_hz: f64) -> f64 {
        let tilt = -self.noise_tilt_db_per_khz * (freq_hz - self.lp_cutoff_hz).max(0.0) / 1000.0;
        clip_rms * 10f64.powf((self.hf_noise_floor_db + tilt) / 20.0)
    }
}

/// Applies the attack to a spectrogram in place. `clip_rms` sets the noise
/// level. Replaced bins never exceed the original magnitude.
pub fn clone_spectrogram<R: Rng + ?Sized>(
    spec: &mut Spectrogram,
    params: &AttackParams,
    clip_rms: f64,
    rng: &mut R,
) -> Result<()> {
    params.validate(spec.nyquist())?;
    let g = params.gain();
    let per_component = (spec.params().window_power() / 2.0).sqrt();
    let first = (params.lp_cutoff_hz / spec.bin_hz()).ceil() as usize;
    for k in 0..spec.bins() {
        let freq = k as f64 * spec.bin_hz();
        let sigma = params.noise_sigma(clip_rms, freq) * per_component;
        for c in spec.bin_row_mut(k) {
            if k < first {
                *c *= g;
                continue;
            }
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let z = Complex64::new(re, im) * sigma * g;
            let cap = c.norm();
            let mag = z.norm();
            *c = if mag > cap && mag > 0.0 { z * (cap / mag) } else { z };
        }
    }
    Ok(())
}

/// Clone-proxy attack on a waveform. The output has the input's length.
pub fn clone_proxy<R: Rng + ?Sized>(clip: &AudioClip, params: &AttackParams, rng: &mut R) -> Result<AudioClip> {
    let mut spec = stft(clip, StftParams::default())?;
    clone_spectrogram(&mut spec, params, clip.rms(), rng)?;
    Ok(istft(&spec)?)
}

/// The attack's random draws for one `[1,128,256]` patch of scaled HF
/// magnitudes, so that it can be applied to a patch not yet computed.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAttack {
    gain: f64,
    /// First patch row at or above the low-pass cutoff.
    first_replaced: usize,
    /// Noise magnitudes (gain included) for the replaced rows.
    noise: Vec<f64>,
}

/// Attacked patch and `d output / d input` per element: the gain on
/// pass-through rows, 1 where a replaced bin was capped at the input, 0 where
/// noise won.
#[derive(Debug, Clone)]
pub struct PatchClone<T> {
    pub output: Tensor<T>,
    pub jacobian: Vec<T>,
}

impl<T: Scalar> PatchClone<T> {
    pub fn backward(&self, grad: &Tensor<T>) -> Tensor<T> {
        let data = grad.data().iter().zip(&self.jacobian).map(|(&g, &j)| g * j).collect();
        Tensor::from_vec(grad.shape(), data).expect("same shape")
    }
}

impl PatchAttack {
    /// Draws the noise for a patch whose first row sits at `first_bin_hz`.
    pub fn sample<R: Rng + ?Sized>(
        params: &AttackParams,
        clip_rms: f64,
        first_bin_hz: f64,
        bin_hz: f64,
        rng: &mut R,
    ) -> Result<Self> {
        params.validate(first_bin_hz + PATCH_BINS as f64 * bin_hz + bin_hz)?;
        let gain = params.gain();
        let first_replaced = (0..PATCH_BINS)
            .find(|&b| first_bin_hz + b as f64 * bin_hz >= params.lp_cutoff_hz)
            .unwrap_or(PATCH_BINS);
        let mut noise = Vec::with_capacity((PATCH_BINS - first_replaced) * PATCH_FRAMES);
        for b in first_replaced..PATCH_BINS {
            let sigma = params.noise_sigma(clip_rms, first_bin_hz + b as f64 * bin_hz) / 2f64.sqrt() * gain;
            for _ in 0..PATCH_FRAMES {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                noise.push(re.hypot(im) * sigma);
            }
        }
        Ok(PatchAttack {
            gain,
            first_replaced,
            noise,
        })
    }

    pub fn apply<T: Scalar>(&self, patch: &Tensor<T>) -> Result<PatchClone<T>> {
        if patch.shape() != [1, PATCH_BINS, PATCH_FRAMES] {
            return Err(ThreatError::Params(format!("patch shape {:?}", patch.shape())));
        }
        let split = self.first_replaced * PATCH_FRAMES;
        let g = T::from_f64(self.gain);
        let mut output = Vec::with_capacity(patch.len());
        let mut jacobian = Vec::with_capacity(patch.len());
        for &x in &patch.data()[..split] {
            output.push(x * g);
            jacobian.push(g);
        }
        for (&x, &n) in patch.data()[split..].iter().zip(&self.noise) {
            let n = T::from_f64(n);
            if n > x {
                output.push(x);
                jacobian.push(T::one());
            } else {
                output.push(n);
                jacobian.push(T::zero());
            }
        }
        Ok(PatchClone {
            output: Tensor::from_vec(patch.shape(), output).expect("patch size"),
            jacobian,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    pub formants: [Formant; 3],
    /// Slope of the broadband (aspiration) noise spectrum.
    pub hf_tilt_db_per_khz: f64,
    /// Broadband noise level relative to the voiced part.
    pub noise_level_db: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let formant = |rng: &mut R, c: (f64, f64), bw: (f64, f64), gain: f64| Formant {
            center_hz: rng.random_range(c.0..=c.1),
            bandwidth_hz: rng.random_range(bw.0..=bw.1),
            gain,
        };
        SpeakerProfile {
            f0_hz: rng.random_range(85.0..=255.0),
            formants: [
                formant(rng, (300.0, 900.0), (150.0, 250.0), 1.0),
                formant(rng, (900.0, 2500.0), (200.0, 300.0), 0.4),
                formant(rng, (2200.0, 3500.0), (250.0, 400.0), 0.2),
            ],
            hf_tilt_db_per_khz: rng.random_range(-2.0..=-0.5),
            noise_level_db: -18.0,
            seed: rng.random(),
        }
    }

    pub fn validate(&self, nyquist: f64) -> Result<()> {
        if !(85.0..=255.0).contains(&self.f0_hz) {
            return Err(ThreatError::Params(format!("f0 {} outside [85, 255]", self.f0_hz)));
        }
        for f in &self.formants {
            if !(f.center_hz > 0.0 && f.center_hz < nyquist && f.bandwidth_hz > 0.0) {
                return Err(ThreatError::Params(format!("formant {f:?} invalid")));
            }
        }
        Ok(())
    }

    fn envelope(&self, freq: f64) -> f64 {
        self.formants
            .iter()
            .map(|f| {
                let x = (freq - f.center_hz) / (f.bandwidth_hz / 2.0);
                f.gain / (1.0 + x * x)
            })
            .sum()
    }
}

fn tilted_noise<R: Rng + ?Sized>(n: usize, rate: f64, tilt_db_per_khz: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let freq = bin as f64 * rate / n as f64;
        *c *= 10f64.powf(tilt_db_per_khz * freq / 1000.0 / 20.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Speech-like clip: a formant-shaped harmonic stack with vibrato plus
/// tilted broadband noise, under a 4 Hz syllable envelope, peak 0.9.
pub fn synth_utterance<R: Rng + ?Sized>(profile: &SpeakerProfile, duration_s: f64, rng: &mut R) -> Result<AudioClip> {
    let rate = CANONICAL_RATE as f64;
    profile.validate(rate / 2.0)?;
    let n = (duration_s * rate).round() as usize;
    if !(duration_s.is_finite() && n >= StftParams::default().n_fft) {
        return Err(ThreatError::Params(format!("duration {duration_s} s is too short")));
    }
    let vibrato_hz = rng.random_range(4.0..6.0);
    let vibrato_depth = rng.random_range(0.01..0.03);
    let drift: f64 = rng.random_range(-0.08..0.08);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let syl_phase = rng.random_range(0.0..2.0 * PI);
    let syl_rate = rng.random_range(3.5..4.5);

    let f0 = profile.f0_hz;
    let harmonics = ((rate / 2.0 - 200.0) / (f0 * (1.0 + drift.abs() + vibrato_depth))).floor() as usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| profile.envelope(k as f64 * f0) / k as f64)
        .collect();
    let starts: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut voiced = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for (i, v) in voiced.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let inst = f0 * (1.0 + drift * t / duration_s + vibrato_depth * (2.0 * PI * vibrato_hz * t + vib_phase).sin());
        phase += 2.0 * PI * inst / rate;
        *v = amps
            .iter()
            .zip(&starts)
            .enumerate()
            .map(|(k, (a, s))| a * ((k + 1) as f64 * phase + s).sin())
            .sum();
    }
    let mut noise = tilted_noise(n, rate, profile.hf_tilt_db_per_khz, rng);
    let scale = rms(&voiced) * 10f64.powf(profile.noise_level_db / 20.0) / rms(&noise).max(1e-12);
    noise.iter_mut().for_each(|x| *x *= scale);

    let mixed: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let env = 0.15 + 0.85 * (0.5 - 0.5 * (2.0 * PI * syl_rate * t + syl_phase).cos());
            env * (voiced[i] + noise[i])
        })
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let g = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    Ok(AudioClip::from_clamped(mixed.iter().map(|x| x * g), CANONICAL_RATE)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestUser {
    pub user_id: String,
    pub clips: Vec<String>,
}

/// Corpus index: user ids mapped to clip paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub users: Vec<ManifestUser>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| ThreatError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(ThreatError::Manifest(format!("unsupported version {}", self.version)));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &self.users {
            if u.user_id.is_empty() || !seen.insert(u.user_id.as_str()) {
                return Err(ThreatError::Manifest(format!("empty or duplicate user id {:?}", u.user_id)));
            }
            for c in &u.clips {
                let p = Path::new(c);
                if c.is_empty() || !p.components().all(|comp| matches!(comp, Component::Normal(_))) {
                    return Err(ThreatError::Manifest(format!("clip path {c:?} must be relative")));
                }
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        Manifest::from_json(&fs::read_to_string(&path).map_err(io_err(&path))?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(io_err(&path))
    }

    pub fn clip_count(&self) -> usize {
        self.users.iter().map(|u| u.clips.len()).sum()
    }
}

/// Clips of one user, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserClips {
    pub user_id: String,
    pub clips: Vec<AudioClip>,
}

/// Decoded corpus at the canonical sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub users: Vec<UserClips>,
}

impl Corpus {
    pub fn clip_count(&self) -> usize {
        self.users.iter().map(|u| u.clips.len()).sum()
    }
}

pub fn read_wav_file(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_wav(&bytes).map_err(|source| ThreatError::Wav {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_wav_file(path: &Path, clip: &AudioClip) -> Result<()> {
    let bytes = write_wav(clip).map_err(|source| ThreatError::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Loads every clip listed in `dir/manifest.json`, resampling to 16 kHz.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = Manifest::read(dir)?;
    let users = manifest
        .users
        .iter()
        .map(|u| {
            let clips = u
                .clips
                .iter()
                .map(|c| {
                    let clip = read_wav_file(&dir.join(c))?;
                    Ok(resample(&clip, CANONICAL_RATE)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UserClips {
                user_id: u.user_id.clone(),
                clips,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { users })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub n_users: usize,
    pub clips_per_user: usize,
    pub duration_s: f64,
    /// Index of the first clip per user; other values give fresh clips of
    /// the same speakers.
    pub first_clip: usize,
    pub seed: u64,
}

fn clip_name(index: usize) -> String {
    format!("clip_{index:04}.wav")
}

/// Speaker profile of user `index`, fixed by the seed alone.
pub fn speaker_profile(seed: u64, index: usize) -> SpeakerProfile {
    SpeakerProfile::sample(&mut stream_rng(seed, (index as u64) << 32))
}

/// Generates the clips in memory.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.n_users < 2 {
        return Err(ThreatError::Params("a corpus needs at least 2 users".into()));
    }
    let users = (0..spec.n_users)
        .map(|u| {
            let profile = speaker_profile(spec.seed, u);
            let clips = (spec.first_clip..spec.first_clip + spec.clips_per_user)
                .into_par_iter()
                .map(|c| {
                    let mut rng = stream_rng(profile.seed, c as u64 + 1);
                    synth_utterance(&profile, spec.duration_s, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UserClips {
                user_id: default_user_id(u),
                clips,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { users })
}

/// Writes `corpus` as `<user>/clip_NNNN.wav` files plus a manifest.
pub fn write_corpus(dir: &Path, corpus: &Corpus, first_clip: usize) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut users = Vec::with_capacity(corpus.users.len());
    for u in &corpus.users {
        let mut clips = Vec::with_capacity(u.clips.len());
        for (j, clip) in u.clips.iter().enumerate() {
            let rel = format!("{}/{}", u.user_id, clip_name(first_clip + j));
            write_wav_file(&dir.join(&rel), clip)?;
            clips.push(rel);
        }
        users.push(ManifestUser {
            user_id: u.user_id.clone(),
            clips,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        users,
    };
    manifest.validate()?;
    manifest.write(dir)?;
    Ok(manifest)
}

pub fn build_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Manifest> {
    write_corpus(dir, &synth_corpus(spec)?, spec.first_clip)
}

/// Copies the clips listed in `manifest_path` (paths relative to `src_dir`)
/// into `out_dir` as canonical 16 kHz WAVs with a fresh manifest.
pub fn ingest(src_dir: &Path, manifest_path: &Path, out_dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let source = Manifest::from_json(&text)?;
    let mut users = Vec::with_capacity(source.users.len());
    for u in &source.users {
        let clips = u
            .clips
            .iter()
            .map(|c| Ok(resample(&read_wav_file(&src_dir.join(c))?, CANONICAL_RATE)?))
            .collect::<Result<Vec<_>>>()?;
        users.push(UserClips {
            user_id: u.user_id.clone(),
            clips,
        });
    }
    write_corpus(out_dir, &Corpus { users }, 0)
}
