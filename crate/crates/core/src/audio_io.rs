//! Mono 16-bit PCM WAV reading/writing and linear-interpolation resampling.

use thiserror::Error;

/// Canonical pipeline sample rate; everything ingested is resampled to it.
pub const CANONICAL_RATE: u32 = 16_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WavError {
    #[error("file too short for a RIFF header ({0} bytes)")]
    TooShort(usize),
    #[error("bad {field} tag")]
    BadTag { field: &'static str },
    #[error("chunk {id:?} declares {declared} bytes but only {available} remain")]
    TruncatedChunk {
        id: String,
        declared: usize,
        available: usize,
    },
    #[error("missing {0:?} chunk")]
    MissingChunk(&'static str),
    #[error("fmt chunk too short ({0} bytes)")]
    ShortFmt(usize),
    #[error("unsupported audio_format {0} (only PCM = 1)")]
    UnsupportedFormat(u16),
    #[error("unsupported channel count {0} (only mono)")]
    UnsupportedChannels(u16),
    #[error("unsupported bits_per_sample {0} (only 16)")]
    UnsupportedBitDepth(u16),
    #[error("invalid sample_rate {0}")]
    InvalidSampleRate(u32),
    #[error("block_align {0} inconsistent with 16-bit mono")]
    InvalidBlockAlign(u16),
    #[error("byte_rate {actual} inconsistent with sample_rate (expected {expected})")]
    InvalidByteRate { expected: u32, actual: u32 },
    #[error("data chunk length {0} is not a whole number of samples")]
    OddDataLength(usize),
    #[error("cannot encode an empty clip")]
    EmptyClip,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClipError {
    #[error("sample_rate must be positive")]
    ZeroRate,
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("sample {index} = {value} outside [-1, 1]")]
    OutOfRange { index: usize, value: f32 },
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, ClipError> {
        if sample_rate == 0 {
            return Err(ClipError::ZeroRate);
        }
        for (index, &value) in samples.iter().enumerate() {
            if !value.is_finite() {
                return Err(ClipError::NonFinite { index });
            }
            if value.abs() > 1.0 {
                return Err(ClipError::OutOfRange { index, value });
            }
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip by clamping into `[-1, 1]`; non-finite samples become 0.
    pub fn from_clamped(samples: impl IntoIterator<Item = f64>, sample_rate: u32) -> Result<Self, ClipError> {
        let samples = samples
            .into_iter()
            .map(|x| if x.is_finite() { x.clamp(-1.0, 1.0) as f32 } else { 0.0 })
            .collect();
        AudioClip::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&x| (x as f64).powi(2)).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE container holding 16-bit mono PCM. Unknown chunks are
/// skipped.
pub fn read_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 {
        return Err(WavError::TooShort(bytes.len()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::BadTag { field: "RIFF" });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadTag { field: "WAVE" });
    }
    let mut pos = 12;
    let mut fmt: Option<&[u8]> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let declared = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let available = bytes.len() - body_start;
        if declared > available {
            return Err(WavError::TruncatedChunk {
                id: String::from_utf8_lossy(id).into_owned(),
                declared,
                available,
            });
        }
        let body = &bytes[body_start..body_start + declared];
        match id {
            b"fmt " if fmt.is_none() => fmt = Some(body),
            b"data" if data.is_none() => data = Some(body),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_start + declared + (declared & 1);
    }
    let fmt = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    if fmt.len() < 16 {
        return Err(WavError::ShortFmt(fmt.len()));
    }
    let audio_format = u16_at(fmt, 0);
    let channels = u16_at(fmt, 2);
    let sample_rate = u32_at(fmt, 4);
    let byte_rate = u32_at(fmt, 8);
    let block_align = u16_at(fmt, 12);
    let bits = u16_at(fmt, 14);
    if audio_format != 1 {
        return Err(WavError::UnsupportedFormat(audio_format));
    }
    if channels != 1 {
        return Err(WavError::UnsupportedChannels(channels));
    }
    if bits != 16 {
        return Err(WavError::UnsupportedBitDepth(bits));
    }
    if sample_rate == 0 {
        return Err(WavError::InvalidSampleRate(sample_rate));
    }
    if block_align != 2 {
        return Err(WavError::InvalidBlockAlign(block_align));
    }
    let expected = sample_rate.checked_mul(2).ok_or(WavError::InvalidSampleRate(sample_rate))?;
    if byte_rate != expected {
        return Err(WavError::InvalidByteRate {
            expected,
            actual: byte_rate,
        });
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    if data.len() % 2 != 0 {
        return Err(WavError::OddDataLength(data.len()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate,
    })
}

/// Quantizes `round(x · 32767)` into a minimal fmt + data WAV file.
pub fn write_wav(clip: &AudioClip) -> Result<Vec<u8>, WavError> {
    if clip.is_empty() {
        return Err(WavError::EmptyClip);
    }
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in &clip.samples {
        let q = (x as f64 * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

/// Linear-interpolation resampling. Aliases when downsampling by more than 2x.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, ClipError> {
    if target_rate == 0 {
        return Err(ClipError::ZeroRate);
    }
    if target_rate == clip.sample_rate || clip.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate);
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let n_out = ((src.len() as f64 / ratio).round() as usize).max(1);
    let last = src.len() - 1;
    let out = (0..n_out)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = (pos.floor() as usize).min(last);
            let frac = (pos - i as f64) as f32;
            let a = src[i];
            let b = src[(i + 1).min(last)];
            if a == b {
                a
            } else {
                (a + (b - a) * frac).clamp(-1.0, 1.0)
            }
        })
        .collect();
    AudioClip::new(out, target_rate)
}
