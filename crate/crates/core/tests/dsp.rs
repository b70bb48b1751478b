use hfsig::audio_io::AudioClip;
use hfsig::dsp::{istft, recombine, split_bands, stft, StftParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn interior_rms_error(a: &AudioClip, b: &AudioClip, margin: usize) -> f64 {
    let (x, y) = (a.samples(), b.samples());
    assert_eq!(x.len(), y.len());
    let range = margin..x.len() - margin;
    let n = range.len() as f64;
    (range.map(|i| (x[i] as f64 - y[i] as f64).powi(2)).sum::<f64>() / n).sqrt()
}

fn sine(freq: f64, amp: f64, len: usize) -> AudioClip {
    let s = (0..len).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as f32);
    AudioClip::new(s.collect(), 16_000).unwrap()
}

fn noise(seed: u64, len: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap()
}

#[test]
fn round_trip_noise_and_sine() {
    let p = StftParams::default();
    for clip in [noise(1, 16_000), noise(2, 12_345), sine(440.0, 0.7, 16_000), sine(5_500.0, 0.3, 9_001)] {
        let back = istft(&stft(&clip, p).unwrap()).unwrap();
        let err = interior_rms_error(&clip, &back, p.n_fft);
        assert!(err <= 1e-4, "rms {err}");
    }
}

#[test]
fn sine_at_1khz_peaks_at_bin_32() {
    let spec = stft(&sine(1000.0, 0.5, 16_000), StftParams::default()).unwrap();
    let energy: Vec<f64> = (0..spec.bins())
        .map(|b| spec.bin_row(b).iter().map(|c| c.norm_sqr()).sum())
        .collect();
    let peak = (0..energy.len()).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    assert_eq!(peak, 32);
}

#[test]
fn split_recombine_is_bit_exact() {
    for (seed, cutoff) in [(3, 4000.0), (4, 2500.0), (5, 7000.0)] {
        let spec = stft(&noise(seed, 8_000), StftParams::default()).unwrap();
        let (lf, hf, ph) = split_bands(&spec, cutoff).unwrap();
        let back = recombine(&lf, &hf, &ph).unwrap();
        assert_eq!(back.data(), spec.data());
    }
}
