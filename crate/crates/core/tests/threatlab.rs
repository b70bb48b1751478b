use hfsig::dsp::{band_energy_profile, band_powers, stft, to_db, StftParams};
use hfsig::threatlab::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn speaker(seed: u64) -> SpeakerProfile {
    speaker_profile(seed, 0)
}

#[test]
fn synth_peak_and_determinism() {
    for seed in 0..6 {
        let p = speaker(seed);
        let a = synth_utterance(&p, 4.0, &mut stream_rng(seed, 1)).unwrap();
        let b = synth_utterance(&p, 4.0, &mut stream_rng(seed, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64000);
        let peak = a.samples().iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!((peak - 0.9).abs() <= 1e-3, "{peak}");
    }
    assert!(synth_utterance(&speaker(0), 0.01, &mut stream_rng(0, 1)).is_err());
}

#[test]
fn synth_energy_peaks_near_first_formant() {
    for seed in 0..10 {
        let p = speaker(seed);
        let clip = synth_utterance(&p, 4.0, &mut stream_rng(seed, 2)).unwrap();
        let profile = band_energy_profile(&stft(&clip, StftParams::default()).unwrap(), 600.0).unwrap();
        let f1_band = (p.formants[0].center_hz / 600.0).floor() as i64;
        let arg = profile.argmax() as i64;
        assert!((arg - f1_band).abs() <= 1, "seed {seed}: argmax {arg}, F1 band {f1_band}");
    }
}

#[test]
fn clone_attenuates_hf_and_keeps_lf() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..8 {
        let p = speaker(seed);
        let clip = synth_utterance(&p, 4.0, &mut stream_rng(seed, 3)).unwrap();
        let params = AttackParams::sample(&mut rng);
        let cloned = clone_proxy(&clip, &params, &mut rng).unwrap();
        assert_eq!(cloned.len(), clip.len());
        let before = band_powers(&stft(&clip, StftParams::default()).unwrap(), 600.0).unwrap();
        let after = band_powers(&stft(&cloned, StftParams::default()).unwrap(), 600.0).unwrap();
        for band in 0..before.len() {
            let (lo, hi) = (band as f64 * 600.0, band as f64 * 600.0 + 600.0);
            let delta = to_db(before[band]) - to_db(after[band]);
            if lo >= 6000.0 {
                assert!(delta >= 10.0, "seed {seed} band {lo}: {delta} dB");
            }
            if hi <= 2000.0 {
                assert!(delta.abs() <= AttackParams::GAIN_JITTER_BOUND_DB + 1.0, "seed {seed} band {lo}: {delta} dB");
            }
        }
    }
}

#[test]
fn clone_never_adds_energy_above_cutoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..4 {
        let clip = synth_utterance(&speaker(seed), 2.0, &mut stream_rng(seed, 4)).unwrap();
        let params = AttackParams::sample(&mut rng);
        let mut spec = stft(&clip, StftParams::default()).unwrap();
        let orig = spec.clone();
        clone_spectrogram(&mut spec, &params, clip.rms(), &mut rng).unwrap();
        let first = (params.lp_cutoff_hz / spec.bin_hz()).ceil() as usize;
        let energy = |s: &hfsig::dsp::Spectrogram| -> f64 {
            (first..s.bins()).map(|k| s.bin_row(k).iter().map(|c| c.norm_sqr()).sum::<f64>()).sum()
        };
        assert!(energy(&spec) <= energy(&orig));
    }
}

#[test]
fn corpus_build_is_deterministic() {
    let spec = CorpusSpec {
        n_users: 2,
        clips_per_user: 2,
        duration_s: 1.0,
        first_clip: 0,
        seed: 42,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_corpus(a.path(), &spec).unwrap();
    let mb = build_corpus(b.path(), &spec).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.users.len(), 2);
    assert_eq!(ma.clip_count(), 4);
    for u in &ma.users {
        for c in &u.clips {
            assert_eq!(std::fs::read(a.path().join(c)).unwrap(), std::fs::read(b.path().join(c)).unwrap());
        }
    }
    let loaded = load_corpus(a.path()).unwrap();
    assert_eq!(loaded.clip_count(), 4);
    let held = synth_corpus(&CorpusSpec { first_clip: 2, ..spec }).unwrap();
    assert_eq!(held.users[0].user_id, loaded.users[0].user_id);
    assert_ne!(held.users[0].clips[0], synth_corpus(&spec).unwrap().users[0].clips[0]);
    assert!(synth_corpus(&CorpusSpec { n_users: 1, ..spec }).is_err());
}

#[test]
fn ingest_resamples() {
    let src = tempfile::tempdir().unwrap();
    let clip = hfsig::audio_io::AudioClip::from_clamped((0..8000).map(|i| (i as f64 * 0.05).sin() * 0.5), 8000).unwrap();
    write_wav_file(&src.path().join("a.wav"), &clip).unwrap();
    let manifest = src.path().join("m.json");
    std::fs::write(&manifest, r#"{"version":1,"users":[{"user_id":"u1","clips":["a.wav"]}]}"#).unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = ingest(src.path(), &manifest, out.path()).unwrap();
    let c = load_corpus(out.path()).unwrap();
    assert_eq!(m.users[0].clips.len(), 1);
    assert_eq!(c.users[0].clips[0].sample_rate(), 16000);
    assert_eq!(c.users[0].clips[0].len(), 16000);
}
