use hfsig::dsp::{istft_samples, stft, stft_samples, StftParams};
use hfsig::patch::{extract_patches, HfPatch, PATCH_BINS, PATCH_FRAMES};
use hfsig::threatlab::{speaker_profile, stream_rng, synth_utterance};
use hfsig_nn::{grad_check, GradCheckConfig, Tensor};
use rand::Rng;

fn patched(duration_s: f64) -> hfsig::patch::PatchedSpectrogram {
    let clip = synth_utterance(&speaker_profile(3, 0), duration_s, &mut stream_rng(3, 1)).unwrap();
    extract_patches(&stft(&clip, StftParams::default()).unwrap(), 4000.0).unwrap()
}

fn bumped(p: &HfPatch, seed: u64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, 0);
    let t: Tensor<f64> = p.to_tensor();
    let data = t.data().iter().map(|&v| (v * rng.random_range(0.7..1.4) + rng.random_range(0.0..1e-3)).max(0.0)).collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

#[test]
fn unmodified_patch_is_a_fixed_point() {
    let p = patched(4.0);
    let r = p.resynthesis(0).unwrap();
    let o: Tensor<f64> = p.patches[0].to_tensor();
    let out = r.apply(&o, &o).unwrap().output;
    for (a, b) in out.data().iter().zip(o.data()) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn matches_the_audio_round_trip() {
    let p = patched(4.0);
    assert_eq!(p.patches.len(), 1);
    let r = p.resynthesis(0).unwrap();
    let o: Tensor<f64> = p.patches[0].to_tensor();
    let m = bumped(&p.patches[0], 1);
    let modeled = r.apply(&o, &m).unwrap().output;

    let replaced = HfPatch::from_tensor(&m).unwrap();
    let spec = p.reassemble(&[replaced]).unwrap();
    let x = istft_samples(&spec).unwrap();
    let again = extract_patches(&stft_samples(&x, 16000, StftParams::default()).unwrap(), 4000.0).unwrap();
    let actual: Tensor<f64> = again.patches[0].to_tensor();
    let peak = actual.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let mut worst = 0.0f64;
    for (a, b) in modeled.data().iter().zip(actual.data()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst <= 1e-5 * peak, "worst {worst}, peak {peak}");
    let moved: f64 = actual.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(moved > 0.0);
}

#[test]
fn short_final_patch_ignores_padding() {
    let p = patched(2.5);
    let last = p.patches.len() - 1;
    let r = p.resynthesis(last).unwrap();
    assert!(r.valid_frames() < PATCH_FRAMES);
    let o: Tensor<f64> = p.patches[last].to_tensor();
    let m = o.map(|v| v + 0.01);
    let out = r.apply(&o, &m).unwrap().output;
    for b in 0..PATCH_BINS {
        for f in r.valid_frames()..PATCH_FRAMES {
            assert_eq!(out.data()[b * PATCH_FRAMES + f], 0.0);
        }
    }
    assert!(p.resynthesis(last + 1).is_none());
}

#[test]
fn gradient_matches_finite_differences() {
    let p = patched(4.0);
    let r = p.resynthesis(0).unwrap();
    let o: Tensor<f64> = p.patches[0].to_tensor();
    let m = bumped(&p.patches[0], 2);
    let mut rng = stream_rng(4, 0);
    let probe = Tensor::from_vec(
        o.shape(),
        (0..o.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let loss = |t: &[Tensor<f64>]| -> hfsig_nn::Result<f64> {
        r.apply(&o, &t[0]).unwrap().output.dot(&probe)
    };
    let fwd = r.apply(&o, &m).unwrap();
    let analytic = r.backward(&fwd, &probe).unwrap();
    let cfg = GradCheckConfig {
        max_coords_per_tensor: 48,
        step: 1e-6,
        seed: 3,
        ..GradCheckConfig::default()
    };
    let report = grad_check(loss, &[m], &[analytic], &cfg).unwrap();
    println!("{report:?}");
    assert!(report.passes(1e-5), "{report:?}");
}
