use hfsig::keydp::{generate_keys_for, KeySet};
use hfsig::signet::SignetConfig;
use hfsig::threatlab::{stream_rng, synth_corpus, Corpus, CorpusSpec};
use hfsig::trainer::*;
use hfsig::vernet::VernetConfig;
use hfsig_nn::Tensor;
use rand::Rng;

fn corpus() -> Corpus {
    synth_corpus(&CorpusSpec {
        n_users: 2,
        clips_per_user: 3,
        duration_s: 1.0,
        first_clip: 0,
        seed: 4,
    })
    .unwrap()
}

fn keys(corpus: &Corpus) -> KeySet {
    let ids = corpus.users.iter().map(|u| u.user_id.clone()).collect();
    generate_keys_for(ids, &mut stream_rng(9, 0)).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 2,
        validation_fraction: 0.34,
        seed: 21,
        signet: SignetConfig {
            base_channels: 2,
            depth: 3,
            delta_scale: 0.05,
            ..SignetConfig::default()
        },
        vernet: VernetConfig {
            base_channels: 2,
            ..VernetConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn tensor(shape: &[usize], f: impl FnMut(usize) -> f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
}

#[test]
fn signature_loss_examples() {
    let mut rng = stream_rng(1, 1);
    let a: Vec<Tensor<f32>> = (0..3).map(|_| tensor(&[1, 4, 8], |_| rng.random_range(0.0..1.0))).collect();
    assert_eq!(loss_signature(&a, &a).unwrap(), 0.0);
    let shifted: Vec<Tensor<f32>> = a.iter().map(|t| t.map(|v| v + 0.1)).collect();
    assert!((loss_signature(&a, &shifted).unwrap() - 0.1).abs() < 1e-6);
    let b: Vec<Tensor<f32>> = (0..3).map(|_| tensor(&[1, 4, 8], |_| rng.random_range(0.0..1.0))).collect();
    let mut expected = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let diff: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).sum();
        expected += diff / x.len() as f64;
    }
    expected /= 3.0;
    assert!((loss_signature(&a, &b).unwrap() - expected).abs() < 1e-12);
    assert!(loss_signature(&a, &b[..2]).is_err());
    assert!(loss_signature(&a, &[tensor(&[1, 4, 4], |_| 0.0), a[1].clone(), a[2].clone()]).is_err());
}

#[test]
fn verifier_loss_examples() {
    let half = loss_verifier(&[0.5; 4], &[1, 0, 1, 0]).unwrap();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
    let perfect = loss_verifier(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap();
    assert!((0.0..1e-6).contains(&perfect), "{perfect}");
    let mixed = loss_verifier(&[0.9, 0.2, 0.6, 0.3], &[1, 0, 0, 1]).unwrap();
    let hand = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln() + 0.3f64.ln()) / 4.0;
    assert!((mixed - hand).abs() < 1e-12);
    assert!(loss_verifier(&[], &[]).is_err());
}

#[test]
fn batches_are_balanced_keyed_and_deterministic() {
    let c = corpus();
    let k = keys(&c);
    let trainer = JointTrainer::new(&c, &k, &small_cfg()).unwrap();
    let items = trainer.train_items();
    for batch_size in [8, 16, 32] {
        let batches = make_batches(items, batch_size, &mut stream_rng(3, 2)).unwrap();
        assert!(batches.len() * (batch_size * 7 / 8) >= items.len());
        for b in &batches {
            assert_eq!(b.entries.len(), batch_size);
            let labels = b.labels();
            assert_eq!(labels.iter().filter(|&&y| y == 1).count() * 2, batch_size);
            assert_eq!(b.count(Role::Original), batch_size / 4);
            assert_eq!(b.count(Role::CloneOfOriginal), batch_size / 8);
            assert_eq!(b.count(Role::CloneOfSigned), batch_size / 8);
            for e in &b.entries {
                match e.role {
                    Role::Signed | Role::CloneOfSigned => {
                        assert_eq!(e.key_index, Some(items[e.item].key_index));
                        assert_eq!(k.keys()[e.key_index.unwrap()].user_id(), c.users[items[e.item].key_index].user_id);
                    }
                    _ => assert_eq!(e.key_index, None),
                }
            }
        }
        let again = make_batches(items, batch_size, &mut stream_rng(3, 2)).unwrap();
        assert_eq!(batches, again);
    }
    let mut rng = stream_rng(3, 2);
    let e1 = make_batches(items, 8, &mut rng).unwrap();
    let e2 = make_batches(items, 8, &mut rng).unwrap();
    let mut rng = stream_rng(3, 2);
    assert_eq!(make_batches(items, 8, &mut rng).unwrap(), e1);
    assert_eq!(make_batches(items, 8, &mut rng).unwrap(), e2);
    assert!(make_batches(items, 12, &mut rng).is_err());
    assert!(make_batches(&[], 8, &mut rng).is_err());
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let c = corpus();
    let k = keys(&c);
    let cfg = TrainConfig {
        max_epochs: 0,
        ..small_cfg()
    };
    let out = train_joint(&c, &k, &cfg).unwrap();
    let init = JointTrainer::new(&c, &k, &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(&out.signet, init.signet());
    assert_eq!(&out.vernet, init.vernet());
    assert_eq!(out.history.to_csv().unwrap().trim(), "epoch,L_S,L_phi,joint,val_joint,val_acc");
}

#[test]
fn zero_learning_rate_step_changes_nothing() {
    let c = corpus();
    let k = keys(&c);
    let cfg = TrainConfig {
        lr_signature: 0.0,
        lr_verifier: 0.0,
        ..small_cfg()
    };
    let mut t = JointTrainer::new(&c, &k, &cfg).unwrap();
    let (s0, v0) = (t.signet().clone(), t.vernet().clone());
    let batches = t.next_batches().unwrap();
    let out = t.step(&batches[0], 1, 0).unwrap();
    assert!(out.signet_grads.iter().any(|g| g.norm() > 0.0));
    assert!(out.vernet_grads.iter().any(|g| g.norm() > 0.0));
    for (a, b) in t.signet().params().iter().zip(s0.params()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for (a, b) in t.vernet().params().iter().zip(v0.params()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn joint_gradient_is_sum_of_path_gradients() {
    let c = corpus();
    let k = keys(&c);
    let mut t = JointTrainer::new(&c, &k, &small_cfg()).unwrap();
    let batches = t.next_batches().unwrap();
    let inputs = t.materialize(&batches[0]).unwrap();
    let inputs = StepInputs::<f64> {
        signed: inputs
            .signed
            .iter()
            .map(|s| SignedInput {
                patch: s.patch.cast(),
                key: s.key.iter().map(|&v| v as f64).collect(),
                resynthesis: s.resynthesis.clone(),
            })
            .collect(),
        negatives: inputs.negatives.iter().map(Tensor::cast).collect(),
        signed_clones: inputs.signed_clones.clone(),
    };
    assert!(!inputs.signed_clones.is_empty());
    let mut s = t.signet().cast::<f64>();
    let mut params: Vec<Tensor<f64>> = s.params().into_iter().cloned().collect();
    let proj = params.len() - 2;
    let mut rng = stream_rng(2, 2);
    let n = params[proj].len();
    params[proj] = Tensor::from_vec(params[proj].shape(), (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    s.set_params(&params).unwrap();
    let v = t.vernet().cast::<f64>();
    let run = |ws: f64, wv: f64| {
        joint_gradients(
            &s,
            &v,
            &inputs,
            LossWeights {
                signature: ws,
                verifier: wv,
            },
        )
        .unwrap()
    };
    let (joint, sig_only, ver_only) = (run(1.0, 1.0), run(1.0, 0.0), run(0.0, 1.0));
    let mut norms = (0.0, 0.0);
    for ((j, a), b) in joint.signet_grads.iter().zip(&sig_only.signet_grads).zip(&ver_only.signet_grads) {
        norms.0 += a.norm().powi(2);
        norms.1 += b.norm().powi(2);
        for ((&x, &y), &z) in j.data().iter().zip(a.data()).zip(b.data()) {
            assert!((x - (y + z)).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y} + {z}");
        }
    }
    assert!(norms.0 > 0.0 && norms.1 > 0.0, "{norms:?}");
    assert!(sig_only.vernet_grads.iter().all(|g| g.norm() == 0.0));
    assert_eq!(joint.l_s, sig_only.l_s);
    assert_eq!(joint.l_phi, ver_only.l_phi);
}

#[test]
fn infinite_epsilon_matches_no_dp() {
    let c = corpus();
    let k = keys(&c);
    let cfg = TrainConfig {
        max_epochs: 1,
        lr_signature: 1e-3,
        lr_verifier: 1e-3,
        ..small_cfg()
    };
    let plain = train_joint(&c, &k, &cfg).unwrap();
    let inf = train_joint(
        &c,
        &k,
        &TrainConfig {
            dp_enabled: true,
            epsilon: f64::INFINITY,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_eq!(plain.signet, inf.signet);
    assert_eq!(plain.vernet, inf.vernet);
    assert_eq!(plain.history, inf.history);
    let noisy = train_joint(
        &c,
        &k,
        &TrainConfig {
            dp_enabled: true,
            epsilon: 1.0,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(plain.signet, noisy.signet);
}

#[test]
fn best_validation_epoch_is_returned() {
    let c = corpus();
    let k = keys(&c);
    let cfg = TrainConfig {
        max_epochs: 4,
        lr_signature: 3e-2,
        lr_verifier: 3e-2,
        early_stop_patience: 10,
        ..small_cfg()
    };
    let mut snapshots = Vec::new();
    let out = train_joint_with(&c, &k, &cfg, |r, t| snapshots.push((*r, t.signet().clone(), t.vernet().clone()))).unwrap();
    assert_eq!(out.history.len(), 4);
    assert_eq!(snapshots.len(), 4);
    let best = snapshots
        .iter()
        .min_by(|a, b| a.0.val_joint.total_cmp(&b.0.val_joint))
        .unwrap();
    assert_eq!(out.best_epoch, Some(best.0.epoch));
    assert_eq!(out.signet, best.1);
    assert_eq!(out.vernet, best.2);
    assert_ne!(snapshots[0].1, snapshots[3].1);
    let csv = out.history.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("epoch,L_S,L_phi,joint,val_joint,val_acc\n1,"));
}

#[test]
fn patience_stops_training() {
    let c = corpus();
    let k = keys(&c);
    let cfg = TrainConfig {
        max_epochs: 50,
        lr_signature: 0.0,
        lr_verifier: 0.0,
        early_stop_patience: 2,
        ..small_cfg()
    };
    let out = train_joint(&c, &k, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.best_epoch, Some(1));
}

#[test]
fn rejects_bad_inputs() {
    let c = corpus();
    let k = keys(&c);
    let one_user = Corpus {
        users: c.users[..1].to_vec(),
    };
    assert!(JointTrainer::new(&one_user, &k, &small_cfg()).is_err());
    let other = keys(&synth_corpus(&CorpusSpec {
        n_users: 2,
        clips_per_user: 1,
        duration_s: 1.0,
        first_clip: 0,
        seed: 4,
    })
    .unwrap());
    let mut renamed = c.clone();
    renamed.users[0].user_id = "stranger".into();
    assert!(JointTrainer::new(&renamed, &other, &small_cfg()).is_err());
}
