//! Joint optimization of the signature and verification networks.

use std::path::Path;

use hfsig_nn::{bce_loss, l1_loss, AdamState, NnError, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{stft, DspError};
use crate::keydp::{noised_key, DpConfig, KeyError, KeySet, KeyView};
use crate::patch::{extract_patches, PatchError, PatchResynthesis, Resynthesized};
use crate::signet::{SignalParams, SignatureNet, SignetConfig, SignetError};
use crate::threatlab::{stream_rng, AttackParams, Corpus, PatchAttack, ThreatError};
use crate::vernet::{VerifierNet, VernetConfig, VernetError};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_CLONE: u64 = 3;
const STREAM_DP: u64 = 4;
const STREAM_SPLIT: u64 = 5;
const STREAM_VAL: u64 = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("unusable corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Signet(#[from] SignetError),
    #[error(transparent)]
    Vernet(#[from] VernetError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: L_S = {l_s}, L_phi = {l_phi}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        l_s: f64,
        l_phi: f64,
    },
    #[error("cannot write history: {0}")]
    History(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_signature: f64,
    pub lr_verifier: f64,
    /// Patches per step; a multiple of 8.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub dp_enabled: bool,
    pub epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub signet: SignetConfig,
    pub vernet: VernetConfig,
    pub signal: SignalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_signature: 2e-4,
            lr_verifier: 2e-5,
            batch_size: 16,
            max_epochs: 200,
            early_stop_patience: 10,
            dp_enabled: false,
            epsilon: 30.0,
            seed: 0,
            validation_fraction: 0.2,
            signet: SignetConfig::default(),
            vernet: VernetConfig::default(),
            signal: SignalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, lr) in [("lr_signature", self.lr_signature), ("lr_verifier", self.lr_verifier)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {lr}"));
            }
        }
        if self.batch_size == 0 || self.batch_size % 8 != 0 {
            return bad(format!("batch_size must be a positive multiple of 8, got {}", self.batch_size));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        self.signet.validate()?;
        self.vernet.validate()?;
        self.signal.stft.validate()?;
        Ok(())
    }
}

/// Relative weights of the two loss terms; training uses unit weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub signature: f64,
    pub verifier: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            signature: 1.0,
            verifier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Original,
    Signed,
    CloneOfSigned,
    CloneOfOriginal,
}

impl Role {
    pub fn label(self) -> u8 {
        u8::from(self == Role::Signed)
    }
}

/// One patch of training data with the key index of its speaker.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub key_index: usize,
    pub clip: usize,
    pub patch: Tensor<f32>,
    pub clip_rms: f64,
    pub resynthesis: PatchResynthesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub item: usize,
    pub role: Role,
    /// Key used for signing; set for signed entries and clones of them.
    pub key_index: Option<usize>,
}

impl BatchEntry {
    pub fn label(&self) -> u8 {
        self.role.label()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledBatch {
    pub entries: Vec<BatchEntry>,
}

impl LabeledBatch {
    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(BatchEntry::label).collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }
}

/// Splits `items` into batches of `batch_size` verifier inputs: one half
/// signed, one quarter originals, one eighth clones of originals and one
/// eighth clones of the batch's own signed patches. Items are drawn in a
/// shuffled order and wrap around to fill the last batch.
pub fn make_batches<R: Rng + ?Sized>(items: &[TrainItem], batch_size: usize, rng: &mut R) -> Result<Vec<LabeledBatch>> {
    if items.is_empty() {
        return Err(TrainError::Corpus("no training patches".into()));
    }
    if batch_size == 0 || batch_size % 8 != 0 {
        return Err(TrainError::Config(format!(
            "batch_size must be a positive multiple of 8, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let (signed, originals, clones) = (batch_size / 2, batch_size / 4, batch_size / 8);
    let per_batch = signed + originals + clones;
    let n_batches = items.len().div_ceil(per_batch);
    let mut cursor = 0;
    let mut next = || {
        let i = order[cursor % order.len()];
        cursor += 1;
        i
    };
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut entries = Vec::with_capacity(batch_size);
        for _ in 0..signed {
            let item = next();
            entries.push(BatchEntry {
                item,
                role: Role::Signed,
                key_index: Some(items[item].key_index),
            });
        }
        for role in std::iter::repeat_n(Role::Original, originals).chain(std::iter::repeat_n(Role::CloneOfOriginal, clones)) {
            entries.push(BatchEntry {
                item: next(),
                role,
                key_index: None,
            });
        }
        for k in 0..clones {
            let source = entries[k];
            entries.push(BatchEntry {
                role: Role::CloneOfSigned,
                ..source
            });
        }
        batches.push(LabeledBatch { entries });
    }
    Ok(batches)
}

/// Mean per-patch ℓ1 distance between originals and their signed versions.
pub fn loss_signature(originals: &[Tensor<f32>], signed: &[Tensor<f32>]) -> Result<f64> {
    if originals.len() != signed.len() || originals.is_empty() {
        return Err(TrainError::Config(format!(
            "need equal nonempty patch lists, got {} and {}",
            originals.len(),
            signed.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in originals.iter().zip(signed) {
        total += l1_loss(&a.cast::<f64>(), &b.cast::<f64>())?.0;
    }
    Ok(total / originals.len() as f64)
}

/// Mean clamped binary cross-entropy of verifier scores.
pub fn loss_verifier(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let labels: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    Ok(bce_loss(scores, &labels)?.0)
}

fn bce_from_logit(z: f64, y: u8) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y as f64 * z
}

/// A patch to sign and the key it is signed with. With a resynthesis model
/// the verifier sees the signed patch as it reads after conversion to audio.
#[derive(Debug, Clone)]
pub struct SignedInput<T> {
    pub patch: Tensor<T>,
    pub key: Vec<T>,
    pub resynthesis: Option<PatchResynthesis>,
}

/// Inputs of one joint step with every random draw already made.
#[derive(Debug, Clone)]
pub struct StepInputs<T> {
    pub signed: Vec<SignedInput<T>>,
    /// Originals and clones of originals.
    pub negatives: Vec<Tensor<T>>,
    /// Index into `signed` and the attack applied to that signed output.
    pub signed_clones: Vec<(usize, PatchAttack)>,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub l_s: f64,
    pub l_phi: f64,
    pub signet_grads: Vec<Tensor<T>>,
    pub vernet_grads: Vec<Tensor<T>>,
    /// Verifier scores in the order signed, negatives, signed clones.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl<T> StepOutput<T> {
    pub fn correct(&self) -> usize {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(&s, &y)| (s >= 0.5) == (y == 1))
            .count()
    }
}

enum Source<T> {
    Signed(usize),
    Negative,
    SignedClone(usize, Vec<T>),
}

fn accumulate<T: Scalar>(total: &mut Vec<Tensor<T>>, grads: Vec<Tensor<T>>) -> Result<()> {
    if total.is_empty() {
        *total = grads;
        return Ok(());
    }
    for (t, g) in total.iter_mut().zip(&grads) {
        t.add_assign(g)?;
    }
    Ok(())
}

/// Loss values and parameter gradients of `w_s·L_S + w_phi·L_phi` for one
/// batch. Verifier gradients reach the signature net through signed patches
/// and through the attack applied to them.
pub fn joint_gradients<T: Scalar>(
    signet: &SignatureNet<T>,
    vernet: &VerifierNet<T>,
    inputs: &StepInputs<T>,
    weights: LossWeights,
) -> Result<StepOutput<T>> {
    if inputs.signed.is_empty() {
        return Err(TrainError::Config("a step needs at least one signed patch".into()));
    }
    let traces = inputs
        .signed
        .par_iter()
        .map(|s| signet.forward_trace(&s.patch, &s.key))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let ns = T::from_f64(inputs.signed.len() as f64);
    let mut l_s = 0.0;
    let mut grad_out = Vec::with_capacity(traces.len());
    for (trace, s) in traces.iter().zip(&inputs.signed) {
        let (l, mut g) = l1_loss(trace.output(), &s.patch)?;
        l_s += l.to_f64();
        g.scale(T::from_f64(weights.signature) / ns);
        grad_out.push(g);
    }
    l_s /= inputs.signed.len() as f64;

    let heard = traces
        .par_iter()
        .zip(&inputs.signed)
        .map(|(t, s)| match &s.resynthesis {
            Some(r) => r.apply(&s.patch, t.output()).map(Some),
            None => Ok(None),
        })
        .collect::<std::result::Result<Vec<Option<Resynthesized<T>>>, _>>()?;
    let heard_patch = |i: usize| heard[i].as_ref().map_or(traces[i].output(), |h| &h.output);
    let mut v_inputs: Vec<(Tensor<T>, Source<T>)> = Vec::new();
    for i in 0..traces.len() {
        v_inputs.push((heard_patch(i).clone(), Source::Signed(i)));
    }
    for n in &inputs.negatives {
        v_inputs.push((n.clone(), Source::Negative));
    }
    for (i, attack) in &inputs.signed_clones {
        if *i >= traces.len() {
            return Err(TrainError::Config(format!("clone source {i} out of range")));
        }
        let c = attack.apply(heard_patch(*i))?;
        v_inputs.push((c.output, Source::SignedClone(*i, c.jacobian)));
    }
    let labels: Vec<u8> = v_inputs
        .iter()
        .map(|(_, s)| u8::from(matches!(s, Source::Signed(_))))
        .collect();
    let nv = v_inputs.len() as f64;
    let v_traces = v_inputs
        .par_iter()
        .map(|(p, _)| vernet.forward_trace(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut l_phi = 0.0;
    let mut scores = Vec::with_capacity(v_traces.len());
    for (t, &y) in v_traces.iter().zip(&labels) {
        l_phi += bce_from_logit(t.logit().to_f64(), y);
        scores.push(t.score().to_f64());
    }
    l_phi /= nv;

    let v_back = v_traces
        .par_iter()
        .zip(&v_inputs)
        .zip(&labels)
        .map(|((t, (_, src)), &y)| {
            let grad_logit = T::from_f64(weights.verifier * (t.score().to_f64() - y as f64) / nv);
            vernet.backward(t, grad_logit, !matches!(src, Source::Negative))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut vernet_grads = Vec::new();
    let mut grad_heard: Vec<Tensor<T>> = traces.iter().map(|t| Tensor::zeros(t.output().shape())).collect();
    for (g, (_, src)) in v_back.into_iter().zip(&v_inputs) {
        match (src, &g.input) {
            (Source::Signed(i), Some(gi)) => grad_heard[*i].add_assign(gi)?,
            (Source::SignedClone(i, jac), Some(gi)) => {
                let back: Vec<T> = gi.data().iter().zip(jac).map(|(&a, &b)| a * b).collect();
                grad_heard[*i].add_assign(&Tensor::from_vec(gi.shape(), back)?)?;
            }
            _ => {}
        }
        accumulate(&mut vernet_grads, g.params)?;
    }
    let through = grad_heard
        .into_par_iter()
        .zip(&heard)
        .zip(&inputs.signed)
        .map(|((g, h), s)| match (h, &s.resynthesis) {
            (Some(h), Some(r)) => r.backward(h, &g),
            _ => Ok(g),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for (out, g) in grad_out.iter_mut().zip(&through) {
        out.add_assign(g)?;
    }

    let s_back = traces
        .par_iter()
        .zip(&grad_out)
        .map(|(t, g)| signet.backward(t, g))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut signet_grads = Vec::new();
    for g in s_back {
        accumulate(&mut signet_grads, g.params)?;
    }
    Ok(StepOutput {
        l_s,
        l_phi,
        signet_grads,
        vernet_grads,
        scores,
        labels,
    })
}

/// Averages over one epoch plus validation results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_phi")]
    pub l_phi: f64,
    pub joint: f64,
    pub val_joint: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(["epoch", "L_S", "L_phi", "joint", "val_joint", "val_acc"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| TrainError::History(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| TrainError::History(e.into()))
    }
}

#[derive(Debug, Clone)]
struct ValItem {
    item: TrainItem,
    negative: Role,
    attack: Option<PatchAttack>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ValStats {
    l_s: f64,
    l_phi: f64,
    correct: usize,
    count: usize,
}

/// Training state: both networks, their optimizers, the data split and the
/// random streams.
#[derive(Debug, Clone)]
pub struct JointTrainer {
    cfg: TrainConfig,
    keys: KeySet,
    dp: Option<DpConfig>,
    signet: SignatureNet<f32>,
    vernet: VerifierNet<f32>,
    adam_signet: AdamState<f32>,
    adam_vernet: AdamState<f32>,
    train: Vec<TrainItem>,
    val: Vec<ValItem>,
    first_bin_hz: f64,
    bin_hz: f64,
    shuffle_rng: ChaCha8Rng,
    clone_rng: ChaCha8Rng,
    dp_rng: ChaCha8Rng,
}

impl JointTrainer {
    pub fn new(corpus: &Corpus, keys: &KeySet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.users.len() < 2 {
            return Err(TrainError::Corpus(format!(
                "need at least 2 users, got {}",
                corpus.users.len()
            )));
        }
        let mut init = stream_rng(cfg.seed, STREAM_INIT);
        let signet = SignatureNet::new(cfg.signet, cfg.signal, &mut init)?;
        let vernet = VerifierNet::new(cfg.vernet, cfg.signal, &mut init)?;
        let dp = if cfg.dp_enabled {
            Some(DpConfig::for_keys(cfg.epsilon, keys)?)
        } else {
            None
        };

        let mut split = stream_rng(cfg.seed, STREAM_SPLIT);
        let mut train = Vec::new();
        let mut val_items = Vec::new();
        let mut band = None;
        for user in &corpus.users {
            let key_index = keys.index_of(&user.user_id)?;
            if user.clips.is_empty() {
                return Err(TrainError::Corpus(format!("user {} has no clips", user.user_id)));
            }
            let n = user.clips.len();
            let mut n_val = (cfg.validation_fraction * n as f64).round() as usize;
            if cfg.validation_fraction > 0.0 && n >= 2 {
                n_val = n_val.clamp(1, n - 1);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut split);
            let mut is_val = vec![false; n];
            for &c in &order[..n_val] {
                is_val[c] = true;
            }
            for (c, clip) in user.clips.iter().enumerate() {
                let spec = stft(clip, cfg.signal.stft)?;
                let patched = extract_patches(&spec, cfg.signal.cutoff_hz)?;
                band.get_or_insert((patched.hf_magnitude.first_bin as f64 * spec.bin_hz(), spec.bin_hz()));
                let rms = clip.rms();
                for (i, p) in patched.patches.iter().enumerate() {
                    let item = TrainItem {
                        key_index,
                        clip: c,
                        patch: p.to_tensor(),
                        clip_rms: rms,
                        resynthesis: patched.resynthesis(i).expect("patch index in range"),
                    };
                    if is_val[c] { val_items.push(item) } else { train.push(item) }
                }
            }
        }
        if train.is_empty() {
            return Err(TrainError::Corpus("no training patches after the validation split".into()));
        }
        let (first_bin_hz, bin_hz) = band.expect("corpus has clips");

        let mut val_rng = stream_rng(cfg.seed, STREAM_VAL);
        let cycle = [Role::Original, Role::CloneOfSigned, Role::Original, Role::CloneOfOriginal];
        let mut val = Vec::with_capacity(val_items.len());
        for (i, item) in val_items.into_iter().enumerate() {
            let negative = cycle[i % cycle.len()];
            let attack = if negative == Role::Original {
                None
            } else {
                let params = AttackParams::sample(&mut val_rng);
                Some(PatchAttack::sample(&params, item.clip_rms, first_bin_hz, bin_hz, &mut val_rng)?)
            };
            val.push(ValItem { item, negative, attack });
        }

        Ok(JointTrainer {
            adam_signet: AdamState::new(cfg.lr_signature, signet.params()),
            adam_vernet: AdamState::new(cfg.lr_verifier, vernet.params()),
            cfg: cfg.clone(),
            keys: keys.clone(),
            dp,
            signet,
            vernet,
            train,
            val,
            first_bin_hz,
            bin_hz,
            shuffle_rng: stream_rng(cfg.seed, STREAM_SHUFFLE),
            clone_rng: stream_rng(cfg.seed, STREAM_CLONE),
            dp_rng: stream_rng(cfg.seed, STREAM_DP),
        })
    }

    pub fn signet(&self) -> &SignatureNet<f32> {
        &self.signet
    }

    pub fn vernet(&self) -> &VerifierNet<f32> {
        &self.vernet
    }

    pub fn train_items(&self) -> &[TrainItem] {
        &self.train
    }

    pub fn validation_len(&self) -> usize {
        self.val.len()
    }

    /// Shuffled batches for the next epoch.
    pub fn next_batches(&mut self) -> Result<Vec<LabeledBatch>> {
        make_batches(&self.train, self.cfg.batch_size, &mut self.shuffle_rng)
    }

    fn key_view(&mut self, key_index: usize) -> KeyView {
        let key = &self.keys.keys()[key_index];
        match &self.dp {
            Some(dp) => noised_key(key, dp, &mut self.dp_rng),
            None => key.clean_view(),
        }
    }

    fn attack(&mut self, item: usize) -> Result<PatchAttack> {
        let params = AttackParams::sample(&mut self.clone_rng);
        Ok(PatchAttack::sample(
            &params,
            self.train[item].clip_rms,
            self.first_bin_hz,
            self.bin_hz,
            &mut self.clone_rng,
        )?)
    }

    /// Draws keys and attacks for `batch`.
    pub fn materialize(&mut self, batch: &LabeledBatch) -> Result<StepInputs<f32>> {
        let mut signed = Vec::new();
        let mut slot = std::collections::HashMap::new();
        let mut negatives = Vec::new();
        let mut signed_clones = Vec::new();
        for (pos, e) in batch.entries.iter().enumerate() {
            match e.role {
                Role::Signed => {
                    let key = e.key_index.unwrap_or(self.train[e.item].key_index);
                    let view = self.key_view(key);
                    slot.insert(pos, signed.len());
                    let item = &self.train[e.item];
                    signed.push(SignedInput {
                        patch: item.patch.clone(),
                        key: view.reals.to_vec(),
                        resynthesis: Some(item.resynthesis.clone()),
                    });
                }
                Role::Original => negatives.push(self.train[e.item].patch.clone()),
                Role::CloneOfOriginal => {
                    let attack = self.attack(e.item)?;
                    negatives.push(attack.apply(&self.train[e.item].patch)?.output);
                }
                Role::CloneOfSigned => {
                    let source = batch.entries[..pos]
                        .iter()
                        .position(|s| s.role == Role::Signed && s.item == e.item && s.key_index == e.key_index)
                        .and_then(|p| slot.get(&p).copied())
                        .ok_or_else(|| TrainError::Config("clone of a patch not signed in this batch".into()))?;
                    let attack = self.attack(e.item)?;
                    signed_clones.push((source, attack));
                }
            }
        }
        Ok(StepInputs {
            signed,
            negatives,
            signed_clones,
        })
    }

    /// One optimizer step on `batch`; `epoch` and `index` only label errors.
    pub fn step(&mut self, batch: &LabeledBatch, epoch: usize, index: usize) -> Result<StepOutput<f32>> {
        let inputs = self.materialize(batch)?;
        let out = joint_gradients(&self.signet, &self.vernet, &inputs, LossWeights::default())?;
        if !out.l_s.is_finite() || !out.l_phi.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: index,
                l_s: out.l_s,
                l_phi: out.l_phi,
            });
        }
        let grads: Vec<&Tensor<f32>> = out.signet_grads.iter().collect();
        self.adam_signet.step(&mut self.signet.params_mut(), &grads)?;
        let grads: Vec<&Tensor<f32>> = out.vernet_grads.iter().collect();
        self.adam_vernet.step(&mut self.vernet.params_mut(), &grads)?;
        Ok(out)
    }

    fn validate(&self) -> Result<ValStats> {
        let per_item = self
            .val
            .par_iter()
            .map(|v| -> Result<ValStats> {
                let key = self.keys.keys()[v.item.key_index].clean_view();
                let raw = self.signet.forward(&v.item.patch, &key.reals)?;
                let l_s = l1_loss(&raw, &v.item.patch)?.0 as f64;
                let signed = v.item.resynthesis.apply(&v.item.patch, &raw)?.output;
                let negative = match (v.negative, &v.attack) {
                    (Role::CloneOfSigned, Some(a)) => a.apply(&signed)?.output,
                    (Role::CloneOfOriginal, Some(a)) => a.apply(&v.item.patch)?.output,
                    _ => v.item.patch.clone(),
                };
                let mut stats = ValStats {
                    l_s,
                    ..ValStats::default()
                };
                for (patch, y) in [(&signed, 1u8), (&negative, 0u8)] {
                    let t = self.vernet.forward_trace(patch)?;
                    stats.l_phi += bce_from_logit(t.logit() as f64, y);
                    stats.correct += usize::from((t.score() >= 0.5) == (y == 1));
                    stats.count += 1;
                }
                Ok(stats)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = ValStats::default();
        for s in per_item {
            total.l_s += s.l_s;
            total.l_phi += s.l_phi;
            total.correct += s.correct;
            total.count += s.count;
        }
        Ok(total)
    }

    /// Runs one epoch and evaluates on the validation split. Without a
    /// validation split the training averages stand in.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let batches = self.next_batches()?;
        let (mut l_s, mut l_phi, mut correct, mut count) = (0.0, 0.0, 0usize, 0usize);
        for (i, b) in batches.iter().enumerate() {
            let out = self.step(b, epoch, i)?;
            l_s += out.l_s;
            l_phi += out.l_phi;
            correct += out.correct();
            count += out.scores.len();
        }
        let nb = batches.len() as f64;
        let (l_s, l_phi) = (l_s / nb, l_phi / nb);
        let (val_joint, val_acc) = if self.val.is_empty() {
            (l_s + l_phi, correct as f64 / count as f64)
        } else {
            let v = self.validate()?;
            let n = self.val.len() as f64;
            (v.l_s / n + v.l_phi / v.count as f64, v.correct as f64 / v.count as f64)
        };
        Ok(EpochRecord {
            epoch,
            l_s,
            l_phi,
            joint: l_s + l_phi,
            val_joint,
            val_acc,
        })
    }
}

/// Trained networks from the best validation epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub signet: SignatureNet<f32>,
    pub vernet: VerifierNet<f32>,
    pub history: TrainHistory,
    /// Epoch whose parameters were returned; `None` without training.
    pub best_epoch: Option<usize>,
}

pub fn train_joint(corpus: &Corpus, keys: &KeySet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_joint_with(corpus, keys, cfg, |_, _| {})
}

/// As [`train_joint`], calling `on_epoch` after every epoch with the record
/// and the trainer holding that epoch's parameters.
pub fn train_joint_with(
    corpus: &Corpus,
    keys: &KeySet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &JointTrainer),
) -> Result<TrainOutcome> {
    let mut trainer = JointTrainer::new(corpus, keys, cfg)?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, SignatureNet<f32>, VerifierNet<f32>)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let record = trainer.run_epoch(epoch)?;
        history.records.push(record);
        on_epoch(&record, &trainer);
        if best.as_ref().is_none_or(|b| record.val_joint < b.0) {
            best = Some((record.val_joint, epoch, trainer.signet.clone(), trainer.vernet.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(match best {
        Some((_, epoch, signet, vernet)) => TrainOutcome {
            signet,
            vernet,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            signet: trainer.signet,
            vernet: trainer.vernet,
            history,
            best_epoch: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_verifier, cfg.lr_signature / 10.0);
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = TrainConfig::from_json(r#"{"max_epochs": 3, "dp_enabled": true}"#).unwrap();
        assert_eq!(partial.max_epochs, 3);
        assert!(partial.dp_enabled);
        assert!(TrainConfig::from_json(r#"{"max_epoch": 3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 12}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"early_stop_patience": 0}"#).is_err());
    }

    #[test]
    fn logit_bce_matches_probability_form() {
        for &(z, y) in &[(0.0, 1u8), (2.0, 0), (-3.0, 1), (15.0, 0)] {
            let s = 1.0 / (1.0 + f64::exp(-z));
            let direct = -(y as f64 * s.ln() + (1.0 - y as f64) * (1.0 - s).ln());
            assert!((bce_from_logit(z, y) - direct).abs() < 1e-9, "{z} {y}");
        }
    }
}
