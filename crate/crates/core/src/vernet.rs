//! Public verifier: a strided CNN that scores signature presence in HF patches.

use hfsig_nn::ops::{global_avg_pool, global_avg_pool_backward, sigmoid_scalar};
use hfsig_nn::{Activation, Layer, LayerSpec, NnError, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, TensorEntry, DTYPE};
use crate::dsp::{stft, DspError};
use crate::patch::{compress, compress_grad, extract_patches, HfPatch, PatchError};
use crate::signet::{load_params, SignalParams};

pub const VERNET_ARCHITECTURE: &str = "hfsig-vernet-cnn";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum VernetError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid verifier config: {0}")]
    Config(String),
    #[error("checkpoint is confidential and cannot be used for verification")]
    Confidential,
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
}

pub type Result<T> = std::result::Result<T, VernetError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VernetConfig {
    pub base_channels: usize,
    pub conv_layers: usize,
    pub input_floor: f64,
}

impl Default for VernetConfig {
    fn default() -> Self {
        VernetConfig {
            base_channels: 8,
            conv_layers: 7,
            input_floor: 1e-3,
        }
    }
}

impl VernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || !(1..=12).contains(&self.conv_layers) {
            return Err(VernetError::Config("need base_channels > 0 and 1..=12 conv layers".into()));
        }
        if !(self.input_floor > 0.0 && self.input_floor.is_finite()) {
            return Err(VernetError::Config("input_floor must be positive".into()));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.base_channels << (self.conv_layers - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierNet<T> {
    config: VernetConfig,
    pub signal: SignalParams,
    convs: Vec<Layer<T>>,
    head: Layer<T>,
}

#[derive(Debug, Clone)]
pub struct VernetTrace<T> {
    patch: Tensor<T>,
    input: Tensor<T>,
    activations: Vec<Tensor<T>>,
    pooled: Tensor<T>,
    logit: T,
    score: T,
}

impl<T: Scalar> VernetTrace<T> {
    pub fn score(&self) -> T {
        self.score
    }

    pub fn logit(&self) -> T {
        self.logit
    }
}

#[derive(Debug, Clone)]
pub struct VernetGrads<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

/// Verification outcome for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub score: f64,
    pub threshold: f64,
    pub signed: bool,
}

impl Verdict {
    pub fn new(score: f64, threshold: f64) -> Self {
        Verdict {
            score,
            threshold,
            signed: score >= threshold,
        }
    }
}

fn specs(c: &VernetConfig) -> (Vec<LayerSpec>, LayerSpec) {
    let convs = (0..c.conv_layers)
        .map(|i| {
            let cin = if i == 0 { 1 } else { c.base_channels << (i - 1) };
            LayerSpec::conv(cin, c.base_channels << i, 2, Activation::Relu)
        })
        .collect();
    (convs, LayerSpec::linear(c.width(), 1, Activation::None))
}

fn names(c: &VernetConfig) -> Vec<String> {
    (1..=c.conv_layers)
        .map(|i| format!("C{i}"))
        .chain(std::iter::once("fc".to_string()))
        .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
        .collect()
}

impl<T: Scalar> VerifierNet<T> {
    pub fn new<R: Rng + ?Sized>(config: VernetConfig, signal: SignalParams, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (convs, head) = specs(&config);
        Ok(VerifierNet {
            config,
            signal,
            convs: convs
                .into_iter()
                .map(|s| Layer::xavier(s, rng))
                .collect::<std::result::Result<_, _>>()?,
            head: Layer::xavier(head, rng)?,
        })
    }

    pub fn config(&self) -> &VernetConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.convs
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        names(&self.config)
    }

    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if values.len() != params.len() {
            return Err(VernetError::Config(format!(
                "{} tensors supplied for {} parameters",
                values.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "set_params",
                    expected: p.shape().to_vec(),
                    actual: v.shape().to_vec(),
                }
                .into());
            }
            **p = v.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> VerifierNet<U> {
        VerifierNet {
            config: self.config,
            signal: self.signal,
            convs: self.convs.iter().map(Layer::cast).collect(),
            head: self.head.cast(),
        }
    }

    /// Forward pass on a `[1,H,W]` magnitude patch.
    pub fn forward_trace(&self, patch: &Tensor<T>) -> Result<VernetTrace<T>> {
        let (c, h, w) = patch.dims3("vernet")?;
        if c != 1 || h == 0 || w == 0 {
            return Err(NnError::ShapeMismatch {
                op: "vernet",
                expected: vec![1, h.max(1), w.max(1)],
                actual: patch.shape().to_vec(),
            }
            .into());
        }
        let input = compress(patch, self.config.input_floor);
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let x = activations.last().unwrap_or(&input);
            activations.push(layer.forward(x)?);
        }
        let pooled = global_avg_pool(activations.last().expect("at least one layer"))?;
        let logit = self.head.forward(&pooled)?.data()[0];
        Ok(VernetTrace {
            patch: patch.clone(),
            input,
            activations,
            pooled,
            logit,
            score: sigmoid_scalar(logit),
        })
    }

    pub fn score(&self, patch: &Tensor<T>) -> Result<T> {
        Ok(self.forward_trace(patch)?.score)
    }

    /// Backpropagates `d loss / d logit`. The input gradient is with respect
    /// to the raw magnitude patch.
    pub fn backward(&self, trace: &VernetTrace<T>, grad_logit: T, need_input_grad: bool) -> Result<VernetGrads<T>> {
        let gl = Tensor::from_vec(&[1], vec![grad_logit])?;
        let hg = self.head.backward(&trace.pooled, &Tensor::from_vec(&[1], vec![trace.logit])?, &gl, true)?;
        let last = trace.activations.last().expect("at least one layer");
        let mut g = global_avg_pool_backward(last.shape(), &hg.input.expect("requested"))?;
        let mut grads = vec![(hg.weight, hg.bias)];
        for i in (0..self.convs.len()).rev() {
            let x = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
            let want = need_input_grad || i > 0;
            let lg = self.convs[i].backward(x, &trace.activations[i], &g, want)?;
            grads.push((lg.weight, lg.bias));
            if let Some(next) = lg.input {
                g = next;
            }
        }
        grads.reverse();
        let input = need_input_grad.then(|| {
            let floor = self.config.input_floor;
            let data = g
                .data()
                .iter()
                .zip(trace.patch.data())
                .map(|(&gu, &x)| if x > T::zero() { gu * compress_grad(x, floor) } else { T::zero() })
                .collect();
            Tensor::from_vec(trace.patch.shape(), data).expect("same shape")
        });
        Ok(VernetGrads {
            params: grads.into_iter().flat_map(|(w, b)| [w, b]).collect(),
            input,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.params();
        Checkpoint {
            header: CheckpointHeader {
                architecture: VERNET_ARCHITECTURE.into(),
                confidential: false,
                dtype: DTYPE.into(),
                stft: self.signal.stft,
                cutoff_hz: self.signal.cutoff_hz,
                layers: self
                    .param_names()
                    .into_iter()
                    .zip(&params)
                    .map(|(name, t)| TensorEntry {
                        name,
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
                config: serde_json::to_value(self.config).expect("config serializes"),
            },
            tensors: params
                .iter()
                .map(|t| t.data().iter().map(|&v| Scalar::to_f64(v) as f32).collect())
                .collect(),
        }
    }

    /// Loads a verifier, refusing checkpoints flagged confidential.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.confidential {
            return Err(VernetError::Confidential);
        }
        if h.architecture != VERNET_ARCHITECTURE {
            return Err(CheckpointError::Architecture {
                expected: VERNET_ARCHITECTURE.into(),
                actual: h.architecture.clone(),
            }
            .into());
        }
        let config: VernetConfig =
            serde_json::from_value(h.config.clone()).map_err(|e| VernetError::Config(e.to_string()))?;
        config.validate()?;
        h.stft.validate()?;
        let (convs, head) = specs(&config);
        let mut net = VerifierNet {
            config,
            signal: SignalParams {
                stft: h.stft,
                cutoff_hz: h.cutoff_hz,
            },
            convs: convs.into_iter().map(Layer::zeros).collect::<std::result::Result<_, _>>()?,
            head: Layer::zeros(head)?,
        };
        load_params(net.param_names(), net.params_mut(), ckpt)?;
        Ok(net)
    }
}

pub fn score_patch(net: &VerifierNet<f32>, patch: &HfPatch) -> Result<f64> {
    Ok(net.score(&patch.to_tensor())? as f64)
}

/// Mean patch score over the clip, thresholded.
pub fn verify_audio(clip: &AudioClip, net: &VerifierNet<f32>, threshold: f64) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(VernetError::Threshold(threshold));
    }
    let spec = stft(clip, net.signal.stft)?;
    let patched = extract_patches(&spec, net.signal.cutoff_hz)?;
    let mut total = 0.0;
    for p in &patched.patches {
        total += score_patch(net, p)?;
    }
    Ok(Verdict::new(total / patched.patches.len() as f64, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_layout() {
        let net = VerifierNet::<f32>::new(VernetConfig::default(), SignalParams::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let p = net.params();
        assert_eq!(p.len(), 16);
        assert_eq!(p[0].shape(), [8, 1, 3, 3]);
        assert_eq!(p[12].shape(), [512, 256, 3, 3]);
        assert_eq!(p[14].shape(), [1, 512]);
        let trace = net.forward_trace(&HfPatch::zeros().to_tensor()).unwrap();
        assert_eq!(trace.activations.last().unwrap().shape(), [512, 1, 2]);
        let s = trace.score();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn verdict_threshold() {
        assert!(Verdict::new(0.5, 0.5).signed);
        assert!(!Verdict::new(0.49, 0.5).signed);
    }

    #[test]
    fn confidential_checkpoint_refused() {
        let net = VerifierNet::<f32>::new(VernetConfig::default(), SignalParams::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let mut ckpt = net.to_checkpoint();
        let back = VerifierNet::<f32>::from_checkpoint(&Checkpoint::decode(&ckpt.encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back, net);
        ckpt.header.confidential = true;
        assert!(matches!(VerifierNet::<f32>::from_checkpoint(&ckpt), Err(VernetError::Confidential)));
    }
}
