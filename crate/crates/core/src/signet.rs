//! Signature U-Net over HF magnitude patches, plus end-to-end audio signing.

use hfsig_nn::ops::{concat_channels, relu, relu_backward, split_channels};
use hfsig_nn::{Activation, Layer, LayerSpec, NnError, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, TensorEntry, DTYPE};
use crate::dsp::{istft, stft, DspError, StftParams};
use crate::keydp::{KeyView, PrivateKey, KEY_BITS};
use crate::patch::{compress, compress_grad, extract_patches, HfPatch, PatchError, PATCH_BINS, PATCH_FRAMES};

pub const SIGNET_ARCHITECTURE: &str = "hfsig-signet-unet";

#[derive(Debug, Error)]
pub enum SignetError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid signature network config: {0}")]
    Config(String),
    #[error("key has {0} values, expected {1}")]
    KeyLength(usize, usize),
    #[error("audio clip: {0}")]
    Clip(String),
}

pub type Result<T> = std::result::Result<T, SignetError>;

/// Analysis settings shared by signing and verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub stft: StftParams,
    pub cutoff_hz: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            stft: StftParams::default(),
            cutoff_hz: 4000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignetConfig {
    /// Channels of the first encoder layer; doubled at each further level.
    pub base_channels: usize,
    /// Number of encoder layers; the decoder has one fewer.
    pub depth: usize,
    pub key_bits: usize,
    /// Magnitude floor of the log compression at the input.
    pub input_floor: f64,
    /// Multiplier on the projection output before it is added to the patch.
    pub delta_scale: f64,
}

impl Default for SignetConfig {
    fn default() -> Self {
        SignetConfig {
            base_channels: 16,
            depth: 5,
            key_bits: KEY_BITS,
            input_floor: 1e-3,
            delta_scale: 1e-3,
        }
    }
}

impl SignetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SignetError::Config(m.to_string()));
        if self.base_channels == 0 || self.key_bits == 0 {
            return bad("channel counts must be positive");
        }
        if !(2..=8).contains(&self.depth) {
            return bad("depth must be in 2..=8");
        }
        if !(self.input_floor > 0.0 && self.input_floor.is_finite()) {
            return bad("input_floor must be positive");
        }
        if !(self.delta_scale > 0.0 && self.delta_scale.is_finite()) {
            return bad("delta_scale must be positive");
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial reduction between the input and the bottleneck.
    pub fn downsampling(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Parameters of the signature network.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureNet<T> {
    config: SignetConfig,
    pub signal: SignalParams,
    encoder: Vec<Layer<T>>,
    fusion: Layer<T>,
    decoder: Vec<Layer<T>>,
    projection: Layer<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct SignetTrace<T> {
    patch: Tensor<T>,
    input: Tensor<T>,
    encoded: Vec<Tensor<T>>,
    fusion_in: Tensor<T>,
    fused: Tensor<T>,
    upsampled: Vec<Tensor<T>>,
    merged: Vec<Tensor<T>>,
    delta: Tensor<T>,
    output: Tensor<T>,
}

impl<T> SignetTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn patch(&self) -> &Tensor<T> {
        &self.patch
    }
}

/// Parameter gradients in [`SignatureNet::params`] order, and the gradient
/// with respect to the input patch.
#[derive(Debug, Clone)]
pub struct SignetGrads<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

fn layer_specs(c: &SignetConfig) -> (Vec<LayerSpec>, LayerSpec, Vec<LayerSpec>, LayerSpec) {
    let mut encoder = vec![LayerSpec::conv(1, c.level_channels(0), 1, Activation::Relu)];
    for level in 1..c.depth {
        encoder.push(LayerSpec::conv(
            c.level_channels(level - 1),
            c.level_channels(level),
            2,
            Activation::Relu,
        ));
    }
    let bottom = c.level_channels(c.depth - 1);
    let fusion = LayerSpec::conv(bottom + c.key_bits, bottom, 1, Activation::Relu);
    let mut decoder = Vec::new();
    let mut in_ch = bottom;
    for level in (0..c.depth - 1).rev() {
        let out = c.level_channels(level);
        decoder.push(LayerSpec::upsample(in_ch, out, Activation::Relu));
        in_ch = 2 * out;
    }
    let projection = LayerSpec::pointwise(in_ch, 1, Activation::None);
    (encoder, fusion, decoder, projection)
}

fn layer_names(c: &SignetConfig) -> Vec<String> {
    let mut names: Vec<String> = (1..=c.depth).map(|i| format!("E{i}")).collect();
    names.push("fusion".into());
    names.extend((1..c.depth).map(|i| format!("D{i}")));
    names.push("projection".into());
    names
}

impl<T: Scalar> SignatureNet<T> {
    /// Xavier-initialized layers with a zero output projection, so the
    /// fresh network signs as the identity.
    pub fn new<R: Rng + ?Sized>(config: SignetConfig, signal: SignalParams, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (enc, fus, dec, proj) = layer_specs(&config);
        Ok(SignatureNet {
            config,
            signal,
            encoder: enc.into_iter().map(|s| Layer::xavier(s, rng)).collect::<std::result::Result<_, _>>()?,
            fusion: Layer::xavier(fus, rng)?,
            decoder: dec.into_iter().map(|s| Layer::xavier(s, rng)).collect::<std::result::Result<_, _>>()?,
            projection: Layer::zeros(proj)?,
        })
    }

    pub fn config(&self) -> &SignetConfig {
        &self.config
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.fusion))
            .chain(&self.decoder)
            .chain(std::iter::once(&self.projection))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.fusion))
            .chain(&mut self.decoder)
            .chain(std::iter::once(&mut self.projection))
    }

    /// Weight then bias of every layer, encoder first.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Replaces every parameter, in [`SignatureNet::params`] order.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if values.len() != params.len() {
            return Err(SignetError::Config(format!(
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

    pub fn param_names(&self) -> Vec<String> {
        layer_names(&self.config)
            .into_iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> SignatureNet<U> {
        SignatureNet {
            config: self.config,
            signal: self.signal,
            encoder: self.encoder.iter().map(Layer::cast).collect(),
            fusion: self.fusion.cast(),
            decoder: self.decoder.iter().map(Layer::cast).collect(),
            projection: self.projection.cast(),
        }
    }

    fn check_input(&self, patch: &Tensor<T>, key: &[T]) -> Result<(usize, usize)> {
        let (c, h, w) = patch.dims3("signet")?;
        let d = self.config.downsampling();
        if c != 1 || h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(NnError::ShapeMismatch {
                op: "signet",
                expected: vec![1, PATCH_BINS, PATCH_FRAMES],
                actual: patch.shape().to_vec(),
            }
            .into());
        }
        if key.len() != self.config.key_bits {
            return Err(SignetError::KeyLength(key.len(), self.config.key_bits));
        }
        Ok((h / d, w / d))
    }

    /// Forward pass on a `[1,H,W]` magnitude patch with H and W divisible
    /// by the encoder's downsampling factor.
    pub fn forward_trace(&self, patch: &Tensor<T>, key: &[T]) -> Result<SignetTrace<T>> {
        let (bh, bw) = self.check_input(patch, key)?;
        let input = compress(patch, self.config.input_floor);
        let mut encoded: Vec<Tensor<T>> = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let x = encoded.last().unwrap_or(&input);
            encoded.push(layer.forward(x)?);
        }
        let planes: Vec<T> = key.iter().flat_map(|&k| std::iter::repeat_n(k, bh * bw)).collect();
        let planes = Tensor::from_vec(&[key.len(), bh, bw], planes)?;
        let fusion_in = concat_channels(encoded.last().expect("depth >= 2"), &planes)?;
        let fused = self.fusion.forward(&fusion_in)?;
        let mut upsampled = Vec::with_capacity(self.decoder.len());
        let mut merged: Vec<Tensor<T>> = Vec::with_capacity(self.decoder.len());
        for (j, layer) in self.decoder.iter().enumerate() {
            let x = merged.last().unwrap_or(&fused);
            let up = layer.forward(x)?;
            let skip = &encoded[self.encoder.len() - 2 - j];
            merged.push(concat_channels(&up, skip)?);
            upsampled.push(up);
        }
        let delta = self.projection.forward(merged.last().expect("depth >= 2"))?;
        let mut pre_output = patch.clone();
        let s = T::from_f64(self.config.delta_scale);
        for (o, &d) in pre_output.data_mut().iter_mut().zip(delta.data()) {
            *o += s * d;
        }
        let output = relu(&pre_output);
        Ok(SignetTrace {
            patch: patch.clone(),
            input,
            encoded,
            fusion_in,
            fused,
            upsampled,
            merged,
            delta,
            output,
        })
    }

    pub fn forward(&self, patch: &Tensor<T>, key: &[T]) -> Result<Tensor<T>> {
        Ok(self.forward_trace(patch, key)?.output)
    }

    /// Backpropagates `grad_output` (gradient of the loss with respect to the
    /// signed patch) through a trace produced by this network.
    pub fn backward(&self, trace: &SignetTrace<T>, grad_output: &Tensor<T>) -> Result<SignetGrads<T>> {
        if grad_output.shape() != trace.output.shape() {
            return Err(NnError::ShapeMismatch {
                op: "signet_backward",
                expected: trace.output.shape().to_vec(),
                actual: grad_output.shape().to_vec(),
            }
            .into());
        }
        let grad_pre = relu_backward(&trace.output, grad_output)?;
        let mut grad_patch = grad_pre.clone();
        let mut grad_delta = grad_pre;
        grad_delta.scale(T::from_f64(self.config.delta_scale));

        let depth = self.encoder.len();
        let mut enc_grads: Vec<Option<LayerGradsT<T>>> = vec![None; depth];
        let mut dec_grads: Vec<Option<LayerGradsT<T>>> = vec![None; self.decoder.len()];
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];

        let last_merged = trace.merged.last().expect("depth >= 2");
        let pg = self.projection.backward(last_merged, &trace.delta, &grad_delta, true)?;
        let proj_grads = (pg.weight, pg.bias);
        let mut g = pg.input.expect("requested");

        for j in (0..self.decoder.len()).rev() {
            let up_ch = trace.upsampled[j].shape()[0];
            let (g_up, g_skip) = split_channels(&g, up_ch)?;
            let skip_idx = depth - 2 - j;
            accumulate(&mut skip_grads[skip_idx], g_skip)?;
            let x = if j == 0 { &trace.fused } else { &trace.merged[j - 1] };
            let lg = self.decoder[j].backward(x, &trace.upsampled[j], &g_up, true)?;
            dec_grads[j] = Some((lg.weight, lg.bias));
            g = lg.input.expect("requested");
        }

        let fg = self.fusion.backward(&trace.fusion_in, &trace.fused, &g, true)?;
        let fusion_grads = (fg.weight, fg.bias);
        let bottom_ch = trace.encoded[depth - 1].shape()[0];
        let (mut g, _key_grad) = split_channels(&fg.input.expect("requested"), bottom_ch)?;

        for i in (0..depth).rev() {
            if let Some(s) = skip_grads[i].take() {
                g.add_assign(&s)?;
            }
            let x = if i == 0 { &trace.input } else { &trace.encoded[i - 1] };
            let lg = self.encoder[i].backward(x, &trace.encoded[i], &g, true)?;
            enc_grads[i] = Some((lg.weight, lg.bias));
            g = lg.input.expect("requested");
        }

        let floor = self.config.input_floor;
        for ((gp, &gu), &x) in grad_patch.data_mut().iter_mut().zip(g.data()).zip(trace.patch.data()) {
            if x > T::zero() {
                *gp += gu * compress_grad(x, floor);
            }
        }

        let mut params = Vec::with_capacity(2 * (depth + self.decoder.len() + 2));
        for (w, b) in enc_grads.into_iter().map(|x| x.expect("filled")) {
            params.push(w);
            params.push(b);
        }
        params.push(fusion_grads.0);
        params.push(fusion_grads.1);
        for (w, b) in dec_grads.into_iter().map(|x| x.expect("filled")) {
            params.push(w);
            params.push(b);
        }
        params.push(proj_grads.0);
        params.push(proj_grads.1);
        Ok(SignetGrads {
            params,
            input: grad_patch,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let names = self.param_names();
        let params = self.params();
        Checkpoint {
            header: CheckpointHeader {
                architecture: SIGNET_ARCHITECTURE.into(),
                confidential: true,
                dtype: DTYPE.into(),
                stft: self.signal.stft,
                cutoff_hz: self.signal.cutoff_hz,
                layers: names
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

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.architecture != SIGNET_ARCHITECTURE {
            return Err(CheckpointError::Architecture {
                expected: SIGNET_ARCHITECTURE.into(),
                actual: h.architecture.clone(),
            }
            .into());
        }
        let config: SignetConfig =
            serde_json::from_value(h.config.clone()).map_err(|e| SignetError::Config(e.to_string()))?;
        config.validate()?;
        h.stft.validate()?;
        let signal = SignalParams {
            stft: h.stft,
            cutoff_hz: h.cutoff_hz,
        };
        let (enc, fus, dec, proj) = layer_specs(&config);
        let mut net = SignatureNet {
            config,
            signal,
            encoder: enc.into_iter().map(Layer::zeros).collect::<std::result::Result<_, _>>()?,
            fusion: Layer::zeros(fus)?,
            decoder: dec.into_iter().map(Layer::zeros).collect::<std::result::Result<_, _>>()?,
            projection: Layer::zeros(proj)?,
        };
        load_params(net.param_names(), net.params_mut(), ckpt)?;
        Ok(net)
    }
}

type LayerGradsT<T> = (Tensor<T>, Tensor<T>);

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Copies checkpoint tensors into `params`, matching names and shapes.
pub(crate) fn load_params<T: Scalar>(
    names: Vec<String>,
    params: Vec<&mut Tensor<T>>,
    ckpt: &Checkpoint,
) -> std::result::Result<(), CheckpointError> {
    let layers = &ckpt.header.layers;
    if layers.len() != params.len() {
        return Err(CheckpointError::Header(format!(
            "expected {} tensors, found {}",
            params.len(),
            layers.len()
        )));
    }
    for ((name, param), (entry, data)) in names.into_iter().zip(params).zip(layers.iter().zip(&ckpt.tensors)) {
        if entry.name != name || entry.shape != param.shape() {
            return Err(CheckpointError::Tensor {
                name: entry.name.clone(),
                detail: format!("expected {name} with shape {:?}, found {:?}", param.shape(), entry.shape),
            });
        }
        for (p, &v) in param.data_mut().iter_mut().zip(data) {
            *p = T::from_f64(v as f64);
        }
    }
    Ok(())
}

/// Signs one patch. The network sees the key exactly as given, so a noised
/// view can be passed during training.
pub fn sign_patch(net: &SignatureNet<f32>, patch: &HfPatch, key: &KeyView) -> Result<HfPatch> {
    let out = net.forward(&patch.to_tensor(), &key.reals)?;
    Ok(HfPatch::from_tensor(&out)?)
}

/// Signs a clip with the clean view of `key`, leaving the LF band and the HF
/// phase untouched.
pub fn sign_audio(clip: &AudioClip, key: &PrivateKey, net: &SignatureNet<f32>) -> Result<AudioClip> {
    let spec = stft(clip, net.signal.stft)?;
    let patched = extract_patches(&spec, net.signal.cutoff_hz)?;
    let view = key.clean_view();
    let signed = patched
        .patches
        .iter()
        .map(|p| sign_patch(net, p, &view))
        .collect::<Result<Vec<_>>>()?;
    let out = patched.reassemble(&signed)?;
    let audio = istft(&out)?;
    AudioClip::from_clamped(audio.samples().iter().map(|&s| s as f64), audio.sample_rate())
        .map_err(|e| SignetError::Clip(e.to_string()))
}
