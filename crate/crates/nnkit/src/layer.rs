use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
use crate::error::{NnError, Result};
use crate::init::xavier_init;
use crate::ops::{linear, linear_backward, relu, relu_backward, sigmoid, sigmoid_backward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Only meaningful for transposed convolutions.
    pub output_padding: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, stride: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            output_padding: 0,
            activation,
        }
    }

    /// Stride-2 transposed conv that exactly doubles height and width.
    pub fn upsample(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::ConvTranspose,
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
            activation,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            output_padding: 0,
            activation,
        }
    }

    pub fn linear(in_features: usize, out_features: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            stride: 1,
            padding: 0,
            output_padding: 0,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(NnError::InvalidArgument { op: "layer_spec", detail });
        if self.kind != LayerKind::Linear && !matches!(self.kernel, 1 | 3) {
            return bad(format!("kernel must be 3 (or 1 for projections), got {}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv => vec![self.out_channels, self.in_channels, k, k],
            LayerKind::ConvTranspose => vec![self.in_channels, self.out_channels, k, k],
            LayerKind::Linear => vec![self.out_channels, self.in_channels],
        }
    }
}

/// A parameterized layer with its activation fused in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(Layer {
            weight: xavier_init(&spec.weight_shape(), rng),
            bias: Tensor::zeros(&[spec.out_channels]),
            spec,
        })
    }

    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Layer {
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.out_channels]),
            spec,
        })
    }

    pub fn from_parts(spec: LayerSpec, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape().as_slice() || bias.shape() != [spec.out_channels] {
            return Err(NnError::ShapeMismatch {
                op: "layer",
                expected: spec.weight_shape(),
                actual: weight.shape().to_vec(),
            });
        }
        Ok(Layer { spec, weight, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.spec;
        let pre = match s.kind {
            LayerKind::Conv => conv2d(x, &self.weight, &self.bias, s.stride, s.padding)?,
            LayerKind::ConvTranspose => conv_transpose2d(
                x,
                &self.weight,
                &self.bias,
                s.stride,
                s.padding,
                s.output_padding,
            )?,
            LayerKind::Linear => linear(x, &self.weight, &self.bias)?,
        };
        Ok(match s.activation {
            Activation::Relu => relu(&pre),
            Activation::Sigmoid => sigmoid(&pre),
            Activation::None => pre,
        })
    }

    /// Gradients given the forward input `x`, forward output `y` and the
    /// upstream gradient `grad_y`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        grad_y: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<LayerGrads<T>> {
        let s = &self.spec;
        let grad_pre = match s.activation {
            Activation::Relu => relu_backward(y, grad_y)?,
            Activation::Sigmoid => sigmoid_backward(y, grad_y)?,
            Activation::None => grad_y.clone(),
        };
        Ok(match s.kind {
            LayerKind::Conv => {
                let g = conv2d_backward(x, &self.weight, &grad_pre, s.stride, s.padding, need_input_grad)?;
                LayerGrads {
                    input: g.input,
                    weight: g.weight,
                    bias: g.bias,
                }
            }
            LayerKind::ConvTranspose => {
                let g = conv_transpose2d_backward(
                    x,
                    &self.weight,
                    &grad_pre,
                    s.stride,
                    s.padding,
                    s.output_padding,
                    need_input_grad,
                )?;
                LayerGrads {
                    input: g.input,
                    weight: g.weight,
                    bias: g.bias,
                }
            }
            LayerKind::Linear => {
                let g = linear_backward(x, &self.weight, &grad_pre)?;
                LayerGrads {
                    input: need_input_grad.then_some(g.input),
                    weight: g.weight,
                    bias: g.bias,
                }
            }
        })
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
