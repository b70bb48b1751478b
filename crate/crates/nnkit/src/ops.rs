//! Element-wise activations, pooling, dense layers and channel concatenation.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu expressed through its output (`y > 0` iff `x > 0`).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad.shape() {
        return shape_err("relu_backward", output.shape(), grad.shape());
    }
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad.shape() {
        return shape_err("sigmoid_backward", output.shape(), grad.shape());
    }
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Channel means of a `[C,H,W]` map.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("global_avg_pool")?;
    let n = T::from_f64((h * w) as f64);
    let means = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::from_vec(&[c], means)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[c, h, w] = input_shape else {
        return shape_err("global_avg_pool_backward", &[0, 0, 0], input_shape);
    };
    if grad.shape() != [c] {
        return shape_err("global_avg_pool_backward", &[c], grad.shape());
    }
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut out = Vec::with_capacity(c * h * w);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(input_shape, out)
}

/// `W·x + b` for `W` `[M,N]`, `x` with `N` elements (any shape), `b` `[M]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = weight.shape() else {
        return shape_err("linear", &[0, x.len()], weight.shape());
    };
    if n != x.len() {
        return shape_err("linear", &[m, x.len()], weight.shape());
    }
    if bias.shape() != [m] {
        return shape_err("linear", &[m], bias.shape());
    }
    let mut out = bias.data().to_vec();
    gemm(m, n, 1, weight.data(), false, x.data(), false, &mut out, true);
    Tensor::from_vec(&[m], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let &[m, n] = weight.shape() else {
        return shape_err("linear_backward", &[0, x.len()], weight.shape());
    };
    if grad.shape() != [m] || n != x.len() {
        return shape_err("linear_backward", &[m], grad.shape());
    }
    let mut dw = vec![T::zero(); m * n];
    gemm(m, 1, n, grad.data(), false, x.data(), false, &mut dw, false);
    let mut dx = vec![T::zero(); n];
    gemm(n, m, 1, weight.data(), true, grad.data(), false, &mut dx, false);
    Ok(LinearGrads {
        input: Tensor::from_vec(x.shape(), dx)?,
        weight: Tensor::from_vec(&[m, n], dw)?,
        bias: grad.clone(),
    })
}

/// Stacks `[Ca,H,W]` and `[Cb,H,W]` into `[Ca+Cb,H,W]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, h, w) = a.dims3("concat_channels")?;
    let (cb, hb, wb) = b.dims3("concat_channels")?;
    if (h, w) != (hb, wb) {
        return shape_err("concat_channels", &[cb, h, w], b.shape());
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

/// Splits a channel-concatenated gradient back into its two pieces.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3("split_channels")?;
    if first > c {
        return shape_err("split_channels", &[first, h, w], x.shape());
    }
    let (lo, hi) = x.data().split_at(first * h * w);
    Ok((
        Tensor::from_vec(&[first, h, w], lo.to_vec())?,
        Tensor::from_vec(&[c - first, h, w], hi.to_vec())?,
    ))
}
