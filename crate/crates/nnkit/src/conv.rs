//! 2-D convolution and transposed convolution on single `[C,H,W]` samples,
//! lowered to GEMM through im2col / col2im.

use crate::error::{shape_err, NnError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Sliding-window geometry of a convolution from a `[channels, h, w]`
/// image to an `[_, out_h, out_w]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(NnError::InvalidArgument {
                op: "conv",
                detail: "kernel and stride must be positive".into(),
            });
        }
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(NnError::InvalidArgument {
                op: "conv",
                detail: format!("input {h}x{w} with padding {padding} is smaller than kernel {kernel}"),
            });
        }
        Ok(ConvGeometry {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `ox` whose tap `k` lands inside `0..len`.
    fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // o*stride + k - pad in [0, len)
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi = if len + pad <= k {
            0
        } else {
            ((len + pad - k - 1) / stride + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds `image` (`[channels, h, w]`) into `cols` (`[C·k·k, out_h·out_w]`).
pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let n = g.col_cols();
    debug_assert_eq!(image.len(), g.channels * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * n);
    for c in 0..g.channels {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = ConvGeometry::valid_range(g.out_h, g.h, ki, s, p);
            for kj in 0..k {
                let (ox_lo, ox_hi) = ConvGeometry::valid_range(g.out_w, g.w, kj, s, p);
                let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                row.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = ox_lo + kj - p;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `image`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = ConvGeometry::valid_range(g.out_h, g.h, ki, s, p);
            for kj in 0..k {
                let (ox_lo, ox_hi) = ConvGeometry::valid_range(g.out_w, g.w, kj, s, p);
                let row = &cols[((c * k + ki) * k + kj) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * s + kj - p] += src[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

/// Gradients of a (transposed) convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for it.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_transpose_weight<T: Scalar>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    in_channels: usize,
) -> Result<(usize, usize)> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != in_channels || ws[2] != ws[3] {
        return shape_err("conv_transpose2d", &[in_channels, 0, 3, 3], ws);
    }
    if bias.shape() != [ws[1]] {
        return shape_err("conv_transpose2d", &[ws[1]], bias.shape());
    }
    Ok((ws[1], ws[2]))
}

/// Cross-correlation of `input` `[C,H,W]` with `weight` `[O,C,k,k]` plus `bias` `[O]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
        return shape_err("conv2d", &[0, c, 3, 3], ws);
    }
    let (o, k) = (ws[0], ws[2]);
    if bias.shape() != [o] {
        return shape_err("conv2d", &[o], bias.shape());
    }
    let g = ConvGeometry::new(c, h, w, k, stride, padding)?;
    let n = g.col_cols();
    let mut out = vec![T::zero(); o * n];
    for (row, &b) in out.chunks_mut(n).zip(bias.data()) {
        row.fill(b);
    }
    if is_pointwise(&g) {
        gemm(o, c, n, weight.data(), false, input.data(), false, &mut out, true);
    } else {
        let mut cols = vec![T::zero(); g.col_rows() * n];
        im2col(input.data(), &g, &mut cols);
        gemm(o, g.col_rows(), n, weight.data(), false, &cols, false, &mut out, true);
    }
    Tensor::from_vec(&[o, g.out_h, g.out_w], out)
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (c, h, w) = input.dims3("conv2d_backward")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c {
        return shape_err("conv2d_backward", &[0, c, 3, 3], ws);
    }
    let (o, k) = (ws[0], ws[2]);
    let g = ConvGeometry::new(c, h, w, k, stride, padding)?;
    if grad_out.shape() != [o, g.out_h, g.out_w] {
        return shape_err("conv2d_backward", &[o, g.out_h, g.out_w], grad_out.shape());
    }
    let n = g.col_cols();
    let rows = g.col_rows();
    let go = grad_out.data();

    let bias: Vec<T> = go.chunks(n).map(|r| r.iter().copied().sum()).collect();
    let mut dw = vec![T::zero(); o * rows];
    let pointwise = is_pointwise(&g);
    let cols_storage;
    let cols: &[T] = if pointwise {
        input.data()
    } else {
        let mut buf = vec![T::zero(); rows * n];
        im2col(input.data(), &g, &mut buf);
        cols_storage = buf;
        &cols_storage
    };
    gemm(o, n, rows, go, false, cols, true, &mut dw, false);

    let input_grad = if need_input_grad {
        let mut dcols = vec![T::zero(); rows * n];
        gemm(rows, o, n, weight.data(), true, go, false, &mut dcols, false);
        if pointwise {
            Some(Tensor::from_vec(&[c, h, w], dcols)?)
        } else {
            let mut dx = vec![T::zero(); c * h * w];
            col2im(&dcols, &g, &mut dx);
            Some(Tensor::from_vec(&[c, h, w], dx)?)
        }
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::from_vec(ws, dw)?,
        bias: Tensor::from_vec(&[o], bias)?,
    })
}

/// Geometry of the forward convolution that a transposed convolution inverts.
fn transpose_geometry(
    op: &'static str,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<ConvGeometry> {
    if output_padding >= stride.max(1) {
        return Err(NnError::InvalidArgument {
            op,
            detail: format!("output_padding {output_padding} must be smaller than stride {stride}"),
        });
    }
    let grow = |n: usize| ((n.max(1) - 1) * stride + kernel + output_padding).checked_sub(2 * padding);
    let (Some(oh), Some(ow)) = (grow(in_h), grow(in_w)) else {
        return Err(NnError::InvalidArgument {
            op,
            detail: "padding exceeds the transposed output size".into(),
        });
    };
    let g = ConvGeometry::new(out_channels, oh, ow, kernel, stride, padding)?;
    if g.out_h != in_h || g.out_w != in_w {
        return Err(NnError::InvalidArgument {
            op,
            detail: format!("inconsistent geometry for input {in_h}x{in_w}"),
        });
    }
    Ok(g)
}

/// Transposed convolution: `input` `[Ci,H,W]`, `weight` `[Ci,Co,k,k]`, `bias` `[Co]`.
///
/// Output spatial size is `(H-1)·stride - 2·padding + k + output_padding`,
/// so stride 2, padding 1, output_padding 1 exactly doubles `H` and `W`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let (ci, h, w) = input.dims3("conv_transpose2d")?;
    let (co, k) = check_transpose_weight(weight, bias, ci)?;
    let g = transpose_geometry("conv_transpose2d", h, w, co, k, stride, padding, output_padding)?;
    let hw = h * w;
    let mut cols = vec![T::zero(); g.col_rows() * hw];
    gemm(g.col_rows(), ci, hw, weight.data(), true, input.data(), false, &mut cols, false);
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); co * plane];
    col2im(&cols, &g, &mut out);
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.data()) {
        for v in chunk {
            *v += b;
        }
    }
    Tensor::from_vec(&[co, g.h, g.w], out)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (ci, h, w) = input.dims3("conv_transpose2d_backward")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != ci {
        return shape_err("conv_transpose2d_backward", &[ci, 0, 3, 3], ws);
    }
    let (co, k) = (ws[1], ws[2]);
    let g = transpose_geometry(
        "conv_transpose2d_backward",
        h,
        w,
        co,
        k,
        stride,
        padding,
        output_padding,
    )?;
    if grad_out.shape() != [co, g.h, g.w] {
        return shape_err("conv_transpose2d_backward", &[co, g.h, g.w], grad_out.shape());
    }
    let hw = h * w;
    let rows = g.col_rows();
    let mut gcols = vec![T::zero(); rows * hw];
    im2col(grad_out.data(), &g, &mut gcols);

    let mut dw = vec![T::zero(); ci * rows];
    gemm(ci, hw, rows, input.data(), false, &gcols, true, &mut dw, false);
    let plane = g.h * g.w;
    let bias: Vec<T> = grad_out
        .data()
        .chunks(plane)
        .map(|r| r.iter().copied().sum())
        .collect();
    let input_grad = if need_input_grad {
        let mut dx = vec![T::zero(); ci * hw];
        gemm(ci, rows, hw, weight.data(), false, &gcols, false, &mut dx, false);
        Some(Tensor::from_vec(&[ci, h, w], dx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::from_vec(ws, dw)?,
        bias: Tensor::from_vec(&[co], bias)?,
    })
}
