//! Convolution, pooling and fully connected kernels with their backward
//! rules.
//!
//! Convolution lowers each sample to an im2col matrix whose rows run over
//! `(in_channel, ky, kx)` and whose columns run over output positions, then
//! multiplies by the `[out_channels, in_channels * k * k]` weight matrix.
//! Bias is added after the full product, so an output equals
//! `sum_{c,ky,kx} x * w` accumulated in that order, plus bias.

use serde::{Deserialize, Serialize};

use super::gemm::{MatMut, MatRef};
use super::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        }
    }

    /// Stride 1, padding `(k - 1) / 2`: output extent equals input extent.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(TensorError::Geometry(format!(
                "same-size convolution needs an odd kernel, got {kernel_size}"
            )));
        }
        Ok(Self::new(
            in_channels,
            out_channels,
            kernel_size,
            1,
            (kernel_size - 1) / 2,
        ))
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel_size == 0 {
            return Err(TensorError::Geometry(format!(
                "stride and kernel size must be positive (stride {}, kernel {})",
                self.stride, self.kernel_size
            )));
        }
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(TensorError::Geometry(format!(
                "kernel {} does not fit input extent {} with padding {}",
                self.kernel_size, input, self.padding
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_size == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

fn dims4<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: t.shape().to_vec(),
        }),
    }
}

fn expect_dim(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(TensorError::Dimension {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}

struct ConvShapes {
    batch: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_shapes<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &Conv2dGeometry,
    op: &'static str,
) -> Result<ConvShapes> {
    let [batch, cin, height, width] = dims4(input, op)?;
    expect_dim(op, "input channels", geom.in_channels, cin)?;
    let [wo, wi, kh, kw] = dims4(weight, op)?;
    expect_dim(op, "weight output channels", geom.out_channels, wo)?;
    expect_dim(op, "weight input channels", geom.in_channels, wi)?;
    expect_dim(op, "weight kernel height", geom.kernel_size, kh)?;
    expect_dim(op, "weight kernel width", geom.kernel_size, kw)?;
    Ok(ConvShapes {
        batch,
        height,
        width,
        out_h: geom.output_extent(height)?,
        out_w: geom.output_extent(width)?,
    })
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` lies in
/// `0..width`, as a half-open range.
fn valid_columns(
    kx: usize,
    pad: usize,
    stride: usize,
    width: usize,
    out_w: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if width + pad > kx {
        (width + pad - kx - 1) / stride + 1
    } else {
        0
    };
    let hi = hi.min(out_w);
    (lo.min(hi), hi)
}

/// Lowers one `[C, H, W]` sample into `cols` (`[C*k*k, out_h*out_w]`).
fn im2col<T: Element>(x: &[T], geom: &Conv2dGeometry, s: &ConvShapes, cols: &mut [T]) {
    let k = geom.kernel_size;
    let (pad, stride) = (geom.padding, geom.stride);
    let plane = s.out_h * s.out_w;
    for c in 0..geom.in_channels {
        let xc = &x[c * s.height * s.width..(c + 1) * s.height * s.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_columns(kx, pad, stride, s.width, s.out_w);
                for oy in 0..s.out_h {
                    let drow = &mut dst[oy * s.out_w..(oy + 1) * s.out_w];
                    let iy = (oy * stride + ky).wrapping_sub(pad);
                    if iy >= s.height {
                        drow.fill(T::zero());
                        continue;
                    }
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let src = &xc[iy * s.width..(iy + 1) * s.width];
                    let start = lo * stride + kx - pad;
                    if stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (d, &v) in drow[lo..hi]
                            .iter_mut()
                            .zip(src[start..].iter().step_by(stride))
                        {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into a `[C, H, W]` gradient buffer.
fn col2im_add<T: Element>(cols: &[T], geom: &Conv2dGeometry, s: &ConvShapes, dx: &mut [T]) {
    let k = geom.kernel_size;
    let (pad, stride) = (geom.padding, geom.stride);
    let plane = s.out_h * s.out_w;
    for c in 0..geom.in_channels {
        let dxc = &mut dx[c * s.height * s.width..(c + 1) * s.height * s.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_columns(kx, pad, stride, s.width, s.out_w);
                for oy in 0..s.out_h {
                    let iy = (oy * stride + ky).wrapping_sub(pad);
                    if iy >= s.height {
                        continue;
                    }
                    let drow = &mut dxc[iy * s.width..(iy + 1) * s.width];
                    let start = lo * stride + kx - pad;
                    let g = &src[oy * s.out_w + lo..oy * s.out_w + hi];
                    for (d, &gv) in drow[start..].iter_mut().step_by(stride).zip(g) {
                        *d = *d + gv;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `[B, Cin, H, W] * [Cout, Cin, K, K] + [Cout]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let s = conv_shapes(input, weight, geom, "conv2d")?;
    expect_dim("conv2d", "bias length", geom.out_channels, bias.len())?;
    let plane = s.out_h * s.out_w;
    let patch = geom.patch_len();
    let in_len = geom.in_channels * s.height * s.width;
    let out_len = geom.out_channels * plane;
    let mut out = vec![T::zero(); s.batch * out_len];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let wmat = MatRef::row_major(weight.data(), geom.out_channels, patch);
    for b in 0..s.batch {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let rhs = if geom.is_pointwise() {
            x
        } else {
            im2col(x, geom, &s, &mut cols);
            &cols[..]
        };
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        T::gemm(
            wmat,
            MatRef::row_major(rhs, patch, plane),
            MatMut::new(dst, geom.out_channels, plane),
            false,
        );
        for (row, &bv) in dst.chunks_exact_mut(plane).zip(bias.data()) {
            for v in row {
                *v = *v + bv;
            }
        }
    }
    Tensor::from_vec([s.batch, geom.out_channels, s.out_h, s.out_w], out)
}

/// `(d input, d weight, d bias)`; the input gradient is `None` when it was
/// not requested.
pub type ParamGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d`]. The input gradient is skipped when
/// `need_input` is false.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &Conv2dGeometry,
    need_input: bool,
) -> Result<ParamGrads<T>> {
    let s = conv_shapes(input, weight, geom, "conv2d_backward")?;
    let expected = [s.batch, geom.out_channels, s.out_h, s.out_w];
    if grad_out.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let plane = s.out_h * s.out_w;
    let patch = geom.patch_len();
    let in_len = geom.in_channels * s.height * s.width;
    let out_len = geom.out_channels * plane;

    let mut dw = vec![T::zero(); geom.out_channels * patch];
    let mut db = vec![T::zero(); geom.out_channels];
    let mut dx = if need_input {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let mut cols = vec![T::zero(); patch * plane];
    let mut dcols = if need_input {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };

    for b in 0..s.batch {
        let g = &grad_out.data()[b * out_len..(b + 1) * out_len];
        for (acc, row) in db.iter_mut().zip(g.chunks_exact(plane)) {
            *acc = row.iter().fold(*acc, |a, &v| a + v);
        }
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let xcols: &[T] = if geom.is_pointwise() {
            x
        } else {
            im2col(x, geom, &s, &mut cols);
            &cols
        };
        T::gemm(
            MatRef::row_major(g, geom.out_channels, plane),
            MatRef::transposed(xcols, patch, plane),
            MatMut::new(&mut dw, geom.out_channels, patch),
            true,
        );
        if need_input {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if geom.is_pointwise() {
                T::gemm(
                    MatRef::transposed(weight.data(), geom.out_channels, patch),
                    MatRef::row_major(g, geom.out_channels, plane),
                    MatMut::new(dxb, patch, plane),
                    false,
                );
            } else {
                T::gemm(
                    MatRef::transposed(weight.data(), geom.out_channels, patch),
                    MatRef::row_major(g, geom.out_channels, plane),
                    MatMut::new(&mut dcols, patch, plane),
                    false,
                );
                col2im_add(&dcols, geom, &s, dxb);
            }
        }
    }
    let dx = if need_input {
        Some(Tensor::from_vec(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::from_vec(geom.weight_shape().to_vec(), dw)?,
        Tensor::from_vec([geom.out_channels], db)?,
    ))
}

fn pool_dims<T: Element>(input: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    let d = dims4(input, op)?;
    if d[2] % 2 != 0 || d[3] % 2 != 0 {
        return Err(TensorError::Geometry(format!(
            "{op}: spatial extent {}x{} is not even",
            d[2], d[3]
        )));
    }
    Ok(d)
}

/// 2x2 average pooling with stride 2. Each output is
/// `(x00 + x01 + x10 + x11) * 0.25`, summed in that order.
pub fn avg_pool2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = pool_dims(input, "avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.chunks_exact(h * w) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                let s = r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1];
                out.push(s * quarter);
            }
        }
    }
    Tensor::from_vec([b, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Element>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match *input_shape {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(TensorError::Rank {
                op: "avg_pool2_backward",
                expected: 4,
                shape: input_shape.to_vec(),
            })
        }
    };
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(TensorError::ShapeMismatch {
            op: "avg_pool2_backward",
            lhs: vec![b, c, oh, ow],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); b * c * h * w];
    for (plane, g) in dx
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * quarter;
                plane[2 * oy * w + 2 * ox] = v;
                plane[2 * oy * w + 2 * ox + 1] = v;
                plane[(2 * oy + 1) * w + 2 * ox] = v;
                plane[(2 * oy + 1) * w + 2 * ox + 1] = v;
            }
        }
    }
    Tensor::from_vec(input_shape.to_vec(), dx)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output,
/// the flat input index of the selected element (first maximum in
/// row-major window order).
pub fn max_pool2<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = pool_dims(input, "max_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let cands = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec([b, c, oh, ow], out)?, argmax))
}

pub fn max_pool2_backward<T: Element>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::Dimension {
            op: "max_pool2_backward",
            dim: "selection count",
            expected: grad_out.len(),
            actual: argmax.len(),
        });
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

fn linear_dims<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if input.rank() < 1 {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            shape: input.shape().to_vec(),
        });
    }
    let batch = input.shape()[0];
    let features = input.shape()[1..].iter().product::<usize>();
    let (m, n) = match *weight.shape() {
        [m, n] => (m, n),
        _ => {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: weight.shape().to_vec(),
            })
        }
    };
    expect_dim(op, "input features", n, features)?;
    Ok((batch, n, m))
}

/// Affine map `x W^T + b`. Trailing input axes are flattened, so a
/// `[B, C, H, W]` input is treated as `[B, C*H*W]`.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, n, m) = linear_dims(input, weight, "linear")?;
    expect_dim("linear", "bias length", m, bias.len())?;
    let mut out = vec![T::zero(); batch * m];
    T::gemm(
        MatRef::row_major(input.data(), batch, n),
        MatRef::transposed(weight.data(), m, n),
        MatMut::new(&mut out, batch, m),
        false,
    );
    for row in out.chunks_exact_mut(m.max(1)) {
        for (v, &bv) in row.iter_mut().zip(bias.data()) {
            *v = *v + bv;
        }
    }
    Tensor::from_vec([batch, m], out)
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ParamGrads<T>> {
    let (batch, n, m) = linear_dims(input, weight, "linear_backward")?;
    if grad_out.shape() != [batch, m] {
        return Err(TensorError::ShapeMismatch {
            op: "linear_backward",
            lhs: vec![batch, m],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let dx = if need_input {
        let mut dx = vec![T::zero(); batch * n];
        T::gemm(
            MatRef::row_major(grad_out.data(), batch, m),
            MatRef::row_major(weight.data(), m, n),
            MatMut::new(&mut dx, batch, n),
            false,
        );
        Some(Tensor::from_vec(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    let mut dw = vec![T::zero(); m * n];
    T::gemm(
        MatRef::transposed(grad_out.data(), batch, m),
        MatRef::row_major(input.data(), batch, n),
        MatMut::new(&mut dw, m, n),
        false,
    );
    let db = grad_out.sum_axis(0)?;
    Ok((dx, Tensor::from_vec([m, n], dw)?, db))
}
