//! NHWC primitives on top of candle.
//!
//! A 3×3 / stride 1 / pad 1 convolution is lowered to an explicit im2col
//! followed by a matmul, so both forward and backward run through GEMM.
//! The im2col backward (col2im) is a scatter-add whose accumulation order is
//! fixed, which keeps training bit-reproducible.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use super::kernels::{col2im_kernel, im2col_kernel, BiasAdd, Conv3x3, Geometry, InstanceNorm, LeakyRelu, Resample, ScaleShift};
use crate::error::Result;

struct Im2Col(Geometry);
struct Col2Im(Geometry);

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l.shape().dims()[0];
        let shape = Shape::from((batch * g.height * g.width, 9 * g.channels));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous_slice(v, l)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous_slice(v, l)?, batch, g)),
            _ => bail!("im2col supports f32/f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let rows = l.shape().dims()[0];
        let batch = rows / (g.height * g.width);
        let shape = Shape::from((batch, g.height, g.width, g.channels));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous_slice(v, l)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous_slice(v, l)?, batch, g)),
            _ => bail!("col2im supports f32/f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, h, w, c) = grad.dims4()?;
        let g = Geometry {
            height: h,
            width: w,
            channels: c,
        };
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(g))?))
    }
}

/// `[B,H,W,C]` → `[B·H·W, 9·C]` patch matrix (zero padded).
pub fn im2col3x3(x: &Tensor) -> Result<Tensor> {
    let (_, h, w, c) = x.dims4()?;
    let op = Im2Col(Geometry {
        height: h,
        width: w,
        channels: c,
    });
    Ok(x.contiguous()?.apply_op1(op)?)
}

/// 2×2 average pooling, NHWC.
/// 3×3, stride 1, zero-padded convolution: `x: [B,H,W,Cin]`, `w: [9·Cin, Cout]`
/// laid out as `(ky, kx, cin)` rows, `b: [Cout]`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, Conv3x3)?)
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(crate::error::Error::shape(format!(
            "avg_pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(x.contiguous()?.apply_op1(Resample::Down(0.25))?)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Resample::Up)?)
}

/// Normalizes each channel of each sample over its spatial positions.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(InstanceNorm(eps))?)
}

/// `x · scale + shift` with per-sample, per-channel `scale`, `shift: [B, C]`.
pub fn scale_shift(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x.contiguous()?.reshape((b, h * w, c))?.apply_op3(
        &scale.contiguous()?,
        &shift.contiguous()?,
        ScaleShift,
    )?;
    Ok(y.reshape((b, h, w, c))?)
}

/// Adds `bias: [C]` to every row of `x: [N, C]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)?)
}

pub fn pixel_norm(z: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = z.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(z.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

/// Logistic function via tanh, finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Unit-normalizes rows along the last dim.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + eps)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Scalar read-out as f64.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
