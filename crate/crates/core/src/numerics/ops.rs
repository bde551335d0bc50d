//! Eager (tape-free) versions of the core ops.

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn conv_geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if x.len() != 3 || w.len() != 4 || w[1] != x[0] || w[2] != w[3] {
        return Err(Error::shape("conv2d", x, w));
    }
    let k = w[2];
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let extent = |len: usize| -> Result<usize> {
        let span = (len + 2 * pad).checked_sub(k).ok_or_else(|| {
            Error::Config(format!(
                "conv2d kernel {k} larger than padded input {len}+2*{pad}"
            ))
        })?;
        if span % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent ({len} + 2*{pad} - {k})/{stride} + 1 is not integral"
            )));
        }
        Ok(span / stride + 1)
    };
    Ok(ConvGeometry {
        c_in: x[0],
        h: x[1],
        w: x[2],
        k,
        stride,
        pad,
        h_out: extent(x[1])?,
        w_out: extent(x[2])?,
    })
}

/// Cross-correlation with zero padding; `x` is `[C_in, H, W]`, `w` is `[C_out, C_in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    let c_out = w.shape()[0];
    let cols = kernels::im2col(x.data(), &g);
    let mut out = vec![0.0; c_out * g.out_cells()];
    kernels::gemm(
        c_out,
        g.patch_len(),
        g.out_cells(),
        w.data(),
        false,
        &cols,
        false,
        0.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![c_out, g.h_out, g.w_out], out))
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Config(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Numeric(
            "softmax input contains non-finite values".into(),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let out = kernels::softmax_axis(x.data(), outer, len, inner);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
