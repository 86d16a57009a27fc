//! Patch-matrix convolution: unfold input windows into a
//! `(Cin*kh*kw) x (N*OH*OW)` matrix and reduce the convolution to one GEMM.

use rayon::prelude::*;

use super::{check_grad, source, ConvGeometry, Plan};
use crate::error::Result;
use crate::gemm::{gemm, Mat};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Reorders `(n, c, h, w)` into a row-major `c x (n * h * w)` matrix.
pub(crate) fn to_channel_major<T: Scalar>(t: &Tensor4<T>) -> Vec<T> {
    let d = t.dims();
    let p = d.plane();
    let mut out = vec![T::zero(); d.len()];
    out.par_chunks_mut(d.n * p)
        .enumerate()
        .for_each(|(c, row)| {
            for n in 0..d.n {
                row[n * p..(n + 1) * p].copy_from_slice(t.plane(n, c));
            }
        });
    out
}

/// Inverse of [`to_channel_major`].
pub(crate) fn from_channel_major<T: Scalar>(buf: &[T], dims: Dims) -> Result<Tensor4<T>> {
    let p = dims.plane();
    let mut data = vec![T::zero(); dims.len()];
    data.par_chunks_mut(p).enumerate().for_each(|(idx, plane)| {
        let (n, c) = (idx / dims.c, idx % dims.c);
        let start = c * dims.n * p + n * p;
        plane.copy_from_slice(&buf[start..start + p]);
    });
    Tensor4::from_vec(dims, data)
}

fn is_pointwise(geom: &ConvGeometry, plan: Plan) -> bool {
    geom.kernel == (1, 1) && geom.stride == (1, 1) && plan.pad_top == 0 && plan.pad_left == 0
}

fn im2col<T: Scalar>(x: &Tensor4<T>, geom: &ConvGeometry, plan: Plan) -> Vec<T> {
    if is_pointwise(geom, plan) {
        return to_channel_major(x);
    }
    let d = x.dims();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let np = d.n * plan.oh * plan.ow;
    let rows = d.c * kh * kw;
    let mut cols = vec![T::zero(); rows * np];
    cols.par_chunks_mut(np).enumerate().for_each(|(r, row)| {
        let i = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        for n in 0..d.n {
            let src = x.plane(n, i);
            for oy in 0..plan.oh {
                let Some(iy) = source(oy, sh, ky, plan.pad_top, d.h) else {
                    continue;
                };
                let base = (n * plan.oh + oy) * plan.ow;
                for ox in 0..plan.ow {
                    if let Some(ix) = source(ox, sw, kx, plan.pad_left, d.w) {
                        row[base + ox] = src[iy * d.w + ix];
                    }
                }
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], geom: &ConvGeometry, plan: Plan, xd: Dims) -> Result<Tensor4<T>> {
    if is_pointwise(geom, plan) {
        return from_channel_major(cols, xd);
    }
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let np = xd.n * plan.oh * plan.ow;
    let mut data = vec![T::zero(); xd.len()];
    data.par_chunks_mut(xd.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, i) = (idx / xd.c, idx % xd.c);
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &cols[((i * kh + ky) * kw + kx) * np..][..np];
                    for oy in 0..plan.oh {
                        let Some(iy) = source(oy, sh, ky, plan.pad_top, xd.h) else {
                            continue;
                        };
                        let base = (n * plan.oh + oy) * plan.ow;
                        for ox in 0..plan.ow {
                            if let Some(ix) = source(ox, sw, kx, plan.pad_left, xd.w) {
                                plane[iy * xd.w + ix] += row[base + ox];
                            }
                        }
                    }
                }
            }
        });
    Tensor4::from_vec(xd, data)
}

pub fn conv2d_im2col<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let plan = geom.check(x, kernel)?;
    let out = geom.output_dims(x, plan);
    let cols = im2col(x, geom, plan);
    let rows = geom.in_channels * geom.kernel.0 * geom.kernel.1;
    let np = out.n * plan.oh * plan.ow;
    let mut yc = vec![T::zero(); geom.out_channels * np];
    gemm(
        T::one(),
        Mat::row_major(kernel.as_slice(), geom.out_channels, rows),
        Mat::row_major(&cols, rows, np),
        T::zero(),
        &mut yc,
    );
    from_channel_major(&yc, out)
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_im2col_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let plan = geom.check(x, kernel)?;
    check_grad(grad_out, geom.output_dims(x, plan))?;
    let cols = im2col(x, geom, plan);
    let rows = geom.in_channels * geom.kernel.0 * geom.kernel.1;
    let np = x.dims().n * plan.oh * plan.ow;
    let gyc = to_channel_major(grad_out);

    let mut gk = vec![T::zero(); geom.out_channels * rows];
    gemm(
        T::one(),
        Mat::row_major(&gyc, geom.out_channels, np),
        Mat::row_major(&cols, rows, np).t(),
        T::zero(),
        &mut gk,
    );
    drop(cols);

    let mut gcols = vec![T::zero(); rows * np];
    gemm(
        T::one(),
        Mat::row_major(kernel.as_slice(), geom.out_channels, rows).t(),
        Mat::row_major(&gyc, geom.out_channels, np),
        T::zero(),
        &mut gcols,
    );
    let gx = col2im(&gcols, geom, plan, x.dims())?;
    Ok((gx, Tensor4::from_vec(kernel.dims(), gk)?))
}

/// Regular convolution on the fast path.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Result<Tensor4<T>> {
    conv2d_im2col(x, kernel, geom)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    conv2d_im2col_backward(x, kernel, geom, grad_out)
}
