//! Direct-loop convolution. Slow, obviously correct, and the reference every
//! fast path is compared against.

use super::{check_grad, source, ConvGeometry};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

pub fn conv2d_naive<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let plan = geom.check(x, kernel)?;
    let xd = x.dims();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let mut y = Tensor4::zeros(geom.output_dims(x, plan))?;
    for n in 0..xd.n {
        for o in 0..geom.out_channels {
            for oy in 0..plan.oh {
                for ox in 0..plan.ow {
                    let mut acc = T::zero();
                    for i in 0..geom.in_channels {
                        for ky in 0..kh {
                            let Some(iy) = source(oy, sh, ky, plan.pad_top, xd.h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = source(ox, sw, kx, plan.pad_left, xd.w) else {
                                    continue;
                                };
                                acc += x.get(n, i, iy, ix) * kernel.get(o, i, ky, kx);
                            }
                        }
                    }
                    y.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_naive_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let plan = geom.check(x, kernel)?;
    check_grad(grad_out, geom.output_dims(x, plan))?;
    let xd = x.dims();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let mut gx = x.zeros_like();
    let mut gk = kernel.zeros_like();
    for n in 0..xd.n {
        for o in 0..geom.out_channels {
            for oy in 0..plan.oh {
                for ox in 0..plan.ow {
                    let g = grad_out.get(n, o, oy, ox);
                    for i in 0..geom.in_channels {
                        for ky in 0..kh {
                            let Some(iy) = source(oy, sh, ky, plan.pad_top, xd.h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = source(ox, sw, kx, plan.pad_left, xd.w) else {
                                    continue;
                                };
                                let xo = x.offset(n, i, iy, ix);
                                let ko = kernel.offset(o, i, ky, kx);
                                gx.as_mut_slice()[xo] += g * kernel.as_slice()[ko];
                                gk.as_mut_slice()[ko] += g * x.as_slice()[xo];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}
