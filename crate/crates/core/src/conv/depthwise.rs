//! Per-channel spatial convolution.
//!
//! The kernel is shaped `(1, C * m, kh, kw)`: filter plane `j * m + k` is the
//! `k`-th filter of input channel `j` and produces output channel `j * m + k`.

use rayon::prelude::*;

use super::{check_grad, source, valid_range, ConvGeometry, Plan};
use crate::error::{ensure, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

fn check<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    multiplier: usize,
) -> Result<Plan> {
    ensure!(multiplier >= 1, Parameter, "depth multiplier must be >= 1");
    geom.validate()?;
    let c = x.dims().c;
    ensure!(
        geom.in_channels == c && geom.out_channels == c * multiplier,
        Shape,
        "depthwise geometry {}->{} does not fit {c} channels with multiplier {multiplier}",
        geom.in_channels,
        geom.out_channels
    );
    let expect = Dims::new(1, c * multiplier, geom.kernel.0, geom.kernel.1);
    ensure!(
        kernel.dims() == expect,
        Shape,
        "depthwise kernel dims {} (expected {expect})",
        kernel.dims()
    );
    geom.window().plan(x.dims().h, x.dims().w)
}

pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    multiplier: usize,
) -> Result<Tensor4<T>> {
    let plan = check(x, kernel, geom, multiplier)?;
    if geom.stride == (1, 1) {
        return grid_forward(x, kernel, geom, multiplier, plan);
    }
    let d = x.dims();
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let oc = d.c * multiplier;
    let out = Dims::new(d.n, oc, plan.oh, plan.ow);
    let mut data = vec![T::zero(); out.len()];
    data.par_chunks_mut(out.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, o) = (idx / oc, idx % oc);
            let src = x.plane(n, o / multiplier);
            let filt = kernel.plane(0, o);
            for oy in 0..plan.oh {
                for ky in 0..kh {
                    let Some(iy) = source(oy, sh, ky, plan.pad_top, d.h) else {
                        continue;
                    };
                    let srow = &src[iy * d.w..(iy + 1) * d.w];
                    let drow = &mut plane[oy * plan.ow..(oy + 1) * plan.ow];
                    for kx in 0..kw {
                        let wgt = filt[ky * kw + kx];
                        let (lo, hi) = valid_range(plan.ow, sw, kx, plan.pad_left, d.w);
                        if lo == hi {
                            continue;
                        }
                        let start = lo * sw + kx - plan.pad_left;
                        if sw == 1 {
                            for (acc, &v) in
                                drow[lo..hi].iter_mut().zip(&srow[start..start + hi - lo])
                            {
                                *acc += wgt * v;
                            }
                        } else {
                            for (acc, &v) in drow[lo..hi]
                                .iter_mut()
                                .zip(srow[start..].iter().step_by(sw))
                            {
                                *acc += wgt * v;
                            }
                        }
                    }
                }
            }
        });
    Tensor4::from_vec(out, data)
}

/// Returns `(grad_input, grad_kernel)`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    multiplier: usize,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let plan = check(x, kernel, geom, multiplier)?;
    let d = x.dims();
    let oc = d.c * multiplier;
    check_grad(grad_out, Dims::new(d.n, oc, plan.oh, plan.ow))?;
    if geom.stride == (1, 1) {
        return grid_backward(x, kernel, geom, multiplier, plan, grad_out);
    }
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;

    let mut gx = vec![T::zero(); d.len()];
    gx.par_chunks_mut(d.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, j) = (idx / d.c, idx % d.c);
            for m in 0..multiplier {
                let o = j * multiplier + m;
                let g = grad_out.plane(n, o);
                let filt = kernel.plane(0, o);
                for oy in 0..plan.oh {
                    for ky in 0..kh {
                        let Some(iy) = source(oy, sh, ky, plan.pad_top, d.h) else {
                            continue;
                        };
                        let grow = &g[oy * plan.ow..(oy + 1) * plan.ow];
                        let prow = &mut plane[iy * d.w..(iy + 1) * d.w];
                        for kx in 0..kw {
                            let wgt = filt[ky * kw + kx];
                            let (lo, hi) = valid_range(plan.ow, sw, kx, plan.pad_left, d.w);
                            if lo == hi {
                                continue;
                            }
                            let start = lo * sw + kx - plan.pad_left;
                            for (dst, &gv) in
                                prow[start..].iter_mut().step_by(sw).zip(&grow[lo..hi])
                            {
                                *dst += wgt * gv;
                            }
                        }
                    }
                }
            }
        });

    let mut gk = vec![T::zero(); kernel.len()];
    gk.par_chunks_mut(kh * kw)
        .enumerate()
        .for_each(|(o, filt)| {
            let j = o / multiplier;
            for n in 0..d.n {
                let src = x.plane(n, j);
                let g = grad_out.plane(n, o);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        let (lo, hi) = valid_range(plan.ow, sw, kx, plan.pad_left, d.w);
                        if lo == hi {
                            continue;
                        }
                        let start = lo * sw + kx - plan.pad_left;
                        for oy in 0..plan.oh {
                            let Some(iy) = source(oy, sh, ky, plan.pad_top, d.h) else {
                                continue;
                            };
                            let grow = &g[oy * plan.ow + lo..oy * plan.ow + hi];
                            let srow = &src[iy * d.w + start..(iy + 1) * d.w];
                            for (&gv, &sv) in grow.iter().zip(srow.iter().step_by(sw)) {
                                acc += gv * sv;
                            }
                        }
                        filt[ky * kw + kx] += acc;
                    }
                }
            }
        });

    Ok((
        Tensor4::from_vec(d, gx)?,
        Tensor4::from_vec(kernel.dims(), gk)?,
    ))
}

/// Stride-1 layout: all examples of one channel stacked on a zero-padded
/// `hp x wp` grid, flattened. Output `(n, oy, ox)` sits at flat index
/// `n * hp * wp + oy * wp + ox`, and kernel tap `(ky, kx)` reads that index
/// shifted by `ky * wp + kx`, so each tap is one long shifted axpy.
#[derive(Clone, Copy)]
struct Grid {
    hp: usize,
    wp: usize,
    /// `n * hp * wp`.
    len: usize,
    /// Largest tap shift.
    tail: usize,
}

impl Grid {
    fn new(n: usize, geom: &ConvGeometry, plan: Plan) -> Self {
        let (kh, kw) = geom.kernel;
        let (hp, wp) = (plan.oh + kh - 1, plan.ow + kw - 1);
        Self {
            hp,
            wp,
            len: n * hp * wp,
            tail: (kh - 1) * wp + kw - 1,
        }
    }

    fn offsets(self, geom: &ConvGeometry) -> impl Iterator<Item = usize> {
        let (kh, kw) = geom.kernel;
        (0..kh).flat_map(move |ky| (0..kw).map(move |kx| ky * self.wp + kx))
    }

    /// Channel `c` of `x` placed on the grid, with `tail` zeros appended.
    fn pad<T: Scalar>(self, x: &Tensor4<T>, c: usize, plan: Plan) -> Vec<T> {
        let d = x.dims();
        let mut buf = vec![T::zero(); self.len + self.tail];
        for n in 0..d.n {
            let src = x.plane(n, c);
            for iy in 0..d.h {
                let at = n * self.hp * self.wp + (iy + plan.pad_top) * self.wp + plan.pad_left;
                buf[at..at + d.w].copy_from_slice(&src[iy * d.w..(iy + 1) * d.w]);
            }
        }
        buf
    }

    /// Output-shaped plane data `(n, oh, ow)` scattered onto the grid.
    fn spread<T: Scalar>(self, g: &Tensor4<T>, o: usize, plan: Plan) -> Vec<T> {
        let mut buf = vec![T::zero(); self.len];
        for n in 0..g.dims().n {
            let src = g.plane(n, o);
            for oy in 0..plan.oh {
                let at = n * self.hp * self.wp + oy * self.wp;
                buf[at..at + plan.ow].copy_from_slice(&src[oy * plan.ow..(oy + 1) * plan.ow]);
            }
        }
        buf
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight fixed accumulation lanes, so the order of
/// additions never depends on the machine.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

fn grid_forward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    multiplier: usize,
    plan: Plan,
) -> Result<Tensor4<T>> {
    let d = x.dims();
    let g = Grid::new(d.n, geom, plan);
    let oc = d.c * multiplier;
    let planes: Vec<Vec<T>> = (0..d.c)
        .into_par_iter()
        .flat_map_iter(|c| {
            let p = g.pad(x, c, plan);
            (0..multiplier)
                .map(|k| {
                    let filt = kernel.plane(0, c * multiplier + k);
                    let mut z = vec![T::zero(); g.len];
                    for (&w, off) in filt.iter().zip(g.offsets(geom)) {
                        axpy(&mut z, w, &p[off..off + g.len]);
                    }
                    z
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let out = Dims::new(d.n, oc, plan.oh, plan.ow);
    let mut data = vec![T::zero(); out.len()];
    data.par_chunks_mut(out.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, o) = (idx / oc, idx % oc);
            for oy in 0..plan.oh {
                let at = n * g.hp * g.wp + oy * g.wp;
                plane[oy * plan.ow..(oy + 1) * plan.ow]
                    .copy_from_slice(&planes[o][at..at + plan.ow]);
            }
        });
    Tensor4::from_vec(out, data)
}

fn grid_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    geom: &ConvGeometry,
    multiplier: usize,
    plan: Plan,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let d = x.dims();
    let g = Grid::new(d.n, geom, plan);
    let taps = geom.kernel.0 * geom.kernel.1;
    let per_channel: Vec<(Vec<T>, Vec<T>)> = (0..d.c)
        .into_par_iter()
        .map(|c| {
            let p = g.pad(x, c, plan);
            let mut gp = vec![T::zero(); g.len + g.tail];
            let mut gk = Vec::with_capacity(multiplier * taps);
            for k in 0..multiplier {
                let o = c * multiplier + k;
                let gy = g.spread(grad_out, o, plan);
                for (&w, off) in kernel.plane(0, o).iter().zip(g.offsets(geom)) {
                    axpy(&mut gp[off..off + g.len], w, &gy);
                    gk.push(dot(&gy, &p[off..off + g.len]));
                }
            }
            (gp, gk)
        })
        .collect();
    let mut gx = vec![T::zero(); d.len()];
    gx.par_chunks_mut(d.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, c) = (idx / d.c, idx % d.c);
            let gp = &per_channel[c].0;
            for iy in 0..d.h {
                let at = n * g.hp * g.wp + (iy + plan.pad_top) * g.wp + plan.pad_left;
                plane[iy * d.w..(iy + 1) * d.w].copy_from_slice(&gp[at..at + d.w]);
            }
        });
    let gk: Vec<T> = per_channel.into_iter().flat_map(|(_, k)| k).collect();
    Ok((
        Tensor4::from_vec(d, gx)?,
        Tensor4::from_vec(kernel.dims(), gk)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use crate::error::Error;
    use crate::rng::Rng;

    fn centered(c: usize) -> Tensor4<f64> {
        let mut k = Tensor4::zeros((1, c, 3, 3)).unwrap();
        for j in 0..c {
            k.set(0, j, 1, 1, 1.0);
        }
        k
    }

    #[test]
    fn center_filters_are_identity() {
        let mut rng = Rng::seed(2);
        let x = Tensor4::<f64>::randn((2, 3, 5, 4), &mut rng).unwrap();
        let g = ConvGeometry::new(3, 3, 3, 1, Padding::Same);
        assert_eq!(depthwise_conv2d(&x, &centered(3), &g, 1).unwrap(), x);
    }

    #[test]
    fn multiplier_shape() {
        let x = Tensor4::<f32>::zeros((1, 3, 6, 6)).unwrap();
        let k = Tensor4::zeros((1, 6, 3, 3)).unwrap();
        let g = ConvGeometry::new(3, 6, 3, 1, Padding::Valid);
        assert_eq!(
            depthwise_conv2d(&x, &k, &g, 2).unwrap().dims(),
            (1, 6, 4, 4).into()
        );
    }

    #[test]
    fn zero_multiplier_rejected() {
        let x = Tensor4::<f32>::zeros((1, 3, 6, 6)).unwrap();
        let k = Tensor4::zeros((1, 3, 3, 3)).unwrap();
        let g = ConvGeometry::new(3, 3, 3, 1, Padding::Valid);
        assert!(matches!(
            depthwise_conv2d(&x, &k, &g, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn kernel_grad_sees_only_its_channel() {
        let mut rng = Rng::seed(6);
        let x = Tensor4::<f64>::randn((2, 3, 5, 5), &mut rng).unwrap();
        let k = Tensor4::randn((1, 3, 3, 3), &mut rng).unwrap();
        let gy = Tensor4::randn((2, 3, 5, 5), &mut rng).unwrap();
        let g = ConvGeometry::new(3, 3, 3, 1, Padding::Same);
        let (_, gk) = depthwise_conv2d_backward(&x, &k, &g, 1, &gy).unwrap();
        let mut masked = x.clone();
        for n in 0..2 {
            for j in [0, 2] {
                masked.plane_mut(n, j).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (_, gk_masked) = depthwise_conv2d_backward(&masked, &k, &g, 1, &gy).unwrap();
        assert_eq!(gk.plane(0, 1), gk_masked.plane(0, 1));
    }
}
