use rayon::prelude::*;

use crate::conv::{source, Window};
use crate::error::{ensure, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Argmax positions (offsets within each input plane) for routing gradients.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input: Dims,
    argmax: Vec<u32>,
}

/// Windowed maximum. Padding cells count as negative infinity, so they never
/// win; ties go to the first position in row-major scan order.
pub fn max_pool<T: Scalar>(x: &Tensor4<T>, window: &Window) -> Result<(Tensor4<T>, MaxPoolCache)> {
    let d = x.dims();
    let plan = window.plan(d.h, d.w)?;
    let (kh, kw) = window.kernel;
    let (sh, sw) = window.stride;
    let out = Dims::new(d.n, d.c, plan.oh, plan.ow);
    let mut data = vec![T::zero(); out.len()];
    let mut argmax = vec![0u32; out.len()];
    data.par_chunks_mut(out.plane())
        .zip(argmax.par_chunks_mut(out.plane()))
        .enumerate()
        .for_each(|(idx, (plane, arg))| {
            let src = x.plane(idx / d.c, idx % d.c);
            for oy in 0..plan.oh {
                for ox in 0..plan.ow {
                    let mut best = T::neg_infinity();
                    let mut best_at = u32::MAX;
                    for ky in 0..kh {
                        let Some(iy) = source(oy, sh, ky, plan.pad_top, d.h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = source(ox, sw, kx, plan.pad_left, d.w) else {
                                continue;
                            };
                            let v = src[iy * d.w + ix];
                            // NaN wins so that a corrupted input cannot hide.
                            if best_at == u32::MAX || (!best.is_nan() && (v > best || v.is_nan())) {
                                best = v;
                                best_at = (iy * d.w + ix) as u32;
                            }
                        }
                    }
                    plane[oy * plan.ow + ox] = best;
                    arg[oy * plan.ow + ox] = best_at;
                }
            }
        });
    Ok((
        Tensor4::from_vec(out, data)?,
        MaxPoolCache { input: d, argmax },
    ))
}

pub fn max_pool_backward<T: Scalar>(
    cache: &MaxPoolCache,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let d = cache.input;
    let g = grad_out.dims();
    ensure!(
        g.n == d.n && g.c == d.c && g.len() == cache.argmax.len(),
        Shape,
        "pool gradient dims {g} do not match cached forward"
    );
    let mut gx = vec![T::zero(); d.len()];
    gx.par_chunks_mut(d.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let gp = grad_out.plane(idx / d.c, idx % d.c);
            let args = &cache.argmax[idx * g.plane()..(idx + 1) * g.plane()];
            for (&a, &v) in args.iter().zip(gp) {
                plane[a as usize] += v;
            }
        });
    Tensor4::from_vec(d, gx)
}

/// Spatial mean per channel, shaped `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    let scale = T::of(1.0 / d.plane() as f64);
    let data = (0..d.n * d.c)
        .map(|idx| {
            let plane = x.plane(idx / d.c, idx % d.c);
            plane.iter().fold(T::zero(), |a, &v| a + v) * scale
        })
        .collect();
    Tensor4::from_vec(Dims::new(d.n, d.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input: Dims,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    ensure!(
        grad_out.dims() == Dims::new(input.n, input.c, 1, 1),
        Shape,
        "pooled gradient dims {} do not match input {input}",
        grad_out.dims()
    );
    let scale = T::of(1.0 / input.plane() as f64);
    let mut gx = Tensor4::zeros(input)?;
    for idx in 0..input.n * input.c {
        let g = grad_out.as_slice()[idx] * scale;
        gx.plane_mut(idx / input.c, idx % input.c).fill(g);
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;

    fn ramp() -> Tensor4<f64> {
        Tensor4::from_vec((1, 1, 4, 4), (0..16).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor4::<f32>::fill((2, 2, 5, 5), -4.0).unwrap();
        let (y, _) = max_pool(&x, &Window::square(3, 2, Padding::Same)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == -4.0));
    }

    #[test]
    fn negative_inputs_ignore_padding() {
        let x = Tensor4::<f32>::fill((1, 1, 4, 4), -1.0).unwrap();
        let (y, _) = max_pool(&x, &Window::square(3, 2, Padding::Same)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn gap_of_ramp() {
        let y = global_avg_pool(&ramp()).unwrap();
        assert_eq!(y.as_slice(), &[7.5]);
        let g = global_avg_pool_backward(ramp().dims(), &Tensor4::fill((1, 1, 1, 1), 2.0).unwrap())
            .unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 2.0 / 16.0));
    }

    #[test]
    fn gradient_goes_to_argmax() {
        let (_, cache) = max_pool(&ramp(), &Window::square(3, 2, Padding::Same)).unwrap();
        let g = max_pool_backward(&cache, &Tensor4::<f64>::ones((1, 1, 2, 2)).unwrap()).unwrap();
        let hot: Vec<usize> = g
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![10, 11, 14, 15]);
    }
}
