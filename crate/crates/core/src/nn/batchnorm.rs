use rayon::prelude::*;

use super::Mode;
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor4};

/// Fixed batch-norm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    /// Running statistics follow `r <- momentum * r + (1 - momentum) * batch`.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            momentum: 0.99,
        }
    }
}

/// Read-only per-channel parameters.
#[derive(Clone, Copy, Debug)]
pub struct BnView<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
}

/// Running statistics that a training-mode forward pass updates.
#[derive(Debug)]
pub struct BnViewMut<'a, T> {
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
}

/// Owned batch-norm state for standalone use.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub config: BatchNormConfig,
}

impl<T: Scalar> BatchNormState<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            config: BatchNormConfig::default(),
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        let view = BnView {
            gamma: &self.gamma,
            beta: &self.beta,
            running_mean: &self.running_mean,
            running_var: &self.running_var,
        };
        let (y, cache, stats) = batch_norm_forward(x, view, &self.config, mode)?;
        if let Some((mean, var)) = stats {
            update_running(
                BnViewMut {
                    running_mean: &mut self.running_mean,
                    running_var: &mut self.running_var,
                },
                &mean,
                &var,
                &self.config,
            );
        }
        Ok((y, cache))
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Batch means and (biased) variances from a training-mode forward pass.
pub type BatchStats<T> = Option<(Vec<T>, Vec<T>)>;

fn channel_stats<T: Scalar>(x: &Tensor4<T>) -> Vec<(f64, f64)> {
    let d = x.dims();
    let count = (d.n * d.plane()) as f64;
    (0..d.c)
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0;
            for n in 0..d.n {
                sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for n in 0..d.n {
                sq += x
                    .plane(n, c)
                    .iter()
                    .map(|v| {
                        let e = v.as_f64() - mean;
                        e * e
                    })
                    .sum::<f64>();
            }
            (mean, sq / count)
        })
        .collect()
}

/// Normalizes each channel over `(n, h, w)` and applies `gamma`/`beta`.
///
/// Train mode uses batch statistics and returns them so the caller can fold
/// them into the running averages with [`update_running`]; Infer mode uses the
/// running statistics. Training on a single value per channel is rejected.
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: BnView<'_, T>,
    config: &BatchNormConfig,
    mode: Mode,
) -> Result<(Tensor4<T>, BatchNormCache<T>, BatchStats<T>)> {
    let d = x.dims();
    ensure!(
        p.gamma.len() == d.c
            && p.beta.len() == d.c
            && p.running_mean.len() == d.c
            && p.running_var.len() == d.c,
        Shape,
        "batch norm has {} channels, input has {}",
        p.gamma.len(),
        d.c
    );
    let (means, vars, stats) = match mode {
        Mode::Train => {
            ensure!(
                d.n * d.plane() > 1,
                Data,
                "degenerate batch: one value per channel in training mode"
            );
            let s = channel_stats(x);
            let means: Vec<f64> = s.iter().map(|v| v.0).collect();
            let vars: Vec<f64> = s.iter().map(|v| v.1).collect();
            let stats = (
                means.iter().map(|&v| T::of(v)).collect(),
                vars.iter().map(|&v| T::of(v)).collect(),
            );
            (means, vars, Some(stats))
        }
        Mode::Infer => (
            p.running_mean.iter().map(|v| v.as_f64()).collect(),
            p.running_var.iter().map(|v| v.as_f64()).collect(),
            None,
        ),
    };
    let inv_std: Vec<T> = vars
        .iter()
        .map(|&v| T::of(1.0 / (v + config.epsilon).sqrt()))
        .collect();
    let means: Vec<T> = means.into_iter().map(T::of).collect();

    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    let p_len = d.plane();
    xhat.as_mut_slice()
        .par_chunks_mut(p_len)
        .zip(y.as_mut_slice().par_chunks_mut(p_len))
        .enumerate()
        .for_each(|(idx, (xh, yp))| {
            let (n, c) = (idx / d.c, idx % d.c);
            let src = x.plane(n, c);
            for ((h, o), &v) in xh.iter_mut().zip(yp.iter_mut()).zip(src) {
                *h = (v - means[c]) * inv_std[c];
                *o = p.gamma[c] * *h + p.beta[c];
            }
        });
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mode,
        },
        stats,
    ))
}

/// Folds batch statistics into the running averages.
pub fn update_running<T: Scalar>(
    r: BnViewMut<'_, T>,
    mean: &[T],
    var: &[T],
    config: &BatchNormConfig,
) {
    let m = T::of(config.momentum);
    let one_m = T::of(1.0 - config.momentum);
    for (rm, &bm) in r.running_mean.iter_mut().zip(mean) {
        *rm = m * *rm + one_m * bm;
    }
    for (rv, &bv) in r.running_var.iter_mut().zip(var) {
        *rv = m * *rv + one_m * bv;
    }
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let d = cache.xhat.dims();
    ensure!(
        grad_out.dims() == d,
        Shape,
        "gradient dims {} do not match {d}",
        grad_out.dims()
    );
    let sums: Vec<(f64, f64)> = (0..d.c)
        .into_par_iter()
        .map(|c| {
            let (mut s, mut sx) = (0.0, 0.0);
            for n in 0..d.n {
                for (&g, &h) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                    s += g.as_f64();
                    sx += (g * h).as_f64();
                }
            }
            (s, sx)
        })
        .collect();
    let count = (d.n * d.plane()) as f64;
    let mut gx = grad_out.zeros_like();
    gx.as_mut_slice()
        .par_chunks_mut(d.plane())
        .enumerate()
        .for_each(|(idx, out)| {
            let (n, c) = (idx / d.c, idx % d.c);
            let scale = gamma[c] * cache.inv_std[c];
            let g = grad_out.plane(n, c);
            match cache.mode {
                Mode::Infer => {
                    for (o, &gv) in out.iter_mut().zip(g) {
                        *o = scale * gv;
                    }
                }
                Mode::Train => {
                    let mean_g = T::of(sums[c].0 / count);
                    let mean_gx = T::of(sums[c].1 / count);
                    for ((o, &gv), &h) in out.iter_mut().zip(g).zip(cache.xhat.plane(n, c)) {
                        *o = scale * (gv - mean_g - h * mean_gx);
                    }
                }
            }
        });
    let ggamma = sums.iter().map(|s| T::of(s.1)).collect();
    let gbeta = sums.iter().map(|s| T::of(s.0)).collect();
    Ok((gx, ggamma, gbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::Rng;

    #[test]
    fn constant_input_gives_beta() {
        let mut bn = BatchNormState::<f64>::new(2);
        bn.beta = vec![0.25, -1.5];
        bn.gamma = vec![3.0, 2.0];
        let x = Tensor4::fill((3, 2, 2, 2), 7.0).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for n in 0..3 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut bn = BatchNormState::<f32>::new(3);
        let x = Tensor4::uniform((4, 3, 5, 5), -3.0, 8.0, &mut Rng::seed(1)).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.plane(n, c).iter().map(|v| *v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            // epsilon = 1e-3 shrinks the variance slightly below 1
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut bn = BatchNormState::<f64>::new(1);
        let x = Tensor4::from_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.02).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-12);
        let before = bn.clone();
        bn.forward(&x, Mode::Infer).unwrap();
        assert_eq!(bn, before);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut bn = BatchNormState::<f64>::new(2);
        let x = Tensor4::zeros((1, 2, 1, 1)).unwrap();
        assert!(matches!(bn.forward(&x, Mode::Train), Err(Error::Data(_))));
        assert!(bn.forward(&x, Mode::Infer).is_ok());
    }
}
