//! Optimizers, step schedules, coupled L2 decay and Polyak averaging.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
}

/// Piecewise-constant decay: `lr0 * factor^floor(t / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    /// `t` is the completed-epoch count.
    Epochs { factor: f64, every: u64 },
    /// `t` is the number of training samples seen.
    Samples { factor: f64, every: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub lr0: f64,
    pub schedule: Schedule,
    /// Coupled L2 coefficient, applied to kernels only.
    pub weight_decay: f64,
    /// RMSprop mean-square decay.
    pub rho: f64,
    /// RMSprop denominator offset.
    pub epsilon: f64,
    pub polyak: bool,
    pub polyak_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::imagenet()
    }
}

impl OptimConfig {
    /// SGD with momentum 0.9, lr 0.045 decayed by 0.94 every 2 epochs.
    pub fn imagenet() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            lr0: 0.045,
            schedule: Schedule::Epochs {
                factor: 0.94,
                every: 2,
            },
            weight_decay: 1e-5,
            rho: 0.9,
            epsilon: 1e-7,
            polyak: true,
            polyak_decay: 0.999,
        }
    }

    /// RMSprop with momentum 0.9, lr 0.001 decayed by 0.9 every 3M samples.
    pub fn jft() -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            lr0: 0.001,
            schedule: Schedule::Samples {
                factor: 0.9,
                every: 3_000_000,
            },
            ..Self::imagenet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr0 > 0.0 && self.lr0.is_finite(),
            Config,
            "learning rate must be > 0, got {}",
            self.lr0
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "momentum must be in [0, 1), got {}",
            self.momentum
        );
        let (factor, every) = match self.schedule {
            Schedule::Epochs { factor, every } | Schedule::Samples { factor, every } => {
                (factor, every)
            }
        };
        ensure!(
            factor > 0.0 && factor <= 1.0,
            Config,
            "decay factor must be in (0, 1], got {factor}"
        );
        ensure!(every >= 1, Config, "decay period must be >= 1");
        ensure!(
            self.weight_decay >= 0.0,
            Config,
            "weight decay must be >= 0, got {}",
            self.weight_decay
        );
        ensure!(
            self.rho > 0.0 && self.rho < 1.0,
            Config,
            "rho must be in (0, 1), got {}",
            self.rho
        );
        ensure!(
            self.epsilon > 0.0,
            Config,
            "epsilon must be > 0, got {}",
            self.epsilon
        );
        ensure!(
            self.polyak_decay > 0.0 && self.polyak_decay < 1.0,
            Config,
            "polyak decay must be in (0, 1), got {}",
            self.polyak_decay
        );
        Ok(())
    }
}

pub fn lr_at(cfg: &OptimConfig, epoch: u64, samples_seen: u64) -> f64 {
    let (factor, k) = match cfg.schedule {
        Schedule::Epochs { factor, every } => (factor, epoch / every),
        Schedule::Samples { factor, every } => (factor, samples_seen / every),
    };
    cfg.lr0 * factor.powi(k.min(i32::MAX as u64) as i32)
}

fn check_len(lens: &[usize]) -> Result<()> {
    ensure!(
        lens.windows(2).all(|w| w[0] == w[1]),
        Shape,
        "optimizer buffer lengths differ: {lens:?}"
    );
    Ok(())
}

/// `g' = g + decay*w; v = momentum*v - lr*g'; w = w + v`.
pub fn sgd_momentum_step<T: Scalar>(
    w: &mut [T],
    g: &[T],
    v: &mut [T],
    lr: f64,
    momentum: f64,
    decay: f64,
) -> Result<()> {
    check_len(&[w.len(), g.len(), v.len()])?;
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let gd = g.as_f64() + decay * w.as_f64();
        let nv = momentum * v.as_f64() - lr * gd;
        *v = T::of(nv);
        *w = T::of(w.as_f64() + nv);
    }
    Ok(())
}

/// `g' = g + decay*w; s = rho*s + (1-rho)*g'^2; v = momentum*v - lr*g'/sqrt(s+eps); w = w + v`.
#[allow(clippy::too_many_arguments)]
pub fn rmsprop_step<T: Scalar>(
    w: &mut [T],
    g: &[T],
    s: &mut [T],
    v: &mut [T],
    lr: f64,
    momentum: f64,
    rho: f64,
    epsilon: f64,
    decay: f64,
) -> Result<()> {
    check_len(&[w.len(), g.len(), s.len(), v.len()])?;
    for (((w, &g), s), v) in w.iter_mut().zip(g).zip(s.iter_mut()).zip(v.iter_mut()) {
        let gd = g.as_f64() + decay * w.as_f64();
        let ns = rho * s.as_f64() + (1.0 - rho) * gd * gd;
        let nv = momentum * v.as_f64() - lr * gd / (ns + epsilon).sqrt();
        *s = T::of(ns);
        *v = T::of(nv);
        *w = T::of(w.as_f64() + nv);
    }
    Ok(())
}

/// `shadow = beta*shadow + (1-beta)*w`.
pub fn polyak_update<T: Scalar>(shadow: &mut [T], w: &[T], beta: f64) -> Result<()> {
    check_len(&[shadow.len(), w.len()])?;
    for (s, &w) in shadow.iter_mut().zip(w) {
        *s = T::of(beta * s.as_f64() + (1.0 - beta) * w.as_f64());
    }
    Ok(())
}

/// Auxiliary buffers for one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState<T: Scalar = f32> {
    /// Index into the parameter store.
    pub id: usize,
    pub velocity: Tensor4<T>,
    /// RMSprop only.
    pub mean_square: Option<Tensor4<T>>,
    /// Present when Polyak averaging is on.
    pub shadow: Option<Tensor4<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Scalar = f32> {
    pub slots: Vec<SlotState<T>>,
    pub step: u64,
    pub samples_seen: u64,
}

impl<T: Scalar> OptimState<T> {
    /// Zero buffers for every trainable tensor; the shadow starts at the
    /// current weights.
    pub fn new(cfg: &OptimConfig, store: &ParamStore<T>) -> Self {
        let slots = store
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| SlotState {
                id,
                velocity: p.value.zeros_like(),
                mean_square: (cfg.kind == OptimizerKind::Rmsprop).then(|| p.value.zeros_like()),
                shadow: cfg.polyak.then(|| p.value.clone()),
            })
            .collect();
        Self {
            slots,
            step: 0,
            samples_seen: 0,
        }
    }

    /// Every buffer with a stable name derived from its parameter.
    pub fn named(&self, store: &ParamStore<T>) -> Vec<(String, &Tensor4<T>)> {
        let mut out = Vec::new();
        for s in &self.slots {
            let base = &store.param(s.id).name;
            out.push((format!("{base}@velocity"), &s.velocity));
            if let Some(m) = &s.mean_square {
                out.push((format!("{base}@mean_square"), m));
            }
            if let Some(m) = &s.shadow {
                out.push((format!("{base}@shadow"), m));
            }
        }
        out
    }

    pub fn named_mut(&mut self, store: &ParamStore<T>) -> Vec<(String, &mut Tensor4<T>)> {
        let mut out = Vec::new();
        for s in &mut self.slots {
            let base = &store.param(s.id).name;
            out.push((format!("{base}@velocity"), &mut s.velocity));
            if let Some(m) = &mut s.mean_square {
                out.push((format!("{base}@mean_square"), m));
            }
            if let Some(m) = &mut s.shadow {
                out.push((format!("{base}@shadow"), m));
            }
        }
        out
    }

    /// Errors unless every buffer has its parameter's dims.
    pub fn check_mirrors(&self, store: &ParamStore<T>) -> Result<()> {
        for s in &self.slots {
            let d = store.dims_of(s.id);
            let ok = s.velocity.dims() == d
                && s.mean_square.as_ref().is_none_or(|m| m.dims() == d)
                && s.shadow.as_ref().is_none_or(|m| m.dims() == d);
            ensure!(
                ok,
                Shape,
                "optimizer state for `{}` does not mirror {d}",
                store.param(s.id).name
            );
        }
        Ok(())
    }
}

/// An optimizer configuration together with its state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Scalar = f32> {
    pub config: OptimConfig,
    pub state: OptimState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimState::new(&config, store),
        })
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        lr_at(&self.config, epoch, self.state.samples_seen)
    }

    /// One update of every trainable tensor, then the Polyak shadow.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Grads<T>,
        lr: f64,
        batch: usize,
    ) -> Result<()> {
        ensure!(
            grads.len() == store.len(),
            Shape,
            "{} gradients for {} tensors",
            grads.len(),
            store.len()
        );
        let c = self.config;
        for s in &mut self.state.slots {
            let p = store.param(s.id);
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let g = grads[s.id].as_slice();
            let w = store.value_mut(s.id).as_mut_slice();
            match (&c.kind, &mut s.mean_square) {
                (OptimizerKind::Sgd, _) => {
                    sgd_momentum_step(w, g, s.velocity.as_mut_slice(), lr, c.momentum, decay)?
                }
                (OptimizerKind::Rmsprop, Some(ms)) => rmsprop_step(
                    w,
                    g,
                    ms.as_mut_slice(),
                    s.velocity.as_mut_slice(),
                    lr,
                    c.momentum,
                    c.rho,
                    c.epsilon,
                    decay,
                )?,
                (OptimizerKind::Rmsprop, None) => {
                    unreachable!("rmsprop state allocates mean squares")
                }
            }
            if let Some(sh) = &mut s.shadow {
                polyak_update(
                    sh.as_mut_slice(),
                    store.value(s.id).as_slice(),
                    c.polyak_decay,
                )?;
            }
        }
        self.state.step += 1;
        self.state.samples_seen += batch as u64;
        Ok(())
    }

    /// Weights used for evaluation: the Polyak shadow where present, live
    /// values otherwise (including running statistics).
    pub fn eval_weights(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        for s in &self.state.slots {
            if let Some(sh) = &s.shadow {
                *out.value_mut(s.id) = sh.clone();
            }
        }
        out
    }
}

/// Evaluation view of `store` under `opt`'s Polyak shadow.
pub fn polyak_swap_for_eval<T: Scalar>(opt: &Optimizer<T>, store: &ParamStore<T>) -> ParamStore<T> {
    opt.eval_weights(store)
}
