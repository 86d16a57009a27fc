//! Executable models compiled from an [`ArchSpec`].
//!
//! [`Model`] owns only structure. All weights and running statistics live in
//! a [`ParamStore`], so the same model can run live weights, a Polyak shadow
//! or an `f64` copy for gradient checks.

mod params;

pub use params::{Param, ParamStore};

use crate::activation::Activation;
use crate::arch::{ArchSpec, Node, Shape3, Shortcut};
use crate::conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, grouped_conv2d,
    grouped_conv2d_backward, ConvGeometry, Padding, Window,
};
use crate::error::{ensure, Result};
use crate::nn::{
    batch_norm_backward, batch_norm_forward, dense, dense_backward, dropout, dropout_backward,
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, update_running,
    BatchNormCache, BatchNormConfig, BnView, BnViewMut, MaxPoolCache, Mode,
};
use crate::rng::Rng;
use crate::tensor::{Dims, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    name: String,
    dims: Dims,
    trainable: bool,
    decay: bool,
    init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIds {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        geom: ConvGeometry,
        kernel: usize,
    },
    SepConv {
        depthwise: ConvGeometry,
        pointwise: ConvGeometry,
        multiplier: usize,
        activation: Activation,
        dw: usize,
        pw: usize,
    },
    Depthwise {
        geom: ConvGeometry,
        multiplier: usize,
        kernel: usize,
    },
    SegConv {
        geom: ConvGeometry,
        kernels: Vec<usize>,
    },
    Spectrum {
        pointwise: ConvGeometry,
        spatial: ConvGeometry,
        pw: usize,
        kernels: Vec<usize>,
    },
    BatchNorm(BnIds),
    Act(Activation),
    MaxPool(Window),
    GlobalAvgPool,
    Dropout(f64),
    Dense {
        weight: usize,
        bias: usize,
    },
    Block {
        body: Vec<Layer>,
        shortcut: ShortcutLayer,
    },
    Towers(Vec<Vec<Layer>>),
}

#[derive(Clone, Debug, PartialEq)]
enum ShortcutLayer {
    None,
    Identity,
    Projection {
        geom: ConvGeometry,
        kernel: usize,
        bn: BnIds,
    },
}

enum Cache<T: Scalar> {
    Input(Tensor4<T>),
    SepConv {
        x: Tensor4<T>,
        mid: Tensor4<T>,
    },
    Spectrum {
        x: Tensor4<T>,
        mid: Tensor4<T>,
    },
    BatchNorm(BatchNormCache<T>),
    MaxPool(MaxPoolCache),
    GlobalAvgPool(Dims),
    Dropout(Option<Tensor4<T>>),
    Block {
        body: Vec<Cache<T>>,
        shortcut: Option<(Tensor4<T>, BatchNormCache<T>)>,
    },
    Towers {
        towers: Vec<Vec<Cache<T>>>,
        widths: Vec<usize>,
    },
}

struct StatUpdate<T> {
    bn: BnIds,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Everything a forward pass leaves behind for the backward pass and for
/// folding batch statistics into the running averages.
pub struct Tape<T: Scalar> {
    caches: Vec<Cache<T>>,
    stats: Vec<StatUpdate<T>>,
}

/// Gradients aligned index by index with a [`ParamStore`]; slots of
/// non-trainable entries stay zero.
pub type Grads<T> = Vec<Tensor4<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchSpec,
    layers: Vec<Layer>,
    slots: Vec<Slot>,
    bn: BatchNormConfig,
}

struct Compiler {
    slots: Vec<Slot>,
}

impl Compiler {
    fn add(&mut self, name: String, dims: Dims, trainable: bool, decay: bool, init: Init) -> usize {
        self.slots.push(Slot {
            name,
            dims,
            trainable,
            decay,
            init,
        });
        self.slots.len() - 1
    }

    fn kernel(&mut self, name: String, dims: Dims, fan_in: usize, fan_out: usize) -> usize {
        self.add(name, dims, true, true, Init::Glorot { fan_in, fan_out })
    }

    fn bn(&mut self, path: &str, c: usize) -> BnIds {
        let d = Dims::new(1, c, 1, 1);
        BnIds {
            gamma: self.add(format!("{path}.gamma"), d, true, false, Init::Ones),
            beta: self.add(format!("{path}.beta"), d, true, false, Init::Zeros),
            mean: self.add(format!("{path}.mean"), d, false, false, Init::Zeros),
            var: self.add(format!("{path}.var"), d, false, false, Init::Ones),
        }
    }

    fn chain(
        &mut self,
        nodes: &[Node],
        path: Option<&str>,
        mut s: Shape3,
    ) -> Result<(Vec<Layer>, Shape3)> {
        let mut layers = Vec::with_capacity(nodes.len());
        for (j, node) in nodes.iter().enumerate() {
            let here = match (node, path) {
                (Node::Block { name, .. }, None) => name.clone(),
                (Node::Block { name, .. }, Some(p)) => format!("{p}.{name}"),
                (_, None) => j.to_string(),
                (_, Some(p)) => format!("{p}.{j}"),
            };
            let out = node.output_shape(s)?;
            layers.push(self.node(node, &here, s)?);
            s = out;
        }
        Ok((layers, s))
    }

    fn node(&mut self, node: &Node, path: &str, s: Shape3) -> Result<Layer> {
        Ok(match node {
            &Node::Conv {
                in_c,
                out_c,
                kernel,
                stride,
                padding,
            } => {
                let geom = ConvGeometry::new(in_c, out_c, kernel, stride, padding);
                let k2 = kernel * kernel;
                Layer::Conv {
                    geom,
                    kernel: self.kernel(
                        format!("{path}.kernel"),
                        geom.kernel_dims(),
                        in_c * k2,
                        out_c * k2,
                    ),
                }
            }
            &Node::SepConv {
                in_c,
                out_c,
                kernel,
                stride,
                padding,
                multiplier,
                activation,
            } => {
                let mid = in_c * multiplier;
                let k2 = kernel * kernel;
                let depthwise = ConvGeometry::new(in_c, mid, kernel, stride, padding);
                let pointwise = ConvGeometry::pointwise(mid, out_c);
                let dw = self.kernel(
                    format!("{path}.depthwise"),
                    Dims::new(1, mid, kernel, kernel),
                    k2,
                    k2 * multiplier,
                );
                let pw = self.kernel(
                    format!("{path}.pointwise"),
                    pointwise.kernel_dims(),
                    mid,
                    out_c,
                );
                Layer::SepConv {
                    depthwise,
                    pointwise,
                    multiplier,
                    activation,
                    dw,
                    pw,
                }
            }
            &Node::Depthwise {
                channels,
                multiplier,
                kernel,
                stride,
                padding,
            } => {
                let k2 = kernel * kernel;
                let geom =
                    ConvGeometry::new(channels, channels * multiplier, kernel, stride, padding);
                Layer::Depthwise {
                    geom,
                    multiplier,
                    kernel: self.kernel(
                        format!("{path}.kernel"),
                        Dims::new(1, channels * multiplier, kernel, kernel),
                        k2,
                        k2 * multiplier,
                    ),
                }
            }
            Node::SegConv {
                segments,
                kernel,
                stride,
                padding,
            } => {
                let geom = ConvGeometry::new(s.c, s.c, *kernel, *stride, *padding);
                let kernels = self.segments(path, segments, *kernel);
                Layer::SegConv { geom, kernels }
            }
            &Node::Spectrum {
                in_c,
                mid,
                segments,
                kernel,
                stride,
                padding,
            } => {
                let pointwise = ConvGeometry::pointwise(in_c, mid);
                let pw = self.kernel(
                    format!("{path}.pointwise"),
                    pointwise.kernel_dims(),
                    in_c,
                    mid,
                );
                let widths = vec![mid / segments; segments];
                Layer::Spectrum {
                    pointwise,
                    spatial: ConvGeometry::new(mid, mid, kernel, stride, padding),
                    pw,
                    kernels: self.segments(path, &widths, kernel),
                }
            }
            &Node::BatchNorm { channels } => Layer::BatchNorm(self.bn(path, channels)),
            &Node::Act(a) => Layer::Act(a),
            &Node::MaxPool {
                kernel,
                stride,
                padding,
            } => Layer::MaxPool(Window::square(kernel, stride, padding)),
            Node::GlobalAvgPool => Layer::GlobalAvgPool,
            &Node::Dropout { rate } => Layer::Dropout(rate),
            &Node::Dense { in_f, out_f } => Layer::Dense {
                weight: self.kernel(
                    format!("{path}.weight"),
                    Dims::new(out_f, in_f, 1, 1),
                    in_f,
                    out_f,
                ),
                bias: self.add(
                    format!("{path}.bias"),
                    Dims::new(1, out_f, 1, 1),
                    true,
                    false,
                    Init::Zeros,
                ),
            },
            Node::Block { body, shortcut, .. } => {
                let (body, _) = self.chain(body, Some(path), s)?;
                let shortcut = match shortcut {
                    Shortcut::None => ShortcutLayer::None,
                    Shortcut::Identity => ShortcutLayer::Identity,
                    &Shortcut::Projection { out, stride } => {
                        let geom = ConvGeometry::new(s.c, out, 1, stride, Padding::Same);
                        ShortcutLayer::Projection {
                            geom,
                            kernel: self.kernel(
                                format!("{path}.shortcut.conv.kernel"),
                                geom.kernel_dims(),
                                s.c,
                                out,
                            ),
                            bn: self.bn(&format!("{path}.shortcut.bn"), out),
                        }
                    }
                };
                Layer::Block { body, shortcut }
            }
            Node::Towers(towers) => {
                let mut out = Vec::with_capacity(towers.len());
                for (k, t) in towers.iter().enumerate() {
                    out.push(self.chain(t, Some(&format!("{path}.t{k}")), s)?.0);
                }
                Layer::Towers(out)
            }
        })
    }

    fn segments(&mut self, path: &str, widths: &[usize], kernel: usize) -> Vec<usize> {
        let k2 = kernel * kernel;
        widths
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                self.kernel(
                    format!("{path}.seg{i}"),
                    Dims::new(t, t, kernel, kernel),
                    t * k2,
                    t * k2,
                )
            })
            .collect()
    }
}

struct Ctx<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    mode: Mode,
    rng: &'a mut Rng,
    bn: &'a BatchNormConfig,
    stats: Vec<StatUpdate<T>>,
}

fn bn_view<T: Scalar>(store: &ParamStore<T>, ids: BnIds) -> BnView<'_, T> {
    BnView {
        gamma: store.value(ids.gamma).as_slice(),
        beta: store.value(ids.beta).as_slice(),
        running_mean: store.value(ids.mean).as_slice(),
        running_var: store.value(ids.var).as_slice(),
    }
}

fn accumulate<T: Scalar>(grads: &mut Grads<T>, id: usize, g: Tensor4<T>) -> Result<()> {
    grads[id].add_assign(&g)
}

impl Model {
    pub fn new(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut c = Compiler { slots: Vec::new() };
        let (layers, _) = c.chain(&spec.nodes, None, spec.input)?;
        Ok(Self {
            spec: spec.clone(),
            layers,
            slots: c.slots,
            bn: BatchNormConfig::default(),
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn batch_norm_config(&self) -> BatchNormConfig {
        self.bn
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Glorot-uniform kernels, zero shifts and biases, unit scales, running
    /// mean 0 and variance 1. Draws follow parameter order.
    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for s in &self.slots {
            let value = match s.init {
                Init::Glorot { fan_in, fan_out } => {
                    Tensor4::glorot_uniform(s.dims, fan_in, fan_out, rng)?
                }
                Init::Zeros => Tensor4::zeros(s.dims)?,
                Init::Ones => Tensor4::ones(s.dims)?,
            };
            store.push(s.name.clone(), value, s.trainable, s.decay)?;
        }
        Ok(store)
    }

    /// Errors unless `store` has exactly this model's layout.
    pub fn check_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        ensure!(
            store.len() == self.slots.len(),
            Shape,
            "store holds {} tensors, model needs {}",
            store.len(),
            self.slots.len()
        );
        for (s, p) in self.slots.iter().zip(store.iter()) {
            ensure!(
                s.name == p.name && s.dims == p.value.dims() && s.trainable == p.trainable,
                Shape,
                "tensor `{}` {} does not match expected `{}` {}",
                p.name,
                p.value.dims(),
                s.name,
                s.dims
            );
        }
        Ok(())
    }

    pub fn zero_grads<T: Scalar>(&self) -> Grads<T> {
        self.slots
            .iter()
            .map(|s| Tensor4::zeros(s.dims).expect("layout dims are valid"))
            .collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor4<T>, Tape<T>)> {
        self.check_store(store)?;
        let d = x.dims();
        let s = self.spec.input;
        ensure!(
            (d.c, d.h, d.w) == (s.c, s.h, s.w),
            Shape,
            "input {d} does not match model input {s}"
        );
        let mut ctx = Ctx {
            store,
            mode,
            rng,
            bn: &self.bn,
            stats: Vec::new(),
        };
        let (y, caches) = run_chain(&self.layers, x.clone(), &mut ctx)?;
        Ok((
            y,
            Tape {
                caches,
                stats: ctx.stats,
            },
        ))
    }

    /// Inference-mode forward pass without keeping a tape.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut rng = Rng::seed(0);
        Ok(self.forward(store, x, Mode::Infer, &mut rng)?.0)
    }

    /// Folds the batch statistics recorded on `tape` into the running averages.
    pub fn commit_stats<T: Scalar>(&self, store: &mut ParamStore<T>, tape: &Tape<T>) {
        for u in &tape.stats {
            let (mean, var) = store.pair_mut(u.bn.mean, u.bn.var);
            update_running(
                BnViewMut {
                    running_mean: mean.as_mut_slice(),
                    running_var: var.as_mut_slice(),
                },
                &u.mean,
                &u.var,
                &self.bn,
            );
        }
    }

    /// Returns the input gradient and per-parameter gradients.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: Tape<T>,
        grad_out: Tensor4<T>,
    ) -> Result<(Tensor4<T>, Grads<T>)> {
        self.check_store(store)?;
        let mut grads = self.zero_grads();
        let gx = back_chain(&self.layers, tape.caches, grad_out, store, &mut grads)?;
        Ok((gx, grads))
    }
}

fn run_chain<T: Scalar>(
    layers: &[Layer],
    mut x: Tensor4<T>,
    ctx: &mut Ctx<'_, T>,
) -> Result<(Tensor4<T>, Vec<Cache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, c) = run_layer(layer, x, ctx)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

fn run_bn<T: Scalar>(
    ids: BnIds,
    x: &Tensor4<T>,
    ctx: &mut Ctx<'_, T>,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let (y, cache, stats) = batch_norm_forward(x, bn_view(ctx.store, ids), ctx.bn, ctx.mode)?;
    if let Some((mean, var)) = stats {
        ctx.stats.push(StatUpdate { bn: ids, mean, var });
    }
    Ok((y, cache))
}

fn run_layer<T: Scalar>(
    layer: &Layer,
    x: Tensor4<T>,
    ctx: &mut Ctx<'_, T>,
) -> Result<(Tensor4<T>, Cache<T>)> {
    let p = ctx.store;
    Ok(match layer {
        Layer::Conv { geom, kernel } => (conv2d(&x, p.value(*kernel), geom)?, Cache::Input(x)),
        Layer::SepConv {
            depthwise,
            pointwise,
            multiplier,
            activation,
            dw,
            pw,
        } => {
            let mid = depthwise_conv2d(&x, p.value(*dw), depthwise, *multiplier)?;
            let y = conv2d(&activation.apply(&mid), p.value(*pw), pointwise)?;
            (y, Cache::SepConv { x, mid })
        }
        Layer::Depthwise {
            geom,
            multiplier,
            kernel,
        } => (
            depthwise_conv2d(&x, p.value(*kernel), geom, *multiplier)?,
            Cache::Input(x),
        ),
        Layer::SegConv { geom, kernels } => {
            let ks: Vec<Tensor4<T>> = kernels.iter().map(|&k| p.value(k).clone()).collect();
            (grouped_conv2d(&x, &ks, geom)?, Cache::Input(x))
        }
        Layer::Spectrum {
            pointwise,
            spatial,
            pw,
            kernels,
        } => {
            let mid = conv2d(&x, p.value(*pw), pointwise)?;
            let ks: Vec<Tensor4<T>> = kernels.iter().map(|&k| p.value(k).clone()).collect();
            (
                grouped_conv2d(&mid, &ks, spatial)?,
                Cache::Spectrum { x, mid },
            )
        }
        Layer::BatchNorm(ids) => {
            let (y, c) = run_bn(*ids, &x, ctx)?;
            (y, Cache::BatchNorm(c))
        }
        Layer::Act(a) => (a.apply(&x), Cache::Input(x)),
        Layer::MaxPool(w) => {
            let (y, c) = max_pool(&x, w)?;
            (y, Cache::MaxPool(c))
        }
        Layer::GlobalAvgPool => (global_avg_pool(&x)?, Cache::GlobalAvgPool(x.dims())),
        Layer::Dropout(rate) => {
            let (y, mask) = dropout(&x, *rate, ctx.rng, ctx.mode)?;
            (y, Cache::Dropout(mask))
        }
        Layer::Dense { weight, bias } => (
            dense(&x, p.value(*weight), p.value(*bias))?,
            Cache::Input(x),
        ),
        Layer::Block { body, shortcut } => {
            let (short, sc) = match shortcut {
                ShortcutLayer::None => (None, None),
                ShortcutLayer::Identity => (Some(x.clone()), None),
                ShortcutLayer::Projection { geom, kernel, bn } => {
                    let z = conv2d(&x, p.value(*kernel), geom)?;
                    let (y, c) = run_bn(*bn, &z, ctx)?;
                    (Some(y), Some((x.clone(), c)))
                }
            };
            let (mut y, caches) = run_chain(body, x, ctx)?;
            if let Some(s) = short {
                y.add_assign(&s)?;
            }
            (
                y,
                Cache::Block {
                    body: caches,
                    shortcut: sc,
                },
            )
        }
        Layer::Towers(towers) => {
            let mut outs = Vec::with_capacity(towers.len());
            let mut caches = Vec::with_capacity(towers.len());
            for t in towers {
                let (y, c) = run_chain(t, x.clone(), ctx)?;
                outs.push(y);
                caches.push(c);
            }
            let widths = outs.iter().map(|y| y.dims().c).collect();
            (
                Tensor4::concat_channels(&outs.iter().collect::<Vec<_>>())?,
                Cache::Towers {
                    towers: caches,
                    widths,
                },
            )
        }
    })
}

fn back_chain<T: Scalar>(
    layers: &[Layer],
    caches: Vec<Cache<T>>,
    mut g: Tensor4<T>,
    store: &ParamStore<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor4<T>> {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = back_layer(layer, cache, g, store, grads)?;
    }
    Ok(g)
}

fn back_layer<T: Scalar>(
    layer: &Layer,
    cache: Cache<T>,
    g: Tensor4<T>,
    p: &ParamStore<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor4<T>> {
    match (layer, cache) {
        (Layer::Conv { geom, kernel }, Cache::Input(x)) => {
            let (gx, gk) = conv2d_backward(&x, p.value(*kernel), geom, &g)?;
            accumulate(grads, *kernel, gk)?;
            Ok(gx)
        }
        (
            Layer::SepConv {
                depthwise,
                pointwise,
                multiplier,
                activation,
                dw,
                pw,
            },
            Cache::SepConv { x, mid },
        ) => {
            let a = activation.apply(&mid);
            let (ga, gpw) = conv2d_backward(&a, p.value(*pw), pointwise, &g)?;
            drop(a);
            let gmid = activation.backward(&mid, &ga);
            let (gx, gdw) =
                depthwise_conv2d_backward(&x, p.value(*dw), depthwise, *multiplier, &gmid)?;
            accumulate(grads, *pw, gpw)?;
            accumulate(grads, *dw, gdw)?;
            Ok(gx)
        }
        (
            Layer::Depthwise {
                geom,
                multiplier,
                kernel,
            },
            Cache::Input(x),
        ) => {
            let (gx, gk) = depthwise_conv2d_backward(&x, p.value(*kernel), geom, *multiplier, &g)?;
            accumulate(grads, *kernel, gk)?;
            Ok(gx)
        }
        (Layer::SegConv { geom, kernels }, Cache::Input(x)) => {
            let ks: Vec<Tensor4<T>> = kernels.iter().map(|&k| p.value(k).clone()).collect();
            let (gx, gks) = grouped_conv2d_backward(&x, &ks, geom, &g)?;
            for (&id, gk) in kernels.iter().zip(gks) {
                accumulate(grads, id, gk)?;
            }
            Ok(gx)
        }
        (
            Layer::Spectrum {
                pointwise,
                spatial,
                pw,
                kernels,
            },
            Cache::Spectrum { x, mid },
        ) => {
            let ks: Vec<Tensor4<T>> = kernels.iter().map(|&k| p.value(k).clone()).collect();
            let (gmid, gks) = grouped_conv2d_backward(&mid, &ks, spatial, &g)?;
            for (&id, gk) in kernels.iter().zip(gks) {
                accumulate(grads, id, gk)?;
            }
            let (gx, gpw) = conv2d_backward(&x, p.value(*pw), pointwise, &gmid)?;
            accumulate(grads, *pw, gpw)?;
            Ok(gx)
        }
        (Layer::BatchNorm(ids), Cache::BatchNorm(c)) => back_bn(*ids, &c, &g, p, grads),
        (Layer::Act(a), Cache::Input(x)) => Ok(a.backward(&x, &g)),
        (Layer::MaxPool(_), Cache::MaxPool(c)) => max_pool_backward(&c, &g),
        (Layer::GlobalAvgPool, Cache::GlobalAvgPool(d)) => global_avg_pool_backward(d, &g),
        (Layer::Dropout(_), Cache::Dropout(mask)) => dropout_backward(mask.as_ref(), &g),
        (Layer::Dense { weight, bias }, Cache::Input(x)) => {
            let (gx, gw, gb) = dense_backward(&x, p.value(*weight), p.value(*bias), &g)?;
            accumulate(grads, *weight, gw)?;
            accumulate(grads, *bias, gb)?;
            Ok(gx)
        }
        (
            Layer::Block { body, shortcut },
            Cache::Block {
                body: caches,
                shortcut: sc,
            },
        ) => {
            let short = match (shortcut, sc) {
                (ShortcutLayer::None, _) => None,
                (ShortcutLayer::Identity, _) => Some(g.clone()),
                (ShortcutLayer::Projection { geom, kernel, bn }, Some((x, c))) => {
                    let gz = back_bn(*bn, &c, &g, p, grads)?;
                    let (gx, gk) = conv2d_backward(&x, p.value(*kernel), geom, &gz)?;
                    accumulate(grads, *kernel, gk)?;
                    Some(gx)
                }
                (ShortcutLayer::Projection { .. }, None) => {
                    unreachable!("projection cache recorded in forward")
                }
            };
            let mut gx = back_chain(body, caches, g, p, grads)?;
            if let Some(s) = short {
                gx.add_assign(&s)?;
            }
            Ok(gx)
        }
        (
            Layer::Towers(towers),
            Cache::Towers {
                towers: caches,
                widths,
            },
        ) => {
            let mut gx: Option<Tensor4<T>> = None;
            let mut start = 0;
            for ((t, c), w) in towers.iter().zip(caches).zip(widths) {
                let gt = back_chain(t, c, g.slice_channels(start, w)?, p, grads)?;
                start += w;
                match gx.as_mut() {
                    Some(acc) => acc.add_assign(&gt)?,
                    None => gx = Some(gt),
                }
            }
            Ok(gx.expect("towers are non-empty"))
        }
        _ => unreachable!("cache variant always matches its layer"),
    }
}

fn back_bn<T: Scalar>(
    ids: BnIds,
    cache: &BatchNormCache<T>,
    g: &Tensor4<T>,
    p: &ParamStore<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor4<T>> {
    let (gx, gg, gb) = batch_norm_backward(cache, p.value(ids.gamma).as_slice(), g)?;
    let d = Dims::new(1, gg.len(), 1, 1);
    accumulate(grads, ids.gamma, Tensor4::from_vec(d, gg)?)?;
    accumulate(grads, ids.beta, Tensor4::from_vec(d, gb)?)?;
    Ok(gx)
}
