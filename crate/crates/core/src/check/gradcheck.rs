use std::fmt;
use std::str::FromStr;

use crate::activation::Activation;
use crate::arch::{ArchOptions, ArchSpec, Node, Shape3, Shortcut};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::nn::{sigmoid_cross_entropy, softmax_cross_entropy, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Layer families covered by [`run`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    All,
    Conv,
    Sepconv,
    Bn,
    Dense,
    Pool,
    Residual,
}

impl LayerKind {
    pub const NAMES: [&'static str; 7] =
        ["all", "conv", "sepconv", "bn", "dense", "pool", "residual"];
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "conv" => Self::Conv,
            "sepconv" => Self::Sepconv,
            "bn" => Self::Bn,
            "dense" => Self::Dense,
            "pool" => Self::Pool,
            "residual" => Self::Residual,
            other => return Err(Error::Config(format!("unknown layer `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Fixed random linear functional of the output.
    Linear,
    Softmax,
    Sigmoid,
}

/// One small model checked end to end.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub spec: ArchSpec,
    pub batch: usize,
    pub mode: Mode,
    pub objective: Objective,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries sampled per tensor; smaller tensors are checked exhaustively.
    pub max_entries: usize,
    pub tolerance: f64,
    /// Scales analytic gradients by `1 + fault` to exercise the failure path.
    pub fault: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries: 48,
            tolerance: 1e-4,
            fault: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub worst: f64,
    /// Flat index of the worst entry.
    pub index: usize,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case: String,
    pub tensors: Vec<TensorCheck>,
}

impl CaseReport {
    pub fn worst(&self) -> &TensorCheck {
        self.tensors
            .iter()
            .max_by(|a, b| a.worst.total_cmp(&b.worst))
            .expect("every case checks at least the input")
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst().worst < tolerance
    }
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.worst();
        write!(
            f,
            "{} worst_rel_err={:.3e} at {}[{}]",
            self.case, w.worst, w.name, w.index
        )
    }
}

fn spec(name: &str, input: Shape3, nodes: Vec<Node>) -> ArchSpec {
    ArchSpec {
        name: name.into(),
        input,
        num_classes: None,
        options: ArchOptions::default(),
        nodes,
    }
}

fn case(name: &str, input: Shape3, nodes: Vec<Node>, mode: Mode, objective: Objective) -> GradCase {
    GradCase {
        name: name.into(),
        spec: spec(name, input, nodes),
        batch: 2,
        mode,
        objective,
    }
}

/// The fixed set of small models for a layer family.
pub fn cases(kind: LayerKind) -> Vec<GradCase> {
    use Objective::Linear;
    let s = Shape3::new;
    let mut out = Vec::new();
    let want = |k: LayerKind| kind == LayerKind::All || kind == k;
    if want(LayerKind::Conv) {
        out.extend([
            case(
                "conv3x3_same",
                s(3, 5, 5),
                vec![Node::conv(3, 4, 3, 1, Padding::Same)],
                Mode::Train,
                Linear,
            ),
            case(
                "conv3x3_s2_valid",
                s(2, 6, 6),
                vec![Node::conv(2, 3, 3, 2, Padding::Valid)],
                Mode::Train,
                Linear,
            ),
            case(
                "conv5x5_s2_same",
                s(2, 6, 5),
                vec![Node::conv(2, 2, 5, 2, Padding::Same)],
                Mode::Train,
                Linear,
            ),
            case(
                "conv1x1",
                s(4, 3, 3),
                vec![Node::conv(4, 3, 1, 1, Padding::Same)],
                Mode::Train,
                Linear,
            ),
            case(
                "depthwise_m2_s2",
                s(3, 6, 6),
                vec![Node::Depthwise {
                    channels: 3,
                    multiplier: 2,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Same,
                }],
                Mode::Train,
                Linear,
            ),
            case(
                "segconv",
                s(5, 5, 5),
                vec![Node::SegConv {
                    segments: vec![2, 3],
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                }],
                Mode::Train,
                Linear,
            ),
            case(
                "spectrum_g2",
                s(3, 6, 6),
                vec![Node::Spectrum {
                    in_c: 3,
                    mid: 4,
                    segments: 2,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Valid,
                }],
                Mode::Train,
                Linear,
            ),
        ]);
    }
    if want(LayerKind::Sepconv) {
        for act in [Activation::Identity, Activation::Relu, Activation::Elu] {
            out.push(case(
                &format!("sepconv_{act}"),
                s(3, 5, 5),
                vec![Node::sepconv(3, 4, act)],
                Mode::Train,
                Linear,
            ));
        }
        out.push(case(
            "sepconv_m2_s2_valid",
            s(2, 6, 6),
            vec![Node::SepConv {
                in_c: 2,
                out_c: 3,
                kernel: 3,
                stride: 2,
                padding: Padding::Valid,
                multiplier: 2,
                activation: Activation::Identity,
            }],
            Mode::Train,
            Linear,
        ));
    }
    if want(LayerKind::Bn) {
        out.extend([
            case(
                "bn_train",
                s(3, 3, 3),
                vec![Node::bn(3)],
                Mode::Train,
                Linear,
            ),
            case(
                "conv_bn_relu_train",
                s(2, 4, 4),
                vec![
                    Node::conv(2, 3, 3, 1, Padding::Same),
                    Node::bn(3),
                    Node::relu(),
                ],
                Mode::Train,
                Linear,
            ),
            case(
                "bn_infer",
                s(3, 3, 3),
                vec![Node::bn(3)],
                Mode::Infer,
                Linear,
            ),
        ]);
    }
    if want(LayerKind::Dense) {
        out.extend([
            case(
                "dense_softmax_ce",
                s(6, 1, 1),
                vec![Node::Dense { in_f: 6, out_f: 4 }],
                Mode::Train,
                Objective::Softmax,
            ),
            case(
                "gap_dropout_dense_sigmoid_ce",
                s(4, 3, 3),
                vec![
                    Node::GlobalAvgPool,
                    Node::Dropout { rate: 0.3 },
                    Node::Dense { in_f: 4, out_f: 3 },
                ],
                Mode::Train,
                Objective::Sigmoid,
            ),
        ]);
    }
    if want(LayerKind::Pool) {
        out.extend([
            case(
                "maxpool3_s2_same",
                s(2, 5, 5),
                vec![Node::max_pool()],
                Mode::Train,
                Linear,
            ),
            case(
                "maxpool2_s2_valid",
                s(2, 4, 6),
                vec![Node::MaxPool {
                    kernel: 2,
                    stride: 2,
                    padding: Padding::Valid,
                }],
                Mode::Train,
                Linear,
            ),
            case(
                "global_avg_pool",
                s(3, 4, 4),
                vec![Node::GlobalAvgPool],
                Mode::Train,
                Linear,
            ),
        ]);
    }
    if want(LayerKind::Residual) {
        out.extend([
            case(
                "residual_identity",
                s(3, 4, 4),
                vec![Node::Block {
                    name: "b".into(),
                    body: vec![
                        Node::relu(),
                        Node::sepconv(3, 3, Activation::Identity),
                        Node::bn(3),
                    ],
                    shortcut: Shortcut::Identity,
                }],
                Mode::Train,
                Linear,
            ),
            case(
                "residual_projection",
                s(2, 5, 5),
                vec![Node::Block {
                    name: "b".into(),
                    body: vec![
                        Node::sepconv(2, 3, Activation::Identity),
                        Node::bn(3),
                        Node::max_pool(),
                    ],
                    shortcut: Shortcut::Projection { out: 3, stride: 2 },
                }],
                Mode::Train,
                Linear,
            ),
        ]);
    }
    out
}

struct Problem {
    model: Model,
    store: ParamStore<f64>,
    x: Tensor4<f64>,
    mode: Mode,
    objective: Objective,
    weights: Tensor4<f64>,
    labels: Vec<u32>,
    targets: Vec<u8>,
    dropout_seed: u64,
}

impl Problem {
    fn loss(
        &self,
        store: &ParamStore<f64>,
        x: &Tensor4<f64>,
    ) -> Result<(f64, Tensor4<f64>, crate::model::Tape<f64>)> {
        let mut rng = Rng::seed(self.dropout_seed);
        let (y, tape) = self.model.forward(store, x, self.mode, &mut rng)?;
        let (l, g) = match self.objective {
            Objective::Linear => {
                let l = y
                    .as_slice()
                    .iter()
                    .zip(self.weights.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                (l, self.weights.clone())
            }
            Objective::Softmax => softmax_cross_entropy(&y, &self.labels)?,
            Objective::Sigmoid => sigmoid_cross_entropy(&y, &self.targets)?,
        };
        Ok((l, g, tape))
    }
}

fn sample(len: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        rng.shuffle(&mut idx);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks the input gradient and every trainable tensor of one case.
pub fn check_case(case: &GradCase, seed: u64, cfg: &GradCheckConfig) -> Result<CaseReport> {
    let model = Model::new(&case.spec)?;
    let mut rng = Rng::stream(seed, 0x6772_6164);
    let mut store: ParamStore<f64> = model.init_params(&mut rng)?;
    // Non-trivial scale, shift and running statistics.
    for p in store.iter_mut() {
        let randomized = match p.name.rsplit('.').next() {
            Some("gamma") | Some("var") => {
                Some(Tensor4::uniform(p.value.dims(), 0.5, 1.5, &mut rng)?)
            }
            Some("beta") | Some("mean") | Some("bias") => {
                Some(Tensor4::uniform(p.value.dims(), -0.5, 0.5, &mut rng)?)
            }
            _ => None,
        };
        if let Some(v) = randomized {
            p.value = v;
        }
    }
    let s = case.spec.input;
    let x = Tensor4::randn((case.batch, s.c, s.h, s.w), &mut rng)?;
    let out = case.spec.validate()?;
    let weights = Tensor4::randn((case.batch, out.c, out.h, out.w), &mut rng)?;
    let labels = (0..case.batch)
        .map(|_| rng.below(out.len()) as u32)
        .collect();
    let targets = (0..case.batch * out.len())
        .map(|_| (rng.uniform() < 0.5) as u8)
        .collect();
    let problem = Problem {
        model,
        store,
        x,
        mode: case.mode,
        objective: case.objective,
        weights,
        labels,
        targets,
        dropout_seed: rng.next_u64(),
    };

    let (_, gy, tape) = problem.loss(&problem.store, &problem.x)?;
    let (gx, grads) = problem.model.backward(&problem.store, tape, gy)?;
    let scale = 1.0 + cfg.fault;
    let h = cfg.step;
    let mut tensors = Vec::new();

    let mut report = |name: String,
                      analytic: &Tensor4<f64>,
                      idx: Vec<usize>,
                      numeric: &mut dyn FnMut(usize) -> Result<f64>| {
        let mut worst = (0.0f64, 0usize);
        for &i in &idx {
            let n = numeric(i)?;
            let e = rel_err(analytic.as_slice()[i] * scale, n, cfg.floor);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        tensors.push(TensorCheck {
            name,
            worst: worst.0,
            index: worst.1,
            checked: idx.len(),
        });
        Ok::<_, Error>(())
    };

    let idx = sample(problem.x.len(), cfg.max_entries, &mut rng);
    report("input".into(), &gx, idx, &mut |i| {
        let mut x = problem.x.clone();
        let v = x.as_slice()[i];
        x.as_mut_slice()[i] = v + h;
        let lp = problem.loss(&problem.store, &x)?.0;
        x.as_mut_slice()[i] = v - h;
        let lm = problem.loss(&problem.store, &x)?.0;
        Ok((lp - lm) / (2.0 * h))
    })?;

    for (id, g) in grads.iter().enumerate() {
        let p = problem.store.param(id);
        if !p.trainable {
            continue;
        }
        let idx = sample(g.len(), cfg.max_entries, &mut rng);
        let name = p.name.clone();
        let mut store = problem.store.clone();
        report(name, g, idx, &mut |i| {
            let v = store.value(id).as_slice()[i];
            store.value_mut(id).as_mut_slice()[i] = v + h;
            let lp = problem.loss(&store, &problem.x)?.0;
            store.value_mut(id).as_mut_slice()[i] = v - h;
            let lm = problem.loss(&store, &problem.x)?.0;
            store.value_mut(id).as_mut_slice()[i] = v;
            Ok((lp - lm) / (2.0 * h))
        })?;
    }
    Ok(CaseReport {
        case: case.name.clone(),
        tensors,
    })
}

pub fn run(kind: LayerKind, seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CaseReport>> {
    cases(kind)
        .iter()
        .map(|c| check_case(c, seed, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let cfg = GradCheckConfig::default();
        for r in run(LayerKind::All, 3, &cfg).unwrap() {
            assert!(r.passed(cfg.tolerance), "{r}");
        }
    }

    #[test]
    fn injected_fault_detected() {
        let cfg = GradCheckConfig {
            fault: 1e-2,
            ..GradCheckConfig::default()
        };
        let r = run(LayerKind::Conv, 3, &cfg).unwrap();
        assert!(r.iter().all(|r| !r.passed(cfg.tolerance)));
    }

    #[test]
    fn deterministic() {
        let cfg = GradCheckConfig::default();
        assert_eq!(
            run(LayerKind::Bn, 5, &cfg).unwrap(),
            run(LayerKind::Bn, 5, &cfg).unwrap()
        );
    }
}
