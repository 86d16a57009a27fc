//! Declarative architecture descriptions.
//!
//! An [`ArchSpec`] is an ordered tree of [`Node`]s. Convolution-like nodes
//! carry their input channel count explicitly, so a spec whose adjacent
//! shapes disagree is caught by [`ArchSpec::validate`] before any weights are
//! created.

mod cost;
mod inception;
mod text;
mod vgg;
mod xception;

use std::fmt;
use std::str::FromStr;

pub use cost::{count_params, report_costs, CostReport};
pub use inception::{build_extreme_inception, build_simplified_inception, reformulate_inception};
pub use vgg::build_sepconv_vgg;
pub use xception::{build_xception, XceptionConfig, XceptionWidths};

use crate::activation::Activation;
use crate::conv::{Padding, Window};
use crate::error::{ensure, Error, Result};

/// Per-example activation shape `(c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

impl FromStr for Shape3 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Format(format!("bad shape `{s}`")))
            })
            .collect::<Result<_>>()?;
        ensure!(parts.len() == 3, Format, "shape `{s}` must be CxHxW");
        Ok(Self::new(parts[0], parts[1], parts[2]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Task {
    #[default]
    SingleLabel,
    MultiLabel,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleLabel => "single-label",
            Self::MultiLabel => "multi-label",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-label" | "single" => Ok(Self::SingleLabel),
            "multi-label" | "multi" => Ok(Self::MultiLabel),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Builder switches recorded alongside the node list.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchOptions {
    pub residuals: bool,
    pub intermediate_activation: Activation,
    pub fc_layers: Vec<usize>,
    pub task: Task,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            residuals: true,
            intermediate_activation: Activation::Identity,
            fc_layers: Vec::new(),
            task: Task::SingleLabel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shortcut {
    /// Plain grouping, no residual connection.
    None,
    Identity,
    /// 1x1 convolution (same padding, no bias) followed by batch norm.
    Projection {
        out: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Conv {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    SepConv {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        multiplier: usize,
        activation: Activation,
    },
    Depthwise {
        channels: usize,
        multiplier: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// Block-diagonal spatial convolution over contiguous channel segments.
    SegConv {
        segments: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// Pointwise projection to `mid` channels, then `segments` equal
    /// independent spatial convolutions.
    Spectrum {
        in_c: usize,
        mid: usize,
        segments: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        channels: usize,
    },
    Act(Activation),
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
    Dense {
        in_f: usize,
        out_f: usize,
    },
    Block {
        name: String,
        body: Vec<Node>,
        shortcut: Shortcut,
    },
    /// Parallel branches on the same input, concatenated along channels.
    Towers(Vec<Vec<Node>>),
}

impl Node {
    pub fn conv(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self::Conv {
            in_c,
            out_c,
            kernel,
            stride,
            padding,
        }
    }

    pub fn sepconv(in_c: usize, out_c: usize, activation: Activation) -> Self {
        Self::SepConv {
            in_c,
            out_c,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
            multiplier: 1,
            activation,
        }
    }

    pub fn bn(channels: usize) -> Self {
        Self::BatchNorm { channels }
    }

    pub fn relu() -> Self {
        Self::Act(Activation::Relu)
    }

    /// 3x3, stride 2, same padding.
    pub fn max_pool() -> Self {
        Self::MaxPool {
            kernel: 3,
            stride: 2,
            padding: Padding::Same,
        }
    }

    pub fn is_conv_layer(&self) -> bool {
        matches!(
            self,
            Self::Conv { .. }
                | Self::SepConv { .. }
                | Self::Depthwise { .. }
                | Self::SegConv { .. }
                | Self::Spectrum { .. }
        )
    }

    /// Output shape for `input`, or an error naming the disagreement.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        let spatial = |kernel: usize, stride: usize, padding: Padding| {
            let (h, w) = Window::square(kernel, stride, padding).output_hw(input.h, input.w)?;
            Ok::<_, Error>((h, w))
        };
        let expect_c = |c: usize, what: &str| {
            ensure!(
                input.c == c,
                Shape,
                "{what} expects {c} input channels, predecessor produces {input}"
            );
            Ok(())
        };
        Ok(match self {
            Self::Conv {
                in_c,
                out_c,
                kernel,
                stride,
                padding,
            } => {
                expect_c(*in_c, "conv")?;
                ensure!(*out_c >= 1, Shape, "conv needs >= 1 output channel");
                let (h, w) = spatial(*kernel, *stride, *padding)?;
                Shape3::new(*out_c, h, w)
            }
            Self::SepConv {
                in_c,
                out_c,
                kernel,
                stride,
                padding,
                multiplier,
                ..
            } => {
                expect_c(*in_c, "sepconv")?;
                ensure!(*multiplier >= 1, Parameter, "depth multiplier must be >= 1");
                ensure!(*out_c >= 1, Shape, "sepconv needs >= 1 output channel");
                let (h, w) = spatial(*kernel, *stride, *padding)?;
                Shape3::new(*out_c, h, w)
            }
            Self::Depthwise {
                channels,
                multiplier,
                kernel,
                stride,
                padding,
            } => {
                expect_c(*channels, "depthwise")?;
                ensure!(*multiplier >= 1, Parameter, "depth multiplier must be >= 1");
                let (h, w) = spatial(*kernel, *stride, *padding)?;
                Shape3::new(channels * multiplier, h, w)
            }
            Self::SegConv {
                segments,
                kernel,
                stride,
                padding,
            } => {
                ensure!(
                    !segments.is_empty() && segments.iter().all(|&s| s >= 1),
                    Parameter,
                    "segments must be non-empty and positive"
                );
                expect_c(segments.iter().sum(), "segconv")?;
                let (h, w) = spatial(*kernel, *stride, *padding)?;
                Shape3::new(input.c, h, w)
            }
            Self::Spectrum {
                in_c,
                mid,
                segments,
                kernel,
                stride,
                padding,
            } => {
                expect_c(*in_c, "spectrum")?;
                ensure!(
                    *segments >= 1 && *mid >= 1 && mid % segments == 0,
                    Parameter,
                    "{segments} segments do not divide {mid} channels"
                );
                let (h, w) = spatial(*kernel, *stride, *padding)?;
                Shape3::new(*mid, h, w)
            }
            Self::BatchNorm { channels } => {
                expect_c(*channels, "batch norm")?;
                input
            }
            Self::Act(_) => input,
            Self::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = spatial(*kernel, *stride, *padding)?;
                Shape3::new(input.c, h, w)
            }
            Self::GlobalAvgPool => Shape3::new(input.c, 1, 1),
            Self::Dropout { rate } => {
                ensure!(
                    (0.0..1.0).contains(rate),
                    Parameter,
                    "dropout rate must be in [0, 1), got {rate}"
                );
                input
            }
            Self::Dense { in_f, out_f } => {
                ensure!(
                    input.len() == *in_f,
                    Shape,
                    "dense expects {in_f} inputs, predecessor produces {input}"
                );
                ensure!(*out_f >= 1, Shape, "dense needs >= 1 output");
                Shape3::new(*out_f, 1, 1)
            }
            Self::Block {
                name,
                body,
                shortcut,
            } => {
                let out = chain_shape(body, input).map_err(|e| prefix(e, name))?;
                let short = match shortcut {
                    Shortcut::None => out,
                    Shortcut::Identity => input,
                    Shortcut::Projection { out: c, stride } => {
                        let (h, w) = spatial(1, *stride, Padding::Same)?;
                        Shape3::new(*c, h, w)
                    }
                };
                ensure!(
                    short == out,
                    Shape,
                    "block `{name}`: body produces {out} but shortcut produces {short}"
                );
                out
            }
            Self::Towers(towers) => {
                ensure!(!towers.is_empty(), Shape, "towers node has no branches");
                let mut c = 0;
                let mut hw = None;
                for t in towers {
                    let s = chain_shape(t, input)?;
                    if let Some((h, w)) = hw {
                        ensure!(
                            (s.h, s.w) == (h, w),
                            Shape,
                            "tower spatial dims {}x{} differ from {h}x{w}",
                            s.h,
                            s.w
                        );
                    }
                    hw = Some((s.h, s.w));
                    c += s.c;
                }
                let (h, w) = hw.expect("non-empty towers");
                Shape3::new(c, h, w)
            }
        })
    }
}

fn prefix(e: Error, name: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("in `{name}`: {m}")),
        Error::Geometry(m) => Error::Geometry(format!("in `{name}`: {m}")),
        other => other,
    }
}

/// Propagates a shape through a node chain.
pub fn chain_shape(nodes: &[Node], input: Shape3) -> Result<Shape3> {
    nodes.iter().enumerate().try_fold(input, |s, (i, n)| {
        n.output_shape(s).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("node {i}: {m}")),
            Error::Geometry(m) => Error::Geometry(format!("node {i}: {m}")),
            other => other,
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input: Shape3,
    /// Classifier width, or `None` for a bare feature extractor.
    pub num_classes: Option<usize>,
    pub options: ArchOptions,
    pub nodes: Vec<Node>,
}

impl ArchSpec {
    /// Checks every adjacent shape and the classifier width; returns the
    /// output shape.
    pub fn validate(&self) -> Result<Shape3> {
        let out = chain_shape(&self.nodes, self.input)?;
        if let Some(k) = self.num_classes {
            ensure!(
                out == Shape3::new(k, 1, 1),
                Shape,
                "spec produces {out}, expected {k} class scores"
            );
        }
        Ok(out)
    }

    /// Convolutional layers on the main path; a separable convolution counts
    /// once and shortcut projections are excluded.
    pub fn conv_layer_count(&self) -> usize {
        fn walk(nodes: &[Node]) -> usize {
            nodes
                .iter()
                .map(|n| match n {
                    Node::Block { body, .. } => walk(body),
                    Node::Towers(ts) => ts.iter().map(|t| walk(t)).sum(),
                    n if n.is_conv_layer() => 1,
                    _ => 0,
                })
                .sum()
        }
        walk(&self.nodes)
    }

    pub fn module_count(&self) -> usize {
        self.blocks().count()
    }

    pub fn residual_count(&self) -> usize {
        self.blocks()
            .filter(|(_, s)| !matches!(s, Shortcut::None))
            .count()
    }

    fn blocks(&self) -> impl Iterator<Item = (&str, &Shortcut)> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Block { name, shortcut, .. } => Some((name.as_str(), shortcut)),
            _ => None,
        })
    }

    pub fn to_text(&self) -> String {
        text::write(self)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        text::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_join_checked_at_validation() {
        let spec = ArchSpec {
            name: "bad".into(),
            input: Shape3::new(4, 8, 8),
            num_classes: None,
            options: ArchOptions::default(),
            nodes: vec![Node::Block {
                name: "b".into(),
                body: vec![Node::sepconv(4, 8, Activation::Identity)],
                shortcut: Shortcut::Identity,
            }],
        };
        assert!(matches!(spec.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_mismatch_names_node() {
        let spec = ArchSpec {
            name: "bad".into(),
            input: Shape3::new(3, 8, 8),
            num_classes: None,
            options: ArchOptions::default(),
            nodes: vec![Node::conv(3, 8, 3, 1, Padding::Same), Node::bn(7)],
        };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("node 1"), "{err}");
    }
}
