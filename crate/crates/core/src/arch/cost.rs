use super::{ArchSpec, Node, Shape3, Shortcut};
use crate::conv::{Padding, Window};
use crate::error::Result;

/// Parameter and arithmetic totals for one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct CostReport {
    /// Conv and dense kernels, dense biases, batch-norm scale and shift.
    pub trainable_params: u64,
    /// Batch-norm running mean and variance.
    pub non_trainable_params: u64,
    /// Multiply-accumulates of every conv and dense layer.
    pub macs_per_example: u64,
    /// Largest single activation tensor, in elements.
    pub activation_peak: u64,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.trainable_params + self.non_trainable_params
    }
}

/// Same walk as [`report_costs`]; callers that want only the parameter
/// fields use this name.
pub fn count_params(spec: &ArchSpec) -> Result<CostReport> {
    report_costs(spec)
}

pub fn report_costs(spec: &ArchSpec) -> Result<CostReport> {
    spec.validate()?;
    let mut r = CostReport {
        activation_peak: spec.input.len() as u64,
        ..CostReport::default()
    };
    walk(&spec.nodes, spec.input, &mut r)?;
    Ok(r)
}

fn walk(nodes: &[Node], mut s: Shape3, r: &mut CostReport) -> Result<Shape3> {
    for n in nodes {
        s = node(n, s, r)?;
        r.activation_peak = r.activation_peak.max(s.len() as u64);
    }
    Ok(s)
}

fn node(n: &Node, input: Shape3, r: &mut CostReport) -> Result<Shape3> {
    let out = match n {
        Node::Block { body, shortcut, .. } => {
            let out = walk(body, input, r)?;
            if let Shortcut::Projection { out: c, stride } = shortcut {
                let (h, w) =
                    Window::square(1, *stride, Padding::Same).output_hw(input.h, input.w)?;
                let k = (input.c * c) as u64;
                r.trainable_params += k + 2 * *c as u64;
                r.non_trainable_params += 2 * *c as u64;
                r.macs_per_example += k * (h * w) as u64;
            }
            return Ok(out);
        }
        Node::Towers(towers) => {
            for t in towers {
                walk(t, input, r)?;
            }
            return n.output_shape(input);
        }
        _ => n.output_shape(input)?,
    };
    let pixels = (out.h * out.w) as u64;
    let (weights, macs) = match n {
        Node::Conv {
            in_c,
            out_c,
            kernel,
            ..
        } => {
            let k = (in_c * out_c * kernel * kernel) as u64;
            (k, k * pixels)
        }
        Node::SepConv {
            in_c,
            out_c,
            kernel,
            multiplier,
            ..
        } => {
            let mid = in_c * multiplier;
            let k = (mid * kernel * kernel + mid * out_c) as u64;
            (k, k * pixels)
        }
        Node::Depthwise {
            channels,
            multiplier,
            kernel,
            ..
        } => {
            let k = (channels * multiplier * kernel * kernel) as u64;
            (k, k * pixels)
        }
        Node::SegConv {
            segments, kernel, ..
        } => {
            let k = segments
                .iter()
                .map(|s| (s * s * kernel * kernel) as u64)
                .sum::<u64>();
            (k, k * pixels)
        }
        Node::Spectrum {
            in_c,
            mid,
            segments,
            kernel,
            ..
        } => {
            let point = (in_c * mid) as u64;
            let spatial = (mid * mid / segments * kernel * kernel) as u64;
            let in_pixels = (input.h * input.w) as u64;
            (point + spatial, point * in_pixels + spatial * pixels)
        }
        Node::BatchNorm { channels } => {
            r.non_trainable_params += 2 * *channels as u64;
            (2 * *channels as u64, 0)
        }
        Node::Dense { in_f, out_f } => {
            let k = (in_f * out_f) as u64;
            (k + *out_f as u64, k)
        }
        _ => (0, 0),
    };
    r.trainable_params += weights;
    r.macs_per_example += macs;
    Ok(out)
}
