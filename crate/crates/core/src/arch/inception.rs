use super::{ArchOptions, ArchSpec, Node, Shape3};
use crate::conv::Padding;
use crate::error::{ensure, Error, Result};

fn bare(name: &str, input: Shape3, nodes: Vec<Node>) -> Result<ArchSpec> {
    let spec = ArchSpec {
        name: name.into(),
        input,
        num_classes: None,
        options: ArchOptions::default(),
        nodes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parallel towers of `1x1 conv -> 3x3 conv`, concatenated along channels.
pub fn build_simplified_inception(input: Shape3, widths: &[usize]) -> Result<ArchSpec> {
    ensure!(!widths.is_empty(), Parameter, "at least one tower required");
    ensure!(
        widths.iter().all(|&t| t >= 1),
        Parameter,
        "tower widths must be >= 1"
    );
    let towers = widths
        .iter()
        .map(|&t| {
            vec![
                Node::conv(input.c, t, 1, 1, Padding::Same),
                Node::conv(t, t, 3, 1, Padding::Same),
            ]
        })
        .collect();
    bare("inception", input, vec![Node::Towers(towers)])
}

/// One 1x1 convolution to the summed tower width, then a block-diagonal 3x3
/// convolution over the tower segments.
pub fn reformulate_inception(spec: &ArchSpec) -> Result<ArchSpec> {
    let [Node::Towers(towers)] = spec.nodes.as_slice() else {
        return Err(Error::Shape("expected a single towers node".into()));
    };
    let mut widths = Vec::with_capacity(towers.len());
    for t in towers {
        match t.as_slice() {
            [Node::Conv {
                kernel: 1,
                stride: 1,
                out_c,
                ..
            }, Node::Conv {
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
                ..
            }] => widths.push(*out_c),
            _ => return Err(Error::Shape("tower is not `1x1 conv -> 3x3 conv`".into())),
        }
    }
    let total = widths.iter().sum();
    bare(
        "inception-reformulated",
        spec.input,
        vec![
            Node::conv(spec.input.c, total, 1, 1, Padding::Same),
            Node::SegConv {
                segments: widths,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
        ],
    )
}

/// 1x1 convolution followed by one 3x3 spatial filter per output channel.
pub fn build_extreme_inception(input: Shape3, out_channels: usize) -> Result<ArchSpec> {
    ensure!(out_channels >= 1, Parameter, "output channels must be >= 1");
    bare(
        "extreme-inception",
        input,
        vec![
            Node::conv(input.c, out_channels, 1, 1, Padding::Same),
            Node::Depthwise {
                channels: out_channels,
                multiplier: 1,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tower_reformulates_to_two_convs() {
        let a = build_simplified_inception(Shape3::new(5, 6, 6), &[4]).unwrap();
        let b = reformulate_inception(&a).unwrap();
        assert_eq!(b.nodes.len(), 2);
        assert!(matches!(&b.nodes[1], Node::SegConv { segments, .. } if segments == &[4]));
        assert_eq!(a.validate().unwrap(), b.validate().unwrap());
    }

    #[test]
    fn extreme_spatial_weights() {
        let s = build_extreme_inception(Shape3::new(4, 6, 6), 7).unwrap();
        let r = crate::arch::count_params(&s).unwrap();
        assert_eq!(r.trainable_params, 4 * 7 + 9 * 7);
    }

    #[test]
    fn empty_towers_rejected() {
        assert!(build_simplified_inception(Shape3::new(3, 4, 4), &[]).is_err());
        assert!(build_simplified_inception(Shape3::new(3, 4, 4), &[2, 0]).is_err());
    }
}
