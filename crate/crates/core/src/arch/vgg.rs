use super::{ArchOptions, ArchSpec, Node, Shape3};
use crate::activation::Activation;
use crate::conv::Padding;
use crate::error::{ensure, Result};

/// Non-residual stack: per width, `sepconv -> BN -> ReLU -> 2x2 max pool`,
/// then global pooling and a linear classifier.
pub fn build_sepconv_vgg(widths: &[usize], input: Shape3, num_classes: usize) -> Result<ArchSpec> {
    ensure!(!widths.is_empty(), Config, "widths must be non-empty");
    ensure!(num_classes >= 1, Config, "num_classes must be >= 1");
    let mut nodes = Vec::new();
    let mut c = input.c;
    for &w in widths {
        nodes.extend([
            Node::sepconv(c, w, Activation::Identity),
            Node::bn(w),
            Node::relu(),
            Node::MaxPool {
                kernel: 2,
                stride: 2,
                padding: Padding::Valid,
            },
        ]);
        c = w;
    }
    nodes.push(Node::GlobalAvgPool);
    nodes.push(Node::Dense {
        in_f: c,
        out_f: num_classes,
    });
    let spec = ArchSpec {
        name: "sepconv-vgg".into(),
        input,
        num_classes: Some(num_classes),
        options: ArchOptions {
            residuals: false,
            ..ArchOptions::default()
        },
        nodes,
    };
    spec.validate()?;
    Ok(spec)
}
