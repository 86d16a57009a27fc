use super::{ArchOptions, ArchSpec, Node, Shape3, Shortcut};
use crate::activation::Activation;
use crate::conv::Padding;
use crate::error::{ensure, Result};

/// Channel widths of every stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct XceptionWidths {
    /// The two plain convolutions of the stem.
    pub stem: [usize; 2],
    /// One residual module per entry, each downsampling by 2.
    pub entry: Vec<usize>,
    pub middle: usize,
    /// The two separable convolutions of the last residual module.
    pub exit: [usize; 2],
    /// The two separable convolutions after the last residual module.
    pub tail: [usize; 2],
}

impl XceptionWidths {
    pub fn full() -> Self {
        Self {
            stem: [32, 64],
            entry: vec![128, 256, 728],
            middle: 728,
            exit: [728, 1024],
            tail: [1536, 2048],
        }
    }

    /// Roughly a quarter of the full widths, for desk-scale training.
    pub fn toy() -> Self {
        Self {
            stem: [8, 16],
            entry: vec![32, 64, 182],
            middle: 182,
            exit: [182, 256],
            tail: [384, 512],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XceptionConfig {
    pub input: Shape3,
    pub num_classes: usize,
    pub widths: XceptionWidths,
    pub middle_repeats: usize,
    pub dropout: f64,
    pub options: ArchOptions,
}

impl Default for XceptionConfig {
    fn default() -> Self {
        Self {
            input: Shape3::new(3, 299, 299),
            num_classes: 1000,
            widths: XceptionWidths::full(),
            middle_repeats: 8,
            dropout: 0.5,
            options: ArchOptions::default(),
        }
    }
}

impl XceptionConfig {
    pub fn toy() -> Self {
        Self {
            input: Shape3::new(3, 32, 32),
            num_classes: 10,
            widths: XceptionWidths::toy(),
            middle_repeats: 2,
            ..Self::default()
        }
    }
}

pub fn build_xception(cfg: &XceptionConfig) -> Result<ArchSpec> {
    let w = &cfg.widths;
    ensure!(cfg.num_classes >= 1, Config, "num_classes must be >= 1");
    ensure!(
        !w.entry.is_empty(),
        Config,
        "entry flow needs at least one module"
    );
    let act = cfg.options.intermediate_activation;
    let residual = |out: usize, stride: usize| {
        if cfg.options.residuals {
            Shortcut::Projection { out, stride }
        } else {
            Shortcut::None
        }
    };
    let sep = |i: usize, o: usize| Node::sepconv(i, o, act);
    let mut nodes = Vec::new();
    let mut index = 0;
    let mut block = |body: Vec<Node>, shortcut: Shortcut, nodes: &mut Vec<Node>| {
        index += 1;
        nodes.push(Node::Block {
            name: format!("block{index}"),
            body,
            shortcut,
        });
    };

    let [s0, s1] = w.stem;
    block(
        vec![
            Node::conv(cfg.input.c, s0, 3, 2, Padding::Valid),
            Node::bn(s0),
            Node::relu(),
            Node::conv(s0, s1, 3, 1, Padding::Valid),
            Node::bn(s1),
            Node::relu(),
        ],
        Shortcut::None,
        &mut nodes,
    );

    let mut c = s1;
    for (i, &width) in w.entry.iter().enumerate() {
        let mut body = Vec::new();
        if i > 0 {
            body.push(Node::relu());
        }
        body.extend([
            sep(c, width),
            Node::bn(width),
            Node::relu(),
            sep(width, width),
            Node::bn(width),
            Node::max_pool(),
        ]);
        block(body, residual(width, 2), &mut nodes);
        c = width;
    }

    for _ in 0..cfg.middle_repeats {
        let mut body = Vec::new();
        for _ in 0..3 {
            body.extend([Node::relu(), sep(c, w.middle), Node::bn(w.middle)]);
            c = w.middle;
        }
        let shortcut = if cfg.options.residuals {
            Shortcut::Identity
        } else {
            Shortcut::None
        };
        block(body, shortcut, &mut nodes);
    }

    let [e0, e1] = w.exit;
    block(
        vec![
            Node::relu(),
            sep(c, e0),
            Node::bn(e0),
            Node::relu(),
            sep(e0, e1),
            Node::bn(e1),
            Node::max_pool(),
        ],
        residual(e1, 2),
        &mut nodes,
    );

    let [t0, t1] = w.tail;
    block(
        vec![
            sep(e1, t0),
            Node::bn(t0),
            Node::relu(),
            sep(t0, t1),
            Node::bn(t1),
            Node::relu(),
        ],
        Shortcut::None,
        &mut nodes,
    );

    nodes.push(Node::GlobalAvgPool);
    let mut features = t1;
    for &fc in &cfg.options.fc_layers {
        nodes.push(Node::Dense {
            in_f: features,
            out_f: fc,
        });
        nodes.push(Node::Act(Activation::Relu));
        features = fc;
    }
    nodes.push(Node::Dropout { rate: cfg.dropout });
    nodes.push(Node::Dense {
        in_f: features,
        out_f: cfg.num_classes,
    });

    let spec = ArchSpec {
        name: "xception".into(),
        input: cfg.input,
        num_classes: Some(cfg.num_classes),
        options: cfg.options.clone(),
        nodes,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::chain_shape;
    use crate::error::Error;

    #[test]
    fn structure_counts() {
        let spec = build_xception(&XceptionConfig::default()).unwrap();
        assert_eq!(spec.conv_layer_count(), 36);
        assert_eq!(spec.module_count(), 14);
        assert_eq!(spec.residual_count(), 12);
    }

    #[test]
    fn map_before_pooling() {
        let spec = build_xception(&XceptionConfig::default()).unwrap();
        let gap = spec
            .nodes
            .iter()
            .position(|n| *n == Node::GlobalAvgPool)
            .unwrap();
        let s = chain_shape(&spec.nodes[..gap], spec.input).unwrap();
        assert_eq!(s, Shape3::new(2048, 10, 10));
    }

    #[test]
    fn tiny_input_rejected() {
        let cfg = XceptionConfig {
            input: Shape3::new(3, 4, 4),
            ..XceptionConfig::default()
        };
        assert!(matches!(build_xception(&cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn toy_preset_builds() {
        let spec = build_xception(&XceptionConfig::toy()).unwrap();
        assert_eq!(spec.module_count(), 8);
        assert_eq!(spec.validate().unwrap(), Shape3::new(10, 1, 1));
    }

    #[test]
    fn default_trainable_count() {
        let r = crate::arch::count_params(&build_xception(&XceptionConfig::default()).unwrap())
            .unwrap();
        assert_eq!(r.trainable_params, 22_855_952);
    }
}
