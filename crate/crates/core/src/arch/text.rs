//! Line-oriented text form of an [`ArchSpec`].
//!
//! ```text
//! # comment
//! spec name=<id> input=<C>x<H>x<W> classes=<K|none> task=<single-label|multi-label>
//!      residuals=<on|off> activation=<none|relu|elu> fc=<w1,w2,..|none>
//! <index> <kind> <key>=<value> ...
//! ```
//!
//! Node lines are numbered consecutively from 0. `block` and `towers` open a
//! scope closed by `end`; inside `towers`, each branch starts with `tower`.
//! The `spec` header is a single line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{ArchOptions, ArchSpec, Node, Shape3, Shortcut, Task};
use crate::activation::Activation;
use crate::conv::Padding;
use crate::error::{ensure, Error, Result};

fn csv(v: &[usize]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

pub(super) fn write(spec: &ArchSpec) -> String {
    let mut out = String::from("# xsep architecture\n");
    let o = &spec.options;
    let classes = spec
        .num_classes
        .map_or("none".to_string(), |k| k.to_string());
    let _ = writeln!(
        out,
        "spec name={} input={} classes={classes} task={} residuals={} activation={} fc={}",
        spec.name,
        spec.input,
        o.task,
        if o.residuals { "on" } else { "off" },
        o.intermediate_activation,
        csv(&o.fc_layers)
    );
    let mut index = 0;
    write_nodes(&spec.nodes, &mut out, &mut index);
    out
}

fn line(out: &mut String, index: &mut usize, body: String) {
    let _ = writeln!(out, "{} {body}", *index);
    *index += 1;
}

fn write_nodes(nodes: &[Node], out: &mut String, index: &mut usize) {
    for node in nodes {
        let body = match node {
            Node::Conv {
                in_c,
                out_c,
                kernel,
                stride,
                padding,
            } => format!("conv in={in_c} out={out_c} k={kernel} stride={stride} pad={padding}"),
            Node::SepConv {
                in_c,
                out_c,
                kernel,
                stride,
                padding,
                multiplier,
                activation,
            } => format!(
                "sepconv in={in_c} out={out_c} k={kernel} stride={stride} pad={padding} mult={multiplier} act={activation}"
            ),
            Node::Depthwise {
                channels,
                multiplier,
                kernel,
                stride,
                padding,
            } => format!("depthwise ch={channels} mult={multiplier} k={kernel} stride={stride} pad={padding}"),
            Node::SegConv {
                segments,
                kernel,
                stride,
                padding,
            } => format!(
                "segconv segments={} k={kernel} stride={stride} pad={padding}",
                csv(segments)
            ),
            Node::Spectrum {
                in_c,
                mid,
                segments,
                kernel,
                stride,
                padding,
            } => format!("spectrum in={in_c} mid={mid} segments={segments} k={kernel} stride={stride} pad={padding}"),
            Node::BatchNorm { channels } => format!("bn ch={channels}"),
            Node::Act(a) => a.to_string(),
            Node::MaxPool {
                kernel,
                stride,
                padding,
            } => format!("maxpool k={kernel} stride={stride} pad={padding}"),
            Node::GlobalAvgPool => "gap".into(),
            Node::Dropout { rate } => format!("dropout rate={rate}"),
            Node::Dense { in_f, out_f } => format!("dense in={in_f} out={out_f}"),
            Node::Block { name, body, shortcut } => {
                let sc = match shortcut {
                    Shortcut::None => "shortcut=none".to_string(),
                    Shortcut::Identity => "shortcut=identity".to_string(),
                    Shortcut::Projection { out, stride } => {
                        format!("shortcut=projection out={out} stride={stride}")
                    }
                };
                line(out, index, format!("block name={name} {sc}"));
                write_nodes(body, out, index);
                line(out, index, "end".into());
                continue;
            }
            Node::Towers(towers) => {
                line(out, index, "towers".into());
                for t in towers {
                    line(out, index, "tower".into());
                    write_nodes(t, out, index);
                }
                line(out, index, "end".into());
                continue;
            }
        };
        line(out, index, body);
    }
}

struct Line {
    number: usize,
    kind: String,
    kv: BTreeMap<String, String>,
}

impl Line {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.kv.remove(key).ok_or_else(|| {
            Error::Format(format!(
                "line {}: `{}` missing `{key}`",
                self.number, self.kind
            ))
        })?;
        raw.parse().map_err(|_| {
            Error::Format(format!(
                "line {}: bad value `{raw}` for `{key}`",
                self.number
            ))
        })
    }

    fn take_with<T>(&mut self, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
        let raw: String = self.take(key)?;
        f(&raw).map_err(|e| Error::Format(format!("line {}: {e}", self.number)))
    }

    fn finish(self) -> Result<()> {
        ensure!(
            self.kv.is_empty(),
            Format,
            "line {}: unknown keys {:?} for `{}`",
            self.number,
            self.kv.keys().collect::<Vec<_>>(),
            self.kind
        );
        Ok(())
    }
}

fn tokenize(number: usize, text: &str) -> Result<(Vec<String>, BTreeMap<String, String>)> {
    let mut words = Vec::new();
    let mut kv = BTreeMap::new();
    for tok in text.split_whitespace() {
        match tok.split_once('=') {
            Some((k, v)) => {
                ensure!(
                    kv.insert(k.to_string(), v.to_string()).is_none(),
                    Format,
                    "line {number}: duplicate key `{k}`"
                );
            }
            None => {
                ensure!(
                    kv.is_empty(),
                    Format,
                    "line {number}: bare word `{tok}` after key=value pairs"
                );
                words.push(tok.to_string());
            }
        }
    }
    Ok((words, kv))
}

fn list(s: &str) -> Result<Vec<usize>> {
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Format(format!("bad list `{s}`")))
        })
        .collect()
}

fn on_off(s: &str) -> Result<bool> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Format(format!("expected on|off, got `{other}`"))),
    }
}

pub(super) fn parse(src: &str) -> Result<ArchSpec> {
    let mut header = None;
    let mut lines = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let number = i + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let (words, kv) = tokenize(number, text)?;
        ensure!(!words.is_empty(), Format, "line {number}: missing kind");
        if header.is_none() {
            ensure!(
                words == ["spec"],
                Format,
                "line {number}: expected `spec` header first"
            );
            header = Some(Line {
                number,
                kind: "spec".into(),
                kv,
            });
            continue;
        }
        ensure!(
            words.len() == 2,
            Format,
            "line {number}: expected `<index> <kind>`"
        );
        let index: usize = words[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {number}: bad index `{}`", words[0])))?;
        ensure!(
            index == lines.len(),
            Format,
            "line {number}: index {index} out of sequence (expected {})",
            lines.len()
        );
        lines.push(Line {
            number,
            kind: words[1].clone(),
            kv,
        });
    }
    let mut h = header.ok_or_else(|| Error::Format("empty architecture file".into()))?;
    let name: String = h.take("name")?;
    let input: Shape3 = h.take_with("input", Shape3::from_str)?;
    let num_classes = h.take_with("classes", |s| {
        if s == "none" {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("bad classes `{s}`")))
        }
    })?;
    let options = ArchOptions {
        task: h.take_with("task", Task::from_str)?,
        residuals: h.take_with("residuals", on_off)?,
        intermediate_activation: h.take_with("activation", Activation::from_str)?,
        fc_layers: h.take_with("fc", list)?,
    };
    h.finish()?;

    let mut iter = lines.into_iter().peekable();
    let nodes = parse_seq(&mut iter, false)?;
    let spec = ArchSpec {
        name,
        input,
        num_classes,
        options,
        nodes,
    };
    spec.validate()?;
    Ok(spec)
}

type Lines = std::iter::Peekable<std::vec::IntoIter<Line>>;

fn parse_seq(lines: &mut Lines, scoped: bool) -> Result<Vec<Node>> {
    let mut nodes = Vec::new();
    loop {
        let Some(next) = lines.peek() else {
            ensure!(!scoped, Format, "unterminated scope at end of file");
            return Ok(nodes);
        };
        if next.kind == "end" || next.kind == "tower" {
            ensure!(
                scoped,
                Format,
                "line {}: unexpected `{}`",
                next.number,
                next.kind
            );
            return Ok(nodes);
        }
        let mut l = lines.next().expect("peeked");
        let pad = |l: &mut Line| l.take_with("pad", Padding::from_str);
        let node = match l.kind.as_str() {
            "conv" => Node::Conv {
                in_c: l.take("in")?,
                out_c: l.take("out")?,
                kernel: l.take("k")?,
                stride: l.take("stride")?,
                padding: pad(&mut l)?,
            },
            "sepconv" => Node::SepConv {
                in_c: l.take("in")?,
                out_c: l.take("out")?,
                kernel: l.take("k")?,
                stride: l.take("stride")?,
                padding: pad(&mut l)?,
                multiplier: l.take("mult")?,
                activation: l.take_with("act", Activation::from_str)?,
            },
            "depthwise" => Node::Depthwise {
                channels: l.take("ch")?,
                multiplier: l.take("mult")?,
                kernel: l.take("k")?,
                stride: l.take("stride")?,
                padding: pad(&mut l)?,
            },
            "segconv" => Node::SegConv {
                segments: l.take_with("segments", list)?,
                kernel: l.take("k")?,
                stride: l.take("stride")?,
                padding: pad(&mut l)?,
            },
            "spectrum" => Node::Spectrum {
                in_c: l.take("in")?,
                mid: l.take("mid")?,
                segments: l.take("segments")?,
                kernel: l.take("k")?,
                stride: l.take("stride")?,
                padding: pad(&mut l)?,
            },
            "bn" => Node::BatchNorm {
                channels: l.take("ch")?,
            },
            "relu" => Node::Act(Activation::Relu),
            "elu" => Node::Act(Activation::Elu),
            "none" => Node::Act(Activation::Identity),
            "maxpool" => Node::MaxPool {
                kernel: l.take("k")?,
                stride: l.take("stride")?,
                padding: pad(&mut l)?,
            },
            "gap" => Node::GlobalAvgPool,
            "dropout" => Node::Dropout {
                rate: l.take("rate")?,
            },
            "dense" => Node::Dense {
                in_f: l.take("in")?,
                out_f: l.take("out")?,
            },
            "block" => {
                let name: String = l.take("name")?;
                let kind: String = l.take("shortcut")?;
                let shortcut = match kind.as_str() {
                    "none" => Shortcut::None,
                    "identity" => Shortcut::Identity,
                    "projection" => Shortcut::Projection {
                        out: l.take("out")?,
                        stride: l.take("stride")?,
                    },
                    other => {
                        return Err(Error::Format(format!(
                            "line {}: unknown shortcut `{other}`",
                            l.number
                        )))
                    }
                };
                l.finish()?;
                let body = parse_seq(lines, true)?;
                expect_end(lines)?;
                nodes.push(Node::Block {
                    name,
                    body,
                    shortcut,
                });
                continue;
            }
            "towers" => {
                l.finish()?;
                let mut towers = Vec::new();
                while lines.peek().is_some_and(|n| n.kind == "tower") {
                    lines.next().expect("peeked").finish()?;
                    towers.push(parse_seq(lines, true)?);
                }
                expect_end(lines)?;
                nodes.push(Node::Towers(towers));
                continue;
            }
            other => {
                return Err(Error::Format(format!(
                    "line {}: unknown node kind `{other}`",
                    l.number
                )))
            }
        };
        l.finish()?;
        nodes.push(node);
    }
}

fn expect_end(lines: &mut Lines) -> Result<()> {
    match lines.next() {
        Some(l) if l.kind == "end" => l.finish(),
        Some(l) => Err(Error::Format(format!(
            "line {}: expected `end`, found `{}`",
            l.number, l.kind
        ))),
        None => Err(Error::Format("missing `end`".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_sequence_index() {
        let src = "spec name=x input=3x8x8 classes=none task=single-label residuals=on activation=none fc=none\n1 relu\n";
        assert!(matches!(parse(src), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unknown_key() {
        let src = "spec name=x input=3x8x8 classes=none task=single-label residuals=on activation=none fc=none\n0 bn ch=3 eps=1\n";
        assert!(matches!(parse(src), Err(Error::Format(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let src = "# hi\n\nspec name=x input=3x8x8 classes=none task=multi-label residuals=off activation=elu fc=4,5 # tail\n0 relu\n";
        let spec = parse(src).unwrap();
        assert_eq!(spec.nodes, vec![Node::Act(Activation::Relu)]);
        assert_eq!(spec.options.fc_layers, vec![4, 5]);
        assert!(!spec.options.residuals);
    }

    #[test]
    fn unterminated_block() {
        let src = "spec name=x input=3x8x8 classes=none task=single-label residuals=on activation=none fc=none\n0 block name=b shortcut=identity\n1 relu\n";
        assert!(matches!(parse(src), Err(Error::Format(_))));
    }
}
