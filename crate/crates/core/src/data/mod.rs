//! Datasets, label files, the synthetic generator, batching and metrics.

mod batch;
mod metrics;
mod synth;
pub mod xlbl;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

pub use batch::{epoch_order, Batch, BatchIter};
pub use metrics::{
    average_precision_at_k, topk_accuracy, weighted_map_at_k, MetricReport, PROFILE_HEADER,
};
pub use synth::{synth_dataset, synth_multilabel};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor4;
use crate::xtsr;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Single {
        classes: usize,
        labels: Vec<u32>,
    },
    /// Row-major `count x classes`, each entry 0 or 1.
    Multi {
        classes: usize,
        rows: Vec<u8>,
    },
}

impl Labels {
    pub fn classes(&self) -> usize {
        match self {
            Self::Single { classes, .. } | Self::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Single { labels, .. } => labels.len(),
            Self::Multi { classes, rows } => rows.len().checked_div(*classes).unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.classes() >= 1,
            Data,
            "label set needs at least one class"
        );
        match self {
            Self::Single { classes, labels } => {
                if let Some(bad) = labels.iter().find(|&&l| l as usize >= *classes) {
                    return Err(Error::Data(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            Self::Multi { classes, rows } => {
                ensure!(
                    rows.len() % classes == 0,
                    Data,
                    "multi-hot rows are not a multiple of {classes}"
                );
                ensure!(
                    rows.iter().all(|&v| v <= 1),
                    Data,
                    "multi-hot entries must be 0 or 1"
                );
            }
        }
        Ok(())
    }

    /// Labels of the given examples, in order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        match self {
            Self::Single { classes, labels } => Self::Single {
                classes: *classes,
                labels: indices.iter().map(|&i| labels[i]).collect(),
            },
            Self::Multi { classes, rows } => Self::Multi {
                classes: *classes,
                rows: indices
                    .iter()
                    .flat_map(|&i| rows[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Labels,
    pub split: Split,
    /// Per-class importance for weighted MAP; zero marks an absent class.
    pub class_weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(images: Tensor4<f32>, labels: Labels, split: Split) -> Result<Self> {
        labels.validate()?;
        ensure!(
            images.dims().n == labels.len(),
            Data,
            "{} images but {} labels",
            images.dims().n,
            labels.len()
        );
        Ok(Self {
            images,
            labels,
            split,
            class_weights: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn with_class_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        ensure!(
            weights.len() == self.num_classes(),
            Config,
            "{} class weights for {} classes",
            weights.len(),
            self.num_classes()
        );
        self.class_weights = Some(weights);
        Ok(self)
    }

    /// Examples `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather(indices)?,
            labels: self.labels.gather(indices),
            split: self.split,
            class_weights: self.class_weights.clone(),
        })
    }

    pub fn save(&self, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        xtsr::write_file(images, &self.images)?;
        xlbl::write_file(labels, &self.labels)
    }
}

pub fn load_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images = xtsr::read_file(images)?.into_f32()?;
    Dataset::new(images, xlbl::read_file(labels)?, split)
}

/// Parses `class_index weight` lines; `#` starts a comment. Classes not
/// listed get weight zero.
pub fn parse_class_weights(text: &str, num_classes: usize) -> Result<Vec<f64>> {
    let mut weights = vec![0.0; num_classes];
    let mut seen = vec![false; num_classes];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::Config(format!(
                "class weights line {}: expected `class_index weight`",
                i + 1
            ))
        };
        let mut parts = line.split_whitespace();
        let (Some(c), Some(w), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let c: usize = c.parse().map_err(|_| bad())?;
        let w: f64 = w.parse().map_err(|_| bad())?;
        ensure!(
            c < num_classes,
            Config,
            "class weights line {}: class {c} out of range",
            i + 1
        );
        ensure!(
            w.is_finite() && w >= 0.0,
            Config,
            "class weights line {}: weight {w} must be >= 0",
            i + 1
        );
        ensure!(
            !seen[c],
            Config,
            "class weights line {}: class {c} listed twice",
            i + 1
        );
        seen[c] = true;
        weights[c] = w;
    }
    Ok(weights)
}

pub fn read_class_weights(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<f64>> {
    parse_class_weights(&fs::read_to_string(path)?, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_mismatch() {
        let images = Tensor4::zeros((3, 1, 2, 2)).unwrap();
        let labels = Labels::Single {
            classes: 2,
            labels: vec![0, 1],
        };
        assert!(matches!(
            Dataset::new(images, labels, Split::Train),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn class_weight_file() {
        let w = parse_class_weights("# c w\n0 1.5\n2 3\n", 3).unwrap();
        assert_eq!(w, vec![1.5, 0.0, 3.0]);
        assert!(parse_class_weights("5 1\n", 3).is_err());
        assert!(parse_class_weights("0 -1\n", 3).is_err());
        assert!(parse_class_weights("0 1 2\n", 3).is_err());
        assert!(parse_class_weights("0 1\n0 2\n", 3).is_err());
    }
}
