use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Fraction of examples whose true class is among the `k` highest scores.
/// Equal scores rank the lower class index first.
pub fn topk_accuracy<T: Scalar>(logits: &Tensor4<T>, labels: &[u32], k: usize) -> Result<f64> {
    let d = logits.dims();
    let classes = d.example();
    ensure!(
        labels.len() == d.n,
        Data,
        "{} labels for {} rows",
        labels.len(),
        d.n
    );
    ensure!(
        k >= 1 && k <= classes,
        Parameter,
        "k = {k} must be in 1..={classes}"
    );
    let mut hits = 0usize;
    for (i, &t) in labels.iter().enumerate() {
        let t = t as usize;
        ensure!(
            t < classes,
            Data,
            "label {t} out of range for {classes} classes"
        );
        let row = logits.example(i);
        let st = row[t];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > st || (s == st && c < t))
            .count();
        hits += (rank < k) as usize;
    }
    Ok(hits as f64 / d.n as f64)
}

/// Ranking of `scores` by descending value, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Truncated average precision of one retrieval: precision at each relevant
/// rank within the top `k`, summed and divided by `min(positives, k)`.
/// `None` when there are no positives.
pub fn average_precision_at_k(scores: &[f64], relevant: &[bool], k: usize) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().take(k).enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives.min(k) as f64)
}

/// Class-centric weighted MAP@k: per class, images are ranked by that
/// class's score; the per-class APs are averaged with `weights` over classes
/// that have at least one positive.
pub fn weighted_map_at_k<T: Scalar>(
    scores: &Tensor4<T>,
    targets: &[u8],
    weights: &[f64],
    k: usize,
) -> Result<f64> {
    let d = scores.dims();
    let classes = d.example();
    ensure!(k >= 1, Parameter, "k must be >= 1");
    ensure!(
        targets.len() == d.n * classes,
        Data,
        "{} targets for {} scores",
        targets.len(),
        d.len()
    );
    ensure!(
        weights.len() == classes,
        Config,
        "{} weights for {classes} classes",
        weights.len()
    );
    let (mut num, mut den) = (0.0, 0.0);
    let mut column = vec![0.0; d.n];
    let mut relevant = vec![false; d.n];
    for c in 0..classes {
        for i in 0..d.n {
            column[i] = scores.example(i)[c].as_f64();
            relevant[i] = targets[i * classes + c] == 1;
        }
        let Some(ap) = average_precision_at_k(&column, &relevant, k) else {
            continue;
        };
        let w = weights[c];
        ensure!(
            w > 0.0 && w.is_finite(),
            Config,
            "class {c} has positives but weight {w}"
        );
        num += w * ap;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Data("no class has a positive example".into()));
    }
    Ok(num / den)
}

pub const PROFILE_HEADER: &str =
    "step,epoch,lr,train_loss,train_top1,val_top1,val_top5,val_wmap100,wallclock_s";

/// One evaluation point. Metrics that do not apply to the task are `None`
/// and serialize as empty CSV fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub step: u64,
    pub epoch: f64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_top1: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub val_wmap100: Option<f64>,
    pub wallclock_s: Option<f64>,
}

fn field(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

impl MetricReport {
    /// Row matching [`PROFILE_HEADER`].
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{}", self.step, self.epoch, self.lr);
        for v in [
            self.train_loss,
            self.train_top1,
            self.val_top1,
            self.val_top5,
            self.val_wmap100,
            self.wallclock_s,
        ] {
            field(&mut s, v);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_cases() {
        let l = Tensor4::<f32>::from_vec((1, 5, 1, 1), vec![0.9, 0.8, 0.7, 0.1, 0.0]).unwrap();
        assert_eq!(topk_accuracy(&l, &[2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&l, &[2], 5).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&l, &[0], 1).unwrap(), 1.0);
        let tie = Tensor4::<f32>::from_vec((1, 3, 1, 1), vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(topk_accuracy(&tie, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&tie, &[1], 1).unwrap(), 0.0);
        assert!(topk_accuracy(&l, &[0], 6).is_err());
    }

    #[test]
    fn weighted_fixture() {
        // Class 0: positive ranked first (AP 1). Class 1: positive ranked
        // second of two (AP 1/2).
        let s = Tensor4::<f64>::from_vec((2, 2, 1, 1), vec![0.9, 0.9, 0.1, 0.1]).unwrap();
        let t = [1, 0, 0, 1];
        assert_eq!(weighted_map_at_k(&s, &t, &[1.0, 3.0], 100).unwrap(), 0.625);
    }

    #[test]
    fn positive_class_needs_weight() {
        let s = Tensor4::<f64>::from_vec((1, 2, 1, 1), vec![0.9, 0.1]).unwrap();
        assert!(matches!(
            weighted_map_at_k(&s, &[1, 1], &[1.0, 0.0], 100),
            Err(Error::Config(_))
        ));
        assert_eq!(
            weighted_map_at_k(&s, &[1, 0], &[1.0, 0.0], 100).unwrap(),
            1.0
        );
    }

    #[test]
    fn truncation_normalizer() {
        // 3 positives, k = 2, both top slots relevant.
        let ap = average_precision_at_k(&[3.0, 2.0, 1.0], &[true, true, true], 2).unwrap();
        assert_eq!(ap, 1.0);
        assert_eq!(average_precision_at_k(&[1.0], &[false], 5), None);
    }

    #[test]
    fn csv_row_blanks() {
        let r = MetricReport {
            step: 10,
            epoch: 0.5,
            lr: 0.045,
            train_loss: Some(1.25),
            val_top1: Some(0.5),
            ..MetricReport::default()
        };
        assert_eq!(r.csv_row(), "10,0.5,0.045,1.25,,0.5,,,");
        assert_eq!(
            PROFILE_HEADER.split(',').count(),
            r.csv_row().split(',').count()
        );
    }
}
