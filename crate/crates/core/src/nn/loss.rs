use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits `(n, classes, 1, 1)`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[u32],
) -> Result<(f64, Tensor4<T>)> {
    let d = logits.dims();
    let k = d.example();
    ensure!(
        labels.len() == d.n,
        Data,
        "{} labels for a batch of {}",
        labels.len(),
        d.n
    );
    let inv_n = 1.0 / d.n as f64;
    let mut grad = Vec::with_capacity(d.len());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        ensure!(
            (label as usize) < k,
            Data,
            "label {label} out of range for {k} classes"
        );
        let row = logits.example(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label as usize].as_f64();
        for (c, e) in exps.iter().enumerate() {
            let target = if c == label as usize { 1.0 } else { 0.0 };
            grad.push(T::of((e / z - target) * inv_n));
        }
    }
    Ok((total * inv_n, Tensor4::from_vec(d, grad)?))
}

/// Mean (over the batch) of the per-example sum of independent sigmoid
/// cross-entropies against multi-hot targets laid out row-major `n x classes`.
pub fn sigmoid_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    targets: &[u8],
) -> Result<(f64, Tensor4<T>)> {
    let d = logits.dims();
    ensure!(
        targets.len() == d.len(),
        Data,
        "{} targets for {} logits",
        targets.len(),
        d.len()
    );
    let inv_n = 1.0 / d.n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(d.len());
    for (v, &t) in logits.as_slice().iter().zip(targets) {
        ensure!(t <= 1, Data, "multi-hot target {t} is not 0 or 1");
        let z = v.as_f64();
        let t = t as f64;
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-z).exp());
        grad.push(T::of((sig - t) * inv_n));
    }
    Ok((total * inv_n, Tensor4::from_vec(d, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor4::<f64>::fill((3, 7, 1, 1), 0.3).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_gap_grows() {
        let mut prev = f64::INFINITY;
        for gap in [0.0, 1.0, 2.0, 5.0, 10.0, 20.0] {
            let logits = Tensor4::<f64>::from_vec((1, 3, 1, 1), vec![gap, 0.0, 0.0]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor4::<f32>::zeros((1, 3, 1, 1)).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sigmoid_at_zero() {
        let logits = Tensor4::<f64>::zeros((2, 2, 1, 1)).unwrap();
        let (loss, grad) = sigmoid_cross_entropy(&logits, &[1, 0, 0, 1]).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad.as_slice(), &[-0.25, 0.25, 0.25, -0.25]);
    }
}
