use super::Mode;
use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

/// Inverted dropout. In Train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; Infer mode is the
/// identity. Returns the output and the per-element scale mask (Train only).
pub fn dropout<T: Scalar>(
    x: &Tensor4<T>,
    rate: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<(Tensor4<T>, Option<Tensor4<T>>)> {
    ensure!(
        (0.0..1.0).contains(&rate),
        Parameter,
        "dropout rate must be in [0, 1), got {rate}"
    );
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let draws = (0..x.len())
        .map(|_| {
            if rng.uniform() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mask = Tensor4::from_vec(x.dims(), draws)?;
    let y = x.zip_map(&mask, |v, m| v * m)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(
    mask: Option<&Tensor4<T>>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    match mask {
        Some(m) => grad_out.zip_map(m, |g, s| g * s),
        None => Ok(grad_out.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn identity_cases() {
        let x = Tensor4::<f32>::randn((2, 3, 4, 4), &mut Rng::seed(1)).unwrap();
        let mut rng = Rng::seed(2);
        assert_eq!(dropout(&x, 0.0, &mut rng, Mode::Train).unwrap().0, x);
        assert_eq!(dropout(&x, 0.9, &mut rng, Mode::Infer).unwrap().0, x);
    }

    #[test]
    fn rate_one_rejected() {
        let x = Tensor4::<f32>::ones((1, 1, 1, 1)).unwrap();
        assert!(matches!(
            dropout(&x, 1.0, &mut Rng::seed(0), Mode::Train),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn expectation_preserved() {
        // Each output is 0 or 2 with equal odds: mean 1, sd 1 per element, so
        // the sample mean of 1e5 elements has sd 1/sqrt(1e5) ~= 0.00316.
        let x = Tensor4::<f64>::ones((1, 1, 1, 100_000)).unwrap();
        let (y, _) = dropout(&x, 0.5, &mut Rng::seed(12), Mode::Train).unwrap();
        let sigma = 1.0 / (100_000f64).sqrt();
        assert!((y.mean() - 1.0).abs() < 3.0 * sigma, "mean {}", y.mean());
    }
}
