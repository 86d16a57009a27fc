use crate::error::{ensure, Result};
use crate::gemm::{gemm, Mat};
use crate::tensor::{Dims, Scalar, Tensor4};

fn check<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<(usize, usize, usize)> {
    let n = x.dims().n;
    let fan_in = x.dims().example();
    let wd = weight.dims();
    ensure!(
        wd.c * wd.h * wd.w == fan_in,
        Shape,
        "dense weight {wd} does not accept {fan_in} inputs"
    );
    ensure!(
        bias.dims() == Dims::new(1, wd.n, 1, 1),
        Shape,
        "bias dims {} for {} outputs",
        bias.dims(),
        wd.n
    );
    Ok((n, fan_in, wd.n))
}

/// Affine map of the flattened input: weight `(out, in, 1, 1)`, bias
/// `(1, out, 1, 1)`, output `(n, out, 1, 1)`.
pub fn dense<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (n, fan_in, out) = check(x, weight, bias)?;
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias.as_slice());
    }
    gemm(
        T::one(),
        Mat::row_major(x.as_slice(), n, fan_in),
        Mat::row_major(weight.as_slice(), out, fan_in).t(),
        T::one(),
        &mut y,
    );
    Tensor4::from_vec(Dims::new(n, out, 1, 1), y)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let (n, fan_in, out) = check(x, weight, bias)?;
    ensure!(
        grad_out.dims() == Dims::new(n, out, 1, 1),
        Shape,
        "dense gradient dims {}",
        grad_out.dims()
    );
    let g = Mat::row_major(grad_out.as_slice(), n, out);
    let mut gx = vec![T::zero(); n * fan_in];
    gemm(
        T::one(),
        g,
        Mat::row_major(weight.as_slice(), out, fan_in),
        T::zero(),
        &mut gx,
    );
    let mut gw = vec![T::zero(); out * fan_in];
    gemm(
        T::one(),
        g.t(),
        Mat::row_major(x.as_slice(), n, fan_in),
        T::zero(),
        &mut gw,
    );
    let mut gb = vec![T::zero(); out];
    for i in 0..n {
        for (b, &v) in gb.iter_mut().zip(grad_out.example(i)) {
            *b += v;
        }
    }
    Ok((
        Tensor4::from_vec(x.dims(), gx)?,
        Tensor4::from_vec(weight.dims(), gw)?,
        Tensor4::from_vec(bias.dims(), gb)?,
    ))
}
