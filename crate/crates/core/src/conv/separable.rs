use super::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvGeometry};
use crate::activation::Activation;
use crate::error::{ensure, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Weights of a depthwise separable convolution: a depthwise kernel shaped
/// `(1, Cin * m, kh, kw)` followed by a pointwise kernel `(Cout, Cin * m, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConvParams<T: Scalar = f32> {
    pub depthwise: Tensor4<T>,
    pub pointwise: Tensor4<T>,
    pub depth_multiplier: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparableGrads<T: Scalar = f32> {
    pub depthwise: Tensor4<T>,
    pub pointwise: Tensor4<T>,
}

impl<T: Scalar> SeparableConvParams<T> {
    /// Number of weights: `Cin*m*kh*kw + Cin*m*Cout`.
    pub fn weight_count(&self) -> usize {
        self.depthwise.len() + self.pointwise.len()
    }
}

fn split(geom: &ConvGeometry, m: usize) -> (ConvGeometry, ConvGeometry) {
    let mid = geom.in_channels * m;
    let dw = ConvGeometry {
        out_channels: mid,
        ..*geom
    };
    (dw, ConvGeometry::pointwise(mid, geom.out_channels))
}

fn check<T: Scalar>(params: &SeparableConvParams<T>, geom: &ConvGeometry) -> Result<()> {
    let mid = geom.in_channels * params.depth_multiplier;
    ensure!(
        params.pointwise.dims() == Dims::new(geom.out_channels, mid, 1, 1),
        Shape,
        "pointwise kernel dims {} do not match {} -> {}",
        params.pointwise.dims(),
        mid,
        geom.out_channels
    );
    Ok(())
}

/// `pointwise(activation(depthwise(x)))`; the depthwise half carries the
/// geometry's kernel, stride and padding.
pub fn separable_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    params: &SeparableConvParams<T>,
    geom: &ConvGeometry,
    activation: Activation,
) -> Result<Tensor4<T>> {
    check(params, geom)?;
    let (dw, pw) = split(geom, params.depth_multiplier);
    let d = depthwise_conv2d(x, &params.depthwise, &dw, params.depth_multiplier)?;
    conv2d(&activation.apply(&d), &params.pointwise, &pw)
}

/// Returns the input gradient and both kernel gradients. The depthwise
/// intermediate is recomputed from `x`.
pub fn separable_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    params: &SeparableConvParams<T>,
    geom: &ConvGeometry,
    activation: Activation,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, SeparableGrads<T>)> {
    check(params, geom)?;
    let (dw, pw) = split(geom, params.depth_multiplier);
    let d = depthwise_conv2d(x, &params.depthwise, &dw, params.depth_multiplier)?;
    let a = activation.apply(&d);
    let (ga, gpw) = conv2d_backward(&a, &params.pointwise, &pw, grad_out)?;
    let gd = activation.backward(&d, &ga);
    let (gx, gdw) =
        depthwise_conv2d_backward(x, &params.depthwise, &dw, params.depth_multiplier, &gd)?;
    Ok((
        gx,
        SeparableGrads {
            depthwise: gdw,
            pointwise: gpw,
        },
    ))
}
