//! Convolution kernels: regular, depthwise, depthwise separable and the
//! segment-spectrum family in between.
//!
//! All kernels compute cross-correlation (no kernel flip) on
//! batch-channel-row-col tensors and never carry a bias term.

mod depthwise;
mod im2col;
mod naive;
mod separable;
mod spectrum;

use std::fmt;
use std::str::FromStr;

pub use depthwise::{depthwise_conv2d, depthwise_conv2d_backward};
pub use im2col::{conv2d, conv2d_backward, conv2d_im2col, conv2d_im2col_backward};
pub use naive::{conv2d_naive, conv2d_naive_backward};
pub use separable::{
    separable_conv2d, separable_conv2d_backward, SeparableConvParams, SeparableGrads,
};
pub use spectrum::{
    grouped_conv2d, grouped_conv2d_backward, segment_spectrum_conv, segment_spectrum_conv_backward,
    SegmentSpectrumGrads, SegmentSpectrumParams,
};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Same => "same",
            Self::Valid => "valid",
        })
    }
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Self::Same),
            "valid" => Ok(Self::Valid),
            other => Err(Error::Config(format!("unknown padding `{other}`"))),
        }
    }
}

/// Output size and leading pad along one axis.
///
/// Same: `ceil(d / s)` outputs, total pad `max((ceil(d/s) - 1) * s + k - d, 0)`
/// split with `floor(p / 2)` before. Valid: `floor((d - k) / s) + 1`.
pub fn axis_geometry(d: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
    ensure!(k >= 1 && s >= 1, Geometry, "kernel and stride must be >= 1");
    match padding {
        Padding::Same => {
            let out = d.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(d);
            ensure!(out >= 1, Geometry, "empty input axis");
            Ok((out, total / 2))
        }
        Padding::Valid => {
            ensure!(
                d >= k,
                Geometry,
                "input extent {d} smaller than kernel {k} under valid padding"
            );
            Ok(((d - k) / s + 1, 0))
        }
    }
}

/// Spatial window description shared by convolutions and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

/// Output dims and leading pads of a window applied to an `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Plan {
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn square(kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.plan(h, w)?;
        Ok((p.oh, p.ow))
    }

    pub(crate) fn plan(&self, h: usize, w: usize) -> Result<Plan> {
        let (oh, pad_top) = axis_geometry(h, self.kernel.0, self.stride.0, self.padding)?;
        let (ow, pad_left) = axis_geometry(w, self.kernel.1, self.stride.1, self.padding)?;
        Ok(Plan {
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            in_channels,
            out_channels,
        }
    }

    /// 1x1, stride 1.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, Padding::Valid)
    }

    pub fn window(&self) -> Window {
        Window {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.kernel.0 >= 1 && self.kernel.1 >= 1 && self.stride.0 >= 1 && self.stride.1 >= 1,
            Geometry,
            "kernel and stride must be >= 1"
        );
        ensure!(
            self.in_channels >= 1 && self.out_channels >= 1,
            Geometry,
            "channel counts must be >= 1"
        );
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.window().output_hw(h, w)
    }

    pub fn kernel_dims(&self) -> Dims {
        Dims::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub(crate) fn check<T: Scalar>(&self, x: &Tensor4<T>, kernel: &Tensor4<T>) -> Result<Plan> {
        self.validate()?;
        ensure!(
            x.dims().c == self.in_channels,
            Shape,
            "input has {} channels, geometry expects {}",
            x.dims().c,
            self.in_channels
        );
        ensure!(
            kernel.dims() == self.kernel_dims(),
            Shape,
            "kernel dims {} do not match geometry {}",
            kernel.dims(),
            self.kernel_dims()
        );
        self.window().plan(x.dims().h, x.dims().w)
    }

    pub(crate) fn output_dims<T: Scalar>(&self, x: &Tensor4<T>, plan: Plan) -> Dims {
        Dims::new(x.dims().n, self.out_channels, plan.oh, plan.ow)
    }
}

/// Maps an output coordinate and kernel tap to an input coordinate, or
/// `None` when the tap lands in the zero padding.
#[inline]
pub(crate) fn source(
    o: usize,
    stride: usize,
    tap: usize,
    pad: usize,
    extent: usize,
) -> Option<usize> {
    let pos = (o * stride + tap).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// Output positions `lo..hi` along one axis whose tap lands inside the
/// input; position `o` reads input `o * stride + tap - pad`.
#[inline]
pub(crate) fn valid_range(
    out: usize,
    stride: usize,
    tap: usize,
    pad: usize,
    extent: usize,
) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if extent + pad <= tap {
        0
    } else {
        ((extent + pad - tap - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

pub(crate) fn check_grad<T: Scalar>(grad: &Tensor4<T>, expected: Dims) -> Result<()> {
    ensure!(
        grad.dims() == expected,
        Shape,
        "gradient dims {} do not match forward output {expected}",
        grad.dims()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_and_valid_axes() {
        assert_eq!(axis_geometry(5, 3, 1, Padding::Same).unwrap(), (5, 1));
        assert_eq!(axis_geometry(4, 3, 2, Padding::Same).unwrap(), (2, 0));
        assert_eq!(axis_geometry(5, 3, 2, Padding::Same).unwrap(), (3, 1));
        assert_eq!(axis_geometry(299, 3, 2, Padding::Valid).unwrap(), (149, 0));
        assert_eq!(axis_geometry(147, 3, 2, Padding::Same).unwrap(), (74, 1));
        assert!(matches!(
            axis_geometry(2, 3, 1, Padding::Valid),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn one_by_one_stride_two_same_has_no_pad() {
        assert_eq!(axis_geometry(7, 1, 2, Padding::Same).unwrap(), (4, 0));
    }
}
