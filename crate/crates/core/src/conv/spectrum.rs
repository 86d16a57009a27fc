//! The spectrum between regular and depthwise separable convolution: a
//! pointwise projection to `M` channels followed by independent spatial
//! convolutions over contiguous channel segments.

use super::{conv2d, conv2d_backward, ConvGeometry};
use crate::error::{ensure, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Segment widths taken from the first dim of each `(t, t, kh, kw)` kernel.
fn segments<T: Scalar>(kernels: &[Tensor4<T>], geom: &ConvGeometry) -> Result<Vec<usize>> {
    ensure!(
        !kernels.is_empty(),
        Parameter,
        "at least one segment is required"
    );
    let mut widths = Vec::with_capacity(kernels.len());
    for k in kernels {
        let d = k.dims();
        ensure!(
            d.c == d.n && d.h == geom.kernel.0 && d.w == geom.kernel.1,
            Shape,
            "segment kernel dims {d} must be (t, t, {}, {})",
            geom.kernel.0,
            geom.kernel.1
        );
        widths.push(d.n);
    }
    let total: usize = widths.iter().sum();
    ensure!(
        total == geom.in_channels && total == geom.out_channels,
        Shape,
        "segments cover {total} channels, geometry has {} -> {}",
        geom.in_channels,
        geom.out_channels
    );
    Ok(widths)
}

fn segment_geom(geom: &ConvGeometry, width: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: width,
        out_channels: width,
        ..*geom
    }
}

/// Block-diagonal spatial convolution: segment `s` of the channels is
/// convolved with `kernels[s]` only, and the results are concatenated in order.
pub fn grouped_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    kernels: &[Tensor4<T>],
    geom: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let widths = segments(kernels, geom)?;
    ensure!(
        x.dims().c == geom.in_channels,
        Shape,
        "input has {} channels, expected {}",
        x.dims().c,
        geom.in_channels
    );
    let mut outs = Vec::with_capacity(widths.len());
    let mut start = 0;
    for (k, &w) in kernels.iter().zip(&widths) {
        let part = x.slice_channels(start, w)?;
        outs.push(conv2d(&part, k, &segment_geom(geom, w))?);
        start += w;
    }
    Tensor4::concat_channels(&outs.iter().collect::<Vec<_>>())
}

/// Returns the input gradient and one kernel gradient per segment.
pub fn grouped_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernels: &[Tensor4<T>],
    geom: &ConvGeometry,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<Tensor4<T>>)> {
    let widths = segments(kernels, geom)?;
    ensure!(
        grad_out.dims().c == geom.out_channels,
        Shape,
        "gradient has {} channels, expected {}",
        grad_out.dims().c,
        geom.out_channels
    );
    let mut gxs = Vec::with_capacity(widths.len());
    let mut gks = Vec::with_capacity(widths.len());
    let mut start = 0;
    for (k, &w) in kernels.iter().zip(&widths) {
        let part = x.slice_channels(start, w)?;
        let g = grad_out.slice_channels(start, w)?;
        let (gx, gk) = conv2d_backward(&part, k, &segment_geom(geom, w), &g)?;
        gxs.push(gx);
        gks.push(gk);
        start += w;
    }
    Ok((
        Tensor4::concat_channels(&gxs.iter().collect::<Vec<_>>())?,
        gks,
    ))
}

/// Weights of a segment-spectrum convolution with `segments` equal parts:
/// a pointwise kernel `(M, Cin, 1, 1)` and `segments` spatial kernels of
/// shape `(M/g, M/g, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSpectrumParams<T: Scalar = f32> {
    pub segments: usize,
    pub pointwise: Tensor4<T>,
    pub spatial: Vec<Tensor4<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSpectrumGrads<T: Scalar = f32> {
    pub pointwise: Tensor4<T>,
    pub spatial: Vec<Tensor4<T>>,
}

impl<T: Scalar> SegmentSpectrumParams<T> {
    pub fn mid_channels(&self) -> usize {
        self.pointwise.dims().n
    }

    /// Spatial weight count `M^2 * kh * kw / g`.
    pub fn spatial_weight_count(&self) -> usize {
        self.spatial.iter().map(Tensor4::len).sum()
    }

    fn check(&self, geom: &ConvGeometry) -> Result<(ConvGeometry, ConvGeometry)> {
        let m = self.mid_channels();
        ensure!(self.segments >= 1, Parameter, "segment count must be >= 1");
        ensure!(
            m % self.segments == 0,
            Parameter,
            "{} segments do not divide {m} channels",
            self.segments
        );
        ensure!(
            self.spatial.len() == self.segments,
            Parameter,
            "expected {} spatial kernels, found {}",
            self.segments,
            self.spatial.len()
        );
        let width = m / self.segments;
        for k in &self.spatial {
            ensure!(
                k.dims() == Dims::new(width, width, geom.kernel.0, geom.kernel.1),
                Shape,
                "spatial kernel dims {} (segment width {width})",
                k.dims()
            );
        }
        ensure!(
            geom.out_channels == m,
            Shape,
            "geometry outputs {} channels, pointwise projects to {m}",
            geom.out_channels
        );
        let pw = ConvGeometry::pointwise(geom.in_channels, m);
        let spatial = ConvGeometry {
            in_channels: m,
            out_channels: m,
            ..*geom
        };
        Ok((pw, spatial))
    }
}

/// Pointwise projection to `M` channels, then a spatial convolution applied
/// independently to each of the `g` contiguous channel segments.
pub fn segment_spectrum_conv<T: Scalar>(
    x: &Tensor4<T>,
    params: &SegmentSpectrumParams<T>,
    geom: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let (pw, spatial) = params.check(geom)?;
    let p = conv2d(x, &params.pointwise, &pw)?;
    grouped_conv2d(&p, &params.spatial, &spatial)
}

pub fn segment_spectrum_conv_backward<T: Scalar>(
    x: &Tensor4<T>,
    params: &SegmentSpectrumParams<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, SegmentSpectrumGrads<T>)> {
    let (pw, spatial) = params.check(geom)?;
    let p = conv2d(x, &params.pointwise, &pw)?;
    let (gp, gspatial) = grouped_conv2d_backward(&p, &params.spatial, &spatial, grad_out)?;
    let (gx, gpw) = conv2d_backward(x, &params.pointwise, &pw, &gp)?;
    Ok((
        gx,
        SegmentSpectrumGrads {
            pointwise: gpw,
            spatial: gspatial,
        },
    ))
}
