use std::fmt;
use std::str::FromStr;

use crate::arch::{
    build_extreme_inception, build_simplified_inception, reformulate_inception, Shape3,
};
use crate::conv::{
    conv2d_naive, depthwise_conv2d, segment_spectrum_conv, ConvGeometry, Padding,
    SegmentSpectrumParams,
};
use crate::error::{ensure, Error, Result};
use crate::model::{Model, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EquivCheck {
    InceptionReformulation,
    SpectrumEndpoints,
}

impl EquivCheck {
    pub const NAMES: [&'static str; 2] = ["inception-reformulation", "spectrum-endpoints"];
}

impl FromStr for EquivCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inception-reformulation" => Ok(Self::InceptionReformulation),
            "spectrum-endpoints" => Ok(Self::SpectrumEndpoints),
            other => Err(Error::Config(format!("unknown check `{other}`"))),
        }
    }
}

impl fmt::Display for EquivCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InceptionReformulation => "inception-reformulation",
            Self::SpectrumEndpoints => "spectrum-endpoints",
        })
    }
}

/// Worst relative deviation over a batch of randomized instances.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivReport {
    pub check: String,
    pub instances: usize,
    pub worst: f64,
    pub worst_instance: usize,
}

impl EquivReport {
    fn new(check: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            instances: 0,
            worst: 0.0,
            worst_instance: 0,
        }
    }

    fn record(&mut self, dev: f64) {
        if self.instances == 0 || dev > self.worst {
            self.worst = dev;
            self.worst_instance = self.instances;
        }
        self.instances += 1;
    }
}

impl fmt::Display for EquivReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instances={} max_rel_dev={:.3e} worst_instance={}",
            self.check, self.instances, self.worst, self.worst_instance
        )
    }
}

/// `max |a - b| / max |a|`, or the absolute deviation when `a` is all zero.
pub fn relative_deviation<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    let diff = a.sub(b)?.max_abs().as_f64();
    let scale = a.max_abs().as_f64();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Maps weights of the tower form onto the reformulated form: the tower 1x1
/// kernels are stacked into one pointwise kernel and the tower 3x3 kernels
/// become the per-segment kernels.
pub fn reformulate_inception_params<T: Scalar>(
    towers: &Model,
    store: &ParamStore<T>,
    reformulated: &Model,
) -> Result<ParamStore<T>> {
    towers.check_store(store)?;
    let mut rng = Rng::seed(0);
    let mut out: ParamStore<T> = reformulated.init_params(&mut rng)?;
    let g = out.iter().filter(|p| p.name.starts_with("1.seg")).count();
    let mut stacked = Vec::new();
    for k in 0..g {
        stacked.extend_from_slice(store.get(&format!("0.t{k}.0.kernel"))?.as_slice());
        *out.get_mut(&format!("1.seg{k}"))? = store.get(&format!("0.t{k}.1.kernel"))?.clone();
    }
    let pw = out.get_mut("0.kernel")?;
    ensure!(
        stacked.len() == pw.len(),
        Shape,
        "stacked 1x1 kernels do not fill the pointwise kernel"
    );
    *pw = Tensor4::from_vec(pw.dims(), stacked)?;
    Ok(out)
}

/// Runs the tower form and its reformulation on `instances` random cases:
/// 1 to 4 towers of width up to 8, inputs up to 12x12.
pub fn inception_reformulation(seed: u64, instances: usize) -> Result<EquivReport> {
    let mut report = EquivReport::new(EquivCheck::InceptionReformulation.to_string());
    let mut rng = Rng::stream(seed, 0x1e9c);
    for _ in 0..instances {
        let g = 1 + rng.below(4);
        let widths: Vec<usize> = (0..g).map(|_| 1 + rng.below(8)).collect();
        let input = Shape3::new(1 + rng.below(8), 3 + rng.below(10), 3 + rng.below(10));
        let a_spec = build_simplified_inception(input, &widths)?;
        let b_spec = reformulate_inception(&a_spec)?;
        let (a, b) = (Model::new(&a_spec)?, Model::new(&b_spec)?);
        let a_store: ParamStore<f32> = a.init_params(&mut rng)?;
        let b_store = reformulate_inception_params(&a, &a_store, &b)?;
        let x = Tensor4::randn((1 + rng.below(2), input.c, input.h, input.w), &mut rng)?;
        report.record(relative_deviation(
            &a.predict(&a_store, &x)?,
            &b.predict(&b_store, &x)?,
        )?);
    }
    Ok(report)
}

/// Both endpoints of the segment spectrum against independent compositions:
/// one segment equals a 1x1 convolution followed by a full spatial
/// convolution, and one segment per channel equals a 1x1 convolution followed
/// by a depthwise convolution (also built as the extreme module).
pub fn spectrum_endpoints(seed: u64, instances: usize) -> Result<(EquivReport, EquivReport)> {
    let mut one = EquivReport::new("spectrum g=1");
    let mut full = EquivReport::new("spectrum g=M");
    let mut rng = Rng::stream(seed, 0x5bec);
    for _ in 0..instances {
        let cin = 1 + rng.below(8);
        let m = 1 + rng.below(8);
        let (h, w) = (3 + rng.below(10), 3 + rng.below(10));
        let stride = 1 + rng.below(2);
        let padding = if rng.below(2) == 0 {
            Padding::Same
        } else {
            Padding::Valid
        };
        let x: Tensor4<f32> = Tensor4::randn((1 + rng.below(2), cin, h, w), &mut rng)?;
        let pw = Tensor4::randn((m, cin, 1, 1), &mut rng)?;
        let geom = ConvGeometry::new(cin, m, 3, stride, padding);
        let pw_geom = ConvGeometry::pointwise(cin, m);
        let p = conv2d_naive(&x, &pw, &pw_geom)?;

        let spatial = Tensor4::randn((m, m, 3, 3), &mut rng)?;
        let params = SegmentSpectrumParams {
            segments: 1,
            pointwise: pw.clone(),
            spatial: vec![spatial.clone()],
        };
        let oracle = conv2d_naive(&p, &spatial, &ConvGeometry::new(m, m, 3, stride, padding))?;
        one.record(relative_deviation(
            &oracle,
            &segment_spectrum_conv(&x, &params, &geom)?,
        )?);

        let filters: Vec<Tensor4<f32>> = (0..m)
            .map(|_| Tensor4::randn((1, 1, 3, 3), &mut rng))
            .collect::<Result<_>>()?;
        let dw = Tensor4::from_vec(
            (1, m, 3, 3),
            filters
                .iter()
                .flat_map(|f| f.as_slice().iter().copied())
                .collect(),
        )?;
        let params = SegmentSpectrumParams {
            segments: m,
            pointwise: pw.clone(),
            spatial: filters,
        };
        let got = segment_spectrum_conv(&x, &params, &geom)?;
        let oracle = depthwise_conv2d(&p, &dw, &ConvGeometry::new(m, m, 3, stride, padding), 1)?;
        let mut dev = relative_deviation(&oracle, &got)?;
        if stride == 1 && padding == Padding::Same {
            let spec = build_extreme_inception(Shape3::new(cin, h, w), m)?;
            let model = Model::new(&spec)?;
            let mut store: ParamStore<f32> = model.init_params(&mut rng)?;
            *store.get_mut("0.kernel")? = pw;
            *store.get_mut("1.kernel")? = dw;
            dev = dev.max(relative_deviation(&model.predict(&store, &x)?, &got)?);
        }
        full.record(dev);
    }
    Ok((one, full))
}
