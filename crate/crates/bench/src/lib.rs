//! Shared fixtures for the kernel benchmarks.

use xsep_core::conv::{ConvGeometry, Padding, SeparableConvParams};
use xsep_core::{Rng, Tensor4};

/// Input batch plus a regular kernel and separable weights for one shape.
pub struct Workload {
    pub x: Tensor4<f32>,
    pub geom: ConvGeometry,
    pub kernel: Tensor4<f32>,
    pub separable: SeparableConvParams<f32>,
}

impl Workload {
    /// Stride 1, Same padding, `k x k` spatial kernels.
    pub fn new(n: usize, c: usize, hw: usize, cout: usize, k: usize) -> Self {
        let mut rng = Rng::seed(0xbe9c);
        let geom = ConvGeometry::new(c, cout, k, 1, Padding::Same);
        let randn = |dims: (usize, usize, usize, usize), rng: &mut Rng| {
            Tensor4::randn(dims, rng).expect("valid dims")
        };
        Self {
            x: randn((n, c, hw, hw), &mut rng),
            kernel: randn((cout, c, k, k), &mut rng),
            separable: SeparableConvParams {
                depthwise: randn((1, c, k, k), &mut rng),
                pointwise: randn((cout, c, 1, 1), &mut rng),
                depth_multiplier: 1,
            },
            geom,
        }
    }

    pub fn label(&self) -> String {
        let d = self.x.dims();
        format!(
            "{}x{}x{}x{}->{}",
            d.n, d.c, d.h, d.w, self.geom.out_channels
        )
    }
}

/// Shapes taken from the toy and full-size networks.
pub fn shapes() -> Vec<Workload> {
    vec![
        Workload::new(8, 32, 16, 64, 3),
        Workload::new(8, 182, 4, 182, 3),
        Workload::new(1, 128, 37, 256, 3),
    ]
}
