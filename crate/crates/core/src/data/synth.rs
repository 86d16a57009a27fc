use std::f64::consts::PI;

use super::{Dataset, Labels, Split};
use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

const CHANNELS: usize = 3;
const NOISE: f64 = 3.0;

/// Adds one class's grating to a `3 x hw x hw` image: orientation
/// `pi * c / K`, one of three spatial frequencies, a per-class colour
/// balance, random phase and contrast.
fn add_grating(img: &mut [f32], hw: usize, class: usize, classes: usize, rng: &mut Rng) {
    let theta = PI * class as f64 / classes as f64 + rng.uniform_in(-0.05, 0.05);
    let freq = [0.10, 0.17, 0.24][class % 3];
    let phase = rng.uniform_in(0.0, 2.0 * PI);
    let contrast = rng.uniform_in(0.7, 1.3);
    let (s, c) = theta.sin_cos();
    let hue = 2.0 * PI * class as f64 / classes as f64;
    for ch in 0..CHANNELS {
        let gain = contrast * (0.6 + 0.4 * (hue + 2.0 * PI * ch as f64 / 3.0).cos());
        let plane = &mut img[ch * hw * hw..(ch + 1) * hw * hw];
        for y in 0..hw {
            for x in 0..hw {
                let t = 2.0 * PI * freq * (x as f64 * c + y as f64 * s) + phase;
                plane[y * hw + x] += (gain * t.sin()) as f32;
            }
        }
    }
}

fn noise(img: &mut [f32], rng: &mut Rng) {
    for v in img {
        *v += (NOISE * rng.normal()) as f32;
    }
}

/// Balanced single-label set of `n` procedural `3 x hw x hw` images, one
/// grating per image plus Gaussian noise. Fully determined by `seed`.
pub fn synth_dataset(num_classes: usize, n: usize, hw: usize, seed: u64) -> Result<Dataset> {
    ensure!(
        num_classes >= 1 && n >= 1 && hw >= 1,
        Config,
        "classes, count and size must be >= 1"
    );
    let mut rng = Rng::seed(seed);
    let mut labels: Vec<u32> = (0..n).map(|i| (i % num_classes) as u32).collect();
    rng.shuffle(&mut labels);
    let per = CHANNELS * hw * hw;
    let mut data = vec![0f32; n * per];
    for (img, &l) in data.chunks_exact_mut(per).zip(&labels) {
        add_grating(img, hw, l as usize, num_classes, &mut rng);
        noise(img, &mut rng);
    }
    Dataset::new(
        Tensor4::from_vec((n, CHANNELS, hw, hw), data)?,
        Labels::Single {
            classes: num_classes,
            labels,
        },
        Split::Train,
    )
}

/// Multi-label variant: each image superimposes 1 to 3 distinct class
/// gratings, and its multi-hot row marks exactly those classes.
pub fn synth_multilabel(num_classes: usize, n: usize, hw: usize, seed: u64) -> Result<Dataset> {
    ensure!(
        num_classes >= 1 && n >= 1 && hw >= 1,
        Config,
        "classes, count and size must be >= 1"
    );
    let mut rng = Rng::seed(seed);
    let per = CHANNELS * hw * hw;
    let mut data = vec![0f32; n * per];
    let mut rows = vec![0u8; n * num_classes];
    for (img, row) in data
        .chunks_exact_mut(per)
        .zip(rows.chunks_exact_mut(num_classes))
    {
        let k = (1 + rng.below(3)).min(num_classes);
        let mut classes: Vec<usize> = (0..num_classes).collect();
        rng.shuffle(&mut classes);
        for &c in &classes[..k] {
            row[c] = 1;
            add_grating(img, hw, c, num_classes, &mut rng);
        }
        noise(img, &mut rng);
    }
    Dataset::new(
        Tensor4::from_vec((n, CHANNELS, hw, hw), data)?,
        Labels::Multi {
            classes: num_classes,
            rows,
        },
        Split::Train,
    )
}
