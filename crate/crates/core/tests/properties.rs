use proptest::prelude::*;
use xsep_core::arch::{
    build_xception, ArchOptions, ArchSpec, Shape3, Task, XceptionConfig, XceptionWidths,
};
use xsep_core::conv::{axis_geometry, conv2d, conv2d_im2col, conv2d_naive, ConvGeometry, Padding};
use xsep_core::data::{average_precision_at_k, topk_accuracy, weighted_map_at_k, xlbl, Labels};
use xsep_core::model::Model;
use xsep_core::optim::{polyak_update, OptimConfig, Optimizer};
use xsep_core::{xtsr, Activation, Error, Rng, Tensor4};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn max_rel(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

fn padding() -> impl Strategy<Value = Padding> {
    prop_oneof![Just(Padding::Same), Just(Padding::Valid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_size_law(d in 1usize..64, k in 1usize..8, s in 1usize..5, p in padding()) {
        match (p, axis_geometry(d, k, s, p)) {
            (Padding::Same, Ok((out, before))) => {
                prop_assert_eq!(out, d.div_ceil(s));
                let total = ((out - 1) * s + k).saturating_sub(d);
                prop_assert_eq!(before, total / 2);
            }
            (Padding::Valid, Ok((out, before))) => {
                prop_assert!(d >= k);
                prop_assert_eq!(out, (d - k) / s + 1);
                prop_assert_eq!(before, 0);
            }
            (Padding::Valid, Err(Error::Geometry(_))) => prop_assert!(d < k),
            (_, other) => prop_assert!(false, "unexpected {:?}", other),
        }
    }

    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = Rng::seed(seed);
        let g = ConvGeometry::new(3, 4, 3, 1 + rng.below(2), Padding::Same);
        let x = Tensor4::<f64>::randn((2, 3, 7, 6), &mut rng).unwrap();
        let y = Tensor4::<f64>::randn((2, 3, 7, 6), &mut rng).unwrap();
        let k = Tensor4::<f64>::randn((4, 3, 3, 3), &mut rng).unwrap();
        let mix = x.mul_scalar(a).add(&y.mul_scalar(b)).unwrap();
        let lhs = conv2d(&mix, &k, &g).unwrap();
        let rhs = conv2d(&x, &k, &g).unwrap().mul_scalar(a).add(&conv2d(&y, &k, &g).unwrap().mul_scalar(b)).unwrap();
        prop_assert!(max_rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn im2col_matches_naive(
        seed in any::<u64>(),
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
        s in 1usize..3,
        p in padding(),
        h in 5usize..10,
        w in 5usize..10,
    ) {
        let mut rng = Rng::seed(seed);
        let g = ConvGeometry::new(2, 3, k, s, p);
        let x = Tensor4::<f64>::randn((2, 2, h, w), &mut rng).unwrap();
        let kern = Tensor4::<f64>::randn((3, 2, k, k), &mut rng).unwrap();
        let a = conv2d_im2col(&x, &kern, &g).unwrap();
        let b = conv2d_naive(&x, &kern, &g).unwrap();
        prop_assert!(max_rel(&a, &b) < 1e-12);
    }

    #[test]
    fn arch_text_round_trips(
        classes in 2usize..30,
        repeats in 0usize..3,
        residuals in any::<bool>(),
        act in prop_oneof![Just(Activation::Identity), Just(Activation::Relu), Just(Activation::Elu)],
        fc in prop::collection::vec(1usize..64, 0..3),
        multi in any::<bool>(),
    ) {
        let cfg = XceptionConfig {
            num_classes: classes,
            middle_repeats: repeats,
            options: ArchOptions {
                residuals,
                intermediate_activation: act,
                fc_layers: fc,
                task: if multi { Task::MultiLabel } else { Task::SingleLabel },
            },
            ..XceptionConfig::toy()
        };
        let spec = build_xception(&cfg).unwrap();
        let text = spec.to_text();
        let back = ArchSpec::from_text(&text).unwrap();
        prop_assert_eq!(&back, &spec);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn corrupted_arch_text_rejected(seed in any::<u64>(), drop_line in any::<bool>()) {
        let spec = build_xception(&XceptionConfig::toy()).unwrap();
        let text = spec.to_text();
        let lines: Vec<&str> = text.lines().collect();
        let mut rng = Rng::seed(seed);
        let corrupted = if drop_line {
            // Any removed node line breaks the index sequence or the shapes.
            let victim = 1 + rng.below(lines.len() - 2);
            lines.iter().enumerate().filter(|&(i, _)| i != victim).map(|(_, l)| *l).collect::<Vec<_>>().join("\n")
        } else {
            // Widen the input of one convolution so it no longer fits.
            let convs: Vec<usize> = lines
                .iter()
                .enumerate()
                .filter(|(_, l)| l.contains(" sepconv ") || l.contains(" conv "))
                .map(|(i, _)| i)
                .collect();
            let victim = convs[rng.below(convs.len())];
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if i != victim {
                        return l.to_string();
                    }
                    l.split(' ')
                        .map(|tok| match tok.strip_prefix("in=") {
                            Some(v) => format!("in={}", v.parse::<usize>().unwrap() + 1),
                            None => tok.to_string(),
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        prop_assert!(ArchSpec::from_text(&corrupted).is_err());
    }

    #[test]
    fn topk_invariant_under_monotone_maps(
        raw in prop::collection::vec(-50i32..50, 6 * 7),
        labels in prop::collection::vec(0u32..7, 6),
        k in 1usize..8,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let a = Tensor4::from_vec((6, 7, 1, 1), scores.clone()).unwrap();
        let b = Tensor4::from_vec((6, 7, 1, 1), scores.iter().map(|v| (v / 10.0).exp()).collect()).unwrap();
        let ta = topk_accuracy(&a, &labels, k).unwrap();
        prop_assert_eq!(ta, topk_accuracy(&b, &labels, k).unwrap());
        if k > 1 {
            prop_assert!(topk_accuracy(&a, &labels, k - 1).unwrap() <= ta);
        }
        if k == 7 {
            prop_assert_eq!(ta, 1.0);
        }
    }

    #[test]
    fn ap_matches_pairwise_oracle(
        raw in prop::collection::vec(-5i32..5, 1..12),
        rel_bits in prop::collection::vec(any::<bool>(), 12),
        k in 1usize..15,
    ) {
        let n = raw.len();
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let relevant = &rel_bits[..n];
        // Rank of i is 1 + the items ahead of it: higher score, or equal
        // score with a lower index.
        let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let positives = relevant.iter().filter(|&&r| r).count();
        let got = average_precision_at_k(&scores, relevant, k);
        if positives == 0 {
            prop_assert!(got.is_none());
        } else {
            let mut sum = 0.0;
            for i in (0..n).filter(|&i| relevant[i] && rank(i) <= k) {
                let above = (0..n).filter(|&j| relevant[j] && rank(j) <= rank(i)).count();
                sum += above as f64 / rank(i) as f64;
            }
            let expect = sum / positives.min(k) as f64;
            prop_assert!((got.unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_map_is_weighted_mean_of_class_aps(
        seed in any::<u64>(),
        weights in prop::collection::vec(0.1f64..5.0, 4),
    ) {
        let mut rng = Rng::seed(seed);
        let n = 9;
        let scores: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
        let mut targets: Vec<u8> = (0..n * 4).map(|_| (rng.uniform() < 0.4) as u8).collect();
        targets[0] = 1;
        let t = Tensor4::from_vec((n, 4, 1, 1), scores.clone()).unwrap();
        let got = weighted_map_at_k(&t, &targets, &weights, 5).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..4 {
            let col: Vec<f64> = (0..n).map(|i| scores[i * 4 + c]).collect();
            let rel: Vec<bool> = (0..n).map(|i| targets[i * 4 + c] == 1).collect();
            if let Some(ap) = average_precision_at_k(&col, &rel, 5) {
                num += weights[c] * ap;
                den += weights[c];
            }
        }
        prop_assert!(rel(got, num / den) < 1e-12);
    }

    #[test]
    fn optimizer_state_mirrors_parameters(seed in any::<u64>(), rms in any::<bool>(), polyak in any::<bool>()) {
        let spec = xsep_core::arch::build_sepconv_vgg(&[4, 6], Shape3::new(3, 8, 8), 3).unwrap();
        let model = Model::new(&spec).unwrap();
        let mut rng = Rng::seed(seed);
        let mut store = model.init_params::<f32>(&mut rng).unwrap();
        let cfg = OptimConfig { polyak, ..if rms { OptimConfig::jft() } else { OptimConfig::imagenet() } };
        let mut opt = Optimizer::new(cfg, &store).unwrap();
        for _ in 0..3 {
            let grads: Vec<Tensor4<f32>> = store
                .iter()
                .map(|p| Tensor4::randn(p.value.dims(), &mut rng).unwrap())
                .collect();
            opt.step(&mut store, &grads, 0.01, 4).unwrap();
        }
        prop_assert!(opt.state.check_mirrors(&store).is_ok());
        let per = 1 + rms as usize + polyak as usize;
        prop_assert_eq!(opt.state.named(&store).len(), per * store.iter().filter(|p| p.trainable).count());
        prop_assert_eq!(opt.state.samples_seen, 12);
    }

    #[test]
    fn polyak_converges_geometrically(start in prop::collection::vec(-10.0f64..10.0, 1..8), target in -5.0f64..5.0, beta in 0.5f64..0.999, steps in 1usize..60) {
        let mut shadow = start.clone();
        let w = vec![target; start.len()];
        for _ in 0..steps {
            polyak_update(&mut shadow, &w, beta).unwrap();
        }
        for (s, s0) in shadow.iter().zip(&start) {
            let expect = target + beta.powi(steps as i32) * (s0 - target);
            prop_assert!((s - expect).abs() < 1e-9 * (1.0 + s0.abs()));
        }
    }

    #[test]
    fn xtsr_round_trip_is_byte_identical(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let mut rng = Rng::seed(seed);
        let t = Tensor4::<f32>::randn((n, c, h, w), &mut rng).unwrap();
        let bytes = xtsr::encode(&t).unwrap();
        let (back, used) = xtsr::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(xtsr::encode(&back.into_f32().unwrap()).unwrap(), bytes);
    }

    #[test]
    fn xlbl_round_trip_is_byte_identical(classes in 1usize..20, rows in 1usize..30, seed in any::<u64>(), multi in any::<bool>()) {
        let mut rng = Rng::seed(seed);
        let labels = if multi {
            Labels::Multi { classes, rows: (0..rows * classes).map(|_| (rng.uniform() < 0.3) as u8).collect() }
        } else {
            Labels::Single { classes, labels: (0..rows).map(|_| rng.below(classes) as u32).collect() }
        };
        let bytes = xlbl::encode(&labels).unwrap();
        let back = xlbl::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &labels);
        prop_assert_eq!(xlbl::encode(&back).unwrap(), bytes);
    }
}

#[test]
fn toy_widths_are_quarter_scale() {
    let full = XceptionWidths::full();
    let toy = XceptionWidths::toy();
    for (f, t) in full.entry.iter().zip(&toy.entry) {
        assert_eq!(f / 4, *t);
    }
}
