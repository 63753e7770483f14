mod common;

use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;

use ebc_core::bins::{build_bins, BinPolicy, Granularity};
use ebc_core::data::{augment_sample, AugmentConfig};
use ebc_core::eval::metrics;
use ebc_core::head::{expected_density_from, probability_map};
use ebc_core::labels::{encode_targets, rasterize, TargetMaps};
use ebc_core::losses::{classification_loss, count_loss, dace_loss, sinkhorn_ot, OTConfig};
use ebc_core::maps::{DensityMap, ProbabilityMap};
use ebc_core::prompts::{build_prompt_set, embed_prompts, HashTextEncoder};

fn policy() -> impl Strategy<Value = BinPolicy> {
    (1u64..40, 0u64..40, 0usize..3).prop_map(|(m, s, g)| match g {
        0 => build_bins(Granularity::Fine, m, None).unwrap(),
        1 => build_bins(Granularity::Coarse, m, None).unwrap(),
        _ => build_bins(Granularity::Dynamic, m, Some(s % m)).unwrap(),
    })
}

fn logits(n: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(-4.0f64..4.0, n * h * w).prop_map(move |v| Array3::from_shape_vec((n, h, w), v).unwrap())
}

fn positive_grid(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.05f64..2.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn points(w: f64, h: f64, max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..w, 0.0..h).prop_map(|(x, y)| [x, y]), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    // bins

    #[test]
    fn quantize_is_monotone(p in policy(), a in 0u64..500, b in 0u64..500) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(p.quantize(lo) <= p.quantize(hi));
    }

    #[test]
    fn fine_policy_is_singletons_plus_tail(m in 1u64..64) {
        let p = build_bins(Granularity::Fine, m, None).unwrap();
        prop_assert_eq!(p.len() as u64, m + 1);
        for b in &p.bins()[..m as usize] {
            prop_assert!(b.is_singleton());
            prop_assert_eq!(b.representative, b.lo as f64);
        }
    }

    // labels

    #[test]
    fn rasterization_conserves_and_is_integral(pts in points(64.0, 48.0, 300), r in 1u32..9) {
        let bcm = rasterize(&pts, 64, 48, r).unwrap();
        prop_assert_eq!(bcm.total(), pts.len() as u64);
        let t = encode_targets(&bcm, &build_bins(Granularity::Fine, 4, None).unwrap(), false);
        prop_assert_eq!(t.gt_density.sum(), pts.len() as f64);
        prop_assert!(t.gt_density.iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
    }

    #[test]
    fn onehot_argmax_matches_classes(pts in points(64.0, 64.0, 200), p in policy()) {
        let t = encode_targets(&rasterize(&pts, 64, 64, 8).unwrap(), &p, false);
        let pm = ProbabilityMap::new(t.onehot.clone()).unwrap();
        prop_assert_eq!(pm.argmax(), t.class_indices);
    }

    #[test]
    fn shifting_by_one_block_shifts_the_grid(pts in points(48.0, 64.0, 100)) {
        let r = 8u32;
        let a = rasterize(&pts, 64, 64, r).unwrap();
        let moved: Vec<[f64; 2]> = pts.iter().map(|&[x, y]| [x + r as f64, y]).collect();
        let b = rasterize(&moved, 64, 64, r).unwrap();
        for i in 0..8 {
            for j in 0..6 {
                prop_assert_eq!(a.grid[[i, j]], b.grid[[i, j + 1]]);
            }
        }
    }

    // losses

    #[test]
    fn classification_loss_is_nonnegative(z in logits(3, 2, 3), cls in prop::collection::vec(0usize..3, 6)) {
        let p = probability_map(&z).unwrap();
        let classes = Array2::from_shape_vec((2, 3), cls).unwrap();
        let t = TargetMaps::from_parts(classes, 3, Array2::zeros((2, 3)));
        prop_assert!(classification_loss(&p, &t.onehot).unwrap() >= 0.0);
        let exact = ProbabilityMap::new(t.onehot.clone()).unwrap();
        prop_assert_eq!(classification_loss(&exact, &t.onehot).unwrap(), 0.0);
    }

    #[test]
    fn transport_is_symmetric(a in positive_grid(3, 3), b in positive_grid(3, 3)) {
        let cfg = OTConfig { max_iters: 100_000, tolerance: 1e-10, ..OTConfig::default() };
        let ab = sinkhorn_ot(&a, &b, &cfg).unwrap();
        let ba = sinkhorn_ot(&b, &a, &cfg).unwrap();
        prop_assert!(ab.converged && ba.converged);
        prop_assert!((ab.value - ba.value).abs() < 1e-8, "{} vs {}", ab.value, ba.value);
    }

    #[test]
    fn count_loss_vanishes_on_identical_maps(x in positive_grid(4, 5)) {
        let c = count_loss(&DensityMap(x.clone()), &x, &OTConfig::default()).unwrap();
        prop_assert!(c.total.abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn dace_grows_with_lambda(z in logits(4, 3, 3), l1 in 0.0f64..3.0, dl in 0.01f64..3.0) {
        let reps = [0.0, 1.0, 2.0, 3.5];
        let p = probability_map(&z).unwrap();
        let y = expected_density_from(&p, &reps).unwrap();
        // a ground truth far from the prediction keeps the count term positive
        let t = TargetMaps::from_parts(Array2::from_elem((3, 3), 3), 4, Array2::from_elem((3, 3), 9.0));
        let cfg = OTConfig::default();
        let a = dace_loss(&p, &t, &y, l1, &cfg).unwrap();
        let b = dace_loss(&p, &t, &y, l1 + dl, &cfg).unwrap();
        prop_assert!(a.count > 0.0);
        prop_assert!(b.total > a.total);
    }

    // head

    #[test]
    fn probabilities_are_normalized_and_density_bounded(z in logits(5, 4, 4)) {
        let reps = [0.0, 1.0, 2.0, 3.0, 6.5];
        let p = probability_map(&z).unwrap();
        for s in p.values().sum_axis(Axis(0)).iter() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        let y = expected_density_from(&p, &reps).unwrap();
        prop_assert!(y.0.iter().all(|&v| (0.0..=6.5).contains(&v)));
    }

    #[test]
    fn expectation_is_linear(z1 in logits(3, 2, 2), z2 in logits(3, 2, 2), alpha in 0.0f64..1.0) {
        let reps = [0.0, 1.5, 4.0];
        let (p1, p2) = (probability_map(&z1).unwrap(), probability_map(&z2).unwrap());
        let mix = p1.values() * alpha + p2.values() * (1.0 - alpha);
        let ym = expected_density_from(&ProbabilityMap::new(mix).unwrap(), &reps).unwrap();
        let y1 = expected_density_from(&p1, &reps).unwrap();
        let y2 = expected_density_from(&p2, &reps).unwrap();
        let combo = &y1.0 * alpha + &y2.0 * (1.0 - alpha);
        for (a, b) in ym.0.iter().zip(combo.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn positive_scaling_keeps_argmax(z in logits(4, 3, 3), c in 0.1f64..20.0) {
        let a = probability_map(&z).unwrap().argmax();
        let b = probability_map(&z.mapv(|v| v * c)).unwrap().argmax();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn count_ignores_column_order(z in logits(3, 3, 3), shift in 1usize..9) {
        let reps = [0.0, 1.0, 2.5];
        let p = probability_map(&z).unwrap();
        let mut permuted = Array3::zeros((3, 3, 3));
        for idx in 0..9 {
            let dst = (idx + shift) % 9;
            for k in 0..3 {
                permuted[[k, dst / 3, dst % 3]] = z[[k, idx / 3, idx % 3]];
            }
        }
        let q = probability_map(&permuted).unwrap();
        let a = expected_density_from(&p, &reps).unwrap().total();
        let b = expected_density_from(&q, &reps).unwrap().total();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    // prompts

    #[test]
    fn prompt_grammar(p in policy()) {
        let ps = build_prompt_set(&p);
        for (bin, text) in p.bins().iter().zip(ps.prompts()) {
            let singular = bin.is_singleton() && bin.lo <= 1;
            prop_assert_eq!(text.starts_with("There is "), singular, "{}", text);
            let plural = bin.is_open() || !bin.is_singleton() || bin.lo > 1;
            prop_assert_eq!(text.ends_with("people"), plural, "{}", text);
        }
        prop_assert_eq!(build_prompt_set(&p.clone()), ps);
    }

    #[test]
    fn distinct_prompts_embed_to_distinct_directions(p in policy(), seed in 0u64..1000) {
        let bank = embed_prompts(&build_prompt_set(&p), &HashTextEncoder::new(32, seed)).unwrap();
        let e = bank.embeddings();
        for i in 0..e.nrows() {
            for j in i + 1..e.nrows() {
                prop_assert!(e.row(i).dot(&e.row(j)) < 1.0 - 1e-9);
            }
        }
    }

    // data

    #[test]
    fn augmentation_is_deterministic_and_in_bounds(pts in points(40.0, 30.0, 50), seed in any::<u64>()) {
        let cfg = AugmentConfig { base_size: 16, ..AugmentConfig::default() };
        let image = Array3::from_shape_fn((3, 30, 40), |(c, i, j)| ((c + i * 3 + j * 7) % 11) as f64 / 10.0);
        let a = augment_sample(&image, &pts, &cfg, seed);
        let b = augment_sample(&image, &pts, &cfg, seed);
        prop_assert!(a.points.len() <= pts.len());
        prop_assert!(a.points.iter().all(|&[x, y]| (0.0..16.0).contains(&x) && (0.0..16.0).contains(&y)));
        prop_assert_eq!(a.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.points, b.points);
    }

    // eval

    #[test]
    fn metrics_ignore_order_and_rmse_dominates(
        pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..40),
        rot in 0usize..40,
    ) {
        let (mae, rmse) = metrics(&pairs).unwrap();
        prop_assert!(rmse >= mae);
        let mut shuffled = pairs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (m2, r2) = metrics(&shuffled).unwrap();
        prop_assert!((mae - m2).abs() <= 1e-9 && (rmse - r2).abs() <= 1e-9);
        let (dm, dr) = common::direct_metrics(&pairs);
        prop_assert!((mae - dm).abs() <= 1e-9 && (rmse - dr).abs() <= 1e-9);
    }
}
