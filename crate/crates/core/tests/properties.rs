use gcml::attention::{bits_from_key, key_from_bits, threshold, BitKey, BitOrder, GcmlConfig};
use gcml::cam::{
    class_score, class_scores, compute_cam, minmax_normalize, Cam, ClassifierHead, FeatureMapStack, PoolingMode,
};
use gcml::eval::{self, ConfusionMatrix};
use gcml::store::{self, argmax, merge, read_store, write_store, GcmlStore, Sample};
use gcml::tensorio::{read_tensor, write_tensor, TensorF32};
use proptest::prelude::*;

fn order() -> impl Strategy<Value = BitOrder> {
    prop_oneof![Just(BitOrder::Little), Just(BitOrder::Big)]
}

fn cam_strategy() -> impl Strategy<Value = Cam> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| {
        prop::collection::vec(-100.0f64..100.0, h * w).prop_map(move |v| Cam::new(h, w, v, 0).unwrap())
    })
}

fn stack_and_head() -> impl Strategy<Value = (FeatureMapStack, ClassifierHead)> {
    (1usize..5, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(k, h, w, c)| {
        (
            prop::collection::vec(-10.0f64..10.0, k * h * w),
            prop::collection::vec(-3.0f64..3.0, c * k),
            prop::collection::vec(-3.0f64..3.0, c),
        )
            .prop_map(move |(v, wt, b)| {
                (
                    FeatureMapStack::new(k, h, w, v).unwrap(),
                    ClassifierHead::new(c, k, wt, Some(b), PoolingMode::Sum).unwrap(),
                )
            })
    })
}

/// A store on a 2x2 grid with three classes and the given counts.
fn store_from(rows: Vec<Vec<(u64, u64)>>, tau: f32) -> GcmlStore {
    let cfg = GcmlConfig::new(tau, 2, 2, BitOrder::Little).unwrap();
    let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    GcmlStore::from_counts(classes, cfg, PoolingMode::Sum, rows).unwrap()
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<(u64, u64)>>> {
    prop::collection::vec(prop::collection::vec((0u64..16, 1u64..50), 0..8), 3)
}

fn labelled_stacks(classes: usize) -> impl Strategy<Value = Vec<Sample>> {
    prop::collection::vec((prop::collection::vec(0.0f64..1.0, 16), 0..classes), 1..40).prop_map(|v| {
        v.into_iter().map(|(vals, l)| Sample::new(FeatureMapStack::new(1, 4, 4, vals).unwrap(), l)).collect()
    })
}

proptest! {
    #[test]
    fn tensor_round_trip(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n as u64).map(|i| f32::from_bits((seed.wrapping_mul(i + 1) >> 16) as u32)).collect();
        let t = TensorF32::new(shape, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        prop_assert!(read_tensor(&buf[..]).unwrap().bit_eq(&t));
    }

    #[test]
    fn key_bits_invert(len in 1usize..=12, raw in any::<u64>(), ord in order()) {
        let key = BitKey(raw & ((1u64 << len) - 1));
        let bits = bits_from_key(key, len, ord).unwrap();
        prop_assert_eq!(key_from_bits(&bits, ord).unwrap(), key);
    }

    #[test]
    fn big_order_reverses_little(bits in prop::collection::vec(any::<bool>(), 1..=64)) {
        let mut rev = bits.clone();
        rev.reverse();
        prop_assert_eq!(key_from_bits(&bits, BitOrder::Big).unwrap(), key_from_bits(&rev, BitOrder::Little).unwrap());
    }

    #[test]
    fn higher_tau_sets_fewer_bits(m in cam_strategy(), a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n = minmax_normalize(&m);
        let g1 = threshold(&n, lo).unwrap();
        let g2 = threshold(&n, hi).unwrap();
        for (x, y) in g1.bits.iter().zip(&g2.bits) {
            prop_assert!(!*y || *x);
        }
    }

    #[test]
    fn normalize_is_idempotent_and_bounded(m in cam_strategy()) {
        let n = minmax_normalize(&m);
        prop_assert!(n.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = minmax_normalize(&n);
        for (x, y) in n.values.iter().zip(&again.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn tau_zero_sets_every_bit(m in cam_strategy()) {
        let g = threshold(&minmax_normalize(&m), 0.0).unwrap();
        prop_assert!(g.bits.iter().all(|&b| b));
    }

    #[test]
    fn scaling_features_scales_scores_and_cams((f, head) in stack_and_head(), a in 0.01f64..50.0) {
        let unbiased = ClassifierHead::new(head.classes(), head.filters(),
            (0..head.classes()).flat_map(|c| head.row(c).to_vec()).collect(), None, PoolingMode::Sum).unwrap();
        let g = f.scale(a);
        for c in 0..head.classes() {
            let s1 = class_score(&f, &unbiased, c).unwrap();
            let s2 = class_score(&g, &unbiased, c).unwrap();
            prop_assert!((s2 - a * s1).abs() <= 1e-9 * (1.0 + s2.abs()));
            let m1 = compute_cam(&f, &head, c).unwrap();
            let m2 = compute_cam(&g, &head, c).unwrap();
            for (x, y) in m1.values.iter().zip(&m2.values) {
                prop_assert!((y - a * x).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
        // argmax survives positive scaling once the bias is out of the picture
        let before = argmax(&class_scores(&f, &unbiased).unwrap());
        let after = argmax(&class_scores(&g, &unbiased).unwrap());
        let s = class_scores(&f, &unbiased).unwrap();
        let tied = s.iter().filter(|&&v| (v - s[before]).abs() < 1e-9).count() > 1;
        prop_assert!(tied || before == after);
    }

    #[test]
    fn mean_pooling_is_sum_over_area((f, head) in stack_and_head()) {
        let mean = head.clone().with_pooling(PoolingMode::Mean);
        let area = (f.height() * f.width()) as f64;
        for c in 0..head.classes() {
            let b = head.bias().map_or(0.0, |b| b[c]);
            let s = class_score(&f, &head, c).unwrap() - b;
            let m = class_score(&f, &mean, c).unwrap() - b;
            prop_assert!((s - m * area).abs() <= 1e-9 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn cam_does_not_see_bias((f, head) in stack_and_head()) {
        let unbiased = ClassifierHead::new(head.classes(), head.filters(),
            (0..head.classes()).flat_map(|c| head.row(c).to_vec()).collect(), None, PoolingMode::Sum).unwrap();
        for c in 0..head.classes() {
            prop_assert_eq!(compute_cam(&f, &head, c).unwrap(), compute_cam(&f, &unbiased, c).unwrap());
        }
    }

    #[test]
    fn merge_commutes_and_associates(a in rows_strategy(), b in rows_strategy(), c in rows_strategy()) {
        let (a, b, c) = (store_from(a, 0.5), store_from(b, 0.5), store_from(c, 0.5));
        prop_assert_eq!(merge(&a, &b).unwrap(), merge(&b, &a).unwrap());
        prop_assert_eq!(
            merge(&merge(&a, &b).unwrap(), &c).unwrap(),
            merge(&a, &merge(&b, &c).unwrap()).unwrap()
        );
        let m = merge(&a, &b).unwrap();
        prop_assert_eq!(m.total(), a.total() + b.total());
    }

    #[test]
    fn training_conserves_counts(samples in labelled_stacks(3), tau in 0.0f32..=1.0) {
        let cfg = GcmlConfig::new(tau, 4, 4, BitOrder::Little).unwrap();
        let classes: Vec<String> = (0..3).map(|c| c.to_string()).collect();
        let mut s = GcmlStore::new(classes, cfg, PoolingMode::Sum).unwrap();
        let head = ClassifierHead::new(3, 1, vec![1.0, -1.0, 0.5], None, PoolingMode::Sum).unwrap();
        s.train_epoch(&samples, &head, None).unwrap();
        prop_assert_eq!(s.total(), samples.len() as u64);
        for c in 0..3 {
            let support = samples.iter().filter(|x| x.label == c).count() as u64;
            prop_assert_eq!(s.row_total(c).unwrap(), support);
            prop_assert_eq!(s.row(c).unwrap().values().sum::<u64>(), support);
        }
    }

    #[test]
    fn sparse_matches_dense(samples in labelled_stacks(2), tau in 0.0f32..=1.0, ord in order()) {
        let cfg = GcmlConfig::new(tau, 4, 4, ord).unwrap();
        let head = ClassifierHead::new(2, 1, vec![1.0, 2.0], None, PoolingMode::Sum).unwrap();
        let mut s = GcmlStore::new(vec!["x".into(), "y".into()], cfg, PoolingMode::Sum).unwrap();
        s.train_epoch(&samples, &head, None).unwrap();
        let dense = store::train_dense_parallel(&samples, &head, &cfg).unwrap();
        for (c, row) in dense.iter().enumerate() {
            prop_assert_eq!(&s.to_dense(c).unwrap(), row);
        }
    }

    #[test]
    fn normalized_view_matches_lookup(rows in rows_strategy()) {
        let s = store_from(rows, 0.3);
        let view = s.normalized_view();
        for c in 0..3 {
            for k in 0..16u64 {
                prop_assert_eq!(view.likelihood(c, BitKey(k)).unwrap(), s.lookup(c, BitKey(k)).unwrap());
                let p = s.lookup(c, BitKey(k)).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
            if s.row_total(c).unwrap() > 0 {
                prop_assert!((view.row_sum(c).unwrap() - 1.0).abs() <= 1e-9);
            } else {
                prop_assert!(view.empty_rows().contains(&c));
            }
        }
    }

    #[test]
    fn smoothed_rows_sum_to_one(rows in rows_strategy(), alpha in 0.01f64..5.0) {
        let s = store_from(rows, 0.3);
        for c in 0..3 {
            let total: f64 = (0..16u64).map(|k| s.lookup_smoothed(c, BitKey(k), alpha).unwrap()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn store_round_trip(rows in rows_strategy(), tau in 0.0f32..=1.0, normalized in any::<bool>()) {
        let mut s = store_from(rows, tau);
        if normalized {
            s.mark_normalized();
        }
        let mut buf = Vec::new();
        write_store(&s, &mut buf).unwrap();
        prop_assert_eq!(read_store(&buf[..]).unwrap(), s);
    }

    #[test]
    fn z_is_antisymmetric(n in 1u64..2000, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (c1, c2) = ((a * n as f64) as u64, (b * n as f64) as u64);
        match (eval::two_proportion_z(c1, c2, n), eval::two_proportion_z(c2, c1, n)) {
            (Ok(x), Ok(y)) => prop_assert!((x.z + y.z).abs() <= 1e-12),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn wald_widest_at_half(n in 1u64..10_000, p in 0.0f64..=1.0) {
        let (lo, hi) = eval::wald_ci(p, n).unwrap();
        let (l5, h5) = eval::wald_ci(0.5, n).unwrap();
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
        prop_assert!(hi - lo <= h5 - l5 + 1e-12);
    }

    #[test]
    fn accuracy_is_support_weighted_recall(counts in prop::collection::vec(0u64..30, 9)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let m = ConfusionMatrix::from_counts(3, counts).unwrap();
        let r = eval::metrics(&m).unwrap();
        let total = m.total() as f64;
        let weighted: f64 = (0..3).map(|c| r.per_class_accuracy[c].point * m.support(c) as f64).sum::<f64>() / total;
        prop_assert!((weighted - r.accuracy.point).abs() <= 1e-12);
    }
}
