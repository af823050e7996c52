use bugscope::attacks::{attack_batch, project, AttackConfig, AttackFamily};
use bugscope::autograd::{Tape, Tensor};
use bugscope::data::{load_dataset, save_dataset, LabeledDataset};
use bugscope::distill::{derangement, feature_match};
use bugscope::metrics::{composition_report, js_distance, CompositionConfig};
use bugscope::models::{
    ensemble_predict, forward_probs, init_model, ArchitectureSpec, Ensemble, EnsembleSpace, Recipe,
};
use bugscope::stream;
use bugscope::trainer::{augment, AugmentConfig};
use proptest::prelude::*;

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("positive mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|k| (distribution(k), distribution(k), distribution(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn js_distance_is_a_bounded_metric((p, q, r) in triple()) {
        let pq = js_distance(&p, &q).unwrap();
        prop_assert!(pq >= 0.0 && pq <= std::f64::consts::LN_2.sqrt() + 1e-15);
        prop_assert!((pq - js_distance(&q, &p).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(js_distance(&p, &p).unwrap(), 0.0);
        let pr = js_distance(&p, &r).unwrap();
        let qr = js_distance(&q, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-9);
    }

    #[test]
    fn projection_lands_in_ball_and_box(
        pairs in prop::collection::vec((-0.5f64..1.5, 0.0f64..1.0), 1..64),
        eps in 0.0f64..0.5,
    ) {
        let (mut x, center): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        project(&mut x, &center, eps);
        for (a, c) in x.iter().zip(&center) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((a - c).abs() <= eps + 1e-15);
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_range(
        seed in any::<u64>(),
        flip in 0.0f64..=1.0,
        pad in 0usize..4,
        rot in 0.0f64..30.0,
        bright in 0.0f64..0.5,
    ) {
        let shape = [2, 8, 8];
        let mut rng = stream(seed, 0);
        let x: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).fract()).collect();
        let cfg = AugmentConfig { flip_prob: flip, crop_padding: pad, max_rotation_deg: rot, brightness: bright };
        let y = augment(&x, shape, &cfg, &mut rng);
        prop_assert_eq!(y.len(), x.len());
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pairing_is_a_fixed_point_free_permutation(n in 2usize..300, seed in any::<u64>()) {
        let p = derangement(n, seed).unwrap();
        let mut seen = vec![false; n];
        for (i, &j) in p.iter().enumerate() {
            prop_assert!(j != i);
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
    }

    #[test]
    fn composition_fractions_count_exactly(values in prop::collection::vec(0.0f64..3.0, 1..200)) {
        let cfg = CompositionConfig::default();
        let r = composition_report(&values, 0.5, 0.01, "sgd", &cfg).unwrap();
        for (beta, frac) in cfg.betas.iter().zip(&r.fractions) {
            let n = values.iter().filter(|v| *v < beta).count();
            prop_assert_eq!(*frac, n as f64 / values.len() as f64);
        }
        prop_assert!(r.fractions.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((r.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_round_trip_is_bit_exact(
        pixels in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12..=12),
        labels in prop::collection::vec(0usize..5, 3..=3),
    ) {
        let ds = LabeledDataset::new([1, 2, 2], 5, pixels, labels, "train", "prop").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.advd");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert!(back.inputs.iter().zip(&ds.inputs).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn pgd_records_stay_in_ball_and_box(eps_255 in 1.0f64..64.0, seed in 0u64..1000, targeted in any::<bool>()) {
        let arch = ArchitectureSpec::mlp_s([1, 4, 4], 3);
        let f0 = init_model(&arch, seed, Recipe::Sgd).unwrap();
        let mut rng = stream(seed, 1);
        let inputs: Vec<f64> = (0..16 * 6).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let data = LabeledDataset::new([1, 4, 4], 3, inputs, vec![0, 1, 2, 0, 1, 2], "test", "prop").unwrap();
        let family = if targeted { AttackFamily::PgdTargeted } else { AttackFamily::PgdUntargeted };
        let cfg = AttackConfig { steps: 10, seed, random_start: true, ..AttackConfig::pgd(family, eps_255 / 255.0) };
        let recs = attack_batch(&f0, None, &data, &[0, 1, 2, 3, 4, 5], &cfg).unwrap();
        for r in &recs {
            for (a, s) in r.x_adv.iter().zip(&r.x_src) {
                prop_assert!((0.0..=1.0).contains(a));
                prop_assert!((a - s).abs() <= cfg.epsilon + 1e-9);
            }
        }
    }

    #[test]
    fn ensemble_average_ignores_member_order(seed in 0u64..1000) {
        let arch = ArchitectureSpec::mlp_s([1, 4, 4], 3);
        let members: Vec<_> = (0..4).map(|i| init_model(&arch, seed + i, Recipe::Sgd).unwrap()).collect();
        let mut rev = members.clone();
        rev.reverse();
        let x = Tensor::new(vec![2, 16], (0..32).map(|i| (i as f64 * 0.13).fract()).collect()).unwrap();
        let a = ensemble_predict(&Ensemble::new(members, EnsembleSpace::Prob).unwrap(), &x).unwrap();
        let b = ensemble_predict(&Ensemble::new(rev, EnsembleSpace::Prob).unwrap(), &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_scaled_loss_scales_gradients(seed in 0u64..1000, power in -3i32..4) {
        let a = 2f64.powi(power);
        let arch = ArchitectureSpec::mlp_s([1, 4, 4], 3);
        let m = init_model(&arch, seed, Recipe::Sgd).unwrap();
        let x: Vec<f64> = (0..32).map(|i| ((i as u64 * 7 + seed) % 13) as f64 / 13.0).collect();
        let grads = |factor: Option<f64>| {
            let mut t = Tape::new();
            let vx = t.param(Tensor::matrix(2, 16, x.clone()).unwrap()).unwrap();
            let fwd = bugscope::models::forward_graph(&mut t, &m, vx, true).unwrap();
            let mut l = t.cross_entropy(fwd.logits, &[0, 2]).unwrap();
            if let Some(f) = factor {
                l = t.scale(l, f).unwrap();
            }
            t.backward(l).unwrap();
            t.grad(vx).unwrap().to_vec()
        };
        let base = grads(None);
        let scaled = grads(Some(a));
        for (g, s) in base.iter().zip(&scaled) {
            prop_assert_eq!(g * a, *s);
        }
    }

    #[test]
    fn forward_and_feature_matching_are_deterministic(seed in 0u64..1000) {
        let arch = ArchitectureSpec::mlp_s([1, 4, 4], 3);
        let m = init_model(&arch, seed, Recipe::Sgd).unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i as u64 + seed) % 9) as f64 / 9.0).collect();
        let t: Vec<f64> = x.iter().rev().copied().collect();
        let xt = Tensor::new(vec![1, 16], x.clone()).unwrap();
        prop_assert_eq!(forward_probs(&m, &xt).unwrap(), forward_probs(&m, &xt).unwrap());
        let a = feature_match(&m, &x, &t, 20, 0.1).unwrap();
        let b = feature_match(&m, &x, &t, 20, 0.1).unwrap();
        prop_assert_eq!(&a.x, &b.x);
        prop_assert!(a.x.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
