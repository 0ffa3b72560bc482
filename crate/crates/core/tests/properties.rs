use dualteach::augment::mask_augment_instance;
use dualteach::checkpoint::{model_from_bytes, model_to_bytes};
use dualteach::classifier::{init_head, ModelParams, Role};
use dualteach::encoder::{pack_sequence, EncoderConfig, EncoderParams, MASK};
use dualteach::losses::{scl_loss, softmax};
use dualteach::metrics::{distributional_mse, jsd, MseDivisor};
use dualteach::pipeline::{joint_score, refine_scores};
use dualteach::seed::rng_for;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..6).prop_flat_map(|n| (distribution(n), distribution(n)))
}

proptest! {
    #[test]
    fn joint_score_is_a_distribution((g, m) in pair(), gamma in 0.0f64..=1.0) {
        let y = joint_score(&g, &m, gamma).unwrap();
        prop_assert!((y.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for ((p, a), b) in y.probs().iter().zip(&g).zip(&m) {
            prop_assert!(*p >= a.min(*b) - 1e-12 && *p <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn refinement_mass_is_twice_alpha((s, r) in pair(), n in 2usize..8, alpha in 0.0f64..1.0, pick in 0usize..100) {
        let i = 1 + pick % (n - 1);
        let y = refine_scores(&s, &r, i, n, alpha).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 2.0 * alpha).abs() < 1e-9);
        prop_assert!(y.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn jsd_bounded_and_symmetric((p, q) in pair()) {
        let d = jsd(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - jsd(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mse_divisors_relate((p, q) in pair()) {
        let per_class = distributional_mse(&p, &q, MseDivisor::Classes).unwrap();
        let summed = distributional_mse(&p, &q, MseDivisor::One).unwrap();
        prop_assert!(per_class >= 0.0);
        prop_assert!((summed - per_class * p.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let p = softmax(Array1::from(logits).view());
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn scl_is_nonnegative_and_zero_without_positives(
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 2..8),
        tau in 0.1f64..2.0,
    ) {
        let n = rows.len();
        let phi = Array2::from_shape_vec((n, 4), rows.concat()).unwrap();
        let distinct: Vec<usize> = (0..n).collect();
        prop_assert_eq!(scl_loss(phi.view(), &distinct, tau).unwrap(), 0.0);
        let same = vec![0; n];
        prop_assert!(scl_loss(phi.view(), &same, tau).unwrap() >= 0.0);
    }

    #[test]
    fn masking_preserves_specials_and_length(
        history in prop::collection::vec(5u32..50, 0..20),
        target in prop::collection::vec(5u32..50, 1..10),
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let seq = pack_sequence(&history, &target, 32).unwrap();
        let masked = mask_augment_instance(&seq, rho, &mut rng_for(seed, "prop"));
        prop_assert_eq!(masked.len(), seq.len());
        for ((a, b), special) in seq.ids().iter().zip(masked.ids()).zip(seq.special_mask()) {
            if *special {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!(a == b || *b == MASK);
            }
        }
    }

    #[test]
    fn packing_keeps_target_and_bounds(
        history in prop::collection::vec(5u32..50, 0..60),
        target in prop::collection::vec(5u32..50, 1..10),
        max_len in 12usize..40,
    ) {
        let seq = pack_sequence(&history, &target, max_len).unwrap();
        prop_assert!(seq.len() <= max_len);
        prop_assert_eq!(&seq.ids()[seq.len() - target.len()..], &target[..]);
        let kept = seq.len() - target.len() - 2;
        prop_assert_eq!(&seq.ids()[1..1 + kept], &history[history.len() - kept..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), classes in 2usize..5) {
        let config = EncoderConfig { vocab_size: 12, max_len: 8, hidden: 4, layers: 1, heads: 2, ffn: 8 };
        let encoder = EncoderParams::init(config, &mut rng_for(seed, "enc")).unwrap();
        let head = init_head(4, classes, &mut rng_for(seed, "head")).unwrap();
        let model = ModelParams::teacher(Role::MaskedTeacher, encoder, head).unwrap();
        let back = model_from_bytes(&model_to_bytes(&model).unwrap()).unwrap();
        prop_assert_eq!(&back.encoder, &model.encoder);
        prop_assert_eq!(&back.head, &model.head);
        prop_assert_eq!(back.role(), Role::MaskedTeacher);
    }
}
