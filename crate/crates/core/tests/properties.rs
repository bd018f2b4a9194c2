use proptest::prelude::*;

use semalign::data::{decode, encode, generate, SyntheticSpec};
use semalign::kernels::{softmax, KernelSpec, MultiKernel};
use semalign::losses::{mkmmd_loss, sdd_loss, Divergence, SddConfig};
use semalign::trainer::evaluate_retrieval;
use semalign::Matrix;

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Matrix::from_fn(rows, cols, |i, j| v[i * cols + j]))
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..7, 1usize..5).prop_flat_map(|(r, c)| (batch(r, c), batch(r, c)))
}

proptest! {
    #[test]
    fn kl_sdd_is_symmetric_and_non_negative((u, v) in pair()) {
        let cfg = SddConfig::default();
        let a = sdd_loss(&u, &v, &cfg).unwrap();
        let b = sdd_loss(&v, &u, &cfg).unwrap();
        prop_assert!(a >= -1e-10);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn mse_sdd_vanishes_on_identical_batches(u in batch(5, 3)) {
        let cfg = SddConfig { divergence: Divergence::Mse, ..SddConfig::default() };
        prop_assert_eq!(sdd_loss(&u, &u, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn relative_distance_makes_sdd_scale_free((u, v) in pair(), s in 0.1f64..10.0) {
        let cfg = SddConfig::default();
        let a = sdd_loss(&u, &v, &cfg).unwrap();
        let b = sdd_loss(&u.scale(s), &v.scale(s), &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn biased_mmd_is_non_negative((u, v) in pair(), l0 in -3.0f64..3.0, l1 in -3.0f64..3.0) {
        let mk = MultiKernel::new(
            vec![
                KernelSpec::Gaussian { gamma_sq: 1.5 },
                KernelSpec::Polynomial { coef0: 1.0, degree: 2 },
            ],
            vec![l0, l1],
        )
        .unwrap();
        prop_assert!(mkmmd_loss(&mk, &u, &v).unwrap() >= -1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..6)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn recall_is_monotone_in_k((u, v) in pair()) {
        let r = evaluate_retrieval(&u, &v, &[1, 2, 3, 100]).unwrap();
        for dir in [&r.a_to_b, &r.b_to_a] {
            prop_assert!(dir.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(dir.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert_eq!(dir[3], 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_bytes_round_trip(n in 0usize..6, ma in 0usize..6, mb in 0usize..6, t in 0usize..4, seed in any::<u64>()) {
        prop_assume!(n + ma + mb + t > 0);
        let spec = SyntheticSpec { n_pairs: n, m_a: ma, m_b: mb, test_pairs: t, seed, ..SyntheticSpec::default() };
        let Ok(d) = generate(&spec) else { return Ok(()); };
        let mut buf = Vec::new();
        encode(&d, &mut buf).unwrap();
        let back = decode(&buf).unwrap();
        prop_assert_eq!(back, d);
    }
}
