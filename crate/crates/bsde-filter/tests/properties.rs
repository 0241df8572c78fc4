//! Property-based invariants for the mixture density type.

use bsde_filter::density::{GaussianMixture, BANDWIDTH_FLOOR, WEIGHT_FLOOR};
use proptest::prelude::*;

fn arb_mixture() -> impl Strategy<Value = GaussianMixture> {
    (1usize..=4, 1usize..=3).prop_flat_map(|(k, d)| {
        let centers = prop::collection::vec(prop::collection::vec(-100.0f64..100.0, d), k);
        let weights = prop::collection::vec(WEIGHT_FLOOR..10.0f64, k);
        let bandwidths =
            prop::collection::vec(prop::collection::vec(BANDWIDTH_FLOOR..10.0f64, d), k);
        (centers, weights, bandwidths).prop_map(|(c, w, b)| GaussianMixture::new(c, w, b).unwrap())
    })
}

proptest! {
    #[test]
    fn text_round_trip_is_exact(m in arb_mixture()) {
        let back = GaussianMixture::from_text(&m.to_text()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn eval_is_nonnegative_and_finite(m in arb_mixture(),
                                      x in prop::collection::vec(-200.0f64..200.0, 3)) {
        let v = m.eval(&x[..m.dim()]);
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn eval_at_a_center_at_least_its_own_kernel_weight(m in arb_mixture()) {
        // every kernel contributes its full weight at its own center and the
        // other kernels contribute nonnegatively
        for (k, c) in m.centers.iter().enumerate() {
            prop_assert!(m.eval(c) >= m.weights[k] - 1e-12);
        }
    }

    #[test]
    fn mixture_variance_is_positive(m in arb_mixture()) {
        for v in m.mixture_variance() {
            prop_assert!(v > 0.0 && v.is_finite());
        }
    }

    #[test]
    fn kernel_permutation_does_not_change_eval(m in arb_mixture(),
                                               x in prop::collection::vec(-50.0f64..50.0, 3)) {
        let k = m.num_kernels();
        let perm: Vec<usize> = (0..k).rev().collect();
        let permuted = GaussianMixture::new(
            perm.iter().map(|&i| m.centers[i].clone()).collect(),
            perm.iter().map(|&i| m.weights[i]).collect(),
            perm.iter().map(|&i| m.bandwidths[i].clone()).collect(),
        ).unwrap();
        let x = &x[..m.dim()];
        let a = m.eval(x);
        let b = permuted.eval(x);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
