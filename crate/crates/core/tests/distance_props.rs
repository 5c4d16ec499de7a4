use proptest::prelude::*;

use fbi_core::distance::{entropy_bits, joint_histogram};
use fbi_core::{compound_distance, empirical_mi, model_distance, theory_lower_bound, BoundInput, SurjectedSequence};

/// Two aligned sequences over S_k = {0..=k}.
fn pair() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
    (1usize..=5, 1usize..200).prop_flat_map(|(k, len)| {
        (
            Just(k),
            prop::collection::vec(0..=k as u8, len),
            prop::collection::vec(0..=k as u8, len),
        )
    })
}

fn seq(v: &[u8], k: usize) -> SurjectedSequence {
    SurjectedSequence::new(v.to_vec(), k).unwrap()
}

proptest! {
    #[test]
    fn distance_is_symmetric((k, z, y) in pair()) {
        let a = model_distance(&seq(&z, k), &seq(&y, k)).unwrap();
        let b = model_distance(&seq(&y, k), &seq(&z, k)).unwrap();
        prop_assert_eq!(a.distance.to_bits(), b.distance.to_bits());
        prop_assert_eq!(a.mi_bits.to_bits(), b.mi_bits.to_bits());
    }

    #[test]
    fn distance_in_unit_interval((k, z, y) in pair()) {
        let r = model_distance(&seq(&z, k), &seq(&y, k)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.distance));
        prop_assert!(r.mi_bits >= 0.0);
        prop_assert!(r.mi_bits <= r.h_z_bits.min(r.h_y_bits) + 1e-9);
        if !r.degenerate {
            prop_assert!((r.distance - (1.0 - r.mi_bits / r.h_z_bits.min(r.h_y_bits))).abs() < 1e-12);
        }
    }

    #[test]
    fn self_distance_is_zero((k, z, _y) in pair()) {
        let s = seq(&z, k);
        let r = model_distance(&s, &s).unwrap();
        if s.is_constant() {
            prop_assert!(r.degenerate);
            prop_assert_eq!(r.distance, 1.0);
        } else {
            prop_assert_eq!(r.distance, 0.0);
        }
    }

    #[test]
    fn relabeling_is_invisible((k, z, y) in pair(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<u8> = (0..=k as u8).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let relabeled: Vec<u8> = z.iter().map(|&s| perm[s as usize]).collect();
        let a = model_distance(&seq(&z, k), &seq(&y, k)).unwrap();
        let b = model_distance(&seq(&relabeled, k), &seq(&y, k)).unwrap();
        prop_assert_eq!(a.mi_bits.to_bits(), b.mi_bits.to_bits());
        prop_assert_eq!(a.distance.to_bits(), b.distance.to_bits());
    }

    #[test]
    fn histogram_totals((k, z, y) in pair()) {
        let h = joint_histogram(&seq(&z, k), &seq(&y, k)).unwrap();
        prop_assert_eq!(h.total() as usize, z.len());
        prop_assert_eq!(h.z_marginal(), seq(&z, k).histogram());
        prop_assert_eq!(h.y_marginal(), seq(&y, k).histogram());
        let mi = empirical_mi(&h);
        prop_assert!(mi <= entropy_bits(&h.z_marginal()).min(entropy_bits(&h.y_marginal())) + 1e-9);
    }

    #[test]
    fn adding_a_delegate_never_increases_compound_distance(
        (k, b, d1) in pair(),
        extra_seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(extra_seed);
        let d2: Vec<u8> = (0..b.len()).map(|_| rng.random_range(0..=k as u8)).collect();
        let one = compound_distance(&seq(&b, k), &[seq(&d1, k)]).unwrap();
        let two = compound_distance(&seq(&b, k), &[seq(&d1, k), seq(&d2, k)]).unwrap();
        prop_assert!(two <= one);
    }

    #[test]
    fn bound_in_unit_interval_and_symmetric(a in 0.01f64..0.99, b in 0.01f64..0.99) {
        prop_assume!(a + b > 1.0 + 1e-9);
        let x = theory_lower_bound(BoundInput { a, b }).unwrap();
        let y = theory_lower_bound(BoundInput { a: b, b: a }).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, y);
    }
}

#[test]
fn bound_regimes() {
    assert!(theory_lower_bound(BoundInput { a: 0.4, b: 0.5 }).is_err());
    assert!(theory_lower_bound(BoundInput { a: 1.2, b: 0.5 }).is_err());
    assert_eq!(theory_lower_bound(BoundInput { a: 0.8, b: 0.8 }).unwrap(), 0.0);
    assert!(theory_lower_bound(BoundInput { a: 0.9, b: 0.6 }).unwrap() > 0.0);
}
