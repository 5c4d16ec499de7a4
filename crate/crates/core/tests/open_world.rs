use proptest::prelude::*;

use fbi_core::distance::surject_column;
use fbi_core::open_world::{calibrate_from_distances, Decision};
use fbi_core::{
    choose_delegate, identify_family, model_distance, CalibratedTest, DelegateOption, Ensemble, FamilyFlavor,
    SimSpec, SurjectedSequence,
};

fn ensemble() -> Ensemble {
    Ensemble::generate(&SimSpec {
        seed: 23,
        n_vanilla: 5,
        variants_per_family: 4,
        num_classes: 200,
        top_k: 1,
        n_inputs: 600,
        ..SimSpec::default()
    })
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[test]
fn same_family_pairs_are_closer() {
    let e = ensemble();
    let t = &e.table;
    let q: Vec<usize> = (0..t.n_inputs()).collect();
    let fams = e.manifest.partition(FamilyFlavor::VanillaSpan).unwrap().resolve(t).unwrap();
    let fam_of = |m: usize| fams.iter().position(|f| f.contains(&m)).unwrap();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for a in 0..t.n_models() {
        for b in a + 1..t.n_models() {
            let d = model_distance(&surject_column(t, a, &q).unwrap(), &surject_column(t, b, &q).unwrap())
                .unwrap()
                .distance;
            if fam_of(a) == fam_of(b) { &mut same } else { &mut cross }.push(d);
        }
    }
    assert!(median(same) < median(cross));
}

#[test]
fn close_delegate_of_a_vanilla_family_is_the_vanilla() {
    let e = ensemble();
    let t = &e.table;
    let q: Vec<usize> = (0..300).collect();
    let fams = e.manifest.partition(FamilyFlavor::VanillaSpan).unwrap().resolve(t).unwrap();
    for (i, f) in fams.iter().enumerate() {
        let anchor = e.vanilla_index(i).unwrap();
        let c = choose_delegate(t, f, anchor, DelegateOption::Close, &q).unwrap();
        assert_eq!(c.delegates, vec![anchor]);
        let cm = choose_delegate(t, f, anchor, DelegateOption::CloseMedian, &q).unwrap();
        assert!(!cm.delegates.is_empty() && cm.delegates.len() <= 2);
    }
}

proptest! {
    #[test]
    fn calibration_set_fpr_never_exceeds_alpha(
        d in prop::collection::vec(0.0f64..=1.0, 20..200),
        alpha in 0.01f64..0.5,
    ) {
        let test = calibrate_from_distances(&d, alpha, 100).unwrap();
        let below = d.iter().filter(|&&v| test.accepts(v)).count() as f64;
        prop_assert!(below / d.len() as f64 <= alpha + 1e-12);
        prop_assert_eq!(test.negatives_used, d.len());
    }

    #[test]
    fn identification_never_accepts_at_or_above_tau(
        seqs in prop::collection::vec(prop::collection::vec(0u8..=1, 40), 4),
        tau in 0.0f64..=1.0,
    ) {
        let s: Vec<SurjectedSequence> = seqs.iter().map(|v| SurjectedSequence::new(v.clone(), 1).unwrap()).collect();
        let known = vec![("a".to_string(), vec![s[1].clone()]), ("b".to_string(), vec![s[2].clone(), s[3].clone()])];
        let test = CalibratedTest { tau, alpha: 0.05, l: 40, strategy: None, negatives_used: 0, calibration_fpr: 0.0 };
        if let Ok(v) = identify_family(&s[0], &known, &test) {
            let best = v.distances[0].1;
            match v.decision {
                Decision::Family(_) => prop_assert!(best < tau),
                Decision::Abstain => prop_assert!(best >= tau),
            }
            prop_assert!(v.margin >= 0.0);
        }
    }
}
