use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fbi_core::distance::surject_column;
use fbi_core::family_sim::{accuracy, gen_vanilla, model_accuracy, MissProfile};
use fbi_core::{empirical_mi, joint_histogram, ClassLabel, Ensemble, FamilyFlavor, SimSpec, VanillaSpec};

fn spec() -> SimSpec {
    SimSpec {
        seed: 17,
        n_vanilla: 4,
        num_classes: 100,
        top_k: 3,
        n_inputs: 1000,
        ..SimSpec::default()
    }
}

#[test]
fn identical_seeds_give_identical_ensembles() {
    let a = Ensemble::generate(&spec()).unwrap();
    let b = Ensemble::generate(&spec()).unwrap();
    assert_eq!(a.manifest, b.manifest);
    for m in 0..a.table.n_models() {
        assert_eq!(a.table.column(m), b.table.column(m));
    }
    let c = Ensemble::generate(&SimSpec { seed: 18, ..spec() }).unwrap();
    assert_ne!(a.table.column(0), c.table.column(0));
}

#[test]
fn every_variant_passes_the_accuracy_gate() {
    let e = Ensemble::generate(&SimSpec {
        procedures: vec!["retain-uniform:0.4:0.9".parse().unwrap(), "drop:0.6:0.9".parse().unwrap()],
        ..spec()
    })
    .unwrap();
    for (id, entry) in &e.manifest.models {
        let measured = model_accuracy(&e.table, e.table.model_idx(id).unwrap()).unwrap();
        assert_eq!(measured, entry.accuracy);
        if let Some(parent) = &entry.parent {
            let pa = e.manifest.models[parent].accuracy;
            assert!(entry.accuracy > (1.0 - e.spec.eta) * pa, "{id}: {} vs parent {pa}", entry.accuracy);
        }
    }
}

#[test]
fn vanilla_hits_the_target_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<ClassLabel> = (0..10_000).map(|_| ClassLabel(rng.random_range(0..50))).collect();
    for miss in [MissProfile::Absent, MissProfile::Demoted, MissProfile::Mixed(0.5)] {
        let v = VanillaSpec {
            id: "m".into(),
            num_classes: 50,
            accuracy: 0.8,
            k: 5,
            seed: 4,
            miss,
        };
        let col = gen_vanilla(&v, &truth).unwrap();
        assert!((accuracy(&col, 5, &truth) - 0.8).abs() <= 0.012);
    }
}

#[test]
fn different_parents_are_independent() {
    let e = Ensemble::generate(&SimSpec {
        seed: 5,
        n_vanilla: 3,
        variants_per_family: 2,
        top_k: 1,
        n_inputs: 10_000,
        ..SimSpec::default()
    })
    .unwrap();
    let t = &e.table;
    let all: Vec<usize> = (0..t.n_inputs()).collect();
    let families = e.manifest.partition(FamilyFlavor::VanillaSpan).unwrap().resolve(t).unwrap();
    for (i, f) in families.iter().enumerate() {
        for g in &families[i + 1..] {
            for &a in f {
                for &b in g {
                    let h = joint_histogram(&surject_column(t, a, &all).unwrap(), &surject_column(t, b, &all).unwrap())
                        .unwrap();
                    assert!(empirical_mi(&h) <= 0.05);
                }
            }
        }
    }
}
