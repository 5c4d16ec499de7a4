use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fbi_bench::standard_ensemble;
use fbi_core::walled_garden::{detect_in, identify_in, Codebook, GreedyOptions, ScoreRule};
use fbi_core::{FamilyFlavor, ReplayOracle};

fn greedy(c: &mut Criterion) {
    let e = standard_ensemble();
    let partition = e.manifest.partition(FamilyFlavor::VanillaSpan).unwrap();
    let families = partition.resolve(&e.table).unwrap();
    let mut group = c.benchmark_group("walled_garden");
    for k in [1, 5] {
        let t = e.table.truncate(k).unwrap();
        group.bench_with_input(BenchmarkId::new("codebook", k), &k, |b, _| b.iter(|| Codebook::new(black_box(&t))));
        let book = Codebook::new(&t);
        for rule in [ScoreRule::Expectation, ScoreRule::WorstCase] {
            let opts = GreedyOptions {
                rule,
                ..Default::default()
            };
            group.bench_with_input(BenchmarkId::new(format!("detect/{rule:?}"), k), &k, |b, _| {
                b.iter(|| {
                    let mut oracle = ReplayOracle::new(&t, 7);
                    detect_in(&book, black_box(&families[3]), &mut oracle, opts).unwrap()
                })
            });
        }
        group.bench_with_input(BenchmarkId::new("identify", k), &k, |b, _| {
            b.iter(|| {
                let mut oracle = ReplayOracle::new(&t, 7);
                identify_in(&book, black_box(&partition), &mut oracle, GreedyOptions::default()).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, greedy);
criterion_main!(benches);
