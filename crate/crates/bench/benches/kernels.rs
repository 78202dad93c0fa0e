use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use probekit_core::analytics::{kl_divergence, pearson, Distribution};
use probekit_core::sampler::build_uniform_subset;
use probekit_core::taxonomy::{build_etg, EdgeKind, TaxonomyStore};
use probekit_core::{Fact, FactSet};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn relation(n: usize, objects: usize, rng: &mut StdRng) -> FactSet {
    let facts = (0..n)
        .map(|i| {
            // skewed object popularity, like real answer distributions
            let o = (rng.random::<f64>().powi(3) * objects as f64) as usize;
            Fact::new(format!("S{i}"), format!("s{i}"), "P1", format!("O{o}"), format!("o{o}"))
        })
        .collect();
    FactSet::new("P1", facts)
}

fn uniform_sampling(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let mut group = c.benchmark_group("build_uniform_subset");
    for n in [1_000, 50_000] {
        let set = relation(n, n / 20, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &set, |b, set| {
            b.iter(|| build_uniform_subset(black_box(set), 7).unwrap())
        });
    }
    group.finish();
}

fn etg(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let types = 2_000;
    let mut store = TaxonomyStore::new();
    for t in 0..types - 1 {
        for _ in 0..2 {
            let p = rng.random_range(t + 1..types);
            store.add_edge(format!("T{t}"), format!("T{p}"), EdgeKind::SubclassOf).unwrap();
        }
    }
    let seeds: Vec<String> = (0..1_000).map(|i| format!("E{i}")).collect();
    for s in &seeds {
        let t = rng.random_range(0..types / 4);
        store.add_edge(s.clone(), format!("T{t}"), EdgeKind::InstanceOf).unwrap();
    }
    c.bench_function("build_etg/1000_seeds", |b| {
        b.iter(|| build_etg(seeds.iter().map(String::as_str), black_box(&store), None).unwrap())
    });
}

fn statistics(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(3);
    let mut dist = |n: usize| {
        Distribution::from_weights((0..n).map(|i| (format!("w{i}"), rng.random_range(0.01..1.0)))).unwrap()
    };
    let (p, q) = (dist(10_000), dist(10_000));
    c.bench_function("pearson/10k", |b| b.iter(|| pearson(black_box(&p), black_box(&q)).unwrap()));
    c.bench_function("kl_divergence/10k", |b| {
        b.iter(|| kl_divergence(black_box(&p), black_box(&q), 1e-6).unwrap())
    });
}

criterion_group!(benches, uniform_sampling, etg, statistics);
criterion_main!(benches);
