use std::collections::{BTreeMap, BTreeSet};

use probekit_core::analytics::{self, Distribution, Golds, RankField, RankOutcome, Run};
use probekit_core::corpus::{filter_single_token, parse_facts, write_facts};
use probekit_core::paradigms::{contains_answer, is_eligible_case, mask_answer_in_context, sample_cases, MaskScope};
use probekit_core::report::MetricsReport;
use probekit_core::sampler::{build_uniform_subset, presample};
use probekit_core::scorer::{MockConfig, MockScorer};
use probekit_core::{Fact, FactKey, FactSet, PredictionRecord};
use proptest::prelude::*;

fn distribution() -> impl Strategy<Value = Distribution> {
    prop::collection::btree_map("[a-h]", 0.001f64..1.0, 1..8)
        .prop_map(|w| Distribution::from_weights(w).unwrap())
}

/// Facts of one relation as (subject index, object index) pairs.
fn factset() -> impl Strategy<Value = FactSet> {
    prop::collection::btree_set((0usize..60, 0usize..8), 1..80).prop_map(|pairs| {
        FactSet::new(
            "P1",
            pairs
                .into_iter()
                .map(|(s, o)| Fact::new(format!("S{s}"), format!("person {s}"), "P1", format!("O{o}"), format!("city{o}")))
                .collect(),
        )
    })
}

fn key(i: usize) -> FactKey {
    FactKey {
        subject_id: format!("S{i}"),
        relation_id: format!("P{}", i % 3),
        object_id: "O".into(),
    }
}

/// A run over labels "l0".."l9" with random gold labels.
fn run_with_golds() -> impl Strategy<Value = (Run, Golds)> {
    prop::collection::vec((Just(()).prop_perturb(|_, mut rng| {
        let mut labels: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        labels
    }), 0usize..12), 1..30)
    .prop_map(|rows| {
        let mut run = Run::new();
        let mut golds = Golds::new();
        for (i, (labels, gold)) in rows.into_iter().enumerate() {
            let n = labels.len();
            let predictions = labels.into_iter().enumerate().map(|(r, l)| (l, -(r as f64) - 0.5)).collect();
            run.insert(
                key(i),
                PredictionRecord {
                    query_id: format!("q{i}"),
                    model_id: "m".into(),
                    predictions,
                    created_at: 0,
                },
            );
            golds.insert(key(i), if gold < n { format!("l{gold}") } else { "unseen".into() });
        }
        (run, golds)
    })
}

proptest! {
    #[test]
    fn distributions_are_normalized(d in distribution()) {
        let total: f64 = d.weights().values().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(d.weights().values().all(|&w| w > 0.0));
    }

    #[test]
    fn pearson_is_symmetric(a in distribution(), b in distribution()) {
        match (analytics::pearson(&a, &b), analytics::pearson(&b, &a)) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&x));
            }
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "{x:?} vs {y:?}"),
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 2..12),
        ys in prop::collection::vec(-10.0f64..10.0, 12),
        scale in 0.01f64..100.0,
        shift in -5.0f64..5.0,
    ) {
        let ys = &ys[..xs.len()];
        let moved: Vec<f64> = ys.iter().map(|y| scale * y + shift).collect();
        if let (Ok(r), Ok(s)) = (analytics::pearson_vectors(&xs, ys), analytics::pearson_vectors(&xs, &moved)) {
            prop_assert!((r - s).abs() < 1e-9, "{r} vs {s}");
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in distribution(), q in distribution()) {
        prop_assert!(analytics::kl_divergence(&p, &q, 1e-6).unwrap() >= 0.0);
        prop_assert!(analytics::kl_divergence(&p, &p, 1e-9).unwrap() < 1e-9);
    }

    #[test]
    fn precision_is_monotone_in_k((run, golds) in run_with_golds()) {
        let mut last = 0.0;
        for k in 1..=10 {
            let p = analytics::precision_at_k(&run, &golds, k).unwrap();
            prop_assert!(p >= last && p <= 100.0);
            last = p;
        }
        let mrr = analytics::mrr(&run, &golds, None).unwrap();
        let p1 = analytics::precision_at_k(&run, &golds, 1).unwrap();
        let p10 = analytics::precision_at_k(&run, &golds, 10).unwrap();
        prop_assert!(mrr >= p1 / 100.0 - 1e-12);
        prop_assert!(mrr <= p10 / 100.0 + 1e-12);
    }

    #[test]
    fn macro_precision_is_mean_of_relations((run, golds) in run_with_golds()) {
        let per: Vec<f64> = analytics::by_relation(&run)
            .values()
            .map(|r| analytics::precision_at_k(r, &golds, 1).unwrap())
            .collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        prop_assert!((analytics::macro_precision_at_k(&run, &golds, 1).unwrap() - mean).abs() < 1e-9);
    }

    #[test]
    fn rank_change_shares_sum_to_100(
        ranks in prop::collection::vec((prop::option::of(1usize..10), prop::option::of(1usize..10)), 1..40)
    ) {
        let mut before = BTreeMap::new();
        let mut after = BTreeMap::new();
        for (i, (b, a)) in ranks.iter().enumerate() {
            let outcome = |r: Option<usize>| RankOutcome { query_id: format!("q{i}"), overall_rank: r, in_type_rank: None };
            before.insert(key(i), outcome(*b));
            after.insert(key(i), outcome(*a));
        }
        let both = ranks.iter().filter(|(b, a)| b.is_some() && a.is_some()).count();
        match analytics::rank_change_analysis(&before, &after, RankField::Overall) {
            Ok(c) => {
                prop_assert_eq!(c.count, both);
                prop_assert!((c.raised + c.unchanged + c.dropped - 100.0).abs() <= 0.01);
            }
            Err(_) => prop_assert_eq!(both, 0),
        }
    }

    #[test]
    fn uniform_subset_is_uniform_and_seeded(set in factset(), seed in any::<u64>()) {
        let (out, report) = build_uniform_subset(&set, seed).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for f in out.iter() {
            *counts.entry(&f.object_id).or_default() += 1;
        }
        prop_assert!(counts.values().all(|&c| c == report.f_m));
        prop_assert_eq!(out.len(), report.groups_kept * report.f_m);
        let (again, _) = build_uniform_subset(&set, seed).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn presample_respects_cap(set in factset(), cap in 1usize..100, seed in any::<u64>()) {
        let sample = presample(&set, cap, seed).unwrap();
        prop_assert_eq!(sample.len(), cap.min(set.len()));
        let all: BTreeSet<&Fact> = set.iter().collect();
        prop_assert!(sample.iter().all(|f| all.contains(f)));
        prop_assert_eq!(sample, presample(&set, cap, seed).unwrap());
    }

    #[test]
    fn facts_round_trip_through_the_file_format(set in factset()) {
        let mut buf = Vec::new();
        write_facts(&mut buf, [&set]).unwrap();
        let first = parse_facts(buf.as_slice(), "mem").unwrap();
        let mut again = Vec::new();
        write_facts(&mut again, &first.sets).unwrap();
        prop_assert_eq!(&buf, &again);
        prop_assert_eq!(first.sets, vec![set]);
    }

    #[test]
    fn single_token_filter_is_idempotent(set in factset(), keep in prop::collection::btree_set(0usize..8, 1..8)) {
        let vocab: Vec<String> = keep.iter().map(|o| format!("city{o}")).collect();
        let mock = MockScorer::new(MockConfig::uniform(vocab.iter().map(String::as_str), 0.0, 1));
        let once = filter_single_token(&set, &mock).unwrap();
        prop_assert!(once.iter().all(|f| vocab.contains(&f.object_label)));
        prop_assert_eq!(filter_single_token(&once, &mock).unwrap(), once);
    }

    #[test]
    fn sampled_cases_are_eligible_and_seeded(set in factset(), n in 0usize..5, seed in any::<u64>()) {
        let target = set.facts()[0].clone();
        match sample_cases(&set, &target, n, seed) {
            Ok(sample) => {
                prop_assert_eq!(sample.cases.len(), n);
                prop_assert!(sample.cases.iter().all(|c| is_eligible_case(c, &target)));
                let distinct: BTreeSet<&Fact> = sample.cases.iter().collect();
                prop_assert_eq!(distinct.len(), n);
                prop_assert_eq!(sample.cases, sample_cases(&set, &target, n, seed).unwrap().cases);
            }
            Err(_) => prop_assert!(set.iter().filter(|f| is_eligible_case(f, &target)).count() < n),
        }
    }

    #[test]
    fn masking_removes_every_occurrence(
        words in prop::collection::vec("[a-z]{2,6}", 1..12),
        gold in "[a-z]{2,6}",
        at in prop::collection::vec(any::<bool>(), 12),
    ) {
        prop_assume!(gold != "mask");
        let mut tokens: Vec<String> = words.into_iter().filter(|w| *w != gold && *w != "mask").collect();
        let mut inserted = 0;
        for (i, put) in at.iter().enumerate() {
            if *put && i <= tokens.len() {
                tokens.insert(i, gold.clone());
                inserted += 1;
            }
        }
        let text = tokens.join(" ");
        prop_assert_eq!(contains_answer(&text, &gold), inserted > 0);
        match mask_answer_in_context(&text, &gold, MaskScope::All) {
            Ok((masked, n)) => {
                prop_assert_eq!(n, inserted);
                prop_assert!(!contains_answer(&masked, &gold));
            }
            Err(_) => prop_assert_eq!(inserted, 0),
        }
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec(("[a-z_]{1,8}", "P[0-9]{1,3}", "[a-z.]{1,10}", -1e6f64..1e6, 0usize..1000), 0..20)) {
        let mut m = MetricsReport::new();
        for (s, r, k, v, c) in &rows {
            m.push(s, r, k, *v, *c);
        }
        let csv = m.to_csv_string();
        let parsed = MetricsReport::read_csv(csv.as_bytes()).unwrap();
        prop_assert_eq!(parsed.rows().len(), rows.len());
        prop_assert_eq!(parsed.to_csv_string(), csv);
    }
}
