//! Uniform-answer evaluation sets.
//!
//! Facts of a relation are grouped by object. With `f_m` the lower median
//! of the group sizes, larger groups are randomly cut down to `f_m`, equal
//! groups are kept and smaller groups are dropped, so every surviving
//! object answers exactly `f_m` facts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analytics::Distribution;
use crate::corpus::{Fact, FactSet};

/// Per-relation presample cap applied before uniform sampling.
pub const DEFAULT_PRESAMPLE_CAP: usize = 50_000;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("relation {0} has no facts")]
    EmptyFactSet(String),
    #[error("presample cap must be positive")]
    ZeroCap,
}

/// The generator used for every seeded draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Picks `amount` distinct indices out of `0..len` by a partial
/// Fisher-Yates shuffle, in draw order.
pub(crate) fn draw_indices(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let amount = amount.min(len);
    for i in 0..amount {
        let j = rng.random_range(i as u64..len as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(amount);
    idx
}

/// Normalized histogram of object labels.
pub fn answer_histogram(factset: &FactSet) -> Result<Distribution, SamplerError> {
    if factset.is_empty() {
        return Err(SamplerError::EmptyFactSet(factset.relation_id().to_string()));
    }
    Ok(Distribution::from_labels(factset.iter().map(|f| f.object_label.as_str()))
        .expect("non-empty label histogram"))
}

/// Uniform random subset of at most `cap` facts.
pub fn presample(factset: &FactSet, cap: usize, seed: u64) -> Result<FactSet, SamplerError> {
    if cap == 0 {
        return Err(SamplerError::ZeroCap);
    }
    if factset.len() <= cap {
        return Ok(factset.clone());
    }
    let mut rng = seeded_rng(seed);
    let picked = draw_indices(&mut rng, factset.len(), cap)
        .into_iter()
        .map(|i| factset.facts()[i].clone())
        .collect();
    Ok(factset.with_facts(picked))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniformSampleReport {
    pub relation_id: String,
    pub f_m: usize,
    pub groups_kept: usize,
    pub groups_deleted: usize,
    pub facts_out: usize,
}

impl UniformSampleReport {
    /// `relation_id \t f_m \t groups_kept \t groups_deleted \t facts_out`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.relation_id, self.f_m, self.groups_kept, self.groups_deleted, self.facts_out
        )
    }
}

/// The ⌊(n+1)/2⌋-th smallest value.
pub fn lower_median(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Some(sorted[sorted.len().div_ceil(2) - 1])
}

pub fn build_uniform_subset(
    factset: &FactSet,
    seed: u64,
) -> Result<(FactSet, UniformSampleReport), SamplerError> {
    if factset.is_empty() {
        return Err(SamplerError::EmptyFactSet(factset.relation_id().to_string()));
    }
    let mut groups: BTreeMap<&str, Vec<&Fact>> = BTreeMap::new();
    for fact in factset {
        groups.entry(fact.object_id.as_str()).or_default().push(fact);
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let f_m = lower_median(&sizes).expect("at least one group");

    let mut rng = seeded_rng(seed);
    let mut kept = Vec::new();
    let (mut groups_kept, mut groups_deleted) = (0usize, 0usize);
    for members in groups.values() {
        if members.len() < f_m {
            groups_deleted += 1;
            continue;
        }
        groups_kept += 1;
        if members.len() == f_m {
            kept.extend(members.iter().map(|f| (*f).clone()));
        } else {
            for i in draw_indices(&mut rng, members.len(), f_m) {
                kept.push(members[i].clone());
            }
        }
    }
    let out = factset.with_facts(kept);
    let report = UniformSampleReport {
        relation_id: factset.relation_id().to_string(),
        f_m,
        groups_kept,
        groups_deleted,
        facts_out: out.len(),
    };
    debug_assert_eq!(report.facts_out, report.groups_kept * report.f_m);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::topk_coverage;
    use proptest::prelude::*;
    use std::collections::{BTreeSet, HashMap};

    fn set_from_sizes(sizes: &[(&str, usize)]) -> FactSet {
        let mut facts = Vec::new();
        for (obj, n) in sizes {
            for i in 0..*n {
                facts.push(Fact::new(
                    format!("{obj}-s{i}"),
                    format!("subject {obj} {i}"),
                    "R",
                    *obj,
                    obj.to_uppercase(),
                ));
            }
        }
        FactSet::new("R", facts)
    }

    fn counts(set: &FactSet) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for f in set {
            *m.entry(f.object_id.clone()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn histogram() {
        let set = set_from_sizes(&[("a", 2), ("b", 1)]);
        let d = answer_histogram(&set).unwrap();
        assert!((d.get("A") - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.get("B") - 1.0 / 3.0).abs() < 1e-12);
        let single = set_from_sizes(&[("z", 1)]);
        assert_eq!(answer_histogram(&single).unwrap().get("Z"), 1.0);
        assert!(answer_histogram(&FactSet::new("R", vec![])).is_err());
    }

    #[test]
    fn median_rule() {
        assert_eq!(lower_median(&[5, 3, 1]), Some(3));
        assert_eq!(lower_median(&[4, 1, 2, 3]), Some(2));
        assert_eq!(lower_median(&[7]), Some(7));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn uniform_hand_trace() {
        let set = set_from_sizes(&[("x", 5), ("y", 3), ("z", 1)]);
        let (out, report) = build_uniform_subset(&set, 11).unwrap();
        assert_eq!(report.f_m, 3);
        assert_eq!(report.groups_kept, 2);
        assert_eq!(report.groups_deleted, 1);
        assert_eq!(report.facts_out, 6);
        let c = counts(&out);
        assert_eq!(c.get("x"), Some(&3));
        assert_eq!(c.get("y"), Some(&3));
        assert_eq!(c.get("z"), None);
        assert_eq!(report.to_line(), "R\t3\t2\t1\t6");
    }

    #[test]
    fn uniform_identity_when_equal() {
        let set = set_from_sizes(&[("a", 2), ("b", 2), ("c", 2)]);
        let (out, report) = build_uniform_subset(&set, 5).unwrap();
        assert_eq!(out, set);
        assert_eq!(report.groups_deleted, 0);
    }

    #[test]
    fn single_group_is_valid() {
        let set = set_from_sizes(&[("a", 4)]);
        let (out, report) = build_uniform_subset(&set, 0).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(report.groups_kept, 1);
    }

    #[test]
    fn presample_rules() {
        let small = set_from_sizes(&[("a", 10)]);
        assert_eq!(presample(&small, DEFAULT_PRESAMPLE_CAP, 1).unwrap(), small);
        let big = set_from_sizes(&[("a", 50), ("b", 50)]);
        let s1 = presample(&big, 10, 42).unwrap();
        let s1b = presample(&big, 10, 42).unwrap();
        assert_eq!(s1, s1b);
        assert_eq!(s1.len(), 10);
        let s2 = presample(&big, 10, 1).unwrap();
        let s3 = presample(&big, 10, 2).unwrap();
        assert_ne!(s2, s3);
        assert!(presample(&big, 0, 1).is_err());
    }

    fn arb_sizes() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..12, 1..15)
    }

    fn named(sizes: &[usize]) -> FactSet {
        let names: Vec<String> = (0..sizes.len()).map(|i| format!("o{i:02}")).collect();
        let pairs: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
        set_from_sizes(&pairs)
    }

    proptest! {
        #[test]
        fn uniform_output_properties(sizes in arb_sizes(), seed in any::<u64>()) {
            let set = named(&sizes);
            let (out, report) = build_uniform_subset(&set, seed).unwrap();
            let c = counts(&out);
            prop_assert!(c.values().all(|&n| n == report.f_m));
            prop_assert_eq!(report.facts_out, report.groups_kept * report.f_m);
            prop_assert!(out.len() <= set.len());
            let input: BTreeSet<&Fact> = set.iter().collect();
            prop_assert!(out.iter().all(|f| input.contains(f)));
            let (again, _) = build_uniform_subset(&set, seed).unwrap();
            prop_assert_eq!(&again, &out);

            let d = answer_histogram(&out).unwrap();
            let m = d.len();
            for k in 1..=m {
                let cov = topk_coverage(&d, out.len(), k).unwrap();
                prop_assert!((cov - 100.0 * k as f64 / m as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn presample_is_a_subset(n in 1usize..80, cap in 1usize..40, seed in any::<u64>()) {
            let set = named(&[n]);
            let out = presample(&set, cap, seed).unwrap();
            prop_assert_eq!(out.len(), n.min(cap));
            let input: HashMap<&str, &Fact> = set.iter().map(|f| (f.subject_id.as_str(), f)).collect();
            prop_assert!(out.iter().all(|f| input.get(f.subject_id.as_str()) == Some(&f)));
        }
    }
}
