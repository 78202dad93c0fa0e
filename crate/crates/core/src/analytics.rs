//! Distributions, correlations and ranking metrics over prediction records.
//!
//! Runs are aligned by [`FactKey`]: every function that compares two
//! paradigms takes maps keyed by the fact so that query ids (which differ
//! between paradigms) never need to be matched up by hand.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use thiserror::Error;

use crate::corpus::FactKey;
use crate::scorer::PredictionRecord;

/// Tolerance on the total mass of a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;
/// Default add-epsilon smoothing mass for [`kl_divergence`].
pub const DEFAULT_KL_EPSILON: f64 = 1e-6;
/// Transition cells computed from fewer flipped queries are reported absent.
pub const MIN_FLIPPED_QUERIES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("record {0} has no predictions")]
    NoPredictions(String),
    #[error("no gold label for query {0}")]
    MissingGold(String),
    #[error("no presence flag for query {0}")]
    MissingFlag(String),
    #[error("coverage mismatch: {0}")]
    CoverageMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, AnalyticsError>;

/// Predictions of one run, keyed by fact.
pub type Run = BTreeMap<FactKey, PredictionRecord>;
/// Gold object labels keyed by fact.
pub type Golds = BTreeMap<FactKey, String>;

/// A normalized label → probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    weights: BTreeMap<String, f64>,
}

impl Distribution {
    /// Normalizes non-negative weights. Zero weights are dropped.
    pub fn from_weights<I, S>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        for (label, w) in weights {
            let label = label.into();
            if label.is_empty() {
                return Err(AnalyticsError::InvalidDistribution("empty label".into()));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(AnalyticsError::InvalidDistribution(format!(
                    "weight {w} for `{label}`"
                )));
            }
            *acc.entry(label).or_insert(0.0) += w;
        }
        acc.retain(|_, w| *w > 0.0);
        let total: f64 = acc.values().sum();
        if acc.is_empty() || total <= 0.0 {
            return Err(AnalyticsError::Empty("distribution has no mass".into()));
        }
        for w in acc.values_mut() {
            *w /= total;
        }
        Ok(Distribution { weights: acc })
    }

    /// Frequency histogram of the given labels.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_weights(labels.into_iter().map(|l| (l, 1.0)))
    }

    pub fn get(&self, label: &str) -> f64 {
        self.weights.get(label).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    /// The `k` heaviest labels, ties broken by label.
    pub fn top(&self, k: usize) -> Vec<(&str, f64)> {
        let mut items: Vec<(&str, f64)> = self.weights.iter().map(|(l, w)| (l.as_str(), *w)).collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        items.truncate(k);
        items
    }
}

fn top1(record: &PredictionRecord) -> Result<&str> {
    record
        .predictions
        .first()
        .map(|(label, _)| label.as_str())
        .ok_or_else(|| AnalyticsError::NoPredictions(record.query_id.clone()))
}

/// Histogram of top-1 predictions across records.
pub fn prediction_histogram<'a, I>(records: I) -> Result<Distribution>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let mut labels = Vec::new();
    for record in records {
        labels.push(top1(record)?.to_string());
    }
    if labels.is_empty() {
        return Err(AnalyticsError::Empty("no prediction records".into()));
    }
    Distribution::from_labels(labels)
}

/// Probability mass of one record's top-k list, renormalized over the list.
pub fn record_distribution(record: &PredictionRecord) -> Result<Distribution> {
    if record.predictions.is_empty() {
        return Err(AnalyticsError::NoPredictions(record.query_id.clone()));
    }
    let max = record.predictions[0].1;
    Distribution::from_weights(
        record
            .predictions
            .iter()
            .map(|(l, lp)| (l.clone(), (lp - max).exp())),
    )
}

/// Mean of the per-record top-k distributions.
pub fn mean_record_distribution<'a, I>(records: I) -> Result<Distribution>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    let mut n = 0usize;
    for record in records {
        let d = record_distribution(record)?;
        for (l, w) in d.weights {
            *acc.entry(l).or_insert(0.0) += w;
        }
        n += 1;
    }
    if n == 0 {
        return Err(AnalyticsError::Empty("no prediction records".into()));
    }
    Distribution::from_weights(acc)
}

/// Pearson correlation of two raw vectors of equal length.
pub fn pearson_vectors(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(AnalyticsError::InvalidArgument(format!(
            "vector lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(AnalyticsError::UndefinedCorrelation(
            "fewer than two aligned points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalyticsError::UndefinedCorrelation("constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of two distributions aligned on the union of their
/// supports; labels missing from one side count as zero.
pub fn pearson(d1: &Distribution, d2: &Distribution) -> Result<f64> {
    pearson_over(d1, d2, std::iter::empty::<&str>())
}

/// Like [`pearson`], with additional labels forced into the aligned support.
pub fn pearson_over<'a>(
    d1: &Distribution,
    d2: &Distribution,
    extra_support: impl IntoIterator<Item = &'a str>,
) -> Result<f64> {
    let mut support: BTreeSet<&str> = d1.labels().chain(d2.labels()).collect();
    let extra: Vec<&str> = extra_support.into_iter().collect();
    support.extend(extra.iter().copied());
    let x: Vec<f64> = support.iter().map(|l| d1.get(l)).collect();
    let y: Vec<f64> = support.iter().map(|l| d2.get(l)).collect();
    pearson_vectors(&x, &y)
}

/// KL(p ‖ q̃) in nats, where q̃ is q with `epsilon` added on every label of
/// p's support and then renormalized.
pub fn kl_divergence(p: &Distribution, q: &Distribution, epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(AnalyticsError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let q_total: f64 = q.weights.values().sum::<f64>() + epsilon * p.len() as f64;
    let mut kl = 0.0;
    for (label, &pw) in &p.weights {
        let qs = (q.get(label) + epsilon) / q_total;
        kl += pw * (pw / qs).ln();
    }
    Ok(kl.max(0.0))
}

/// Percentage of instances whose value is among the `k` most frequent labels.
pub fn topk_coverage(d: &Distribution, counts_total: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(AnalyticsError::InvalidArgument("k must be at least 1".into()));
    }
    let top = d.top(k);
    if counts_total == 0 {
        return Ok(100.0 * top.iter().map(|(_, w)| w).sum::<f64>());
    }
    let covered: f64 = top
        .iter()
        .map(|(_, w)| (w * counts_total as f64).round())
        .sum();
    Ok(100.0 * covered / counts_total as f64)
}

fn gold_for<'a>(golds: &'a Golds, key: &FactKey) -> Result<&'a str> {
    golds
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| AnalyticsError::MissingGold(key.to_string()))
}

/// 1-based position of `gold` in the prediction list, if present.
pub fn rank_of(record: &PredictionRecord, gold: &str) -> Option<usize> {
    record
        .predictions
        .iter()
        .position(|(l, _)| l == gold)
        .map(|i| i + 1)
}

/// Precision at k, in percent, micro-averaged over the records.
pub fn precision_at_k(records: &Run, golds: &Golds, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(AnalyticsError::InvalidArgument("k must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(AnalyticsError::Empty("no records for precision".into()));
    }
    let mut hits = 0usize;
    for (key, record) in records {
        let gold = gold_for(golds, key)?;
        if rank_of(record, gold).is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Unweighted mean of per-relation values.
pub fn macro_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(AnalyticsError::Empty("no per-relation values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Splits a run by relation id.
pub fn by_relation<V: Clone>(map: &BTreeMap<FactKey, V>) -> BTreeMap<String, BTreeMap<FactKey, V>> {
    let mut out: BTreeMap<String, BTreeMap<FactKey, V>> = BTreeMap::new();
    for (k, v) in map {
        out.entry(k.relation_id.clone())
            .or_default()
            .insert(k.clone(), v.clone());
    }
    out
}

/// Macro P@k: per-relation precision averaged without weighting.
pub fn macro_precision_at_k(records: &Run, golds: &Golds, k: usize) -> Result<f64> {
    let per: Vec<f64> = by_relation(records)
        .values()
        .map(|r| precision_at_k(r, golds, k))
        .collect::<Result<_>>()?;
    macro_mean(&per)
}

/// Answers whether a predicted label belongs to some entity type.
pub trait MembershipOracle {
    fn is_member(&self, label: &str) -> bool;
}

impl MembershipOracle for HashSet<String> {
    fn is_member(&self, label: &str) -> bool {
        self.contains(label)
    }
}

impl MembershipOracle for BTreeSet<String> {
    fn is_member(&self, label: &str) -> bool {
        self.contains(label)
    }
}

impl<F: Fn(&str) -> bool> MembershipOracle for F {
    fn is_member(&self, label: &str) -> bool {
        self(label)
    }
}

/// Mean reciprocal rank of the gold label. With a filter, ranks count only
/// predictions accepted by it.
pub fn mrr(
    records: &Run,
    golds: &Golds,
    candidate_filter: Option<&dyn MembershipOracle>,
) -> Result<f64> {
    if records.is_empty() {
        return Err(AnalyticsError::Empty("no records for MRR".into()));
    }
    let mut total = 0.0;
    for (key, record) in records {
        let gold = gold_for(golds, key)?;
        let rank = match candidate_filter {
            None => rank_of(record, gold),
            Some(filter) => record
                .predictions
                .iter()
                .filter(|(l, _)| filter.is_member(l))
                .position(|(l, _)| l == gold)
                .map(|i| i + 1),
        };
        if let Some(r) = rank {
            total += 1.0 / r as f64;
        }
    }
    Ok(total / records.len() as f64)
}

/// Overall and in-type rank of the gold label for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankOutcome {
    pub query_id: String,
    pub overall_rank: Option<usize>,
    pub in_type_rank: Option<usize>,
}

impl RankOutcome {
    /// In-type rank is the position of the gold among type-member
    /// predictions, and is absent when the gold itself is not a member.
    pub fn from_record(
        record: &PredictionRecord,
        gold: &str,
        membership: Option<&dyn MembershipOracle>,
    ) -> Self {
        let overall_rank = rank_of(record, gold);
        let in_type_rank = match (membership, overall_rank) {
            (Some(m), Some(_)) if m.is_member(gold) => record
                .predictions
                .iter()
                .filter(|(l, _)| m.is_member(l))
                .position(|(l, _)| l == gold)
                .map(|i| i + 1),
            _ => None,
        };
        RankOutcome {
            query_id: record.query_id.clone(),
            overall_rank,
            in_type_rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankField {
    Overall,
    InType,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankChange {
    pub raised: f64,
    pub unchanged: f64,
    pub dropped: f64,
    pub count: usize,
}

/// Share of queries whose gold rank improved, stayed or worsened.
pub fn rank_change_analysis(
    before: &BTreeMap<FactKey, RankOutcome>,
    after: &BTreeMap<FactKey, RankOutcome>,
    field: RankField,
) -> Result<RankChange> {
    if before.len() != after.len() || before.keys().any(|k| !after.contains_key(k)) {
        return Err(AnalyticsError::CoverageMismatch(
            "before/after rank outcomes cover different queries".into(),
        ));
    }
    let pick = |o: &RankOutcome| match field {
        RankField::Overall => o.overall_rank,
        RankField::InType => o.in_type_rank,
    };
    let (mut raised, mut unchanged, mut dropped) = (0usize, 0usize, 0usize);
    for (key, b) in before {
        if let (Some(rb), Some(ra)) = (pick(b), pick(&after[key])) {
            match ra.cmp(&rb) {
                std::cmp::Ordering::Less => raised += 1,
                std::cmp::Ordering::Equal => unchanged += 1,
                std::cmp::Ordering::Greater => dropped += 1,
            }
        }
    }
    let n = raised + unchanged + dropped;
    if n == 0 {
        return Err(AnalyticsError::Empty(
            "no query has the rank present in both runs".into(),
        ));
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(RankChange {
        raised: pct(raised),
        unchanged: pct(unchanged),
        dropped: pct(dropped),
        count: n,
    })
}

/// One relation's row of the type-transition table. Percentages are in
/// [0, 100]; transition cells are absent below [`MIN_FLIPPED_QUERIES`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub queries: usize,
    pub precision_delta: f64,
    pub type_precision_delta: f64,
    pub wrong_to_right: usize,
    pub right_to_wrong: usize,
    pub wrong_to_right_with_type_change: Option<f64>,
    pub right_to_wrong_without_type_change: Option<f64>,
}

/// Compares two runs over the same queries of one relation, using the
/// relation's induced type as the notion of "type-correct".
///
/// A prediction's type changed when its membership in the induced type
/// differs between the two runs.
pub fn type_transition_analysis(
    before: &Run,
    after: &Run,
    golds: &Golds,
    membership: &dyn MembershipOracle,
) -> Result<TransitionRow> {
    if before.len() != after.len() || before.keys().any(|k| !after.contains_key(k)) {
        return Err(AnalyticsError::CoverageMismatch(
            "before/after runs cover different queries".into(),
        ));
    }
    if before.is_empty() {
        return Err(AnalyticsError::Empty("no queries for type transition".into()));
    }
    let n = before.len();
    let (mut right_b, mut right_a, mut type_b, mut type_a) = (0usize, 0usize, 0usize, 0usize);
    let (mut w2r, mut w2r_changed, mut r2w, mut r2w_unchanged) = (0usize, 0usize, 0usize, 0usize);
    for (key, rb) in before {
        let gold = gold_for(golds, key)?;
        let ra = &after[key];
        let (pb, pa) = (top1(rb)?, top1(ra)?);
        let (cb, ca) = (pb == gold, pa == gold);
        let (tb, ta) = (membership.is_member(pb), membership.is_member(pa));
        right_b += cb as usize;
        right_a += ca as usize;
        type_b += tb as usize;
        type_a += ta as usize;
        if !cb && ca {
            w2r += 1;
            w2r_changed += (tb != ta) as usize;
        } else if cb && !ca {
            r2w += 1;
            r2w_unchanged += (tb == ta) as usize;
        }
    }
    let pct = |c: usize, d: usize| 100.0 * c as f64 / d as f64;
    let cell = |c: usize, d: usize| (d >= MIN_FLIPPED_QUERIES).then(|| pct(c, d));
    Ok(TransitionRow {
        queries: n,
        precision_delta: pct(right_a, n) - pct(right_b, n),
        type_precision_delta: pct(type_a, n) - pct(type_b, n),
        wrong_to_right: w2r,
        right_to_wrong: r2w,
        wrong_to_right_with_type_change: cell(w2r_changed, w2r),
        right_to_wrong_without_type_change: cell(r2w_unchanged, r2w),
    })
}

/// One group of a leakage or reconstruction split.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    pub share: f64,
    pub p1_prompt: Option<f64>,
    pub p1_context: Option<f64>,
    pub delta: Option<f64>,
}

fn same_keys<A, B>(a: &BTreeMap<FactKey, A>, b: &BTreeMap<FactKey, B>, what: &str) -> Result<()> {
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        return Err(AnalyticsError::CoverageMismatch(what.to_string()));
    }
    Ok(())
}

fn split_rows(
    prompt: &Run,
    context: &Run,
    golds: &Golds,
    flags: &BTreeMap<FactKey, bool>,
    names: [&str; 2],
) -> Result<[GroupRow; 2]> {
    let total = prompt.len();
    if total == 0 {
        return Err(AnalyticsError::Empty("no queries to split".into()));
    }
    let mut rows = Vec::with_capacity(2);
    for (name, want) in names.iter().zip([true, false]) {
        let keys: Vec<&FactKey> = prompt.keys().filter(|k| flags[*k] == want).collect();
        let micro = |run: &Run| -> Result<Option<f64>> {
            if keys.is_empty() {
                return Ok(None);
            }
            let mut hits = 0usize;
            for k in &keys {
                let gold = gold_for(golds, k)?;
                if top1(&run[*k])? == gold {
                    hits += 1;
                }
            }
            Ok(Some(100.0 * hits as f64 / keys.len() as f64))
        };
        let (p, c) = (micro(prompt)?, micro(context)?);
        rows.push(GroupRow {
            group: name.to_string(),
            count: keys.len(),
            share: 100.0 * keys.len() as f64 / total as f64,
            p1_prompt: p,
            p1_context: c,
            delta: p.zip(c).map(|(p, c)| c - p),
        });
    }
    let [a, b]: [GroupRow; 2] = rows.try_into().expect("two rows");
    Ok([a, b])
}

/// Micro P@1 of both paradigms, split by whether the answer appears in the
/// context. Rows are `present` then `absent`.
pub fn leakage_split(
    prompt: &Run,
    context: &Run,
    presence: &BTreeMap<FactKey, bool>,
    golds: &Golds,
) -> Result<[GroupRow; 2]> {
    same_keys(prompt, context, "prompt and context runs cover different queries")?;
    if let Some(k) = prompt.keys().find(|k| !presence.contains_key(*k)) {
        return Err(AnalyticsError::MissingFlag(k.to_string()));
    }
    split_rows(prompt, context, golds, presence, ["present", "absent"])
}

/// Splits answer-present queries by whether the masked answer can be
/// reconstructed (top-1 of the reconstruction probe equals the gold), and
/// compares prompt against masked-context precision in each group.
pub fn reconstruction_split(
    prompt: &Run,
    masked_context: &Run,
    reconstruction: &Run,
    golds: &Golds,
) -> Result<[GroupRow; 2]> {
    let restrict = |run: &Run, what: &str| -> Result<Run> {
        reconstruction
            .keys()
            .map(|k| {
                run.get(k)
                    .map(|r| (k.clone(), r.clone()))
                    .ok_or_else(|| {
                        AnalyticsError::CoverageMismatch(format!("{what} run lacks query {k}"))
                    })
            })
            .collect()
    };
    let prompt = restrict(prompt, "prompt")?;
    let masked = restrict(masked_context, "masked-context")?;
    let mut flags = BTreeMap::new();
    for (key, record) in reconstruction {
        let gold = gold_for(golds, key)?;
        flags.insert(key.clone(), top1(record)? == gold);
    }
    split_rows(&prompt, &masked, golds, &flags, ["reconstructable", "not_reconstructable"])
}

/// Macro P@1 of the prompt, context and masked-context runs.
pub fn masked_context_overall(
    prompt: &Run,
    context: &Run,
    masked_context: &Run,
    golds: &Golds,
) -> Result<(f64, f64, f64)> {
    same_keys(prompt, context, "prompt and context runs cover different queries")?;
    same_keys(prompt, masked_context, "prompt and masked-context runs cover different queries")?;
    Ok((
        macro_precision_at_k(prompt, golds, 1)?,
        macro_precision_at_k(context, golds, 1)?,
        macro_precision_at_k(masked_context, golds, 1)?,
    ))
}

/// True when the predicted label is a case-insensitive substring of the
/// subject label.
pub fn surface_form_overlap(subject_label: &str, predicted_label: &str) -> bool {
    subject_label
        .to_lowercase()
        .contains(&predicted_label.to_lowercase())
}
