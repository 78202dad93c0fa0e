use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Backend, BridgeError, Result, ScoreRequest};
use crate::analytics::Distribution;
use crate::hashing::unit_hash;
use crate::paradigms::contains_answer;
use crate::{MASK, SEP};

/// Configuration of the deterministic mock scorer.
///
/// For a request whose text is not in `fixed`, the output distribution is
/// `(1 - subject_shift) * bias + subject_shift * perturbation(text)`, where
/// the perturbation is a hash-derived distribution over the label support.
/// With `subject_shift = 0` the output ignores the text entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub bias: BTreeMap<String, f64>,
    #[serde(default)]
    pub subject_shift: f64,
    #[serde(default)]
    pub vocab: BTreeSet<String>,
    #[serde(default)]
    pub seed: u64,
    /// Exact probe text -> ranked predictions, returned verbatim.
    #[serde(default)]
    pub fixed: BTreeMap<String, Vec<(String, f64)>>,
    /// Rank vocabulary labels found in a context segment (text before the
    /// last `[SEP]`) above everything else, in order of first appearance.
    #[serde(default)]
    pub context_recall: bool,
}

fn default_model_id() -> String {
    "mock".into()
}

impl MockConfig {
    pub fn new<'a>(bias: Distribution, subject_shift: f64, vocab: impl IntoIterator<Item = &'a str>, seed: u64) -> Self {
        MockConfig {
            model_id: default_model_id(),
            bias: bias.weights().clone(),
            subject_shift,
            vocab: vocab.into_iter().map(str::to_string).collect(),
            seed,
            fixed: BTreeMap::new(),
            context_recall: false,
        }
    }

    /// Uniform bias over the vocabulary.
    pub fn uniform<'a>(vocab: impl IntoIterator<Item = &'a str> + Clone, subject_shift: f64, seed: u64) -> Self {
        let bias = Distribution::from_labels(vocab.clone()).expect("non-empty vocabulary");
        Self::new(bias, subject_shift, vocab, seed)
    }
}

/// Deterministic in-process backend; outputs are pure functions of the
/// configuration and the request.
#[derive(Debug, Clone)]
pub struct MockScorer {
    config: MockConfig,
    bias: Distribution,
    support: Vec<String>,
}

impl MockScorer {
    /// Panics when the bias is not a valid distribution or the shift is
    /// outside [0, 1].
    pub fn new(config: MockConfig) -> Self {
        Self::try_new(config).expect("valid mock configuration")
    }

    pub fn try_new(config: MockConfig) -> Result<Self> {
        let invalid = |reason: String| BridgeError::InvalidRequest {
            id: "mock-config".into(),
            reason,
        };
        if !(0.0..=1.0).contains(&config.subject_shift) {
            return Err(invalid(format!("subject_shift {} outside [0, 1]", config.subject_shift)));
        }
        let total: f64 = config.bias.values().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("bias sums to {total}, expected 1")));
        }
        let bias = Distribution::from_weights(config.bias.iter().map(|(l, w)| (l.clone(), *w)))
            .map_err(|e| invalid(e.to_string()))?;
        let support: BTreeSet<String> = config
            .vocab
            .iter()
            .cloned()
            .chain(bias.labels().map(str::to_string))
            .collect();
        Ok(MockScorer {
            config,
            bias,
            support: support.into_iter().collect(),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn in_vocab(&self, label: &str) -> bool {
        self.support.binary_search_by(|s| s.as_str().cmp(label)).is_ok()
    }

    /// Full distribution (before candidate filtering and truncation).
    pub fn distribution(&self, text: &str) -> Vec<(String, f64)> {
        let shift = self.config.subject_shift;
        let seed = self.config.seed.to_string();
        let raw: Vec<f64> = self
            .support
            .iter()
            .map(|l| unit_hash(&[&seed, text, l]) + 1e-3)
            .collect();
        let raw_total: f64 = raw.iter().sum();
        let mut probs: Vec<(String, f64)> = self
            .support
            .iter()
            .zip(&raw)
            .map(|(l, r)| {
                let p = (1.0 - shift) * self.bias.get(l) + shift * r / raw_total;
                (l.clone(), p)
            })
            .collect();

        if self.config.context_recall {
            if let Some(pos) = text.rfind(SEP) {
                let context = &text[..pos];
                let mut found: Vec<(usize, &str)> = self
                    .support
                    .iter()
                    .filter(|l| contains_answer(context, l))
                    .map(|l| {
                        let at = context.to_lowercase().find(&l.to_lowercase()).unwrap_or(usize::MAX);
                        (at, l.as_str())
                    })
                    .collect();
                found.sort();
                if !found.is_empty() {
                    let boosts: BTreeMap<&str, f64> = found
                        .iter()
                        .enumerate()
                        .map(|(i, (_, l))| (*l, 0.5f64.powi(i as i32 + 1)))
                        .collect();
                    let boost_total: f64 = boosts.values().sum();
                    for (l, p) in probs.iter_mut() {
                        *p = 0.1 * *p + 0.9 * boosts.get(l.as_str()).copied().unwrap_or(0.0) / boost_total;
                    }
                }
            }
        }
        probs.retain(|(_, p)| *p > 0.0);
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        probs
    }
}

impl Backend for MockScorer {
    fn model_id(&self) -> Result<String> {
        Ok(self.config.model_id.clone())
    }

    fn predict(&self, request: &ScoreRequest) -> Result<Vec<(String, f64)>> {
        let masks = request.text.matches(MASK).count();
        if request.mask_index >= masks {
            return Err(BridgeError::Backend {
                id: request.id.clone(),
                message: format!("mask_index {} out of range", request.mask_index),
                retryable: false,
            });
        }
        let ranked: Vec<(String, f64)> = match self.config.fixed.get(&request.text) {
            Some(list) => list.clone(),
            None => self
                .distribution(&request.text)
                .into_iter()
                .map(|(l, p)| (l, p.ln()))
                .collect(),
        };
        let allowed: Option<BTreeSet<&str>> = request
            .candidates
            .as_ref()
            .map(|c| c.iter().map(String::as_str).collect());
        Ok(ranked
            .into_iter()
            .filter(|(l, _)| allowed.as_ref().is_none_or(|a| a.contains(l.as_str())))
            .take(request.top_k)
            .collect())
    }

    /// One token for vocabulary labels; otherwise at least two.
    fn tokenize(&self, label: &str) -> Result<usize> {
        if label.is_empty() {
            return Err(BridgeError::Backend {
                id: "tokenize".into(),
                message: "empty label".into(),
                retryable: false,
            });
        }
        if self.in_vocab(label) {
            Ok(1)
        } else {
            Ok(label.split_whitespace().count().max(2))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::score;

    fn skewed() -> Distribution {
        Distribution::from_weights([("paris", 0.5), ("london", 0.3), ("rome", 0.2)]).unwrap()
    }

    fn top(m: &MockScorer, text: &str) -> Vec<(String, f64)> {
        score(&ScoreRequest::new("q", text, 0, 3), m).unwrap().predictions
    }

    #[test]
    fn zero_shift_ignores_subject() {
        let m = MockScorer::new(MockConfig::new(skewed(), 0.0, ["berlin"], 3));
        let a = top(&m, "Obama was born in [MASK] .");
        let b = top(&m, "Steve Jobs was born in [MASK] .");
        assert_eq!(a, b);
        let po = score(&ScoreRequest::new("p", "[MASK] was born in [MASK] .", 1, 3), &m).unwrap();
        assert_eq!(po.predictions, a);
        assert_eq!(a[0].0, "paris");
        assert!((a[0].1 - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_shift_varies_with_subject() {
        let m = MockScorer::new(MockConfig::uniform(["a", "b", "c", "d", "e", "f"], 1.0, 3));
        let tops: BTreeSet<String> = ["Alice", "Bob", "Carol", "Dan", "Eve", "Frank", "Grace"]
            .iter()
            .map(|s| top(&m, &format!("{s} was born in [MASK] ."))[0].0.clone())
            .collect();
        assert!(tops.len() > 1, "pinned fixture should vary: {tops:?}");
    }

    #[test]
    fn deterministic() {
        let m = MockScorer::new(MockConfig::new(skewed(), 0.4, ["x"], 11));
        let m2 = MockScorer::new(m.config().clone());
        assert_eq!(top(&m, "Z [MASK]"), top(&m2, "Z [MASK]"));
    }

    #[test]
    fn context_recall_puts_context_labels_first() {
        let mut cfg = MockConfig::new(skewed(), 0.0, [], 0);
        cfg.context_recall = true;
        let m = MockScorer::new(cfg);
        let p = top(&m, "He moved to Rome, then London. [SEP] He was born in [MASK] .");
        assert_eq!(p[0].0, "rome");
        assert_eq!(p[1].0, "london");
        assert_eq!(top(&m, "He was born in [MASK] .")[0].0, "paris");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = MockConfig::new(skewed(), 0.0, [], 0);
        cfg.subject_shift = 1.5;
        assert!(MockScorer::try_new(cfg.clone()).is_err());
        cfg.subject_shift = 0.0;
        cfg.bias.insert("extra".into(), 0.5);
        assert!(MockScorer::try_new(cfg).is_err());
    }

    #[test]
    fn out_of_range_mask_is_permanent() {
        let m = MockScorer::new(MockConfig::new(skewed(), 0.0, [], 0));
        let req = ScoreRequest::new("q", "[MASK]", 3, 1);
        match m.predict(&req) {
            Err(BridgeError::Backend { retryable, .. }) => assert!(!retryable),
            other => panic!("unexpected {other:?}"),
        }
    }
}
