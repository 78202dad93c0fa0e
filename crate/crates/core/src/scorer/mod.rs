//! Scoring bridge to masked-LM backends.
//!
//! A [`Backend`] answers fill-mask and tokenization requests. Two
//! implementations ship here: [`SubprocessBackend`], which speaks the
//! line-delimited JSON protocol over a child process's stdio, and
//! [`MockScorer`], a deterministic in-process double. [`serve_stdio`] runs
//! any backend as a protocol server.

mod cache;
mod mock;
pub mod protocol;
mod subprocess;

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, CachedBackend, ScoreCache, CACHE_FILE};
pub use mock::{MockConfig, MockScorer};
pub use protocol::{Handshake, Request, Response};
pub use subprocess::{SubprocessBackend, SubprocessConfig};

use crate::{MASK, SEP};

/// Retries granted to a request failing with a retryable error.
pub const RETRY_LIMIT: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("protocol error ({reason}) in payload: {raw}")]
    Protocol { raw: String, reason: String },
    #[error("backend timed out on request {0}")]
    Timeout(String),
    #[error("backend error on {id}: {message}")]
    Backend {
        id: String,
        message: String,
        retryable: bool,
    },
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid request {id}: {reason}")]
    InvalidRequest { id: String, reason: String },
    #[error("duplicate request id {0} in batch")]
    DuplicateId(String),
    #[error("cache corrupt at byte offset {offset}: {reason}")]
    CacheCorrupt { offset: u64, reason: String },
    #[error("cache i/o: {0}")]
    CacheIo(String),
}

impl BridgeError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BridgeError::Timeout(_) => true,
            BridgeError::Backend { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

type Result<T> = std::result::Result<T, BridgeError>;

/// One fill-mask request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub text: String,
    pub mask_index: usize,
    pub top_k: usize,
    pub candidates: Option<Vec<String>>,
}

impl ScoreRequest {
    pub fn new(id: impl Into<String>, text: impl Into<String>, mask_index: usize, top_k: usize) -> Self {
        ScoreRequest {
            id: id.into(),
            text: text.into(),
            mask_index,
            top_k,
            candidates: None,
        }
    }

    pub fn for_query(query: &crate::Query, top_k: usize) -> Self {
        Self::new(&query.query_id, &query.text, query.target_mask_index, top_k)
    }

    pub fn with_candidates(mut self, candidates: Vec<String>) -> Self {
        self.candidates = Some(candidates);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| BridgeError::InvalidRequest {
            id: self.id.clone(),
            reason,
        };
        if self.top_k == 0 {
            return Err(invalid("top_k must be at least 1".into()));
        }
        let masks = self.text.matches(MASK).count();
        if self.mask_index >= masks {
            return Err(invalid(format!(
                "mask_index {} out of range for {masks} masks",
                self.mask_index
            )));
        }
        Ok(())
    }
}

/// Ranked top-k predictions for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub model_id: String,
    pub predictions: Vec<(String, f64)>,
    pub created_at: u64,
}

impl PredictionRecord {
    /// Checks the ranking invariants against the originating request.
    pub fn check(&self, request: &ScoreRequest) -> Result<()> {
        let bad = |reason: String| BridgeError::Protocol {
            raw: serde_json::to_string(&self.predictions).unwrap_or_default(),
            reason,
        };
        if self.predictions.len() > request.top_k {
            return Err(bad(format!(
                "{} predictions for top_k {}",
                self.predictions.len(),
                request.top_k
            )));
        }
        let mut seen = HashSet::new();
        let mut prev = f64::INFINITY;
        for (label, lp) in &self.predictions {
            if !lp.is_finite() {
                return Err(bad(format!("non-finite log-probability for `{label}`")));
            }
            if *lp > prev {
                return Err(bad("log-probabilities increase".into()));
            }
            prev = *lp;
            if !seen.insert(label.as_str()) {
                return Err(bad(format!("label `{label}` repeated")));
            }
        }
        if let Some(c) = &request.candidates {
            let allowed: HashSet<&str> = c.iter().map(String::as_str).collect();
            if let Some((l, _)) = self.predictions.iter().find(|(l, _)| !allowed.contains(l.as_str())) {
                return Err(bad(format!("`{l}` is not among the candidates")));
            }
        }
        Ok(())
    }
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Tokenization capability used by the single-token filter.
pub trait TokenCounter {
    fn count_tokens(&self, label: &str) -> Result<usize>;
}

/// A masked-LM scoring backend.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> Result<String>;

    /// Ranked (label, log-probability) pairs for one request.
    fn predict(&self, request: &ScoreRequest) -> Result<Vec<(String, f64)>>;

    fn tokenize(&self, label: &str) -> Result<usize>;

    /// Scores many requests with at most `max_in_flight` outstanding.
    /// Results come back in input order.
    fn predict_many(&self, requests: &[ScoreRequest], max_in_flight: usize) -> Vec<Result<Vec<(String, f64)>>> {
        parallel_map(requests, max_in_flight, |r| self.predict(r))
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn model_id(&self) -> Result<String> {
        (**self).model_id()
    }

    fn predict(&self, request: &ScoreRequest) -> Result<Vec<(String, f64)>> {
        (**self).predict(request)
    }

    fn tokenize(&self, label: &str) -> Result<usize> {
        (**self).tokenize(label)
    }

    fn predict_many(&self, requests: &[ScoreRequest], max_in_flight: usize) -> Vec<Result<Vec<(String, f64)>>> {
        (**self).predict_many(requests, max_in_flight)
    }
}

impl<B: Backend + ?Sized> TokenCounter for B {
    fn count_tokens(&self, label: &str) -> Result<usize> {
        self.tokenize(label)
    }
}

/// Runs `f` over `items` on up to `workers` threads, preserving order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

fn finish(request: &ScoreRequest, model_id: String, predictions: Vec<(String, f64)>) -> Result<PredictionRecord> {
    let record = PredictionRecord {
        query_id: request.id.clone(),
        model_id,
        predictions,
        created_at: now_millis(),
    };
    record.check(request)?;
    Ok(record)
}

/// Scores one request, retrying retryable failures.
pub fn score(request: &ScoreRequest, backend: &dyn Backend) -> Result<PredictionRecord> {
    request.validate()?;
    let mut attempt = 0;
    loop {
        match backend.predict(request) {
            Ok(preds) => return finish(request, backend.model_id()?, preds),
            Err(e) if e.is_retryable() && attempt < RETRY_LIMIT => {
                attempt += 1;
                log::warn!("retrying {} after: {e}", request.id);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Scores a batch. Duplicate ids are rejected before anything is sent;
/// per-request failures are reported in place and do not stop the batch.
pub fn score_batch(
    requests: &[ScoreRequest],
    backend: &dyn Backend,
    max_in_flight: usize,
) -> Result<Vec<Result<PredictionRecord>>> {
    let mut ids = HashSet::new();
    for r in requests {
        if !ids.insert(r.id.as_str()) {
            return Err(BridgeError::DuplicateId(r.id.clone()));
        }
    }
    let model_id = if requests.is_empty() {
        String::new()
    } else {
        backend.model_id()?
    };
    let mut results: Vec<Option<Result<PredictionRecord>>> = vec![None; requests.len()];
    let mut pending: Vec<usize> = Vec::new();
    for (i, r) in requests.iter().enumerate() {
        match r.validate() {
            Ok(()) => pending.push(i),
            Err(e) => results[i] = Some(Err(e)),
        }
    }
    let mut attempt = 0;
    while !pending.is_empty() {
        let batch: Vec<ScoreRequest> = pending.iter().map(|&i| requests[i].clone()).collect();
        let out = backend.predict_many(&batch, max_in_flight);
        let mut retry = Vec::new();
        for (&i, res) in pending.iter().zip(out) {
            match res {
                Ok(preds) => results[i] = Some(finish(&requests[i], model_id.clone(), preds)),
                Err(e) if e.is_retryable() && attempt < RETRY_LIMIT => retry.push(i),
                Err(e) => results[i] = Some(Err(e)),
            }
        }
        pending = retry;
        attempt += 1;
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every request resolved"))
        .collect())
}

pub fn is_single_token(label: &str, backend: &dyn Backend) -> Result<bool> {
    Ok(backend.tokenize(label)? == 1)
}

/// Wraps a backend and counts the requests it receives.
pub struct CallCounter<B> {
    inner: B,
    predictions: AtomicUsize,
    tokenizations: AtomicUsize,
}

impl<B: Backend> CallCounter<B> {
    pub fn new(inner: B) -> Self {
        CallCounter {
            inner,
            predictions: AtomicUsize::new(0),
            tokenizations: AtomicUsize::new(0),
        }
    }

    pub fn prediction_calls(&self) -> usize {
        self.predictions.load(Ordering::SeqCst)
    }

    pub fn tokenize_calls(&self) -> usize {
        self.tokenizations.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CallCounter<B> {
    fn model_id(&self) -> Result<String> {
        self.inner.model_id()
    }

    fn predict(&self, request: &ScoreRequest) -> Result<Vec<(String, f64)>> {
        self.predictions.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(request)
    }

    fn tokenize(&self, label: &str) -> Result<usize> {
        self.tokenizations.fetch_add(1, Ordering::SeqCst);
        self.inner.tokenize(label)
    }

    fn predict_many(&self, requests: &[ScoreRequest], max_in_flight: usize) -> Vec<Result<Vec<(String, f64)>>> {
        self.predictions.fetch_add(requests.len(), Ordering::SeqCst);
        self.inner.predict_many(requests, max_in_flight)
    }
}

/// Serves `backend` over the wire protocol: a handshake line, then one
/// response per request line, in order.
pub fn serve_stdio(backend: &dyn Backend, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    let model_id = backend
        .model_id()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let handshake = Handshake {
        op: "ready".into(),
        model_id: model_id.clone(),
        mask_sentinel: MASK.into(),
        separator: SEP.into(),
    };
    writeln!(output, "{}", serde_json::to_string(&handshake).expect("handshake serializes"))?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match Request::parse(&line) {
            Err((id, reason)) => Response::error(id.unwrap_or_default(), reason, false),
            Ok(Request::Score(m)) => {
                let req = ScoreRequest {
                    id: m.id.clone(),
                    text: m.text,
                    mask_index: m.mask_index,
                    top_k: m.top_k,
                    candidates: m.candidates,
                };
                match req.validate().and_then(|_| backend.predict(&req)) {
                    Ok(predictions) => Response {
                        id: m.id,
                        model_id: Some(model_id.clone()),
                        predictions: Some(predictions),
                        ..Default::default()
                    },
                    Err(e) => Response::error(m.id, e.to_string(), e.is_retryable()),
                }
            }
            Ok(Request::Tokenize(m)) => match backend.tokenize(&m.label) {
                Ok(n) => Response {
                    id: m.id,
                    n_tokens: Some(n),
                    ..Default::default()
                },
                Err(e) => Response::error(m.id, e.to_string(), e.is_retryable()),
            },
        };
        writeln!(output, "{}", response.to_line())?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::Distribution;
    use std::collections::BTreeMap;

    fn table_mock() -> MockScorer {
        let mut table = BTreeMap::new();
        table.insert(
            "[MASK] was born in [MASK].".to_string(),
            vec![("paris".to_string(), -0.1), ("london".to_string(), -2.3)],
        );
        MockScorer::new(MockConfig {
            fixed: table,
            ..MockConfig::uniform(["paris", "london", "rome"], 0.0, 1)
        })
    }

    #[test]
    fn fixed_table_pass_through_and_restriction() {
        let m = table_mock();
        let req = ScoreRequest::new("q", "[MASK] was born in [MASK].", 1, 5);
        let rec = score(&req, &m).unwrap();
        assert_eq!(rec.predictions, vec![("paris".to_string(), -0.1), ("london".to_string(), -2.3)]);
        let rec = score(&req.clone().with_candidates(vec!["london".into()]), &m).unwrap();
        assert_eq!(rec.predictions, vec![("london".to_string(), -2.3)]);
    }

    #[test]
    fn request_validation() {
        let m = table_mock();
        assert!(matches!(
            score(&ScoreRequest::new("q", "no mask", 0, 5), &m),
            Err(BridgeError::InvalidRequest { .. })
        ));
        assert!(score(&ScoreRequest::new("q", "[MASK]", 0, 0), &m).is_err());
        assert!(score(&ScoreRequest::new("q", "[MASK]", 1, 3), &m).is_err());
    }

    #[test]
    fn batch_rejects_duplicates_and_keeps_order() {
        let m = CallCounter::new(table_mock());
        let reqs = vec![
            ScoreRequest::new("a", "x [MASK]", 0, 2),
            ScoreRequest::new("a", "y [MASK]", 0, 2),
        ];
        assert_eq!(score_batch(&reqs, &m, 4), Err(BridgeError::DuplicateId("a".into())));
        assert_eq!(m.prediction_calls(), 0);

        let reqs: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|id| ScoreRequest::new(*id, format!("{id} [MASK]"), 0, 2))
            .collect();
        let out = score_batch(&reqs, &m, 1).unwrap();
        let ids: Vec<_> = out.iter().map(|r| r.as_ref().unwrap().query_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn batch_reports_per_request_errors() {
        let m = table_mock();
        let reqs = vec![
            ScoreRequest::new("ok", "a [MASK]", 0, 2),
            ScoreRequest::new("bad", "no mask here", 0, 2),
            ScoreRequest::new("ok2", "b [MASK]", 0, 2),
        ];
        let out = score_batch(&reqs, &m, 2).unwrap();
        assert!(out[0].is_ok() && out[2].is_ok());
        assert!(out[1].is_err());
    }

    #[test]
    fn batch_invariant_to_parallelism() {
        let bias = Distribution::from_weights([("a", 3.0), ("b", 2.0), ("c", 1.0)]).unwrap();
        let m = MockScorer::new(MockConfig::new(bias, 0.7, ["a", "b", "c", "d"], 9));
        let reqs: Vec<_> = (0..1000)
            .map(|i| ScoreRequest::new(format!("q{i}"), format!("subject {i} lives in [MASK] ."), 0, 3))
            .collect();
        let strip = |v: Vec<Result<PredictionRecord>>| -> Vec<(String, Vec<(String, f64)>)> {
            v.into_iter().map(|r| r.unwrap()).map(|r| (r.query_id, r.predictions)).collect()
        };
        let serial = strip(score_batch(&reqs, &m, 1).unwrap());
        let parallel = strip(score_batch(&reqs, &m, 32).unwrap());
        assert_eq!(serial, parallel);
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl Backend for Flaky {
        fn model_id(&self) -> Result<String> {
            Ok("flaky".into())
        }
        fn predict(&self, r: &ScoreRequest) -> Result<Vec<(String, f64)>> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(BridgeError::Timeout(r.id.clone()))
            } else {
                self.failures.store(0, Ordering::SeqCst);
                Ok(vec![("x".into(), 0.0)])
            }
        }
        fn tokenize(&self, _: &str) -> Result<usize> {
            Ok(1)
        }
    }

    #[test]
    fn retryable_errors_are_retried() {
        let f = Flaky { failures: AtomicUsize::new(2) };
        assert!(score(&ScoreRequest::new("q", "[MASK]", 0, 1), &f).is_ok());
        let f = Flaky { failures: AtomicUsize::new(5) };
        assert!(matches!(
            score(&ScoreRequest::new("q", "[MASK]", 0, 1), &f),
            Err(BridgeError::Timeout(_))
        ));
    }

    #[test]
    fn single_token_checks() {
        let m = MockScorer::new(MockConfig::uniform(["paris"], 0.0, 0));
        assert!(is_single_token("paris", &m).unwrap());
        assert!(!is_single_token("kuala lumpur", &m).unwrap());
    }

    #[test]
    fn stdio_server_round_trip() {
        let m = table_mock();
        let input = [
            r#"{"id":"q1","op":"score","text":"[MASK] was born in [MASK].","mask_index":1,"top_k":1,"candidates":null}"#,
            r#"{"id":"t1","op":"tokenize","label":"paris"}"#,
            r#"{"id":"q2","op":"score","text":"no mask","mask_index":0,"top_k":1,"candidates":null}"#,
            r#"{"id":"z","op":"unknown"}"#,
        ]
        .join("\n");
        let mut out = Vec::new();
        serve_stdio(&m, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 5);
        let hs: Handshake = serde_json::from_str(lines[0]).unwrap();
        assert_eq!((hs.op.as_str(), hs.mask_sentinel.as_str(), hs.separator.as_str()), ("ready", "[MASK]", "[SEP]"));
        let r1 = Response::parse(lines[1]).unwrap();
        assert_eq!(r1.predictions.unwrap(), vec![("paris".to_string(), -0.1)]);
        assert_eq!(Response::parse(lines[2]).unwrap().n_tokens, Some(1));
        let r3 = Response::parse(lines[3]).unwrap();
        assert_eq!((r3.id.as_str(), r3.retryable), ("q2", Some(false)));
        assert!(Response::parse(lines[4]).unwrap().error.unwrap().contains("unknown op"));
    }
}
