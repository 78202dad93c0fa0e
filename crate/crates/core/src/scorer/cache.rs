use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{Backend, BridgeError, Result, ScoreRequest};
use crate::hashing::content_id;

type Prediction = Result<Vec<(String, f64)>>;

pub const CACHE_FILE: &str = "predictions.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Entry {
    Predictions(Vec<(String, f64)>),
    Tokens(usize),
    Model(String),
}

/// Key of a fill-mask result. The query id is not part of it: identical
/// probes share one entry.
pub fn cache_key(model_key: &str, request: &ScoreRequest) -> String {
    let candidates = request
        .candidates
        .as_ref()
        .map(|c| c.join("\u{1f}"))
        .unwrap_or_else(|| "\u{0}".into());
    content_id(&[
        "score",
        model_key,
        &request.text,
        &request.mask_index.to_string(),
        &request.top_k.to_string(),
        &candidates,
    ])
}

fn token_key(model_key: &str, label: &str) -> String {
    content_id(&["tokenize", model_key, label])
}

fn model_key_entry(model_key: &str) -> String {
    content_id(&["model", model_key])
}

/// Append-only on-disk cache of backend results, one `key<TAB>json` line
/// per entry.
pub struct ScoreCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Entry>>,
    writer: Mutex<BufWriter<File>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ScoreCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let io = |e: std::io::Error| BridgeError::CacheIo(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path).map_err(io)?);
            let mut offset = 0u64;
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io)?;
                if n == 0 {
                    break;
                }
                let corrupt = |reason: String| BridgeError::CacheCorrupt { offset, reason };
                let body = line
                    .strip_suffix('\n')
                    .ok_or_else(|| corrupt("truncated final line".into()))?;
                let (key, payload) = body
                    .split_once('\t')
                    .ok_or_else(|| corrupt("missing tab separator".into()))?;
                if key.len() != 32 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(corrupt(format!("bad key `{key}`")));
                }
                let entry: Entry = serde_json::from_str(payload).map_err(|e| corrupt(e.to_string()))?;
                entries.insert(key.to_string(), entry);
                offset += n as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(ScoreCache {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(BufWriter::new(file)),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn get(&self, key: &str) -> Option<Entry> {
        let found = self.entries.read().expect("cache lock").get(key).cloned();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::SeqCst);
        found
    }

    fn put(&self, key: String, entry: Entry) -> Result<()> {
        let mut entries = self.entries.write().expect("cache lock");
        if entries.contains_key(&key) {
            return Ok(());
        }
        let payload = serde_json::to_string(&entry).expect("entry serializes");
        let mut w = self.writer.lock().expect("cache writer lock");
        writeln!(w, "{key}\t{payload}")
            .and_then(|_| w.flush())
            .map_err(|e| BridgeError::CacheIo(format!("{}: {e}", self.path.display())))?;
        entries.insert(key, entry);
        Ok(())
    }
}

/// A backend that answers from a [`ScoreCache`] and only forwards misses.
///
/// `model_key` names the underlying scorer (a model id or the command that
/// starts it) so results of different scorers never mix.
pub struct CachedBackend<'a> {
    inner: &'a dyn Backend,
    cache: &'a ScoreCache,
    model_key: String,
}

impl<'a> CachedBackend<'a> {
    pub fn new(inner: &'a dyn Backend, cache: &'a ScoreCache, model_key: impl Into<String>) -> Self {
        CachedBackend {
            inner,
            cache,
            model_key: model_key.into(),
        }
    }
}

impl Backend for CachedBackend<'_> {
    fn model_id(&self) -> Result<String> {
        let key = model_key_entry(&self.model_key);
        if let Some(Entry::Model(m)) = self.cache.get(&key) {
            return Ok(m);
        }
        let m = self.inner.model_id()?;
        self.cache.put(key, Entry::Model(m.clone()))?;
        Ok(m)
    }

    fn predict(&self, request: &ScoreRequest) -> Result<Vec<(String, f64)>> {
        let key = cache_key(&self.model_key, request);
        if let Some(Entry::Predictions(p)) = self.cache.get(&key) {
            return Ok(p);
        }
        let p = self.inner.predict(request)?;
        self.cache.put(key, Entry::Predictions(p.clone()))?;
        Ok(p)
    }

    fn tokenize(&self, label: &str) -> Result<usize> {
        let key = token_key(&self.model_key, label);
        if let Some(Entry::Tokens(n)) = self.cache.get(&key) {
            return Ok(n);
        }
        let n = self.inner.tokenize(label)?;
        self.cache.put(key, Entry::Tokens(n))?;
        Ok(n)
    }

    fn predict_many(&self, requests: &[ScoreRequest], max_in_flight: usize) -> Vec<Result<Vec<(String, f64)>>> {
        let keys: Vec<String> = requests.iter().map(|r| cache_key(&self.model_key, r)).collect();
        let mut out: Vec<Option<Prediction>> = keys
            .iter()
            .map(|k| match self.cache.get(k) {
                Some(Entry::Predictions(p)) => Some(Ok(p)),
                _ => None,
            })
            .collect();
        let missing: Vec<usize> = (0..requests.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<ScoreRequest> = missing.iter().map(|&i| requests[i].clone()).collect();
            for (&i, res) in missing.iter().zip(self.inner.predict_many(&batch, max_in_flight)) {
                let res = res.and_then(|p| {
                    self.cache.put(keys[i].clone(), Entry::Predictions(p.clone()))?;
                    Ok(p)
                });
                out[i] = Some(res);
            }
        }
        out.into_iter().map(|r| r.expect("resolved")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::Distribution;
    use crate::scorer::{score_batch, CallCounter, MockConfig, MockScorer};

    fn mock() -> CallCounter<MockScorer> {
        let bias = Distribution::from_weights([("a", 0.6), ("b", 0.4)]).unwrap();
        CallCounter::new(MockScorer::new(MockConfig::new(bias, 0.5, ["c"], 1)))
    }

    fn requests() -> Vec<ScoreRequest> {
        (0..20)
            .map(|i| ScoreRequest::new(format!("q{i}"), format!("s{i} is in [MASK] ."), 0, 2))
            .collect()
    }

    #[test]
    fn warm_cache_makes_no_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cold = {
            let cache = ScoreCache::open(dir.path()).unwrap();
            let m = mock();
            let b = CachedBackend::new(&m, &cache, "mock");
            let out = score_batch(&requests(), &b, 4).unwrap();
            b.tokenize("a").unwrap();
            assert_eq!(m.prediction_calls(), 20);
            out.into_iter().map(|r| r.unwrap().predictions).collect::<Vec<_>>()
        };
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 22);
        let m = mock();
        let b = CachedBackend::new(&m, &cache, "mock");
        let warm: Vec<_> = score_batch(&requests(), &b, 4)
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap().predictions)
            .collect();
        assert_eq!(b.tokenize("a").unwrap(), 1);
        assert_eq!(warm, cold);
        assert_eq!((m.prediction_calls(), m.tokenize_calls()), (0, 0));
        assert_eq!(cache.misses(), 0);
    }

    #[test]
    fn key_depends_on_model_and_request_not_query_id() {
        let r = ScoreRequest::new("q1", "x [MASK]", 0, 5);
        let mut r2 = r.clone();
        r2.id = "q2".into();
        assert_eq!(cache_key("m", &r), cache_key("m", &r2));
        assert_ne!(cache_key("m", &r), cache_key("n", &r));
        assert_ne!(cache_key("m", &r), cache_key("m", &ScoreRequest::new("q1", "x [MASK]", 0, 4)));
        assert_ne!(
            cache_key("m", &r),
            cache_key("m", &r.clone().with_candidates(vec!["a".into()]))
        );
    }

    #[test]
    fn corruption_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ScoreCache::open(dir.path()).unwrap();
            let m = mock();
            CachedBackend::new(&m, &cache, "mock").tokenize("a").unwrap();
        }
        let path = dir.path().join(CACHE_FILE);
        let good = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("{good}garbage line\n")).unwrap();
        match ScoreCache::open(dir.path()) {
            Err(BridgeError::CacheCorrupt { offset, .. }) => assert_eq!(offset, good.len() as u64),
            other => panic!("expected corruption, got {:?}", other.map(|c| c.len())),
        }
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(ScoreCache::open(dir.path()), Err(BridgeError::CacheCorrupt { offset: 0, .. })));
    }
}
