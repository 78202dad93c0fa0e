//! Loading and validation of fact triples, prompt catalogs and contexts.
//!
//! All inputs are UTF-8, tab-separated, one record per line. Blank lines are
//! ignored; anything else that does not parse is rejected with its line
//! number.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::{BridgeError, TokenCounter};
use crate::MASK;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: triple ({subject_id}, {relation_id}, {object_id}) repeated with different labels")]
    LabelConflict {
        path: String,
        line: usize,
        subject_id: String,
        relation_id: String,
        object_id: String,
    },
    #[error("prompt for relation {relation_id}: {reason}")]
    InvalidTemplate { relation_id: String, reason: String },
    #[error("{path}:{line}: duplicate prompt for relation {relation_id}")]
    DuplicatePrompt {
        path: String,
        line: usize,
        relation_id: String,
    },
    #[error("{path}:{line}: duplicate context for ({subject_id}, {relation_id})")]
    DuplicateContext {
        path: String,
        line: usize,
        subject_id: String,
        relation_id: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("single-token filter: {0}")]
    Vocabulary(#[from] BridgeError),
}

/// One (subject, relation, object) knowledge triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub subject_id: String,
    pub subject_label: String,
    pub relation_id: String,
    pub object_id: String,
    pub object_label: String,
}

impl Fact {
    pub fn new(
        subject_id: impl Into<String>,
        subject_label: impl Into<String>,
        relation_id: impl Into<String>,
        object_id: impl Into<String>,
        object_label: impl Into<String>,
    ) -> Self {
        Fact {
            subject_id: subject_id.into(),
            subject_label: subject_label.into(),
            relation_id: relation_id.into(),
            object_id: object_id.into(),
            object_label: object_label.into(),
        }
    }

    pub fn key(&self) -> FactKey {
        FactKey {
            subject_id: self.subject_id.clone(),
            relation_id: self.relation_id.clone(),
            object_id: self.object_id.clone(),
        }
    }

    pub fn query_key(&self) -> QueryKey {
        QueryKey {
            subject_id: self.subject_id.clone(),
            relation_id: self.relation_id.clone(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        let fields = [
            ("subject_id", &self.subject_id),
            ("subject_label", &self.subject_label),
            ("relation_id", &self.relation_id),
            ("object_id", &self.object_id),
            ("object_label", &self.object_label),
        ];
        for (name, value) in fields {
            if value.trim().is_empty() {
                return Err(format!("empty {name}"));
            }
        }
        if self.object_label.contains(MASK) {
            return Err("object_label contains the mask sentinel".into());
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.subject_id, self.subject_label, self.relation_id, self.object_id, self.object_label
        )
    }
}

/// Identity of a fact: the full triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactKey {
    pub subject_id: String,
    pub relation_id: String,
    pub object_id: String,
}

impl fmt::Display for FactKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.subject_id, self.relation_id, self.object_id)
    }
}

/// (subject, relation) pair used to key retrieved contexts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryKey {
    pub subject_id: String,
    pub relation_id: String,
}

/// All facts of one relation, sorted by subject id then object id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactSet {
    relation_id: String,
    facts: Vec<Fact>,
}

impl FactSet {
    /// Builds a set, sorting the facts. Panics if a fact belongs to another
    /// relation.
    pub fn new(relation_id: impl Into<String>, mut facts: Vec<Fact>) -> Self {
        let relation_id = relation_id.into();
        assert!(
            facts.iter().all(|f| f.relation_id == relation_id),
            "fact from a different relation in FactSet {relation_id}"
        );
        facts.sort_by(|a, b| {
            (&a.subject_id, &a.object_id).cmp(&(&b.subject_id, &b.object_id))
        });
        FactSet { relation_id, facts }
    }

    pub fn relation_id(&self) -> &str {
        &self.relation_id
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Fact> {
        self.facts.iter()
    }

    pub(crate) fn with_facts(&self, facts: Vec<Fact>) -> FactSet {
        FactSet::new(self.relation_id.clone(), facts)
    }
}

impl<'a> IntoIterator for &'a FactSet {
    type Item = &'a Fact;
    type IntoIter = std::slice::Iter<'a, Fact>;
    fn into_iter(self) -> Self::IntoIter {
        self.facts.iter()
    }
}

/// Result of parsing a facts file.
#[derive(Debug, Clone)]
pub struct FactsLoad {
    pub sets: Vec<FactSet>,
    pub duplicates_dropped: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>, CorpusError> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_err(path, e))
}

/// Loads a facts file and groups it by relation.
pub fn load_facts(path: impl AsRef<Path>) -> Result<Vec<FactSet>, CorpusError> {
    let path = path.as_ref();
    let load = parse_facts(open(path)?, &path.display().to_string())?;
    if load.duplicates_dropped > 0 {
        log::info!(
            "{}: dropped {} duplicate triples",
            path.display(),
            load.duplicates_dropped
        );
    }
    Ok(load.sets)
}

/// Parses facts from any reader; `origin` names the source in errors.
pub fn parse_facts(reader: impl BufRead, origin: &str) -> Result<FactsLoad, CorpusError> {
    let mut by_key: HashMap<(String, String, String), Fact> = HashMap::new();
    let mut duplicates = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: origin.to_string(),
            source: e,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            path: origin.to_string(),
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 fields, found {}", fields.len())));
        }
        let fact = Fact::new(fields[0], fields[1], fields[2], fields[3], fields[4]);
        fact.validate().map_err(malformed)?;
        let key = (
            fact.subject_id.clone(),
            fact.relation_id.clone(),
            fact.object_id.clone(),
        );
        match by_key.get(&key) {
            Some(existing) if *existing == fact => duplicates += 1,
            Some(_) => {
                return Err(CorpusError::LabelConflict {
                    path: origin.to_string(),
                    line: lineno,
                    subject_id: key.0,
                    relation_id: key.1,
                    object_id: key.2,
                })
            }
            None => {
                by_key.insert(key, fact);
            }
        }
    }
    let mut grouped: BTreeMap<String, Vec<Fact>> = BTreeMap::new();
    for fact in by_key.into_values() {
        grouped.entry(fact.relation_id.clone()).or_default().push(fact);
    }
    let sets = grouped
        .into_iter()
        .map(|(rel, facts)| FactSet::new(rel, facts))
        .collect();
    Ok(FactsLoad {
        sets,
        duplicates_dropped: duplicates,
    })
}

/// Writes fact sets in the facts file format, relation by relation.
pub fn write_facts<'a>(
    mut out: impl Write,
    sets: impl IntoIterator<Item = &'a FactSet>,
) -> std::io::Result<()> {
    for set in sets {
        for fact in set {
            writeln!(out, "{}", fact.to_line())?;
        }
    }
    Ok(())
}

/// Which catalog a prompt came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Manual,
    Mined,
    Auto,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::Manual => "manual",
            PromptSource::Mined => "mined",
            PromptSource::Auto => "auto",
        }
    }
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "manual" => Ok(PromptSource::Manual),
            "mined" => Ok(PromptSource::Mined),
            "auto" => Ok(PromptSource::Auto),
            other => Err(format!("unknown prompt source `{other}`")),
        }
    }
}

pub const SUBJECT_SLOT: &str = "[X]";
pub const OBJECT_SLOT: &str = "[Y]";

/// A cloze pattern with exactly one `[X]` and one `[Y]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    relation_id: String,
    pattern: String,
    source: PromptSource,
}

impl PromptTemplate {
    pub fn new(
        relation_id: impl Into<String>,
        pattern: impl Into<String>,
        source: PromptSource,
    ) -> Result<Self, CorpusError> {
        let relation_id = relation_id.into();
        let pattern = pattern.into();
        let invalid = |reason: String| CorpusError::InvalidTemplate {
            relation_id: relation_id.clone(),
            reason,
        };
        for slot in [SUBJECT_SLOT, OBJECT_SLOT] {
            match pattern.matches(slot).count() {
                1 => {}
                0 => return Err(invalid(format!("missing {slot} in `{pattern}`"))),
                n => return Err(invalid(format!("{slot} appears {n} times in `{pattern}`"))),
            }
        }
        if pattern.contains(MASK) {
            return Err(invalid("pattern already contains a mask sentinel".into()));
        }
        Ok(PromptTemplate {
            relation_id,
            pattern,
            source,
        })
    }

    pub fn relation_id(&self) -> &str {
        &self.relation_id
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn source(&self) -> PromptSource {
        self.source
    }

    /// True when the subject slot comes before the object slot.
    pub fn subject_first(&self) -> bool {
        self.pattern.find(SUBJECT_SLOT) < self.pattern.find(OBJECT_SLOT)
    }
}

/// Loads a `relation_id \t pattern` catalog.
pub fn load_prompts(
    path: impl AsRef<Path>,
    source: PromptSource,
) -> Result<BTreeMap<String, PromptTemplate>, CorpusError> {
    let path = path.as_ref();
    parse_prompts(open(path)?, &path.display().to_string(), source)
}

pub fn parse_prompts(
    reader: impl BufRead,
    origin: &str,
    source: PromptSource,
) -> Result<BTreeMap<String, PromptTemplate>, CorpusError> {
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: origin.to_string(),
            source: e,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((relation, pattern)) = line.split_once('\t') else {
            return Err(CorpusError::Malformed {
                path: origin.to_string(),
                line: lineno,
                reason: "expected `relation_id \\t pattern`".into(),
            });
        };
        let template = PromptTemplate::new(relation.trim(), pattern.trim(), source)?;
        if out.contains_key(template.relation_id()) {
            return Err(CorpusError::DuplicatePrompt {
                path: origin.to_string(),
                line: lineno,
                relation_id: template.relation_id().to_string(),
            });
        }
        out.insert(template.relation_id().to_string(), template);
    }
    Ok(out)
}

/// A retrieved paragraph for one (subject, relation) query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub key: QueryKey,
    pub text: String,
}

pub fn load_contexts(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<QueryKey, ContextRecord>, CorpusError> {
    let path = path.as_ref();
    parse_contexts(open(path)?, &path.display().to_string())
}

pub fn parse_contexts(
    reader: impl BufRead,
    origin: &str,
) -> Result<BTreeMap<QueryKey, ContextRecord>, CorpusError> {
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: origin.to_string(),
            source: e,
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| CorpusError::Malformed {
            path: origin.to_string(),
            line: lineno,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(
                "expected `subject_id \\t relation_id \\t context_text` (no tabs in text)",
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed("empty subject_id or relation_id"));
        }
        if fields[2].trim().is_empty() {
            return Err(malformed("empty context text"));
        }
        let key = QueryKey {
            subject_id: fields[0].to_string(),
            relation_id: fields[1].to_string(),
        };
        if out.contains_key(&key) {
            return Err(CorpusError::DuplicateContext {
                path: origin.to_string(),
                line: lineno,
                subject_id: key.subject_id,
                relation_id: key.relation_id,
            });
        }
        out.insert(
            key.clone(),
            ContextRecord {
                key,
                text: fields[2].to_string(),
            },
        );
    }
    Ok(out)
}

/// Keeps the facts whose object label is a single token for the scorer.
///
/// Each distinct label is asked once; any scorer failure aborts the filter.
pub fn filter_single_token(
    factset: &FactSet,
    vocab: &dyn TokenCounter,
) -> Result<FactSet, CorpusError> {
    let mut verdicts: HashMap<&str, bool> = HashMap::new();
    let mut kept = Vec::with_capacity(factset.len());
    for fact in factset {
        let single = match verdicts.get(fact.object_label.as_str()) {
            Some(v) => *v,
            None => {
                let v = vocab.count_tokens(&fact.object_label)? == 1;
                verdicts.insert(&fact.object_label, v);
                v
            }
        };
        if single {
            kept.push(fact.clone());
        }
    }
    Ok(factset.with_facts(kept))
}
