//! Probe rendering for the prompt, case and context paradigms.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{ContextRecord, Fact, FactKey, FactSet, PromptTemplate, OBJECT_SLOT, SUBJECT_SLOT};
use crate::hashing::content_id;
use crate::sampler::{draw_indices, seeded_rng};
use crate::{MASK, SEP};

/// Default number of illustrative cases per query.
pub const DEFAULT_CASE_COUNT: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ParadigmError {
    #[error("empty subject label")]
    EmptySubject,
    #[error("label `{0}` contains the mask sentinel")]
    MaskInLabel(String),
    #[error("context for {0} is empty")]
    EmptyContext(String),
    #[error("context for {0} already contains a mask sentinel")]
    MaskInContext(String),
    #[error("need {needed} cases but only {eligible} eligible facts")]
    NotEnoughCases { needed: usize, eligible: usize },
    #[error("answer `{0}` does not occur in the context")]
    AnswerAbsent(String),
    #[error("text has no mask sentinel")]
    NoMask,
    #[error("malformed query line: {0}")]
    MalformedLine(String),
}

type Result<T> = std::result::Result<T, ParadigmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Paradigm {
    Prompt,
    PromptOnly,
    Case,
    Context,
    ContextMasked,
    Reconstruction,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Prompt => "prompt",
            Paradigm::PromptOnly => "prompt_only",
            Paradigm::Case => "case",
            Paradigm::Context => "context",
            Paradigm::ContextMasked => "context_masked",
            Paradigm::Reconstruction => "reconstruction",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = ParadigmError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prompt" => Paradigm::Prompt,
            "prompt_only" => Paradigm::PromptOnly,
            "case" => Paradigm::Case,
            "context" => Paradigm::Context,
            "context_masked" => Paradigm::ContextMasked,
            "reconstruction" => Paradigm::Reconstruction,
            other => return Err(ParadigmError::MalformedLine(format!("unknown paradigm `{other}`"))),
        })
    }
}

/// A rendered probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub target_mask_index: usize,
    pub paradigm: Paradigm,
    pub fact_key: Option<FactKey>,
    pub gold_label: Option<String>,
}

impl Query {
    fn new(text: String, target_mask_index: usize, paradigm: Paradigm) -> Self {
        Query {
            query_id: query_id(&text, target_mask_index, paradigm),
            text,
            target_mask_index,
            paradigm,
            fact_key: None,
            gold_label: None,
        }
    }

    /// Attaches the fact this probe asks about.
    pub fn with_fact(mut self, fact: &Fact) -> Self {
        self.fact_key = Some(fact.key());
        self.gold_label = Some(fact.object_label.clone());
        self
    }

    pub fn mask_count(&self) -> usize {
        self.text.matches(MASK).count()
    }

    /// `query_id \t paradigm \t target_mask_index \t gold_label \t text`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.query_id,
            self.paradigm,
            self.target_mask_index,
            escape_field(self.gold_label.as_deref().unwrap_or("")),
            escape_field(&self.text)
        )
    }

    /// Parses a serialized query. The fact key is not part of the line.
    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() != 5 {
            return Err(ParadigmError::MalformedLine(line.to_string()));
        }
        let paradigm: Paradigm = fields[1].parse()?;
        let target_mask_index = fields[2]
            .parse()
            .map_err(|_| ParadigmError::MalformedLine(line.to_string()))?;
        let gold = unescape_field(fields[3]);
        Ok(Query {
            query_id: fields[0].to_string(),
            text: unescape_field(fields[4]),
            target_mask_index,
            paradigm,
            fact_key: None,
            gold_label: (!gold.is_empty()).then_some(gold),
        })
    }
}

/// Stable id of a probe: a hash of its text, target mask and paradigm.
pub fn query_id(text: &str, target_mask_index: usize, paradigm: Paradigm) -> String {
    content_id(&[text, &target_mask_index.to_string(), paradigm.as_str()])
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// What fills the object slot of a template.
#[derive(Debug, Clone, Copy)]
pub enum ObjectSlot<'a> {
    Mask,
    Literal(&'a str),
}

fn normalize_spaces(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render_with(template: &PromptTemplate, subject: &str, object: &str) -> String {
    let pattern = template.pattern();
    let xs = pattern.find(SUBJECT_SLOT).expect("validated template");
    let ys = pattern.find(OBJECT_SLOT).expect("validated template");
    let mut slots = [(xs, SUBJECT_SLOT.len(), subject), (ys, OBJECT_SLOT.len(), object)];
    slots.sort_by_key(|s| s.0);
    let mut text = String::with_capacity(pattern.len() + subject.len() + object.len());
    let mut last = 0;
    for (start, len, fill) in slots {
        text.push_str(&pattern[last..start]);
        text.push_str(fill);
        last = start + len;
    }
    text.push_str(&pattern[last..]);
    normalize_spaces(&text)
}

/// Fills `[X]` with the subject and `[Y]` with a mask or a literal object.
pub fn render_prompt(template: &PromptTemplate, subject_label: &str, object_slot: ObjectSlot<'_>) -> Result<String> {
    if subject_label.trim().is_empty() {
        return Err(ParadigmError::EmptySubject);
    }
    if subject_label.contains(MASK) {
        return Err(ParadigmError::MaskInLabel(subject_label.to_string()));
    }
    let object = match object_slot {
        ObjectSlot::Mask => MASK,
        ObjectSlot::Literal(l) => {
            if l.contains(MASK) {
                return Err(ParadigmError::MaskInLabel(l.to_string()));
            }
            l
        }
    };
    Ok(render_with(template, subject_label, object))
}

pub fn build_prompt_query(fact: &Fact, template: &PromptTemplate) -> Result<Query> {
    let text = render_prompt(template, &fact.subject_label, ObjectSlot::Mask)?;
    Ok(Query::new(text, 0, Paradigm::Prompt).with_fact(fact))
}

/// Masks both the subject and the object; the target is the object mask.
pub fn build_prompt_only_query(template: &PromptTemplate) -> Query {
    let text = render_with(template, MASK, MASK);
    let target = if template.subject_first() { 1 } else { 0 };
    Query::new(text, target, Paradigm::PromptOnly)
}

/// Illustrative cases drawn for one target fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseSample {
    pub cases: Vec<Fact>,
    pub seed: u64,
}

/// Whether a fact may serve as a case for `target`: different subject, and
/// the gold answer appears in neither its subject nor its object.
pub fn is_eligible_case(candidate: &Fact, target: &Fact) -> bool {
    candidate.subject_id != target.subject_id
        && candidate.object_label != target.object_label
        && !contains_answer(&candidate.object_label, &target.object_label)
        && !contains_answer(&candidate.subject_label, &target.object_label)
}

/// Samples `n` cases without replacement, in draw order.
pub fn sample_cases(factset: &FactSet, target: &Fact, n: usize, seed: u64) -> Result<CaseSample> {
    let eligible: Vec<&Fact> = factset.iter().filter(|f| is_eligible_case(f, target)).collect();
    if eligible.len() < n {
        return Err(ParadigmError::NotEnoughCases {
            needed: n,
            eligible: eligible.len(),
        });
    }
    let mut rng = seeded_rng(seed);
    let cases = draw_indices(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    Ok(CaseSample { cases, seed })
}

fn join_segments(segments: &[String]) -> String {
    segments.join(&format!(" {SEP} "))
}

/// Case segments (with their gold objects filled in) followed by the
/// target prompt, separated by `[SEP]`.
pub fn build_case_query(fact: &Fact, cases: &CaseSample, template: &PromptTemplate) -> Result<Query> {
    let mut segments = Vec::with_capacity(cases.cases.len() + 1);
    for case in &cases.cases {
        segments.push(render_prompt(
            template,
            &case.subject_label,
            ObjectSlot::Literal(&case.object_label),
        )?);
    }
    segments.push(render_prompt(template, &fact.subject_label, ObjectSlot::Mask)?);
    Ok(Query::new(join_segments(&segments), 0, Paradigm::Case).with_fact(fact))
}

/// Context paragraph followed by the target prompt.
pub fn build_context_query(fact: &Fact, context: &ContextRecord, template: &PromptTemplate) -> Result<Query> {
    let key = fact.key().to_string();
    if context.text.trim().is_empty() {
        return Err(ParadigmError::EmptyContext(key));
    }
    if context.text.contains(MASK) {
        return Err(ParadigmError::MaskInContext(key));
    }
    let prompt = render_prompt(template, &fact.subject_label, ObjectSlot::Mask)?;
    let text = join_segments(&[context.text.clone(), prompt]);
    Ok(Query::new(text, 0, Paradigm::Context).with_fact(fact))
}

/// Masked context followed by the target prompt. The target is the prompt
/// mask, which comes after every mask in the context.
pub fn build_masked_context_query(fact: &Fact, masked_context: &str, template: &PromptTemplate) -> Result<Query> {
    if masked_context.trim().is_empty() {
        return Err(ParadigmError::EmptyContext(fact.key().to_string()));
    }
    let prompt = render_prompt(template, &fact.subject_label, ObjectSlot::Mask)?;
    let target = masked_context.matches(MASK).count();
    let text = join_segments(&[masked_context.to_string(), prompt]);
    Ok(Query::new(text, target, Paradigm::ContextMasked).with_fact(fact))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

thread_local! {
    static PATTERNS: RefCell<HashMap<String, regex::Regex>> = RefCell::new(HashMap::new());
}

/// Case-insensitive literal matcher, compiled once per thread and needle.
fn literal_pattern(needle: &str) -> regex::Regex {
    PATTERNS.with(|cell| {
        let mut cache = cell.borrow_mut();
        if let Some(re) = cache.get(needle) {
            return re.clone();
        }
        if cache.len() >= 4096 {
            cache.clear();
        }
        let re = regex::RegexBuilder::new(&regex::escape(needle))
            .case_insensitive(true)
            .build()
            .expect("escaped literal is a valid pattern");
        cache.insert(needle.to_string(), re.clone());
        re
    })
}

/// Byte ranges of whole-word, case-insensitive occurrences of `needle`.
fn whole_word_matches(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let needle = needle.trim();
    if needle.is_empty() {
        return Vec::new();
    }
    let re = literal_pattern(needle);
    let mut out = Vec::new();
    let mut pos = 0;
    while pos <= haystack.len() {
        let Some(m) = re.find_at(haystack, pos) else { break };
        let before_ok = haystack[..m.start()].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = haystack[m.end()..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok && m.end() > m.start() {
            out.push((m.start(), m.end()));
            pos = m.end();
        } else {
            pos = m.start() + haystack[m.start()..].chars().next().map_or(1, char::len_utf8);
        }
    }
    out
}

/// Whole-word, case-insensitive occurrence test.
pub fn contains_answer(context: &str, gold_label: &str) -> bool {
    !whole_word_matches(context, gold_label).is_empty()
}

/// Which occurrences of the answer get masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScope {
    #[default]
    All,
    First,
}

/// Replaces whole-word occurrences of the gold answer by the mask sentinel.
pub fn mask_answer_in_context(context: &str, gold_label: &str, scope: MaskScope) -> Result<(String, usize)> {
    let mut matches = whole_word_matches(context, gold_label);
    if matches.is_empty() {
        return Err(ParadigmError::AnswerAbsent(gold_label.to_string()));
    }
    if scope == MaskScope::First {
        matches.truncate(1);
    }
    let mut out = String::with_capacity(context.len());
    let mut last = 0;
    for &(s, e) in &matches {
        out.push_str(&context[last..s]);
        out.push_str(MASK);
        last = e;
    }
    out.push_str(&context[last..]);
    Ok((out, matches.len()))
}

/// Probe over the masked context alone, reading the first masked position.
pub fn build_reconstruction_query(masked_context: &str) -> Result<Query> {
    if !masked_context.contains(MASK) {
        return Err(ParadigmError::NoMask);
    }
    Ok(Query::new(masked_context.to_string(), 0, Paradigm::Reconstruction))
}
