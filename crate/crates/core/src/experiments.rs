//! End-to-end experiment runs.
//!
//! Each run validates its configuration, writes the resolved configuration
//! into the output directory, scores every probe through the prediction
//! cache and emits `metrics.csv` plus a `report.md` rendered from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analytics::{
    self, kl_divergence, leakage_split, mean_record_distribution, mrr, pearson_over, precision_at_k,
    prediction_histogram, rank_change_analysis, reconstruction_split, record_distribution, topk_coverage,
    type_transition_analysis, AnalyticsError, GroupRow, Golds, RankField, RankOutcome, Run,
    DEFAULT_KL_EPSILON,
};
use crate::corpus::{filter_single_token, load_contexts, load_facts, load_prompts, write_facts};
use crate::error::{Error, Result};
use crate::hashing::{content_id, derive_seed};
use crate::paradigms::{
    build_case_query, build_context_query, build_masked_context_query, build_prompt_only_query,
    build_prompt_query, build_reconstruction_query, contains_answer, mask_answer_in_context, sample_cases,
    MaskScope, ParadigmError, DEFAULT_CASE_COUNT,
};
use crate::report::{render_markdown, MetricsReport, ALL};
use crate::sampler::{answer_histogram, build_uniform_subset, presample, UniformSampleReport, DEFAULT_PRESAMPLE_CAP};
use crate::scorer::{
    score_batch, Backend, CachedBackend, MockConfig, MockScorer, ScoreCache, ScoreRequest, SubprocessBackend,
    SubprocessConfig,
};
use crate::taxonomy::{self, induce_entity_set_type, type_members, TaxonomyStore, DEFAULT_TYPE_THRESHOLD};
use crate::{FactKey, FactSet, PredictionRecord, PromptSource, PromptTemplate, Query, TypeAssignment};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.md";
pub const UNIFORM_FACTS_FILE: &str = "uniform_facts.tsv";
pub const UNIFORM_REPORT_FILE: &str = "uniform_report.tsv";
pub const TYPES_FILE: &str = "types.tsv";
const DEFAULT_CACHE_SUBDIR: &str = "cache";
const COVERAGE_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PromptBias,
    BuildUniform,
    CaseAnalogy,
    ContextInference,
    InduceTypes,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::PromptBias => "prompt_bias",
            ExperimentKind::BuildUniform => "build_uniform",
            ExperimentKind::CaseAnalogy => "case_analogy",
            ExperimentKind::ContextInference => "context_inference",
            ExperimentKind::InduceTypes => "induce_types",
        }
    }

    fn needs_scorer(self) -> bool {
        !matches!(self, ExperimentKind::InduceTypes)
    }
}

/// Declarative description of one run. Loaded from TOML; command-line flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub facts: Option<PathBuf>,
    /// Second dataset for prompt-bias runs; built from `facts` when absent.
    pub uniform_facts: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub mined_prompts: Option<PathBuf>,
    pub auto_prompts: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub scorer_cmd: Option<String>,
    pub model_id: Option<String>,
    pub mock: Option<MockConfig>,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub seed: u64,
    pub top_k: usize,
    pub case_count: usize,
    pub type_threshold: f64,
    pub kl_epsilon: f64,
    pub presample_cap: usize,
    pub max_depth: Option<usize>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub single_token_filter: bool,
    pub mask_scope: MaskScope,
    pub out: PathBuf,
    pub overwrite: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::PromptBias,
            facts: None,
            uniform_facts: None,
            prompts: None,
            mined_prompts: None,
            auto_prompts: None,
            taxonomy: None,
            labels: None,
            contexts: None,
            scorer_cmd: None,
            model_id: None,
            mock: None,
            cache_dir: None,
            no_cache: false,
            seed: 0,
            top_k: 10,
            case_count: DEFAULT_CASE_COUNT,
            type_threshold: DEFAULT_TYPE_THRESHOLD,
            kl_epsilon: DEFAULT_KL_EPSILON,
            presample_cap: DEFAULT_PRESAMPLE_CAP,
            max_depth: None,
            max_in_flight: 8,
            timeout_secs: 60,
            single_token_filter: true,
            mask_scope: MaskScope::All,
            out: PathBuf::from("out"),
            overwrite: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out.join(DEFAULT_CACHE_SUBDIR))
    }

    /// Identifies the scorer in cache keys.
    pub fn model_key(&self) -> String {
        if let Some(m) = &self.mock {
            let json = serde_json::to_string(m).expect("mock config serializes");
            format!("mock:{}", content_id(&[&json]))
        } else if let Some(cmd) = &self.scorer_cmd {
            match &self.model_id {
                Some(id) => format!("{id}@{cmd}"),
                None => cmd.clone(),
            }
        } else {
            String::new()
        }
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        let path = field
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs `{name}`", self.kind.as_str())))?;
        if !path.exists() {
            return Err(Error::Config(format!("{name} path {} does not exist", path.display())));
        }
        Ok(path)
    }

    /// Checks the parameters and that every input this kind needs exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.type_threshold > 0.0 && self.type_threshold <= 1.0) {
            return bad(format!("type_threshold {} outside (0, 1]", self.type_threshold));
        }
        if self.kl_epsilon.is_nan() || self.kl_epsilon <= 0.0 {
            return bad("kl_epsilon must be positive".into());
        }
        if self.presample_cap == 0 {
            return bad("presample_cap must be positive".into());
        }
        if self.mock.is_some() && self.scorer_cmd.is_some() {
            return bad("set either `scorer_cmd` or `mock`, not both".into());
        }
        for (field, name) in [
            (&self.uniform_facts, "uniform_facts"),
            (&self.mined_prompts, "mined_prompts"),
            (&self.auto_prompts, "auto_prompts"),
            (&self.labels, "labels"),
            (&self.contexts, "contexts"),
        ] {
            if field.is_some() {
                self.require(field, name)?;
            }
        }
        self.require(&self.facts, "facts")?;
        match self.kind {
            ExperimentKind::PromptBias | ExperimentKind::ContextInference => {
                self.require(&self.prompts, "prompts")?;
            }
            ExperimentKind::CaseAnalogy => {
                self.require(&self.prompts, "prompts")?;
                self.require(&self.taxonomy, "taxonomy")?;
            }
            ExperimentKind::InduceTypes => {
                self.require(&self.taxonomy, "taxonomy")?;
            }
            ExperimentKind::BuildUniform => {}
        }
        if self.kind == ExperimentKind::ContextInference {
            self.require(&self.contexts, "contexts")?;
        }
        Ok(())
    }
}

/// Builds the backend named by the configuration.
pub fn connect(config: &ExperimentConfig) -> Result<Box<dyn Backend>> {
    if let Some(m) = &config.mock {
        return Ok(Box::new(MockScorer::try_new(m.clone())?));
    }
    if let Some(cmd) = &config.scorer_cmd {
        let mut sc = SubprocessConfig::from_command_line(cmd);
        sc.timeout = Duration::from_secs(config.timeout_secs.max(1));
        sc.expected_model_id = config.model_id.clone();
        return Ok(Box::new(SubprocessBackend::new(sc)));
    }
    Err(Error::Config("no scorer configured; set `scorer_cmd`".into()))
}

/// What a run left on disk.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub out_dir: PathBuf,
    pub metrics: MetricsReport,
    pub files: Vec<PathBuf>,
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let dir = config.out.clone();
        if dir.exists() {
            let cache = config.cache_dir();
            let occupied = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .any(|e| e.path() != cache);
            if occupied && !config.overwrite {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --overwrite to reuse it",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Output { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

fn stage<T, E: Into<Error>>(name: &str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| e.into().in_stage(name))
}

pub fn run_prompt_bias(config: &ExperimentConfig, backend: &dyn Backend) -> Result<Artifacts> {
    run_as(config, ExperimentKind::PromptBias, Some(backend))
}

pub fn run_case_analogy(config: &ExperimentConfig, backend: &dyn Backend) -> Result<Artifacts> {
    run_as(config, ExperimentKind::CaseAnalogy, Some(backend))
}

pub fn run_context_inference(config: &ExperimentConfig, backend: &dyn Backend) -> Result<Artifacts> {
    run_as(config, ExperimentKind::ContextInference, Some(backend))
}

/// The backend is needed only for the single-token filter.
pub fn run_build_uniform(config: &ExperimentConfig, backend: Option<&dyn Backend>) -> Result<Artifacts> {
    run_as(config, ExperimentKind::BuildUniform, backend)
}

pub fn run_induce_types(config: &ExperimentConfig) -> Result<Artifacts> {
    run_as(config, ExperimentKind::InduceTypes, None)
}

/// Runs `config.kind`.
pub fn run(config: &ExperimentConfig, backend: Option<&dyn Backend>) -> Result<Artifacts> {
    run_as(config, config.kind, backend)
}

fn run_as(config: &ExperimentConfig, kind: ExperimentKind, backend: Option<&dyn Backend>) -> Result<Artifacts> {
    let mut config = config.clone();
    config.kind = kind;
    config.validate()?;
    if backend.is_none() && kind.needs_scorer() && (kind != ExperimentKind::BuildUniform || config.single_token_filter) {
        return Err(Error::Config(format!("{} needs a scorer", kind.as_str())));
    }
    let mut out = Output::prepare(&config)?;
    out.write(RESOLVED_CONFIG_FILE, config.to_toml().as_bytes())?;

    let cache = match (backend, config.no_cache) {
        (Some(_), false) => Some(stage("cache", ScoreCache::open(&config.cache_dir()))?),
        _ => None,
    };
    let cached = match (backend, &cache) {
        (Some(b), Some(c)) => Some(CachedBackend::new(b, c, config.model_key())),
        _ => None,
    };
    let scorer: Option<&dyn Backend> = match &cached {
        Some(c) => Some(c),
        None => backend,
    };

    let ctx = Ctx { config: &config, scorer };
    let mut metrics = match kind {
        ExperimentKind::PromptBias => ctx.prompt_bias(&mut out)?,
        ExperimentKind::CaseAnalogy => ctx.case_analogy(&mut out)?,
        ExperimentKind::ContextInference => ctx.context_inference(&mut out)?,
        ExperimentKind::BuildUniform => ctx.build_uniform(&mut out)?,
        ExperimentKind::InduceTypes => ctx.induce_types(&mut out)?,
    };
    metrics.add_macro_rows();
    let csv = metrics.to_csv_string();
    out.write(METRICS_FILE, csv.as_bytes())?;
    let parsed = MetricsReport::read_csv(csv.as_bytes())?;
    out.write(REPORT_FILE, render_markdown(&parsed).as_bytes())?;
    if let Some(c) = &cache {
        log::info!("cache: {} hits, {} misses", c.hits(), c.misses());
    }
    Ok(Artifacts {
        out_dir: out.dir,
        metrics,
        files: out.files,
    })
}

/// Re-renders `report.md` from an existing `metrics.csv`.
pub fn render_report(dir: &Path) -> Result<PathBuf> {
    let csv_path = dir.join(METRICS_FILE);
    let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let metrics = MetricsReport::read_csv(file)?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, render_markdown(&metrics)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    scorer: Option<&'a dyn Backend>,
}

fn golds_of<'a>(sets: impl IntoIterator<Item = &'a FactSet>) -> Golds {
    sets.into_iter()
        .flat_map(|s| s.iter())
        .map(|f| (f.key(), f.object_label.clone()))
        .collect()
}

fn relation_golds(golds: &Golds, relation: &str) -> Golds {
    golds
        .iter()
        .filter(|(k, _)| k.relation_id == relation)
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn answers_of(set: &FactSet) -> BTreeSet<&str> {
    set.iter().map(|f| f.object_label.as_str()).collect()
}

fn pct_of(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

fn push_groups(metrics: &mut MetricsReport, section: &str, rows: &[GroupRow]) {
    for row in rows {
        let g = &row.group;
        metrics.push(section, ALL, &format!("{g}.share"), row.share, row.count);
        for (name, v) in [("p1_prompt", row.p1_prompt), ("p1_context", row.p1_context), ("delta", row.delta)] {
            if let Some(v) = v {
                metrics.push(section, ALL, &format!("{g}.{name}"), v, row.count);
            }
        }
    }
}

impl Ctx<'_> {
    fn scorer(&self) -> Result<&dyn Backend> {
        self.scorer
            .ok_or_else(|| Error::Config(format!("{} needs a scorer", self.config.kind.as_str())))
    }

    /// Loads a facts file and applies the single-token filter when enabled.
    fn load_dataset(&self, path: &Path, name: &str) -> Result<Vec<FactSet>> {
        let sets = stage(&format!("load {name}"), load_facts(path))?;
        if !self.config.single_token_filter {
            return Ok(sets);
        }
        let scorer = self.scorer()?;
        let mut out = Vec::with_capacity(sets.len());
        for set in &sets {
            let kept = stage("single-token filter", filter_single_token(set, &scorer))?;
            log::info!(
                "{name}/{}: {} of {} facts have single-token objects",
                set.relation_id(),
                kept.len(),
                set.len()
            );
            if !kept.is_empty() {
                out.push(kept);
            }
        }
        Ok(out)
    }

    fn facts(&self) -> Result<Vec<FactSet>> {
        self.load_dataset(self.config.facts.as_deref().expect("validated"), "facts")
    }

    fn catalogs(&self) -> Result<Vec<(PromptSource, BTreeMap<String, PromptTemplate>)>> {
        let mut out = Vec::new();
        for (path, source) in [
            (&self.config.prompts, PromptSource::Manual),
            (&self.config.mined_prompts, PromptSource::Mined),
            (&self.config.auto_prompts, PromptSource::Auto),
        ] {
            if let Some(p) = path {
                out.push((source, stage("load prompts", load_prompts(p, source))?));
            }
        }
        Ok(out)
    }

    fn manual_prompts(&self) -> Result<BTreeMap<String, PromptTemplate>> {
        let path = self.config.prompts.as_deref().expect("validated");
        stage("load prompts", load_prompts(path, PromptSource::Manual))
    }

    fn taxonomy(&self) -> Result<TaxonomyStore> {
        let mut store = TaxonomyStore::new();
        let edges = self.config.taxonomy.as_deref().expect("validated");
        stage("load taxonomy", store.load_edges(edges))?;
        if let Some(labels) = &self.config.labels {
            stage("load labels", store.load_labels(labels))?;
        }
        Ok(store)
    }

    /// Scores queries, deduplicating identical probes, and returns the
    /// records keyed by fact.
    fn score(&self, stage_name: &str, queries: &[Query]) -> Result<Run> {
        let by_id = self.score_ids(stage_name, queries)?;
        Ok(queries
            .iter()
            .map(|q| {
                let key = q.fact_key.clone().expect("fact probe");
                (key, by_id[&q.query_id].clone())
            })
            .collect())
    }

    fn score_ids(&self, stage_name: &str, queries: &[Query]) -> Result<BTreeMap<String, PredictionRecord>> {
        let scorer = self.scorer()?;
        let mut requests: BTreeMap<&str, ScoreRequest> = BTreeMap::new();
        for q in queries {
            requests
                .entry(q.query_id.as_str())
                .or_insert_with(|| ScoreRequest::for_query(q, self.config.top_k));
        }
        let requests: Vec<ScoreRequest> = requests.into_values().collect();
        log::info!("{stage_name}: scoring {} probes", requests.len());
        let results = stage(stage_name, score_batch(&requests, scorer, self.config.max_in_flight))?;
        let mut out = BTreeMap::new();
        for r in results {
            let record = stage(stage_name, r)?;
            out.insert(record.query_id.clone(), record);
        }
        Ok(out)
    }

    fn prompt_bias(&self, out: &mut Output) -> Result<MetricsReport> {
        let facts = self.facts()?;
        let mut m = MetricsReport::new();
        let uniform = match &self.config.uniform_facts {
            Some(p) => self.load_dataset(p, "uniform")?,
            None => {
                let (sets, _, built) = self.uniform_sets(&facts)?;
                let mut buf = Vec::new();
                write_facts(&mut buf, &sets).map_err(|e| Error::io(UNIFORM_FACTS_FILE, e))?;
                out.write(UNIFORM_FACTS_FILE, &buf)?;
                m.extend(built);
                sets
            }
        };
        let uniform: BTreeMap<&str, &FactSet> = uniform.iter().map(|s| (s.relation_id(), s)).collect();
        let catalogs = self.catalogs()?;
        let golds = golds_of(facts.iter().chain(uniform.values().copied()));

        for set in &facts {
            let rel = set.relation_id();
            let Some(uni) = uniform.get(rel) else {
                log::warn!("{rel}: absent from the uniform dataset, skipped");
                continue;
            };
            let answers_a = stage("analysis", answer_histogram(set))?;
            let answers_b = stage("analysis", answer_histogram(uni))?;
            for k in COVERAGE_KS {
                m.push("coverage", rel, &format!("facts.answer.top{k}"), stage("analysis", topk_coverage(&answers_a, set.len(), k))?, set.len());
                m.push("coverage", rel, &format!("uniform.answer.top{k}"), stage("analysis", topk_coverage(&answers_b, uni.len(), k))?, uni.len());
            }
            let support: BTreeSet<&str> = answers_of(set).into_iter().chain(answers_of(uni)).collect();

            for (source, templates) in &catalogs {
                let c = source.as_str();
                let Some(template) = templates.get(rel) else {
                    log::warn!("{rel}: no {c} prompt, skipped for that catalog");
                    continue;
                };
                let probes = |fs: &FactSet| -> Result<Vec<Query>> {
                    fs.iter()
                        .map(|f| stage("render prompts", build_prompt_query(f, template)))
                        .collect()
                };
                let run_a = self.score(&format!("score {c} prompts on facts"), &probes(set)?)?;
                let run_b = self.score(&format!("score {c} prompts on uniform"), &probes(uni)?)?;
                let prompt_only = build_prompt_only_query(template);
                if !template.subject_first() {
                    log::info!("{rel}/{c}: object precedes subject; prompt-only probe reads the first mask");
                }
                let po = self.score_ids(&format!("score {c} prompt-only"), std::slice::from_ref(&prompt_only))?
                    .remove(&prompt_only.query_id)
                    .expect("scored");

                let an = |r: std::result::Result<f64, AnalyticsError>| stage("analysis", r);
                let hist_a = stage("analysis", prediction_histogram(run_a.values()))?;
                let hist_b = stage("analysis", prediction_histogram(run_b.values()))?;
                for (ds, run, hist) in [("facts", &run_a, &hist_a), ("uniform", &run_b, &hist_b)] {
                    for k in COVERAGE_KS {
                        m.push("coverage", rel, &format!("{c}.{ds}.prediction.top{k}"), an(topk_coverage(hist, run.len(), k))?, run.len());
                    }
                    m.push("coverage", rel, &format!("{c}.{ds}.p1"), an(precision_at_k(run, &golds, 1))?, run.len());
                }

                let po_dist = stage("analysis", record_distribution(&po))?;
                let full_b = stage("analysis", mean_record_distribution(run_b.values()))?;
                let correlations = [
                    ("predictions_facts_vs_uniform", pearson_over(&hist_a, &hist_b, support.iter().copied())),
                    ("promptonly_vs_uniform", pearson_over(&po_dist, &full_b, answers_of(uni))),
                ];
                for (name, r) in correlations {
                    match r {
                        Ok(v) => m.push("correlation", rel, &format!("{c}.{name}"), v, run_b.len()),
                        Err(AnalyticsError::UndefinedCorrelation(why)) => {
                            log::warn!("{rel}/{c}/{name}: correlation undefined ({why})")
                        }
                        Err(e) => return Err(Error::from(e).in_stage("analysis")),
                    }
                }
                let kl = an(kl_divergence(&answers_a, &po_dist, self.config.kl_epsilon))?;
                m.push("prompt_fitness", rel, &format!("{c}.kl"), kl, set.len());
                m.push("prompt_fitness", rel, &format!("{c}.p1"), an(precision_at_k(&run_a, &golds, 1))?, run_a.len());
            }
        }
        Ok(m)
    }

    fn uniform_sets(&self, facts: &[FactSet]) -> Result<(Vec<FactSet>, Vec<UniformSampleReport>, MetricsReport)> {
        let (mut sets, mut reports) = (Vec::new(), Vec::new());
        let mut m = MetricsReport::new();
        for set in facts {
            let rel = set.relation_id();
            let seed = derive_seed(self.config.seed, rel);
            let pre = stage("presample", presample(set, self.config.presample_cap, derive_seed(seed, "presample")))?;
            let (subset, rep) = stage("build uniform", build_uniform_subset(&pre, seed))?;
            log::info!("{}", rep.to_line());
            m.push("uniform", rel, "presampled", pre.len() as f64, set.len());
            m.push("uniform", rel, "f_m", rep.f_m as f64, set.len());
            m.push("uniform", rel, "groups_kept", rep.groups_kept as f64, set.len());
            m.push("uniform", rel, "groups_deleted", rep.groups_deleted as f64, set.len());
            m.push("uniform", rel, "facts_out", rep.facts_out as f64, set.len());
            let hist = stage("analysis", answer_histogram(&subset))?;
            for k in COVERAGE_KS {
                let v = stage("analysis", topk_coverage(&hist, subset.len(), k))?;
                m.push("uniform", rel, &format!("answer.top{k}"), v, subset.len());
            }
            sets.push(subset);
            reports.push(rep);
        }
        Ok((sets, reports, m))
    }

    fn build_uniform(&self, out: &mut Output) -> Result<MetricsReport> {
        let facts = self.facts()?;
        let (sets, reports, m) = self.uniform_sets(&facts)?;
        let mut buf = Vec::new();
        write_facts(&mut buf, &sets).map_err(|e| Error::io(UNIFORM_FACTS_FILE, e))?;
        out.write(UNIFORM_FACTS_FILE, &buf)?;
        let mut lines = String::from("relation_id\tf_m\tgroups_kept\tgroups_deleted\tfacts_out\n");
        for r in &reports {
            lines.push_str(&r.to_line());
            lines.push('\n');
        }
        out.write(UNIFORM_REPORT_FILE, lines.as_bytes())?;
        Ok(m)
    }

    fn induce_types_for(
        &self,
        facts: &[FactSet],
        store: &TaxonomyStore,
        m: &mut MetricsReport,
    ) -> Result<BTreeMap<String, (TypeAssignment, taxonomy::EntityTypeGraph)>> {
        let mut out = BTreeMap::new();
        for set in facts {
            let rel = set.relation_id();
            let objects: BTreeSet<&str> = set.iter().map(|f| f.object_id.as_str()).collect();
            match induce_entity_set_type(rel, objects.iter().copied(), store, self.config.type_threshold, self.config.max_depth) {
                Ok((assignment, etg)) => {
                    m.push("types", rel, "induced", 1.0, objects.len());
                    m.push("types", rel, "coverage_fraction", assignment.coverage_fraction, objects.len());
                    out.insert(rel.to_string(), (assignment, etg));
                }
                Err(e) => {
                    log::warn!("{rel}: type induction failed: {e}");
                    m.push("types", rel, "induced", 0.0, objects.len());
                }
            }
        }
        Ok(out)
    }

    fn write_types(out: &mut Output, types: &BTreeMap<String, (TypeAssignment, taxonomy::EntityTypeGraph)>) -> Result<()> {
        let mut text = String::from("relation_id\ttype_id\ttype_label\tcoverage_fraction\n");
        for (a, _) in types.values() {
            text.push_str(&a.to_line());
            text.push('\n');
        }
        out.write(TYPES_FILE, text.as_bytes())
    }

    fn induce_types(&self, out: &mut Output) -> Result<MetricsReport> {
        let path = self.config.facts.as_deref().expect("validated");
        let facts = stage("load facts", load_facts(path))?;
        let store = self.taxonomy()?;
        let mut m = MetricsReport::new();
        let types = self.induce_types_for(&facts, &store, &mut m)?;
        Self::write_types(out, &types)?;
        Ok(m)
    }

    fn case_analogy(&self, out: &mut Output) -> Result<MetricsReport> {
        let facts = self.facts()?;
        let prompts = self.manual_prompts()?;
        let store = self.taxonomy()?;
        let mut m = MetricsReport::new();
        let types = self.induce_types_for(&facts, &store, &mut m)?;
        Self::write_types(out, &types)?;
        let golds = golds_of(&facts);
        let n = self.config.case_count;

        let mut outcomes_before = BTreeMap::new();
        let mut outcomes_after = BTreeMap::new();
        let mut excluded = 0usize;
        for set in &facts {
            let rel = set.relation_id();
            let Some(template) = prompts.get(rel) else {
                log::warn!("{rel}: no manual prompt, skipped");
                continue;
            };
            let (mut base, mut cased) = (Vec::new(), Vec::new());
            for fact in set {
                let seed = derive_seed(self.config.seed, &fact.key().to_string());
                let cases = match sample_cases(set, fact, n, seed) {
                    Ok(c) => c,
                    Err(ParadigmError::NotEnoughCases { .. }) => {
                        excluded += 1;
                        continue;
                    }
                    Err(e) => return Err(Error::from(e).in_stage("sample cases")),
                };
                base.push(stage("render prompts", build_prompt_query(fact, template))?);
                cased.push(stage("render cases", build_case_query(fact, &cases, template))?);
            }
            if base.is_empty() {
                log::warn!("{rel}: no fact has {n} eligible cases");
                continue;
            }
            let before = self.score("score prompts", &base)?;
            let after = self.score("score cases", &cased)?;
            let rel_golds = relation_golds(&golds, rel);
            let an = |r: std::result::Result<f64, AnalyticsError>| stage("analysis", r);
            let total = before.len();
            let (mut better, mut worse) = (0usize, 0usize);
            for (key, b) in &before {
                let gold = &rel_golds[key];
                let top = |r: &PredictionRecord| r.predictions.first().map(|p| &p.0) == Some(gold);
                match (top(b), top(&after[key])) {
                    (false, true) => better += 1,
                    (true, false) => worse += 1,
                    _ => {}
                }
            }
            m.push("case", rel, "prompt.p1", an(precision_at_k(&before, &rel_golds, 1))?, total);
            m.push("case", rel, "case.p1", an(precision_at_k(&after, &rel_golds, 1))?, total);
            m.push("case", rel, "better", pct_of(better, total), better);
            m.push("case", rel, "worse", pct_of(worse, total), worse);
            m.push("mrr", rel, "overall.prompt", an(mrr(&before, &rel_golds, None))?, total);
            m.push("mrr", rel, "overall.case", an(mrr(&after, &rel_golds, None))?, total);

            let membership = match types.get(rel) {
                Some((assignment, etg)) => {
                    let labels: BTreeSet<&str> = before
                        .values()
                        .chain(after.values())
                        .flat_map(|r| r.predictions.iter().map(|p| p.0.as_str()))
                        .chain(rel_golds.values().map(String::as_str))
                        .collect();
                    let members = stage(
                        "type membership",
                        type_members(&assignment.type_id, labels, &store, etg, self.config.max_depth),
                    )?;
                    if members.unresolved > 0 {
                        log::info!("{rel}: {} predicted labels not found in the taxonomy", members.unresolved);
                    }
                    Some(members.members)
                }
                None => None,
            };
            if let Some(members) = &membership {
                let row = stage("analysis", type_transition_analysis(&before, &after, &rel_golds, members))?;
                m.push("type_transition", rel, "precision_delta", row.precision_delta, row.queries);
                m.push("type_transition", rel, "type_precision_delta", row.type_precision_delta, row.queries);
                if let Some(v) = row.wrong_to_right_with_type_change {
                    m.push("type_transition", rel, "w2r_type_change", v, row.wrong_to_right);
                }
                if let Some(v) = row.right_to_wrong_without_type_change {
                    m.push("type_transition", rel, "r2w_no_type_change", v, row.right_to_wrong);
                }
                m.push("mrr", rel, "in_type.prompt", an(mrr(&before, &rel_golds, Some(members)))?, total);
                m.push("mrr", rel, "in_type.case", an(mrr(&after, &rel_golds, Some(members)))?, total);
            }
            let oracle = membership.as_ref().map(|s| s as &dyn analytics::MembershipOracle);
            for (key, b) in &before {
                let gold = &rel_golds[key];
                outcomes_before.insert(key.clone(), RankOutcome::from_record(b, gold, oracle));
                outcomes_after.insert(key.clone(), RankOutcome::from_record(&after[key], gold, oracle));
            }
        }
        m.push("case", ALL, "excluded_too_few_cases", excluded as f64, excluded);
        for (field, name) in [(RankField::Overall, "overall"), (RankField::InType, "in_type")] {
            match rank_change_analysis(&outcomes_before, &outcomes_after, field) {
                Ok(c) => {
                    m.push("rank_change", ALL, &format!("{name}.raised"), c.raised, c.count);
                    m.push("rank_change", ALL, &format!("{name}.unchanged"), c.unchanged, c.count);
                    m.push("rank_change", ALL, &format!("{name}.dropped"), c.dropped, c.count);
                }
                Err(AnalyticsError::Empty(why)) => log::warn!("{name} rank change unavailable: {why}"),
                Err(e) => return Err(Error::from(e).in_stage("analysis")),
            }
        }
        Ok(m)
    }

    fn context_inference(&self, _out: &mut Output) -> Result<MetricsReport> {
        let facts = self.facts()?;
        let prompts = self.manual_prompts()?;
        let contexts = stage("load contexts", load_contexts(self.config.contexts.as_deref().expect("validated")))?;
        let golds = golds_of(&facts);
        let mut m = MetricsReport::new();

        let (mut prompt_q, mut context_q, mut masked_q) = (Vec::new(), Vec::new(), Vec::new());
        let mut recon_q: Vec<(FactKey, Query)> = Vec::new();
        let mut presence: BTreeMap<FactKey, bool> = BTreeMap::new();
        let mut missing = 0usize;
        for set in &facts {
            let Some(template) = prompts.get(set.relation_id()) else {
                log::warn!("{}: no manual prompt, skipped", set.relation_id());
                continue;
            };
            for fact in set {
                let Some(ctx) = contexts.get(&fact.query_key()) else {
                    missing += 1;
                    continue;
                };
                let present = contains_answer(&ctx.text, &fact.object_label);
                presence.insert(fact.key(), present);
                prompt_q.push(stage("render prompts", build_prompt_query(fact, template))?);
                context_q.push(stage("render contexts", build_context_query(fact, ctx, template))?);
                let masked = if present {
                    let (masked, _) = stage(
                        "mask answers",
                        mask_answer_in_context(&ctx.text, &fact.object_label, self.config.mask_scope),
                    )?;
                    recon_q.push((fact.key(), stage("render reconstruction", build_reconstruction_query(&masked))?));
                    masked
                } else {
                    ctx.text.clone()
                };
                masked_q.push(stage("render masked contexts", build_masked_context_query(fact, &masked, template))?);
            }
        }
        if missing > 0 {
            log::info!("{missing} queries have no context and are excluded");
        }
        m.push("context", ALL, "queries", prompt_q.len() as f64, prompt_q.len());
        m.push("context", ALL, "excluded_no_context", missing as f64, missing);
        if prompt_q.is_empty() {
            return Err(Error::from(AnalyticsError::Empty("no query has a context".into())).in_stage("analysis"));
        }
        let prompt = self.score("score prompts", &prompt_q)?;
        let context = self.score("score contexts", &context_q)?;
        let masked = self.score("score masked contexts", &masked_q)?;
        let recon_ids = self.score_ids(
            "score reconstructions",
            &recon_q.iter().map(|(_, q)| q.clone()).collect::<Vec<_>>(),
        )?;
        let reconstruction: Run = recon_q
            .iter()
            .map(|(k, q)| (k.clone(), recon_ids[&q.query_id].clone()))
            .collect();

        let leak = stage("analysis", leakage_split(&prompt, &context, &presence, &golds))?;
        push_groups(&mut m, "leakage", &leak);
        if !reconstruction.is_empty() {
            let rows = stage("analysis", reconstruction_split(&prompt, &masked, &reconstruction, &golds))?;
            push_groups(&mut m, "reconstruction", &rows);
        }
        let an = |r: std::result::Result<f64, AnalyticsError>| stage("analysis", r);
        for (rel, p) in analytics::by_relation(&prompt) {
            let c = restrict(&context, &p);
            let mc = restrict(&masked, &p);
            let rel_golds = relation_golds(&golds, &rel);
            m.push("masked_context", &rel, "prompt.p1", an(precision_at_k(&p, &rel_golds, 1))?, p.len());
            m.push("masked_context", &rel, "context.p1", an(precision_at_k(&c, &rel_golds, 1))?, p.len());
            m.push("masked_context", &rel, "masked_context.p1", an(precision_at_k(&mc, &rel_golds, 1))?, p.len());
        }
        Ok(m)
    }
}

fn restrict(run: &Run, keys: &Run) -> Run {
    keys.keys().map(|k| (k.clone(), run[k].clone())).collect()
}
