//! Small on-disk fixtures shared by the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use probekit_core::analytics::Distribution;
use probekit_core::experiments::{ExperimentConfig, ExperimentKind};
use probekit_core::scorer::MockConfig;

pub fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

pub fn facts_tsv(rows: &[(&str, &str, &str, &str, &str)]) -> String {
    rows.iter()
        .map(|(s, sl, r, o, ol)| format!("{s}\t{sl}\t{r}\t{o}\t{ol}\n"))
        .collect()
}

pub const CITY_VOCAB: [&str; 6] = ["Paris", "Rome", "Tokyo", "Lima", "London", "Berlin"];

pub fn city_bias() -> Distribution {
    Distribution::from_weights([
        ("Paris", 0.35),
        ("London", 0.25),
        ("Rome", 0.15),
        ("Berlin", 0.12),
        ("Tokyo", 0.08),
        ("Lima", 0.05),
    ])
    .unwrap()
}

/// Two relations; the first dataset's answers are {Paris, Rome}, the
/// second's {Tokyo, Lima}.
pub fn prompt_bias_config(dir: &Path, subject_shift: f64) -> ExperimentConfig {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (rel, n) in [("P19", 12), ("P20", 9)] {
        for i in 0..n {
            let (oid, ol) = if i % 4 == 3 { ("Q220", "Rome") } else { ("Q90", "Paris") };
            a.push((format!("A{rel}{i}"), format!("Person A{i} {rel}"), rel, oid, ol));
            let (oid, ol) = if i % 2 == 0 { ("Q1490", "Tokyo") } else { ("Q2868", "Lima") };
            b.push((format!("B{rel}{i}"), format!("Person B{i} {rel}"), rel, oid, ol));
        }
    }
    let rows = |v: &Vec<(String, String, &str, &str, &str)>| {
        v.iter()
            .map(|(s, sl, r, o, ol)| format!("{s}\t{sl}\t{r}\t{o}\t{ol}\n"))
            .collect::<String>()
    };
    let facts = write(dir, "facts.tsv", &rows(&a));
    let uniform = write(dir, "uniform.tsv", &rows(&b));
    let manual = write(dir, "manual.tsv", "P19\t[X] was born in [Y] .\nP20\t[X] died in [Y] .\n");
    let mined = write(dir, "mined.tsv", "P19\t[Y] is the birthplace of [X] .\nP20\t[X] passed away in [Y] .\n");
    ExperimentConfig {
        kind: ExperimentKind::PromptBias,
        facts: Some(facts),
        uniform_facts: Some(uniform),
        prompts: Some(manual),
        mined_prompts: Some(mined),
        mock: Some(MockConfig::new(city_bias(), subject_shift, CITY_VOCAB, 7)),
        out: dir.join("out"),
        ..Default::default()
    }
}

/// Five facts with contexts: answers present for two, absent for three.
pub fn context_config(dir: &Path) -> ExperimentConfig {
    let facts = write(
        dir,
        "facts.tsv",
        &facts_tsv(&[
            ("Q1", "Alice", "P19", "Q90", "Paris"),
            ("Q2", "Bob", "P19", "Q220", "Rome"),
            ("Q3", "Carol", "P19", "Q2868", "Lima"),
            ("Q4", "Dan", "P19", "Q1490", "Tokyo"),
            ("Q5", "Eve", "P19", "Q90", "Paris"),
            ("Q6", "Frank", "P19", "Q90", "Paris"),
        ]),
    );
    let contexts = write(
        dir,
        "contexts.tsv",
        "Q1\tP19\tAlice was born in Paris.\n\
         Q2\tP19\tBob lived in London.\n\
         Q3\tP19\tCarol grew up in Lima and Rome.\n\
         Q4\tP19\tDan likes tea.\n\
         Q5\tP19\tEve visited Rome.\n",
    );
    let prompts = write(dir, "manual.tsv", "P19\t[X] was born in [Y] .\n");
    let bias = Distribution::from_weights([
        ("Paris", 0.4),
        ("London", 0.3),
        ("Rome", 0.2),
        ("Lima", 0.05),
        ("Tokyo", 0.05),
    ])
    .unwrap();
    let mut mock = MockConfig::new(bias, 0.0, [], 3);
    mock.context_recall = true;
    ExperimentConfig {
        kind: ExperimentKind::ContextInference,
        facts: Some(facts),
        prompts: Some(prompts),
        contexts: Some(contexts),
        mock: Some(mock),
        out: dir.join("out"),
        ..Default::default()
    }
}

pub const CITY_EDGES: &str = "\
Q1297\tQ1549591\tinstance_of
Q60\tQ1549591\tinstance_of
Q1549591\tQ515\tsubclass_of
Q90\tQ515\tinstance_of
Q220\tQ515\tinstance_of
Q956\tQ200250\tinstance_of
Q200250\tQ515\tsubclass_of
Q515\tQ486972\tsubclass_of
Q_atl\tQ_myth\tinstance_of
";

pub const CITY_LABELS: &str = "\
Q1297\tChicago
Q60\tNew York
Q1549591\tBig City
Q515\tCity
Q90\tParis
Q220\tRome
Q956\tBeijing
Q200250\tMetropolis
Q486972\tHuman Settlement
Q_atl\tAtlantis
Q_myth\tMythical Place
";

pub const CITY_SEEDS: [&str; 6] = ["Q1297", "Q60", "Q90", "Q220", "Q956", "Q_atl"];

/// Place-of-birth facts over the toy city taxonomy plus a type-aware mock whose
/// vocabulary mixes cities with non-city labels.
pub fn case_config(dir: &Path) -> ExperimentConfig {
    let cities = [
        ("Q1297", "Chicago"),
        ("Q60", "New York"),
        ("Q90", "Paris"),
        ("Q220", "Rome"),
        ("Q956", "Beijing"),
    ];
    let mut rows = String::new();
    for i in 0..15 {
        let (oid, ol) = cities[i % cities.len()];
        rows.push_str(&format!("S{i:02}\tPerson {i}\tP19\t{oid}\t{ol}\n"));
    }
    let facts = write(dir, "facts.tsv", &rows);
    let edges = write(dir, "edges.tsv", CITY_EDGES);
    let labels = write(dir, "labels.tsv", CITY_LABELS);
    let prompts = write(dir, "manual.tsv", "P19\t[X] was born in [Y] .\n");
    let bias = Distribution::from_weights([
        ("Paris", 0.3),
        ("French", 0.25),
        ("Chicago", 0.15),
        ("Rome", 0.1),
        ("English", 0.08),
        ("Beijing", 0.07),
        ("New York", 0.05),
    ])
    .unwrap();
    ExperimentConfig {
        kind: ExperimentKind::CaseAnalogy,
        facts: Some(facts),
        prompts: Some(prompts),
        taxonomy: Some(edges),
        labels: Some(labels),
        mock: Some(MockConfig::new(
            bias,
            0.6,
            ["Paris", "French", "Chicago", "Rome", "English", "Beijing", "New York"],
            11,
        )),
        case_count: 2,
        top_k: 10,
        out: dir.join("out"),
        ..Default::default()
    }
}
