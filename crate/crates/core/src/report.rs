//! `metrics.csv` rows and the markdown report rendered from them.
//!
//! The CSV is the source of truth. [`render_markdown`] only ever reads a
//! parsed [`MetricsReport`], so every number in `report.md` is a value or
//! count that also appears in the CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pseudo-relation for rows aggregating every relation with equal weight.
pub const MACRO: &str = "MACRO";
/// Pseudo-relation for rows computed over all queries at once.
pub const ALL: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub section: String,
    pub relation_id: String,
    pub metric: String,
    #[serde(serialize_with = "ser_value")]
    pub value: f64,
    pub count: usize,
}

/// Fixed six-decimal rendering, with negative zero folded to zero.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn ser_value<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_value(*v))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Appends a row. Non-finite values are dropped with a warning.
    pub fn push(&mut self, section: &str, relation_id: &str, metric: &str, value: f64, count: usize) {
        if !value.is_finite() {
            log::warn!("dropping non-finite {section}/{relation_id}/{metric}");
            return;
        }
        self.rows.push(MetricRow {
            section: section.into(),
            relation_id: relation_id.into(),
            metric: metric.into(),
            value,
            count,
        });
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, section: &str, relation_id: &str, metric: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.section == section && r.relation_id == relation_id && r.metric == metric)
    }

    pub fn value(&self, section: &str, relation_id: &str, metric: &str) -> Option<f64> {
        self.get(section, relation_id, metric).map(|r| r.value)
    }

    /// Per-relation rows of a section, excluding aggregate rows.
    pub fn relations(&self, section: &str) -> BTreeSet<&str> {
        self.rows
            .iter()
            .filter(|r| r.section == section && !is_aggregate(&r.relation_id))
            .map(|r| r.relation_id.as_str())
            .collect()
    }

    /// Adds a MACRO row for every (section, metric) that has per-relation
    /// rows: the unweighted mean over relations, with the relation count.
    /// Existing MACRO rows are replaced.
    pub fn add_macro_rows(&mut self) {
        self.rows.retain(|r| r.relation_id != MACRO);
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut order: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            if is_aggregate(&r.relation_id) {
                continue;
            }
            let key = (r.section.clone(), r.metric.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r.value);
        }
        for key in order {
            let values = &groups[&key];
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            self.push(&key.0, MACRO, &key.1, mean, values.len());
        }
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing metrics: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(csv_error)?;
        Ok(MetricsReport { rows })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("metrics csv: {e}"))
}

fn is_aggregate(relation_id: &str) -> bool {
    relation_id == MACRO || relation_id == ALL
}

fn cell(report: &MetricsReport, section: &str, relation: &str, metric: &str) -> String {
    report
        .value(section, relation, metric)
        .map(format_value)
        .unwrap_or_else(|| "-".into())
}

fn table(out: &mut String, header: &[&str], rows: Vec<Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

fn has_section(report: &MetricsReport, section: &str) -> bool {
    report.rows.iter().any(|r| r.section == section)
}

/// Catalog prefixes (`manual`, `mined`, `auto`) present in a section, in
/// canonical order.
fn catalogs(report: &MetricsReport, section: &str) -> Vec<&'static str> {
    ["manual", "mined", "auto"]
        .into_iter()
        .filter(|c| {
            let prefix = format!("{c}.");
            report
                .rows
                .iter()
                .any(|r| r.section == section && r.metric.starts_with(&prefix))
        })
        .collect()
}

fn with_macro<'a>(report: &'a MetricsReport, section: &str) -> Vec<&'a str> {
    let mut rel: Vec<&str> = report.relations(section).into_iter().collect();
    rel.push(MACRO);
    rel
}

/// Renders every table whose section is present in the report.
pub fn render_markdown(report: &MetricsReport) -> String {
    let mut out = String::from("# Probing report\n\n");
    let _ = writeln!(
        out,
        "All numbers are copied from `metrics.csv`. `-` marks a cell that is absent there. \
         Percentages are in [0, 100]; KL divergences are in nats with the dataset answer \
         distribution as reference.\n"
    );

    if has_section(report, "uniform") {
        out.push_str("## Uniform-answer build\n\n");
        let rows = with_macro(report, "uniform")
            .into_iter()
            .map(|r| {
                let mut row = vec![r.to_string()];
                for m in ["presampled", "f_m", "groups_kept", "groups_deleted", "facts_out"] {
                    row.push(cell(report, "uniform", r, m));
                }
                row
            })
            .collect();
        table(&mut out, &["relation", "presampled", "f_m", "groups kept", "groups deleted", "facts out"], rows);
    }

    if has_section(report, "coverage") {
        out.push_str("## Top-k coverage\n\n");
        let cats = catalogs(report, "coverage");
        let mut rows = Vec::new();
        for ds in ["facts", "uniform"] {
            let mut row = vec!["answer".to_string(), ds.to_string()];
            for k in [1, 3, 5] {
                row.push(cell(report, "coverage", MACRO, &format!("{ds}.answer.top{k}")));
            }
            row.push("-".into());
            rows.push(row);
        }
        for c in &cats {
            for ds in ["facts", "uniform"] {
                let mut row = vec![format!("prediction ({c})"), ds.to_string()];
                for k in [1, 3, 5] {
                    row.push(cell(report, "coverage", MACRO, &format!("{c}.{ds}.prediction.top{k}")));
                }
                row.push(cell(report, "coverage", MACRO, &format!("{c}.{ds}.p1")));
                rows.push(row);
            }
        }
        table(&mut out, &["distribution", "dataset", "top1", "top3", "top5", "P@1"], rows);
    }

    if has_section(report, "correlation") {
        out.push_str("## Prediction correlations\n\n");
        let cats = catalogs(report, "correlation");
        let mut header = vec!["relation".to_string()];
        for c in &cats {
            header.push(format!("{c}: facts vs uniform"));
            header.push(format!("{c}: prompt-only vs uniform"));
        }
        let rows = with_macro(report, "correlation")
            .into_iter()
            .map(|r| {
                let mut row = vec![r.to_string()];
                for c in &cats {
                    row.push(cell(report, "correlation", r, &format!("{c}.predictions_facts_vs_uniform")));
                    row.push(cell(report, "correlation", r, &format!("{c}.promptonly_vs_uniform")));
                }
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        table(&mut out, &header, rows);
    }

    if has_section(report, "prompt_fitness") {
        out.push_str("## Prompt fitness\n\n");
        let rows = catalogs(report, "prompt_fitness")
            .into_iter()
            .map(|c| {
                vec![
                    c.to_string(),
                    cell(report, "prompt_fitness", MACRO, &format!("{c}.p1")),
                    cell(report, "prompt_fitness", MACRO, &format!("{c}.kl")),
                ]
            })
            .collect();
        table(&mut out, &["prompt", "P@1", "KL divergence"], rows);
    }

    if has_section(report, "case") {
        out.push_str("## Case-based analogy\n\n");
        let rows = with_macro(report, "case")
            .into_iter()
            .map(|r| {
                let mut row = vec![r.to_string()];
                for m in ["prompt.p1", "case.p1", "better", "worse"] {
                    row.push(cell(report, "case", r, m));
                }
                row
            })
            .collect();
        table(&mut out, &["relation", "prompt P@1", "case P@1", "better %", "worse %"], rows);
    }

    if has_section(report, "type_transition") {
        out.push_str("## Type transitions\n\n");
        let rows = with_macro(report, "type_transition")
            .into_iter()
            .map(|r| {
                let mut row = vec![r.to_string()];
                for m in ["precision_delta", "type_precision_delta", "w2r_type_change", "r2w_no_type_change"] {
                    row.push(cell(report, "type_transition", r, m));
                }
                row
            })
            .collect();
        table(
            &mut out,
            &["relation", "precision Δ", "type prec. Δ", "wrong→right w/ type change %", "right→wrong w/o type change %"],
            rows,
        );
    }

    if has_section(report, "rank_change") {
        out.push_str("## Rank change\n\n");
        let rows = ["overall", "in_type"]
            .into_iter()
            .map(|f| {
                let mut row = vec![f.to_string()];
                for m in ["raised", "unchanged", "dropped"] {
                    row.push(cell(report, "rank_change", ALL, &format!("{f}.{m}")));
                }
                row
            })
            .collect();
        table(&mut out, &["rank", "raised %", "unchanged %", "dropped %"], rows);
    }

    if has_section(report, "mrr") {
        out.push_str("## MRR\n\n");
        let rows = ["overall", "in_type"]
            .into_iter()
            .map(|f| {
                vec![
                    f.to_string(),
                    cell(report, "mrr", MACRO, &format!("{f}.prompt")),
                    cell(report, "mrr", MACRO, &format!("{f}.case")),
                ]
            })
            .collect();
        table(&mut out, &["ranking", "prompt", "case"], rows);
    }

    for (section, title, groups, right) in [
        ("leakage", "Answer presence in context", ["present", "absent"], "context P@1"),
        (
            "reconstruction",
            "Reconstructability of the masked answer",
            ["reconstructable", "not_reconstructable"],
            "masked-context P@1",
        ),
    ] {
        if !has_section(report, section) {
            continue;
        }
        let _ = writeln!(out, "## {title}\n");
        let rows = groups
            .into_iter()
            .map(|g| {
                let mut row = vec![g.to_string()];
                for m in ["share", "p1_prompt", "p1_context", "delta"] {
                    row.push(cell(report, section, ALL, &format!("{g}.{m}")));
                }
                row
            })
            .collect();
        table(&mut out, &["group", "share %", "prompt P@1", right, "Δ"], rows);
    }

    if has_section(report, "masked_context") {
        out.push_str("## Masking the answer in context\n\n");
        let rows = vec![vec![
            cell(report, "masked_context", MACRO, "prompt.p1"),
            cell(report, "masked_context", MACRO, "context.p1"),
            cell(report, "masked_context", MACRO, "masked_context.p1"),
        ]];
        table(&mut out, &["prompt P@1", "context P@1", "masked-context P@1"], rows);
    }
    out
}
