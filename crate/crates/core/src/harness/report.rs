//! Report assembly: aggregate tables and on-disk emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Checkpoint, RunMatrixConfig};
use super::run::{CellKey, CellRecord, Failure, Row};
use super::HarnessError;
use crate::detectors::{LabelSource, Method};
use crate::metrics::{aso, mean, median, spearman, AsoConfig};
use crate::noise::NoiseModel;

pub const ROWS_COLUMNS: [&str; 15] = [
    "dataset",
    "noise_model",
    "noise_rate",
    "seed",
    "checkpoint",
    "label_source",
    "detector",
    "ood_set",
    "auroc_id",
    "auroc_correct",
    "auroc_incorrect",
    "n_correct",
    "n_incorrect",
    "n_ood",
    "id_accuracy",
];

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: RunMatrixConfig,
    pub planned_rows: usize,
    pub rows: Vec<Row>,
    pub failures: Vec<Failure>,
    pub records: Vec<CellRecord>,
}

impl EvalReport {
    pub fn new(config: RunMatrixConfig, planned_rows: usize, records: Vec<CellRecord>) -> Self {
        let rows = records.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        let failures = records.iter().flat_map(|r| r.failures.iter().cloned()).collect();
        Self { config, planned_rows, rows, failures, records }
    }

    /// Every configured (cell, OOD set) pair is either a row or a failure.
    pub fn is_complete(&self) -> bool {
        self.rows.len() + self.failures.len() == self.planned_rows
    }
}

/// A cell's rows reduced over OOD sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: CellKey,
    pub median_auroc_id: f64,
    pub mean_auroc_id: f64,
    pub median_auroc_correct: Option<f64>,
    pub median_auroc_incorrect: Option<f64>,
    pub id_accuracy: f64,
    pub ood_sets: usize,
}

pub fn cell_summaries(rows: &[Row]) -> Vec<CellSummary> {
    let mut groups: Vec<(CellKey, Vec<&Row>)> = Vec::new();
    for r in rows {
        match groups.last_mut() {
            Some((k, v)) if *k == r.key => v.push(r),
            _ => groups.push((r.key.clone(), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let ids: Vec<f64> = rs.iter().map(|r| r.auroc_id).collect();
            let opt_median = |vals: Vec<f64>| if vals.is_empty() { None } else { median(&vals).ok() };
            CellSummary {
                median_auroc_id: median(&ids).expect("non-empty group"),
                mean_auroc_id: mean(&ids).expect("non-empty group"),
                median_auroc_correct: opt_median(rs.iter().filter_map(|r| r.auroc_correct).collect()),
                median_auroc_incorrect: opt_median(rs.iter().filter_map(|r| r.auroc_incorrect).collect()),
                id_accuracy: rs[0].id_accuracy,
                ood_sets: rs.len(),
                key,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct BestCaseKey {
    pub dataset: String,
    pub noise_model: NoiseModel,
    pub noise_rate: String,
    pub label_source: LabelSource,
    pub detector: Method,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCase {
    pub key: BestCaseKey,
    pub median_auroc_id: f64,
    /// Where the maximum was attained (first in report order on ties).
    pub arch: String,
    pub seed: u64,
    pub checkpoint: Checkpoint,
}

/// Per (dataset, noise, label source, detector): the best median AUROC over
/// architectures, seeds and checkpoints.
pub fn best_case_table(report: &EvalReport) -> Vec<BestCase> {
    let mut best: BTreeMap<BestCaseKey, BestCase> = BTreeMap::new();
    for s in cell_summaries(&report.rows) {
        let key = BestCaseKey {
            dataset: s.key.dataset.clone(),
            noise_model: s.key.noise_model,
            noise_rate: s.key.noise_rate.clone(),
            label_source: s.key.label_source,
            detector: s.key.detector,
        };
        let candidate = BestCase {
            key: key.clone(),
            median_auroc_id: s.median_auroc_id,
            arch: s.key.arch.clone(),
            seed: s.key.seed,
            checkpoint: s.key.checkpoint,
        };
        match best.get(&key) {
            Some(b) if b.median_auroc_id >= s.median_auroc_id => {}
            _ => {
                best.insert(key, candidate);
            }
        }
    }
    best.into_values().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub noise_model: NoiseModel,
    pub label_source: LabelSource,
    pub detector: Method,
    pub n: usize,
    /// Spearman rho between ID accuracy and median AUROC, or the reason it
    /// is absent.
    pub rho: Result<f64, String>,
}

pub const MIN_CORRELATION_ROWS: usize = 3;

/// Per noise family, label source and detector: rank correlation between ID
/// accuracy and median AUROC across all cells.
pub fn correlation_table(report: &EvalReport) -> Vec<Correlation> {
    let mut groups: BTreeMap<(NoiseModel, LabelSource, Method), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in cell_summaries(&report.rows) {
        let g = groups.entry((s.key.noise_model, s.key.label_source, s.key.detector)).or_default();
        g.0.push(s.id_accuracy);
        g.1.push(s.median_auroc_id);
    }
    groups
        .into_iter()
        .map(|((noise_model, label_source, detector), (acc, auc))| {
            let n = acc.len();
            let rho = if n < MIN_CORRELATION_ROWS {
                Err(format!("only {n} cells (need {MIN_CORRELATION_ROWS})"))
            } else {
                spearman(&acc, &auc).map_err(|e| e.to_string())
            };
            Correlation { noise_model, label_source, detector, n, rho }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsoRow {
    pub a: Method,
    pub b: Method,
    pub filter: String,
    pub n_a: usize,
    pub n_b: usize,
    /// `eps_min`, or why the test could not run.
    pub eps_min: Result<f64, String>,
}

pub fn aso_table(report: &EvalReport) -> Vec<AsoRow> {
    let summaries = cell_summaries(&report.rows);
    report
        .config
        .aso
        .iter()
        .map(|cmp| {
            let keep = |k: &CellKey, m: Method| {
                k.detector == m
                    && cmp.noise_model.is_none_or(|n| n == k.noise_model)
                    && cmp.noise_rate.is_none_or(|r| k.noise_rate == format!("{r}"))
                    && cmp.label_source.is_none_or(|l| l == k.label_source)
            };
            let pick = |m: Method| -> Vec<f64> { summaries.iter().filter(|s| keep(&s.key, m)).map(|s| s.median_auroc_id).collect() };
            let (sa, sb) = (pick(cmp.a), pick(cmp.b));
            let filter = format!(
                "noise={} rate={} label_source={}",
                cmp.noise_model.map_or("*", |n| n.tag()),
                cmp.noise_rate.map_or("*".to_string(), |r| format!("{r}")),
                cmp.label_source.map_or("*", |l| l.name())
            );
            let cfg = AsoConfig { alpha: cmp.alpha, n_bootstrap: cmp.n_bootstrap, seed: cmp.seed, ..AsoConfig::default() };
            let eps_min = aso(&sa, &sb, cfg).map(|r| r.eps_min).map_err(|e| e.to_string());
            AsoRow { a: cmp.a, b: cmp.b, filter, n_a: sa.len(), n_b: sb.len(), eps_min }
        })
        .collect()
}

/// Label-independent detectors whose scores differ between label sources;
/// empty when the invariant holds. Also returns how many pairs were checked.
pub fn label_source_violations(report: &EvalReport) -> (usize, Vec<CellKey>) {
    let mut by_key: BTreeMap<CellKey, Option<u32>> = BTreeMap::new();
    for r in &report.records {
        if !r.key.detector.uses_class_labels() && r.failures.is_empty() {
            by_key.insert(r.key.clone(), r.score_digest);
        }
    }
    let mut checked = 0;
    let mut bad = Vec::new();
    for (k, d) in &by_key {
        if k.label_source != LabelSource::Train {
            continue;
        }
        let other = CellKey { label_source: LabelSource::Val, ..k.clone() };
        if let Some(d2) = by_key.get(&other) {
            checked += 1;
            if d != d2 {
                bad.push(k.clone());
            }
        }
    }
    (checked, bad)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn key_fields(k: &CellKey) -> [String; 7] {
    [
        k.dataset_label(),
        k.noise_model.tag().to_string(),
        k.noise_rate.clone(),
        k.seed.to_string(),
        k.checkpoint.name().to_string(),
        k.label_source.name().to_string(),
        k.detector.name().to_string(),
    ]
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut out = ROWS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let mut fields: Vec<String> = key_fields(&r.key).to_vec();
        fields.extend([
            r.ood_set.clone(),
            format!("{}", r.auroc_id),
            opt(r.auroc_correct),
            opt(r.auroc_incorrect),
            r.n_correct.to_string(),
            r.n_incorrect.to_string(),
            r.n_ood.to_string(),
            format!("{}", r.id_accuracy),
        ]);
        out.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn failures_csv(failures: &[Failure]) -> String {
    let mut out = String::from("dataset,noise_model,noise_rate,seed,checkpoint,label_source,detector,ood_set,cause\n");
    for f in failures {
        let mut fields: Vec<String> = key_fields(&f.key).to_vec();
        fields.extend([f.ood_set.clone(), f.cause.clone()]);
        out.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut out = String::from(
        "dataset,noise_model,noise_rate,seed,checkpoint,label_source,detector,median_auroc_id,mean_auroc_id,median_auroc_correct,median_auroc_incorrect,id_accuracy,ood_sets\n",
    );
    for s in summaries {
        let mut fields: Vec<String> = key_fields(&s.key).to_vec();
        fields.extend([
            format!("{}", s.median_auroc_id),
            format!("{}", s.mean_auroc_id),
            opt(s.median_auroc_correct),
            opt(s.median_auroc_incorrect),
            format!("{}", s.id_accuracy),
            s.ood_sets.to_string(),
        ]);
        out.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn hyperparameters_csv(records: &[CellRecord]) -> String {
    let mut out = String::from("dataset,noise_model,noise_rate,seed,checkpoint,label_source,detector,parameter,value\n");
    for r in records {
        for (p, v) in &r.hyperparameters {
            let mut fields: Vec<String> = key_fields(&r.key).to_vec();
            fields.extend([p.clone(), format!("{v}")]);
            out.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
    }
    out
}

fn md_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Best-case, correlation and ASO tables as CSV text and Markdown rows.
fn aggregate_tables(report: &EvalReport) -> (String, String, String, String) {
    let best = best_case_table(report);
    let mut best_csv = String::from("dataset,noise_model,noise_rate,label_source,detector,median_auroc_id,arch,seed,checkpoint\n");
    let mut best_md = Vec::new();
    for b in &best {
        let fields = [
            b.key.dataset.clone(),
            b.key.noise_model.tag().to_string(),
            b.key.noise_rate.clone(),
            b.key.label_source.name().to_string(),
            b.key.detector.name().to_string(),
            format!("{}", b.median_auroc_id),
            b.arch.clone(),
            b.seed.to_string(),
            b.checkpoint.name().to_string(),
        ];
        best_csv.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        best_csv.push('\n');
        let mut md = fields.to_vec();
        md[5] = fmt4(b.median_auroc_id);
        best_md.push(md);
    }

    let corr = correlation_table(report);
    let mut corr_csv = String::from("noise_model,label_source,detector,n,spearman,reason\n");
    let mut corr_md = Vec::new();
    for c in &corr {
        let (rho, reason) = match &c.rho {
            Ok(r) => (format!("{r}"), String::new()),
            Err(e) => (String::new(), e.clone()),
        };
        let fields = [c.noise_model.tag().to_string(), c.label_source.name().to_string(), c.detector.name().to_string(), c.n.to_string(), rho, reason];
        corr_csv.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        corr_csv.push('\n');
        let mut md = fields.to_vec();
        if let Ok(r) = c.rho {
            md[4] = fmt4(r);
        }
        corr_md.push(md);
    }

    let aso_rows = aso_table(report);
    let mut aso_csv = String::from("a,b,filter,n_a,n_b,eps_min,a_better,reason\n");
    let mut aso_md = Vec::new();
    for r in &aso_rows {
        let (eps, better, reason) = match &r.eps_min {
            Ok(e) => (format!("{e}"), (*e < 0.5).to_string(), String::new()),
            Err(e) => (String::new(), String::new(), e.clone()),
        };
        let fields = [r.a.name().to_string(), r.b.name().to_string(), r.filter.clone(), r.n_a.to_string(), r.n_b.to_string(), eps, better, reason];
        aso_csv.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        aso_csv.push('\n');
        let mut md = fields.to_vec();
        if let Ok(e) = r.eps_min {
            md[5] = fmt4(e);
        }
        aso_md.push(md);
    }

    let mut md = format!("# Run `{}`\n\n", report.config.name);
    let _ = writeln!(md, "{} rows, {} failures, {} planned.\n", report.rows.len(), report.failures.len(), report.planned_rows);
    md.push_str("## Best case (max median AUROC over architecture, seed, checkpoint)\n\n");
    md.push_str(&md_table(&["dataset", "noise", "rate", "label source", "detector", "median AUROC", "arch", "seed", "checkpoint"], &best_md));
    md.push_str("\n## Accuracy vs. median AUROC (Spearman)\n\n");
    md.push_str(&md_table(&["noise", "label source", "detector", "n", "rho", "reason"], &corr_md));
    if !aso_md.is_empty() {
        md.push_str("\n## Almost stochastic order\n\n");
        md.push_str(&md_table(&["A", "B", "filter", "n A", "n B", "eps_min", "A better", "reason"], &aso_md));
    }
    let (checked, bad) = label_source_violations(report);
    let _ = writeln!(md, "\n## Label-source check\n\n{checked} label-independent cell pairs compared, {} differ.", bad.len());
    (best_csv, corr_csv, aso_csv, md)
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'a str,
    version: &'a str,
    format_version: u32,
    rows_columns: &'a [&'a str],
    planned_rows: usize,
    rows: usize,
    failures: usize,
    label_source_pairs_checked: usize,
    label_source_violations: usize,
}

pub const OUTPUT_FILES: [&str; 11] = [
    "rows.csv",
    "failures.csv",
    "summary.csv",
    "best_case.csv",
    "correlation.csv",
    "aso.csv",
    "hyperparameters.csv",
    "label_source_check.csv",
    "report.md",
    "config.toml",
    "metadata.json",
];

/// Writes every report file into `dir`.
pub fn emit_reports(report: &EvalReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    let write = |name: &str, text: &str| std::fs::write(dir.join(name), text).map_err(|e| HarnessError::Io(format!("{name}: {e}")));
    write("rows.csv", &rows_csv(&report.rows))?;
    write("failures.csv", &failures_csv(&report.failures))?;
    write("summary.csv", &summary_csv(&cell_summaries(&report.rows)))?;
    let (best, corr, aso_text, md) = aggregate_tables(report);
    write("best_case.csv", &best)?;
    write("correlation.csv", &corr)?;
    write("aso.csv", &aso_text)?;
    write("hyperparameters.csv", &hyperparameters_csv(&report.records))?;
    let (checked, bad) = label_source_violations(report);
    let mut check = String::from("dataset,noise_model,noise_rate,seed,checkpoint,detector\n");
    for k in &bad {
        let f = key_fields(k);
        let fields = [&f[0], &f[1], &f[2], &f[3], &f[4], &f[6]];
        check.push_str(&fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        check.push('\n');
    }
    write("label_source_check.csv", &check)?;
    write("report.md", &md)?;
    write("config.toml", &report.config.to_toml())?;
    let meta = Metadata {
        tool: "noisyood",
        version: env!("CARGO_PKG_VERSION"),
        format_version: FORMAT_VERSION,
        rows_columns: &ROWS_COLUMNS,
        planned_rows: report.planned_rows,
        rows: report.rows.len(),
        failures: report.failures.len(),
        label_source_pairs_checked: checked,
        label_source_violations: bad.len(),
    };
    write("metadata.json", &serde_json::to_string_pretty(&meta).expect("metadata serializes"))?;
    Ok(())
}
