//! Train-and-evaluate loop over datasets and formulations, plus the JSON
//! reports and text tables it produces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{load_dataset, DatasetError, DatasetManifest, LabeledExample, SplitBundle, SplitCounts};
use super::metrics::{aggregate, evaluate, EvalReport, MetricsError, Scope, ScoreRecord};
use crate::pipeline::{FormulationKind, OosSystem, PipelineError, SystemConfig, TrainingData};
use crate::textnorm::{self, EntityLexicon};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{dataset}/{formulation}: {source}")]
    Pipeline {
        dataset: String,
        formulation: FormulationKind,
        source: PipelineError,
    },
    #[error("{dataset}/{formulation}: {source}")]
    Metrics {
        dataset: String,
        formulation: FormulationKind,
        source: MetricsError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Candidate values for the dev-set search of the discounting formulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub blend_weight: Vec<f64>,
    pub oos_penalty: Vec<f64>,
    pub a: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            blend_weight: vec![0.25, 0.5, 0.75],
            oos_penalty: vec![0.0, 0.25, 0.5],
            a: vec![5.0, 10.0, 20.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub formulations: Vec<FormulationKind>,
    pub base: SystemConfig,
    /// Replaces the classifier's shuffle seed when set.
    pub seed: Option<u64>,
    pub sweep: Option<SweepGrid>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            formulations: FormulationKind::ALL.to_vec(),
            base: SystemConfig::default(),
            seed: None,
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepChoice {
    pub blend_weight: f64,
    pub oos_penalty: f64,
    pub a: f64,
    pub dev_overall_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRun {
    pub dataset: String,
    pub group: Option<String>,
    pub formulation: FormulationKind,
    pub counts: SplitCounts,
    pub split_digest: String,
    /// Rows dropped because they normalize to nothing.
    pub skipped_rows: usize,
    pub full: EvalReport,
    /// In-scope plus ID-OOS test queries only.
    pub id_slice: Option<EvalReport>,
    /// In-scope plus OOD-OOS test queries only.
    pub ood_slice: Option<EvalReport>,
    pub sweep: Option<SweepChoice>,
}

#[derive(Debug, Default)]
pub struct BenchSummary {
    pub runs: Vec<DatasetRun>,
    /// Datasets whose files are not present, with the reason.
    pub missing: Vec<(String, String)>,
    pub failed: Vec<(String, String)>,
}

fn usable(rows: &[LabeledExample]) -> (Vec<&LabeledExample>, usize) {
    let kept: Vec<&LabeledExample> = rows.iter().filter(|r| !textnorm::normalize_str(&r.text).is_empty()).collect();
    let dropped = rows.len() - kept.len();
    (kept, dropped)
}

/// In-scope rows keep their intent; every OOS row becomes an OOS example.
pub fn training_data(rows: &[&LabeledExample]) -> TrainingData {
    let mut data = TrainingData::default();
    for r in rows {
        if r.scope == Scope::InScope {
            data.is_examples.push((r.text.clone(), r.intent.clone()));
        } else {
            data.oos_examples.push(r.text.clone());
        }
    }
    data
}

fn score_rows(system: &OosSystem, rows: &[&LabeledExample]) -> Result<Vec<ScoreRecord>, PipelineError> {
    let texts: Vec<&str> = rows.iter().map(|r| r.text.as_str()).collect();
    system
        .predict_batch(&texts)
        .into_iter()
        .zip(rows)
        .map(|(d, r)| {
            let d = d?;
            Ok(ScoreRecord {
                gold_scope: r.scope,
                gold_intent: r.intent.clone(),
                predicted: d.verdict,
                score: d.score,
            })
        })
        .collect()
}

fn slice(records: &[ScoreRecord], oos: Scope) -> Option<Vec<ScoreRecord>> {
    if !records.iter().any(|r| r.gold_scope == oos) {
        return None;
    }
    Some(
        records
            .iter()
            .filter(|r| r.gold_scope == Scope::InScope || r.gold_scope == oos)
            .cloned()
            .collect(),
    )
}

fn sweep_discounting(
    base: &SystemConfig,
    grid: &SweepGrid,
    train: &TrainingData,
    dev: &[&LabeledExample],
) -> Result<Option<(SystemConfig, SweepChoice)>, PipelineError> {
    if dev.is_empty() {
        return Ok(None);
    }
    let mut best: Option<(SystemConfig, SweepChoice)> = None;
    for &lambda in &grid.blend_weight {
        for &c in &grid.oos_penalty {
            let mut cfg = base.clone();
            cfg.scorer.blend_weight = lambda;
            cfg.scorer.oos_penalty = c;
            let mut system = OosSystem::train(train, &cfg, EntityLexicon::default())?;
            for &a in &grid.a {
                let mut comb = cfg.combiner;
                comb.a = a;
                system.set_combiner(comb)?;
                let records = score_rows(&system, dev)?;
                let acc = records
                    .iter()
                    .filter(|r| match r.gold_scope {
                        Scope::InScope => r.predicted.intent() == Some(r.gold_intent.as_str()),
                        _ => r.predicted.is_oos(),
                    })
                    .count() as f64
                    / records.len() as f64;
                // strict improvement keeps the earliest grid point on ties
                if best.as_ref().is_none_or(|(_, b)| acc > b.dev_overall_acc) {
                    let mut chosen = cfg.clone();
                    chosen.combiner = comb;
                    best = Some((
                        chosen,
                        SweepChoice {
                            blend_weight: lambda,
                            oos_penalty: c,
                            a,
                            dev_overall_acc: acc,
                        },
                    ));
                }
            }
        }
    }
    Ok(best)
}

/// Trains on the train split and evaluates on test, once per formulation.
pub fn run_bundle(
    name: &str,
    group: Option<&str>,
    bundle: &SplitBundle,
    options: &BenchOptions,
) -> Result<Vec<DatasetRun>, BenchError> {
    let (train, d1) = usable(&bundle.train);
    let (dev, d2) = usable(&bundle.dev);
    let (test, d3) = usable(&bundle.test);
    let data = training_data(&train);
    let digest = bundle.digest();
    let mut runs = Vec::new();
    for &kind in &options.formulations {
        let wrap = |source| BenchError::Pipeline {
            dataset: name.to_string(),
            formulation: kind,
            source,
        };
        let mut cfg = options.base.clone();
        cfg.formulation = kind;
        if let Some(seed) = options.seed {
            cfg.classifier.shuffle_seed = seed;
        }
        let mut choice = None;
        if let (FormulationKind::Discounting, Some(grid)) = (kind, &options.sweep) {
            if let Some((best, c)) = sweep_discounting(&cfg, grid, &data, &dev).map_err(wrap)? {
                cfg = best;
                choice = Some(c);
            }
        }
        let system = OosSystem::train(&data, &cfg, EntityLexicon::default()).map_err(wrap)?;
        let records = score_rows(&system, &test).map_err(wrap)?;
        let metrics_err = |source| BenchError::Metrics {
            dataset: name.to_string(),
            formulation: kind,
            source,
        };
        let full = evaluate(&records).map_err(metrics_err)?;
        let id_slice = slice(&records, Scope::IdOos).map(|r| evaluate(&r)).transpose().map_err(metrics_err)?;
        let ood_slice = slice(&records, Scope::OodOos).map(|r| evaluate(&r)).transpose().map_err(metrics_err)?;
        runs.push(DatasetRun {
            dataset: name.to_string(),
            group: group.map(str::to_string),
            formulation: kind,
            counts: bundle.counts(),
            split_digest: digest.clone(),
            skipped_rows: d1 + d2 + d3,
            full,
            id_slice,
            ood_slice,
            sweep: choice,
        });
    }
    Ok(runs)
}

/// Manifests (`*.toml`) in `dir`, sorted by file name.
pub fn manifest_paths(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| BenchError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Runs every manifest whose data is present under `data_root`. Datasets
/// with missing files are listed, not fatal; other failures are collected.
pub fn run_manifests(manifests: &[PathBuf], data_root: &Path, options: &BenchOptions) -> BenchSummary {
    let mut summary = BenchSummary::default();
    for path in manifests {
        let label = path.display().to_string();
        let manifest = match DatasetManifest::load(path) {
            Ok(m) => m,
            Err(e) => {
                summary.failed.push((label, e.to_string()));
                continue;
            }
        };
        let bundle = match load_dataset(&manifest, data_root) {
            Ok(b) => b,
            Err(e @ DatasetError::MissingFiles(_)) => {
                summary.missing.push((manifest.name.clone(), e.to_string()));
                continue;
            }
            Err(e) => {
                summary.failed.push((manifest.name.clone(), e.to_string()));
                continue;
            }
        };
        match run_bundle(&manifest.name, manifest.group.as_deref(), &bundle, options) {
            Ok(runs) => summary.runs.extend(runs),
            Err(e) => summary.failed.push((manifest.name.clone(), e.to_string())),
        }
    }
    summary
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tables {
    /// Mean over every dataset, per formulation.
    pub all: Vec<TableRow>,
    /// Mean over the HINT3 group, per formulation.
    pub hint3: Vec<TableRow>,
    /// Mean ID-OOS and OOD-OOS slices, per formulation.
    pub slices: Vec<TableRow>,
}

pub const HINT3_GROUP: &str = "HINT3";

pub fn build_tables(runs: &[DatasetRun]) -> Tables {
    let mut by_kind: BTreeMap<&str, Vec<&DatasetRun>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in runs {
        let k = r.formulation.name();
        if !by_kind.contains_key(k) {
            order.push(k);
        }
        by_kind.entry(k).or_default().push(r);
    }
    let mut tables = Tables {
        all: Vec::new(),
        hint3: Vec::new(),
        slices: Vec::new(),
    };
    for k in order {
        let rs = &by_kind[k];
        let fulls: Vec<EvalReport> = rs.iter().map(|r| r.full.clone()).collect();
        tables.all.push(TableRow {
            label: k.to_string(),
            report: aggregate(&fulls),
        });
        let hint: Vec<EvalReport> = rs
            .iter()
            .filter(|r| r.group.as_deref() == Some(HINT3_GROUP))
            .map(|r| r.full.clone())
            .collect();
        if !hint.is_empty() {
            tables.hint3.push(TableRow {
                label: k.to_string(),
                report: aggregate(&hint),
            });
        }
        for (suffix, pick) in [
            ("ID-OOS", (|r: &DatasetRun| r.id_slice.clone()) as fn(&DatasetRun) -> Option<EvalReport>),
            ("OOD-OOS", |r: &DatasetRun| r.ood_slice.clone()),
        ] {
            let reports: Vec<EvalReport> = rs.iter().filter_map(|r| pick(r)).collect();
            if !reports.is_empty() {
                tables.slices.push(TableRow {
                    label: format!("{k} / {suffix}"),
                    report: aggregate(&reports),
                });
            }
        }
    }
    tables
}

/// Percent with two decimals, or `-` when the metric is undefined.
pub fn format_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * 100.0))
}

pub fn render_table(title: &str, rows: &[TableRow]) -> String {
    let mut head = vec!["".to_string()];
    head.extend(EvalReport::COLUMNS.iter().map(|c| c.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.label.clone()];
            line.extend(r.report.values().iter().map(|v| format_cell(*v)));
            line
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|i| std::iter::once(&head).chain(&body).map(|l| l[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = format!("{title}\n");
    for line in std::iter::once(&head).chain(&body) {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn render_tables(t: &Tables) -> String {
    [
        render_table("All datasets", &t.all),
        render_table("HINT3", &t.hint3),
        render_table("ID-OOS vs OOD-OOS", &t.slices),
    ]
    .join("\n")
}

/// Writes `<dataset>__<formulation>.json` per run plus `tables.json` and
/// `tables.txt`.
pub fn write_reports(out: &Path, summary: &BenchSummary) -> Result<Tables, BenchError> {
    let io = |p: &Path, e: std::io::Error| BenchError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    for r in &summary.runs {
        let safe: String = r
            .dataset
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let p = out.join(format!("{safe}__{}.json", r.formulation.name()));
        let json = serde_json::to_string_pretty(r).expect("run serializes");
        std::fs::write(&p, json).map_err(|e| io(&p, e))?;
    }
    let tables = build_tables(&summary.runs);
    let p = out.join("tables.json");
    std::fs::write(&p, serde_json::to_string_pretty(&tables).expect("tables serialize")).map_err(|e| io(&p, e))?;
    let p = out.join("tables.txt");
    std::fs::write(&p, render_tables(&tables)).map_err(|e| io(&p, e))?;
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(text: &str, intent: &str, scope: Scope) -> LabeledExample {
        LabeledExample {
            text: text.into(),
            intent: intent.into(),
            scope,
        }
    }

    fn bundle() -> SplitBundle {
        let mut train = Vec::new();
        for i in 0..6 {
            train.push(row(&format!("play some music track {i}"), "music", Scope::InScope));
            train.push(row(&format!("set an alarm for {i} am"), "alarm", Scope::InScope));
            train.push(row(&format!("what is the capital of country {i}"), "trivia", Scope::IdOos));
        }
        train.push(row(" \t ", "music", Scope::InScope));
        let test = vec![
            row("play music track please", "music", Scope::InScope),
            row("set alarm for 9 am", "alarm", Scope::InScope),
            row("what is the capital of spain", "trivia", Scope::IdOos),
            row("order a pizza with cheese", "oos", Scope::OodOos),
        ];
        SplitBundle {
            train,
            dev: Vec::new(),
            test,
        }
    }

    #[test]
    fn runs_every_formulation_and_slices() {
        let runs = run_bundle("toy", Some(HINT3_GROUP), &bundle(), &BenchOptions::default()).unwrap();
        assert_eq!(runs.len(), 4);
        for r in &runs {
            assert_eq!(r.skipped_rows, 1);
            assert_eq!(r.full.confusion.unwrap().total(), 4);
            assert_eq!(r.id_slice.as_ref().unwrap().confusion.unwrap().total(), 3);
            assert_eq!(r.ood_slice.as_ref().unwrap().confusion.unwrap().total(), 3);
            assert_eq!(r.full.auroc.is_some(), r.formulation.has_scalar_score());
        }
        let t = build_tables(&runs);
        assert_eq!(t.all.len(), 4);
        assert_eq!(t.hint3.len(), 4);
        assert_eq!(t.slices.len(), 8);
        let text = render_tables(&t);
        assert!(text.contains("k-plus-1"));
        assert!(text.contains("AUROC"));
    }

    #[test]
    fn training_data_routes_scopes() {
        let b = bundle();
        let rows: Vec<&LabeledExample> = b.train.iter().collect();
        let d = training_data(&rows);
        assert_eq!(d.is_examples.len(), 13);
        assert_eq!(d.oos_examples.len(), 6);
    }

    #[test]
    fn cells() {
        assert_eq!(format_cell(None), "-");
        assert_eq!(format_cell(Some(0.91234)), "91.23");
        assert_eq!(format_cell(Some(1.0)), "100.00");
    }

    #[test]
    fn sweep_picks_a_grid_point() {
        let options = BenchOptions {
            formulations: vec![FormulationKind::Discounting],
            sweep: Some(SweepGrid {
                blend_weight: vec![0.5],
                oos_penalty: vec![0.0, 0.25],
                a: vec![10.0],
            }),
            ..Default::default()
        };
        let mut b = bundle();
        b.dev = b.test.clone();
        let runs = run_bundle("toy", None, &b, &options).unwrap();
        let s = runs[0].sweep.unwrap();
        assert!(s.oos_penalty == 0.0 || s.oos_penalty == 0.25);
        assert!((0.0..=1.0).contains(&s.dev_overall_acc));
    }
}
