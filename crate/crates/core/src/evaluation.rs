//! Cross-validated Recall@K comparing plain ranking against filter-then-rank
//! with simple and weighted per-place thresholds.
//!
//! Each run draws one query image per place; thresholds for that run come
//! from its training images only, and every query is matched against all
//! training images. All three methods see the same splits.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Result, VprError};
use crate::retrieval::{rank_position, PlaceDatabase};
use crate::similarity::NormCache;
use crate::store::{Dataset, ImageKey};
use crate::thresholds::{calculate_place_averages, run_record, ThresholdMethod, ThresholdTable};

pub const DEFAULT_RUNS: usize = 50;
pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMethod {
    Baseline,
    SimpleAvg,
    WeightedAvg,
}

impl EvalMethod {
    pub const ALL: [EvalMethod; 3] = [Self::Baseline, Self::SimpleAvg, Self::WeightedAvg];

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::SimpleAvg => "Simple Avg",
            Self::WeightedAvg => "Weighted Avg",
        }
    }

    fn threshold_method(self) -> Option<ThresholdMethod> {
        match self {
            Self::Baseline => None,
            Self::SimpleAvg => Some(ThresholdMethod::SimpleAverage),
            Self::WeightedAvg => Some(ThresholdMethod::WeightedAverage),
        }
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EvalMethod {
    type Err = VprError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| VprError::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub dataset_name: String,
    pub descriptor_name: String,
    pub runs: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
}

impl EvalConfig {
    pub fn new(dataset_name: impl Into<String>, descriptor_name: impl Into<String>) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            descriptor_name: descriptor_name.into(),
            runs: DEFAULT_RUNS,
            seed: 0,
            ks: DEFAULT_KS.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(VprError::InvalidArgument("runs must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(VprError::InvalidArgument("K values must be positive".into()));
        }
        let mut sorted = self.ks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.ks.len() {
            return Err(VprError::InvalidArgument("duplicate K values".into()));
        }
        Ok(())
    }
}

/// Recall of one method, as `(K, percentage)` in the configured K order.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRecall {
    pub method: EvalMethod,
    pub recall_at: Vec<(usize, f64)>,
}

impl MethodRecall {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub dataset: String,
    pub descriptor: String,
    pub runs: usize,
    pub seed: u64,
    pub query_count: usize,
    pub ks: Vec<usize>,
    pub methods: Vec<MethodRecall>,
}

impl RecallReport {
    pub fn method(&self, method: EvalMethod) -> Option<&MethodRecall> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// One [`ReportRow`] per method, the numeric content of the CSV form.
    pub fn rows(&self) -> Vec<ReportRow> {
        self.methods
            .iter()
            .map(|m| ReportRow {
                dataset: self.dataset.clone(),
                descriptor: self.descriptor.clone(),
                method: m.method,
                runs: self.runs,
                seed: self.seed,
                recall_at: m.recall_at.clone(),
            })
            .collect()
    }
}

/// Outcome of one query: its zero-based rank under each method, `None` when
/// the filter removed the true place.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query: ImageKey,
    pub positions: [Option<usize>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_index: usize,
    pub simple: ThresholdTable,
    pub weighted: ThresholdTable,
    pub queries: Vec<QueryOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: RecallReport,
    pub runs: Vec<RunOutcome>,
}

fn threshold_column(place_ids: &[u32], table: &ThresholdTable) -> Result<Vec<f64>> {
    place_ids
        .iter()
        .map(|p| table.get(*p).ok_or(VprError::MissingPlace(*p)))
        .collect()
}

fn evaluate_run(dataset: &Dataset, cache: &NormCache<'_>, seed: u64, run_index: usize) -> Result<RunOutcome> {
    let (split, record) = run_record(dataset, cache, seed, run_index)?;
    let records = std::slice::from_ref(&record);
    let simple = calculate_place_averages(records, &dataset.manifest, ThresholdMethod::SimpleAverage)?;
    let weighted = calculate_place_averages(records, &dataset.manifest, ThresholdMethod::WeightedAverage)?;

    let db = PlaceDatabase::new(
        cache.clone(),
        split.places.iter().map(|(p, _, train)| (*p, train.clone())).collect(),
    )?;
    let place_ids: Vec<u32> = split.places.iter().map(|(p, _, _)| *p).collect();
    let columns = [
        None,
        Some(threshold_column(&place_ids, &simple)?),
        Some(threshold_column(&place_ids, &weighted)?),
    ];
    debug_assert!(EvalMethod::ALL
        .iter()
        .zip(&columns)
        .all(|(m, c)| m.threshold_method().is_some() == c.is_some()));

    let keys = dataset.manifest.entries();
    let queries = split
        .places
        .par_iter()
        .enumerate()
        .map(|(target, (_, test, _))| {
            let best = db.best_similarities(dataset.descriptor(*test))?;
            let positions = std::array::from_fn(|m| {
                rank_position(&place_ids, &best, columns[m].as_deref(), target)
            });
            Ok(QueryOutcome {
                query: keys[*test],
                positions,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RunOutcome {
        run_index,
        simple,
        weighted,
        queries,
    })
}

/// Runs the full cross-validated benchmark.
pub fn evaluate(dataset: &Dataset, config: &EvalConfig) -> Result<Evaluation> {
    config.validate()?;
    let cache = NormCache::new(&dataset.descriptors)?;
    let runs = (0..config.runs)
        .into_par_iter()
        .map(|run| evaluate_run(dataset, &cache, config.seed, run))
        .collect::<Result<Vec<_>>>()?;

    let query_count: usize = runs.iter().map(|r| r.queries.len()).sum();
    let methods = EvalMethod::ALL
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let recall_at = config
                .ks
                .iter()
                .map(|&k| {
                    let hits = runs
                        .iter()
                        .flat_map(|r| &r.queries)
                        .filter(|q| q.positions[m].is_some_and(|pos| pos < k))
                        .count();
                    (k, 100.0 * hits as f64 / query_count as f64)
                })
                .collect();
            MethodRecall { method, recall_at }
        })
        .collect();

    Ok(Evaluation {
        report: RecallReport {
            dataset: config.dataset_name.clone(),
            descriptor: config.descriptor_name.clone(),
            runs: config.runs,
            seed: config.seed,
            query_count,
            ks: config.ks.clone(),
            methods,
        },
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = VprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(VprError::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

pub fn emit_report(report: &RecallReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Text => Ok(text_table(report).into_bytes()),
        ReportFormat::Csv => csv_report(report),
    }
}

const METHOD_WIDTH: usize = 14;
const RECALL_WIDTH: usize = 11;

fn text_table(report: &RecallReport) -> String {
    let ks: Vec<String> = report.ks.iter().map(|k| k.to_string()).collect();
    let mut out = format!(
        "# dataset={} descriptor={} runs={} seed={} ks={} queries={}\n",
        report.dataset,
        report.descriptor,
        report.runs,
        report.seed,
        ks.join(","),
        report.query_count
    );
    let _ = write!(out, "{:<METHOD_WIDTH$}", "Method");
    for k in &report.ks {
        let _ = write!(out, "{:>RECALL_WIDTH$}", format!("Recall@{k}"));
    }
    out.push('\n');
    for m in &report.methods {
        let _ = write!(out, "{:<METHOD_WIDTH$}", m.method.label());
        for (_, r) in &m.recall_at {
            let _ = write!(out, "{r:>RECALL_WIDTH$.2}");
        }
        out.push('\n');
    }
    out
}

fn csv_header(ks: &[usize]) -> Vec<String> {
    ["dataset", "descriptor", "method", "runs", "seed"]
        .iter()
        .map(|s| s.to_string())
        .chain(ks.iter().map(|k| format!("recall_at_{k}")))
        .collect()
}

fn csv_report(report: &RecallReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(&report.ks))?;
    for row in report.rows() {
        let mut rec = vec![
            row.dataset,
            row.descriptor,
            row.method.label().to_string(),
            row.runs.to_string(),
            row.seed.to_string(),
        ];
        rec.extend(row.recall_at.iter().map(|(_, r)| r.to_string()));
        w.write_record(rec)?;
    }
    w.into_inner()
        .map_err(|e| VprError::InvalidArgument(format!("csv flush failed: {e}")))
}

/// One CSV data row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub descriptor: String,
    pub method: EvalMethod,
    pub runs: usize,
    pub seed: u64,
    pub recall_at: Vec<(usize, f64)>,
}

/// Parses the CSV form written by [`emit_report`].
pub fn parse_report_csv(bytes: &[u8]) -> Result<Vec<ReportRow>> {
    let bad = |m: String| VprError::InvalidArgument(format!("report csv: {m}"));
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    let ks = header
        .iter()
        .skip(5)
        .map(|h| {
            h.strip_prefix("recall_at_")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| bad(format!("bad column {h:?}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    if header.len() < 5 || csv_header(&ks) != header.iter().collect::<Vec<_>>() {
        return Err(bad("unexpected header".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| bad(format!("bad number {:?}", &rec[i])))
            };
            Ok(ReportRow {
                dataset: rec[0].to_string(),
                descriptor: rec[1].to_string(),
                method: rec[2].parse()?,
                runs: rec[3].parse().map_err(|_| bad("bad runs".into()))?,
                seed: rec[4].parse().map_err(|_| bad("bad seed".into()))?,
                recall_at: ks
                    .iter()
                    .enumerate()
                    .map(|(i, k)| Ok((*k, num(5 + i)?)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}
