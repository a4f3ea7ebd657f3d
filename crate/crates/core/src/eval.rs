//! Retrieval metrics, the Wilcoxon signed-rank test, and system comparison reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::TypeQuery;
use crate::error::{Error, Result};
use crate::index::{RankedDoc, RankedResult};

pub const SIGNIFICANCE_ALPHA: f64 = 0.05;
/// Largest number of non-zero differences for which p-values are exact.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

fn hits(ranked: &RankedResult, relevant: &BTreeSet<String>, k: usize) -> usize {
    ranked.doc_ids().take(k).filter(|d| relevant.contains(*d)).count()
}

/// Precision at `k = |relevant|`; missing result slots count as misses.
pub fn r_precision(ranked: &RankedResult, relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevant(String::new()));
    }
    Ok(precision_at_k(ranked, relevant, relevant.len()))
}

/// `|top-k ∩ relevant| / k`, with `k` as the denominator even for short rankings.
pub fn precision_at_k(ranked: &RankedResult, relevant: &BTreeSet<String>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    hits(ranked, relevant, k) as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// First sample tends to be larger.
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, which need not be sorted.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        i = j;
    }
    ranks
}

/// Exact null distribution of twice the positive rank sum: `counts[s]` sign
/// patterns reach a doubled sum of `s`.
fn doubled_rank_sum_counts(doubled: &[u64]) -> Vec<u64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("paired samples"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();

    if n <= EXACT_WILCOXON_MAX_N {
        // Average ranks are multiples of 1/2, so doubling makes them integers.
        let doubled: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
        let observed = (w_plus * 2.0).round() as usize;
        let counts = doubled_rank_sum_counts(&doubled);
        let patterns = (1u64 << n) as f64;
        let upper: u64 = counts[observed..].iter().sum();
        let lower: u64 = counts[..=observed].iter().sum();
        let (pg, pl) = (upper as f64 / patterns, lower as f64 / patterns);
        let p_value = match alternative {
            Alternative::Greater => pg,
            Alternative::Less => pl,
            Alternative::TwoSided => (2.0 * pg.min(pl)).min(1.0),
        };
        return Ok(WilcoxonResult {
            statistic: w_plus,
            p_value,
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let normal = Normal::standard();
    // continuity-corrected
    let p_value = match alternative {
        Alternative::Greater => normal.sf((w_plus - mean - 0.5) / sd),
        Alternative::Less => normal.cdf((w_plus - mean + 0.5) / sd),
        Alternative::TwoSided => {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        statistic: w_plus,
        p_value,
        n,
        exact: false,
    })
}

/// One line of a results file: a query and its ranked documents.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    pub ranking: RankedResult,
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    doc_id: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct WireResult {
    query_id: String,
    ranking: Vec<WireEntry>,
}

pub fn write_results<W: Write>(results: &[QueryResult], mut w: W) -> Result<()> {
    for r in results {
        let wire = WireResult {
            query_id: r.query_id.clone(),
            ranking: r
                .ranking
                .iter()
                .map(|d| WireEntry {
                    doc_id: d.doc_id.clone(),
                    score: d.score,
                })
                .collect(),
        };
        let mut line = serde_json::to_vec(&wire).map_err(|e| Error::json(0, e))?;
        line.push(b'\n');
        w.write_all(&line)?;
    }
    Ok(())
}

pub fn read_results<R: BufRead>(reader: R) -> Result<Vec<QueryResult>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: WireResult = serde_json::from_str(&line).map_err(|e| Error::json(i + 1, e))?;
        out.push(QueryResult {
            query_id: w.query_id,
            ranking: RankedResult::new(
                w.ranking
                    .into_iter()
                    .map(|e| RankedDoc {
                        doc_id: e.doc_id,
                        score: e.score,
                        best_span_id: None,
                    })
                    .collect(),
            ),
        });
    }
    Ok(out)
}

pub fn save_results(results: &[QueryResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_results(results, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<QueryResult>> {
    read_results(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    RPrecision,
    PrecisionAt(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::RPrecision => f.write_str("rprec"),
            Metric::PrecisionAt(k) => write!(f, "p@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("rprec") {
            return Ok(Metric::RPrecision);
        }
        s.strip_prefix("p@")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(Metric::PrecisionAt)
            .ok_or_else(|| Error::InvalidParams(format!("unknown metric {s:?}")))
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub fn default_metrics() -> Vec<Metric> {
    vec![Metric::RPrecision, Metric::PrecisionAt(50), Metric::PrecisionAt(200)]
}

impl Metric {
    fn evaluate(&self, ranked: &RankedResult, relevant: &BTreeSet<String>) -> Result<f64> {
        match *self {
            Metric::RPrecision => r_precision(ranked, relevant),
            Metric::PrecisionAt(k) => Ok(precision_at_k(ranked, relevant, k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub num_relevant: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub rows: Vec<QueryRow>,
    pub macro_means: BTreeMap<String, f64>,
}

impl SystemReport {
    pub fn macro_mean(&self, metric: Metric) -> Option<f64> {
        self.macro_means.get(&metric.to_string()).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub system_a: String,
    pub system_b: String,
    pub metric: String,
    pub alternative: Alternative,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<String>,
    pub systems: Vec<SystemReport>,
    pub significance: Vec<SignificanceEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.system == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMode {
    /// Test the best system (by the primary metric) against the runner-up.
    BestVsRunnerUp,
    /// Test the first system against every other one.
    Ablation,
}

pub fn evaluate_system(
    name: &str,
    results: &[QueryResult],
    queries: &[TypeQuery],
    metrics: &[Metric],
) -> Result<SystemReport> {
    let mut by_id: HashMap<&str, &QueryResult> = HashMap::new();
    for r in results {
        if by_id.insert(&r.query_id, r).is_some() {
            return Err(Error::QuerySetMismatch {
                system: name.into(),
                detail: format!("duplicate results for query {:?}", r.query_id),
            });
        }
    }
    let query_ids: BTreeSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    if let Some(extra) = by_id.keys().find(|id| !query_ids.contains(**id)) {
        return Err(Error::QuerySetMismatch {
            system: name.into(),
            detail: format!("results for unknown query {extra:?}"),
        });
    }
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let r = by_id.get(q.query_id.as_str()).ok_or_else(|| Error::QuerySetMismatch {
            system: name.into(),
            detail: format!("no results for query {:?}", q.query_id),
        })?;
        let mut values = BTreeMap::new();
        for m in metrics {
            let v = m.evaluate(&r.ranking, &q.relevant_docs).map_err(|e| match e {
                Error::EmptyRelevant(_) => Error::EmptyRelevant(q.query_id.clone()),
                e => e,
            })?;
            values.insert(m.to_string(), v);
        }
        rows.push(QueryRow {
            query_id: q.query_id.clone(),
            num_relevant: q.relevant_docs.len(),
            metrics: values,
        });
    }
    rows.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let macro_means = metrics
        .iter()
        .map(|m| {
            let name = m.to_string();
            let mean = if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| r.metrics[&name]).sum::<f64>() / rows.len() as f64
            };
            (name, mean)
        })
        .collect();
    Ok(SystemReport {
        system: name.into(),
        rows,
        macro_means,
    })
}

fn paired(a: &SystemReport, b: &SystemReport, metric: &str) -> (Vec<f64>, Vec<f64>) {
    // rows are sorted by query id in both reports
    a.rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| (x.metrics[metric], y.metrics[metric]))
        .unzip()
}

fn significance(a: &SystemReport, b: &SystemReport, metric: &str) -> Result<Option<SignificanceEntry>> {
    if a.rows.is_empty() {
        return Ok(None);
    }
    let (xa, xb) = paired(a, b, metric);
    let w = wilcoxon_signed_rank(&xa, &xb, Alternative::Greater)?;
    Ok(Some(SignificanceEntry {
        system_a: a.system.clone(),
        system_b: b.system.clone(),
        metric: metric.into(),
        alternative: Alternative::Greater,
        statistic: w.statistic,
        p_value: w.p_value,
        alpha: SIGNIFICANCE_ALPHA,
        significant: w.p_value < SIGNIFICANCE_ALPHA,
    }))
}

pub fn compare_systems(
    systems: &[(String, Vec<QueryResult>)],
    queries: &[TypeQuery],
    metrics: &[Metric],
    mode: CompareMode,
) -> Result<EvalReport> {
    if metrics.is_empty() {
        return Err(Error::EmptyInput("metrics"));
    }
    let reports = systems
        .iter()
        .map(|(name, res)| evaluate_system(name, res, queries, metrics))
        .collect::<Result<Vec<_>>>()?;
    let primary = if metrics.contains(&Metric::RPrecision) {
        Metric::RPrecision
    } else {
        metrics[0]
    }
    .to_string();

    let mut sig = Vec::new();
    if reports.len() >= 2 {
        match mode {
            CompareMode::BestVsRunnerUp => {
                let mut order: Vec<usize> = (0..reports.len()).collect();
                order.sort_by(|&i, &j| {
                    reports[j].macro_means[&primary]
                        .total_cmp(&reports[i].macro_means[&primary])
                        .then(i.cmp(&j))
                });
                sig.extend(significance(&reports[order[0]], &reports[order[1]], &primary)?);
            }
            CompareMode::Ablation => {
                for other in &reports[1..] {
                    sig.extend(significance(&reports[0], other, &primary)?);
                }
            }
        }
    }
    Ok(EvalReport {
        metrics: metrics.iter().map(Metric::to_string).collect(),
        systems: reports,
        significance: sig,
        config: None,
    })
}
