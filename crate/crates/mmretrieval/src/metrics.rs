//! Offline evaluation: Recall@K plus two relevance proxies.
//!
//! `recall_at_k` is hit-or-miss per case: did the top-K retrieved set touch
//! the target set at all. `p_rel` averages a pluggable query-product
//! relevance score over every retrieved item; `p_cate` averages agreement
//! between the query's intent category and each retrieved product's
//! category. The production relevance model is replaced by a deterministic
//! token-overlap scorer by default.
//!
//! Cases whose retrieved lists have different lengths are normalized
//! per-case by their own retrieved size.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Product, Query};
use crate::error::{Error, Result};

/// One evaluation case: a query, the clicked/purchased target ids, the
/// query's intent category, and (once retrieval has run) the ranked top-K
/// list.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub query: Query,
    pub target_ids: Vec<u64>,
    pub intent: String,
    pub retrieved: Vec<u64>,
}

impl EvalCase {
    pub fn new(query: Query, target_ids: Vec<u64>, intent: String) -> EvalCase {
        EvalCase {
            query,
            target_ids,
            intent,
            retrieved: Vec::new(),
        }
    }
}

/// Line format of an eval-case file: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct CaseRecord {
    query: String,
    targets: Vec<u64>,
    intent: String,
}

/// Read eval cases (without retrieved lists) from a line-delimited file.
pub fn load_cases(path: &Path) -> Result<Vec<EvalCase>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cases = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if rec.targets.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "eval case has an empty target set".into(),
            });
        }
        cases.push(EvalCase::new(Query::parse(&rec.query)?, rec.targets, rec.intent));
    }
    Ok(cases)
}

/// Write eval cases in the same line format.
pub fn save_cases(cases: &[EvalCase], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for c in cases {
        let rec = CaseRecord {
            query: c.query.raw.clone(),
            targets: c.target_ids.clone(),
            intent: c.intent.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Pluggable stand-in for the production relevance model.
pub trait RelevanceScorer {
    /// Query-product relevance in `[0, 1]`.
    fn score(&self, query: &Query, product: &Product) -> f64;

    fn category_of<'a>(&self, product: &'a Product) -> &'a str {
        &product.category
    }

    fn intent_of<'a>(&self, case: &'a EvalCase) -> &'a str {
        &case.intent
    }
}

/// Token-overlap Jaccard between the query tokens and the title tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

impl RelevanceScorer for JaccardScorer {
    fn score(&self, query: &Query, product: &Product) -> f64 {
        use std::collections::BTreeSet;
        let q: BTreeSet<&str> = query.tokens.iter().map(String::as_str).collect();
        let t: BTreeSet<&str> = product.title_tokens.iter().map(String::as_str).collect();
        let inter = q.intersection(&t).count();
        let union = q.union(&t).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Fraction of cases whose retrieved set intersects the target set.
pub fn recall_at_k(cases: &[EvalCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("recall_at_k over an empty case list"));
    }
    let hits = cases
        .iter()
        .filter(|c| c.retrieved.iter().any(|id| c.target_ids.contains(id)))
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Mean relevance score over all retrieved items, normalized per-case by
/// the case's own retrieved size. Cases with nothing retrieved contribute
/// zero.
pub fn p_rel(cases: &[EvalCase], catalog: &Catalog, scorer: &dyn RelevanceScorer) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("p_rel over an empty case list"));
    }
    let mut total = 0.0;
    for case in cases {
        if case.retrieved.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &id in &case.retrieved {
            let product = catalog.get(id).ok_or(Error::UnknownId(id))?;
            let s = scorer.score(&case.query, product);
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!(
                    "relevance score {s} outside [0, 1]"
                )));
            }
            sum += s;
        }
        total += sum / case.retrieved.len() as f64;
    }
    Ok(total / cases.len() as f64)
}

/// Mean intent-category agreement over all retrieved items, normalized like
/// [`p_rel`].
pub fn p_cate(cases: &[EvalCase], catalog: &Catalog, scorer: &dyn RelevanceScorer) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("p_cate over an empty case list"));
    }
    let mut total = 0.0;
    for case in cases {
        if case.retrieved.is_empty() {
            continue;
        }
        let intent = scorer.intent_of(case);
        let mut sum = 0.0;
        for &id in &case.retrieved {
            let product = catalog.get(id).ok_or(Error::UnknownId(id))?;
            if scorer.category_of(product) == intent {
                sum += 1.0;
            }
        }
        total += sum / case.retrieved.len() as f64;
    }
    Ok(total / cases.len() as f64)
}

/// One report row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n_cases: usize,
}

/// Render rows as the report CSV: `metric,K,value,n_cases`.
pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,K,value,n_cases\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{}\n", r.metric, r.k, r.value, r.n_cases));
    }
    out
}
