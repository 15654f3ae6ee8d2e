//! Query datasets and their JSON-lines encoding.
//!
//! One record per line: `{"type": "2in", "form": "((1,(5,)),(2,(6,n)))",
//! "easy_answers": [...], "hard_answers": [...]}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::{parse_expr, to_dnf, DnfQuery, QueryType};
use crate::symbolic::AnswerSet;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub query: DnfQuery,
    pub easy: AnswerSet,
    pub hard: AnswerSet,
}

impl QueryRecord {
    pub fn query_type(&self) -> QueryType {
        self.query.query_type
    }

    /// Easy and hard answers together.
    pub fn all_answers(&self) -> AnswerSet {
        self.easy.union(&self.hard)
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    #[serde(rename = "type")]
    query_type: String,
    form: String,
    easy_answers: Vec<usize>,
    hard_answers: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampledDataset {
    pub records: Vec<QueryRecord>,
}

impl SampledDataset {
    pub fn new(records: Vec<QueryRecord>) -> Self {
        SampledDataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<QueryType, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.query_type()).or_insert(0) += 1;
        }
        out
    }

    pub fn of_type(&self, qt: QueryType) -> impl Iterator<Item = &QueryRecord> {
        self.records.iter().filter(move |r| r.query_type() == qt)
    }

    /// Canonical order: template order, then nested form.
    pub fn sort_canonical(&mut self) {
        self.records.sort_by_cached_key(|r| {
            (
                r.query_type(),
                r.query.to_nested().unwrap_or_default(),
            )
        });
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let raw = RawRecord {
                query_type: r.query_type().to_string(),
                form: r.query.to_nested()?,
                easy_answers: r.easy.to_vec(),
                hard_answers: r.hard.to_vec(),
            };
            let line = serde_json::to_string(&raw).expect("plain struct serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let at = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
            let declared: QueryType = raw.query_type.parse().map_err(|e: Error| at(e.to_string()))?;
            let query = to_dnf(&parse_expr(&raw.form).map_err(|e| at(e.to_string()))?)
                .map_err(|e| at(e.to_string()))?;
            if declared != QueryType::Custom && declared != query.query_type {
                return Err(at(format!(
                    "form {} is a {} query, record says {}",
                    raw.form, query.query_type, declared
                )));
            }
            records.push(QueryRecord {
                query,
                easy: AnswerSet::from_unsorted(raw.easy_answers),
                hard: AnswerSet::from_unsorted(raw.hard_answers),
            });
        }
        Ok(SampledDataset { records })
    }
}

/// Per-type answer statistics (average answer counts).
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerStats {
    pub query_type: QueryType,
    pub queries: usize,
    pub avg_easy: f64,
    pub avg_hard: f64,
}

pub fn answer_stats(ds: &SampledDataset) -> Vec<AnswerStats> {
    let mut acc: BTreeMap<QueryType, (usize, usize, usize)> = BTreeMap::new();
    for r in &ds.records {
        let e = acc.entry(r.query_type()).or_default();
        e.0 += 1;
        e.1 += r.easy.len();
        e.2 += r.hard.len();
    }
    acc.into_iter()
        .map(|(qt, (n, easy, hard))| AnswerStats {
            query_type: qt,
            queries: n,
            avg_easy: easy as f64 / n as f64,
            avg_hard: hard as f64 / n as f64,
        })
        .collect()
}

/// Renders average answer counts as one row under a header of query types.
pub fn render_answer_stats(label: &str, stats: &[AnswerStats], hard: bool) -> String {
    let mut header = format!("{:<12}", "dataset");
    let mut row = format!("{label:<12}");
    for s in stats {
        header.push_str(&format!("{:>7}", s.query_type.as_str()));
        let v = if hard { s.avg_hard } else { s.avg_easy };
        row.push_str(&format!("{v:>7.1}"));
    }
    format!("{header}\n{row}\n")
}
