//! Filtered ranking metrics over hard answers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::query::QueryType;
use crate::symbolic::AnswerSet;

/// `1 + #{e ∉ all_answers : score(e) > score(answer)}`. Ties count in the
/// answer's favour.
pub fn rank_hard_answer(scores: &[f64], answer: usize, all_answers: &AnswerSet) -> usize {
    let s = scores[answer];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(e, &v)| v > s && !all_answers.contains(e))
        .count()
}

/// Reciprocal rank and hits of one query, averaged over its hard answers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QueryMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl QueryMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return QueryMetrics::default();
        }
        let n = ranks.len() as f64;
        let hit = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        QueryMetrics {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hit(1),
            hits3: hit(3),
            hits10: hit(10),
        }
    }
}

/// Metrics of one query scored against every entity.
pub fn query_metrics(scores: &[f64], targets: &AnswerSet, all_answers: &AnswerSet) -> QueryMetrics {
    let ranks: Vec<usize> = targets
        .iter()
        .map(|a| rank_hard_answer(scores, a, all_answers))
        .collect();
    QueryMetrics::from_ranks(&ranks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeMetrics {
    pub query_type: QueryType,
    pub queries: usize,
    pub metrics: QueryMetrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// In template order.
    pub per_type: Vec<TypeMetrics>,
    /// Records without any target answer.
    pub skipped: usize,
    pub runtime_secs: f64,
}

fn mean_mrr<'a>(rows: impl Iterator<Item = &'a TypeMetrics>) -> f64 {
    let v: Vec<f64> = rows.map(|t| t.metrics.mrr).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    /// Per-type means over the queries of each type (sum then divide).
    pub fn from_queries(results: &[(QueryType, QueryMetrics)], skipped: usize, runtime_secs: f64) -> Self {
        let mut acc: BTreeMap<QueryType, (usize, QueryMetrics)> = BTreeMap::new();
        for (qt, m) in results {
            let e = acc.entry(*qt).or_default();
            e.0 += 1;
            e.1.mrr += m.mrr;
            e.1.hits1 += m.hits1;
            e.1.hits3 += m.hits3;
            e.1.hits10 += m.hits10;
        }
        let per_type = acc
            .into_iter()
            .map(|(qt, (n, s))| {
                let k = n as f64;
                TypeMetrics {
                    query_type: qt,
                    queries: n,
                    metrics: QueryMetrics {
                        mrr: s.mrr / k,
                        hits1: s.hits1 / k,
                        hits3: s.hits3 / k,
                        hits10: s.hits10 / k,
                    },
                }
            })
            .collect();
        EvalReport {
            per_type,
            skipped,
            runtime_secs,
        }
    }

    pub fn get(&self, qt: QueryType) -> Option<&TypeMetrics> {
        self.per_type.iter().find(|t| t.query_type == qt)
    }

    pub fn mrr(&self, qt: QueryType) -> Option<f64> {
        self.get(qt).map(|t| t.metrics.mrr)
    }

    fn mean_over(&self, types: &[QueryType]) -> f64 {
        mean_mrr(self.per_type.iter().filter(|t| types.contains(&t.query_type)))
    }

    /// Mean MRR over the EPFO types present (NaN if none).
    pub fn a_p(&self) -> f64 {
        self.mean_over(&QueryType::EPFO)
    }

    /// Mean MRR over the negation types present (NaN if none).
    pub fn a_n(&self) -> f64 {
        self.mean_over(&QueryType::NEGATION)
    }

    /// Multi-hop average over 2p and 3p.
    pub fn a_m(&self) -> f64 {
        self.mean_over(&[QueryType::P2, QueryType::P3])
    }

    /// Intersection average over 2i and 3i.
    pub fn a_i(&self) -> f64 {
        self.mean_over(&[QueryType::I2, QueryType::I3])
    }

    /// Mean MRR over every type present.
    pub fn mean_all(&self) -> f64 {
        mean_mrr(self.per_type.iter())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,queries,mrr,hits1,hits3,hits10\n");
        for t in &self.per_type {
            let m = t.metrics;
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                t.query_type, t.queries, m.mrr, m.hits1, m.hits3, m.hits10
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Single-row MRR table (percent) over every template, plus A_p and A_n.
    pub fn to_table(&self, label: &str) -> String {
        render_table(&[(label.to_string(), self.clone())])
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{:.1}", 100.0 * x),
        _ => "-".into(),
    }
}

/// MRR table in percent: one row per report, columns 1p..pni, A_p, A_n.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max(5) + 2;
    let mut out = format!("{:<width$}", "model");
    for qt in QueryType::TEMPLATES {
        let _ = write!(out, "{:>6}", qt.as_str());
    }
    let _ = writeln!(out, "{:>6}{:>6}", "A_p", "A_n");
    for (label, r) in rows {
        let _ = write!(out, "{label:<width$}");
        for qt in QueryType::TEMPLATES {
            let _ = write!(out, "{:>6}", fmt_pct(r.mrr(qt)));
        }
        let _ = writeln!(out, "{:>6}{:>6}", fmt_pct(Some(r.a_p())), fmt_pct(Some(r.a_n())));
    }
    out
}

/// Parses the CSV written by [`EvalReport::to_csv`].
pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut per_type = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("bad number"));
        per_type.push(TypeMetrics {
            query_type: cols[0].parse().map_err(|_| bad("bad query type"))?,
            queries: cols[1].trim().parse().map_err(|_| bad("bad count"))?,
            metrics: QueryMetrics {
                mrr: num(cols[2])?,
                hits1: num(cols[3])?,
                hits3: num(cols[4])?,
                hits10: num(cols[5])?,
            },
        });
    }
    Ok(EvalReport {
        per_type,
        skipped: 0,
        runtime_secs: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        let none = AnswerSet::singleton(0);
        assert_eq!(rank_hard_answer(&[0.9, 0.1, 0.5], 0, &none), 1);
        // a=0 is another answer, x=1 a non-answer above, answer=2
        let all = AnswerSet::from_unsorted(vec![0, 2]);
        assert_eq!(rank_hard_answer(&[0.9, 0.95, 0.8], 2, &all), 2);
        assert_eq!(rank_hard_answer(&[0.3; 6], 4, &AnswerSet::singleton(4)), 1);
    }

    #[test]
    fn ranks_one_and_four() {
        let m = QueryMetrics::from_ranks(&[1, 4]);
        assert_eq!(m.mrr, 0.625);
        assert_eq!(m.hits1, 0.5);
        assert_eq!(m.hits3, 0.5);
        assert_eq!(m.hits10, 1.0);
    }

    #[test]
    fn aggregates_are_unweighted_over_types() {
        let mk = |mrr| QueryMetrics {
            mrr,
            ..Default::default()
        };
        let r = EvalReport::from_queries(
            &[
                (QueryType::P1, mk(1.0)),
                (QueryType::P1, mk(0.0)),
                (QueryType::P1, mk(0.5)),
                (QueryType::P2, mk(0.2)),
                (QueryType::In2, mk(0.1)),
            ],
            0,
            0.0,
        );
        assert_eq!(r.mrr(QueryType::P1), Some(0.5));
        assert!((r.a_p() - 0.35).abs() < 1e-15);
        assert!((r.a_n() - 0.1).abs() < 1e-15);
        assert!((r.a_m() - 0.2).abs() < 1e-15);
        assert!(r.a_i().is_nan());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = EvalReport::from_queries(
            &[(QueryType::Pin, QueryMetrics::from_ranks(&[1, 2, 5]))],
            0,
            0.0,
        );
        r.write_csv(&path).unwrap();
        let back = read_report_csv(&path).unwrap();
        assert_eq!(back.per_type.len(), 1);
        assert!((back.mrr(QueryType::Pin).unwrap() - r.mrr(QueryType::Pin).unwrap()).abs() < 1e-6);
        assert!(r.to_table("toy").contains("pin"));
    }

    proptest! {
        #[test]
        fn rank_is_invariant_under_monotone_maps(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..40),
            extra in proptest::collection::vec(0usize..40, 0..5),
            pick in 0usize..40,
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let n = scores.len();
            let answer = pick % n;
            let all = AnswerSet::from_unsorted(extra.iter().map(|e| e % n).chain([answer]).collect());
            let base = rank_hard_answer(&scores, answer, &all);
            let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3).exp()).collect();
            prop_assert_eq!(rank_hard_answer(&affine, answer, &all), base);
            prop_assert_eq!(rank_hard_answer(&cubed, answer, &all), base);
            prop_assert!(base >= 1 && base <= n - all.len() + 1);
        }

        #[test]
        fn metrics_stay_in_range(ranks in proptest::collection::vec(1usize..100, 1..20)) {
            let m = QueryMetrics::from_ranks(&ranks);
            prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
            prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10 && m.hits10 <= 1.0);
            prop_assert!(m.hits1 <= m.mrr);
        }
    }
}
