//! Cosine ranking, retrieval metrics and the input-reduction sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::head::{DescriptorRecord, UNIT_NORM_TOL};

/// One query's ranking of every other record.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub query_label: u32,
    pub ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub relevance: Vec<bool>,
}

impl RankedList {
    /// Number of relevant items in the corpus, query excluded.
    pub fn relevant_total(&self) -> usize {
        self.relevance.iter().filter(|&&r| r).count()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks every record against all others by descending cosine similarity,
/// ties by ascending id. Lists come back in database order.
pub fn rank_all(db: &[DescriptorRecord]) -> Result<Vec<RankedList>> {
    if db.len() < 2 {
        return Err(Error::contract(format!("rank_all needs at least 2 records, got {}", db.len())));
    }
    let dim = db[0].vector.len();
    for r in db {
        if r.vector.len() != dim {
            return Err(Error::shape("rank_all", &[dim], &[r.vector.len()]));
        }
        let norm = dot(&r.vector, &r.vector).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!(
                "descriptor `{}` has norm {norm}, expected 1",
                r.object_id
            )));
        }
    }
    let mut out = Vec::with_capacity(db.len());
    for (q, query) in db.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = db
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != q)
            .map(|(i, r)| (dot(&query.vector, &r.vector), i))
            .collect();
        scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => db[a.1].object_id.cmp(&db[b.1].object_id),
            o => o,
        });
        out.push(RankedList {
            query_id: query.object_id.clone(),
            query_label: query.label,
            ids: scored.iter().map(|&(_, i)| db[i].object_id.clone()).collect(),
            similarities: scored.iter().map(|&(s, _)| s).collect(),
            relevance: scored.iter().map(|&(_, i)| db[i].label == query.label).collect(),
        });
    }
    Ok(out)
}

/// Mean of precision@k over the relevant positions, divided by the total
/// number of relevant items. Zero when nothing is relevant.
pub fn average_precision(list: &RankedList) -> f64 {
    let r = list.relevant_total();
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &rel) in list.relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    acc / r as f64
}

/// F-score over the top N results with N equal to the relevant count.
pub fn f1_at_n(list: &RankedList) -> f64 {
    let r = list.relevant_total();
    if r == 0 {
        return 0.0;
    }
    let hits = list.relevance[..r].iter().filter(|&&x| x).count() as f64;
    let precision = hits / r as f64;
    let recall = hits / r as f64;
    if hits == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Binary-gain NDCG over the top N results with N equal to the relevant count.
pub fn ndcg_at_n(list: &RankedList) -> f64 {
    let r = list.relevant_total();
    if r == 0 {
        return 0.0;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = (0..r).filter(|&i| list.relevance[i]).map(discount).sum();
    let ideal: f64 = (0..r).map(discount).sum();
    dcg / ideal
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub f1: f64,
    pub map: f64,
    pub ndcg: f64,
}

impl Metrics {
    fn of(list: &RankedList) -> Self {
        Metrics {
            f1: f1_at_n(list),
            map: average_precision(list),
            ndcg: ndcg_at_n(list),
        }
    }

    fn mean(items: &[Metrics]) -> Self {
        let n = items.len() as f64;
        Metrics {
            f1: items.iter().map(|m| m.f1).sum::<f64>() / n,
            map: items.iter().map(|m| m.map).sum::<f64>() / n,
            ndcg: items.iter().map(|m| m.ndcg).sum::<f64>() / n,
        }
    }

    fn midpoint(a: Metrics, b: Metrics) -> Self {
        Metrics {
            f1: (a.f1 + b.f1) / 2.0,
            map: (a.map + b.map) / 2.0,
            ndcg: (a.ndcg + b.ndcg) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub label: u32,
    pub queries: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub micro: Metrics,
    pub macro_: Metrics,
    pub micro_macro: Metrics,
    pub per_class: Vec<ClassMetrics>,
}

pub fn aggregate_metrics(lists: &[RankedList]) -> Result<MetricReport> {
    if lists.is_empty() {
        return Err(Error::contract("aggregate_metrics on an empty corpus"));
    }
    let per_query: Vec<Metrics> = lists.iter().map(Metrics::of).collect();
    let micro = Metrics::mean(&per_query);
    let mut by_class: BTreeMap<u32, Vec<Metrics>> = BTreeMap::new();
    for (l, m) in lists.iter().zip(&per_query) {
        by_class.entry(l.query_label).or_default().push(*m);
    }
    let per_class: Vec<ClassMetrics> = by_class
        .into_iter()
        .map(|(label, ms)| ClassMetrics {
            label,
            queries: ms.len(),
            metrics: Metrics::mean(&ms),
        })
        .collect();
    let class_means: Vec<Metrics> = per_class.iter().map(|c| c.metrics).collect();
    let macro_ = Metrics::mean(&class_means);
    Ok(MetricReport {
        micro,
        macro_,
        micro_macro: Metrics::midpoint(micro, macro_),
        per_class,
    })
}

/// Ranks and aggregates in one step.
pub fn evaluate(db: &[DescriptorRecord]) -> Result<MetricReport> {
    aggregate_metrics(&rank_all(db)?)
}

impl MetricReport {
    /// Summary table followed by a blank line and the per-class table.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("setting\tF1@N\tmAP\tNDCG@N\n");
        for (name, m) in [("micro", self.micro), ("macro", self.macro_), ("micro+macro", self.micro_macro)] {
            let _ = writeln!(s, "{name}\t{:.6}\t{:.6}\t{:.6}", m.f1, m.map, m.ndcg);
        }
        s.push_str("\nclass\tqueries\tF1@N\tmAP\tNDCG@N\n");
        for c in &self.per_class {
            let m = c.metrics;
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", c.label, c.queries, m.f1, m.map, m.ndcg);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Views,
    Points,
}

impl SweepAxis {
    pub fn default_grid(self) -> Vec<usize> {
        match self {
            SweepAxis::Views => (1..=6).map(|i| 2 * i).collect(),
            SweepAxis::Points => (1..=8).map(|i| 128 * i).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Views => "views",
            SweepAxis::Points => "points",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "views" => Ok(SweepAxis::Views),
            "points" => Ok(SweepAxis::Points),
            _ => Err(Error::contract(format!("unknown sweep axis `{s}` (views|points)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: usize,
    pub map: f64,
}

/// Evaluates micro mAP for each grid value. `embed(v)` must return the
/// descriptor database with the input reduced to `v` along the axis; values
/// above `full` are rejected before any embedding happens.
pub fn robustness_sweep(
    grid: &[usize],
    full: usize,
    mut embed: impl FnMut(usize) -> Result<Vec<DescriptorRecord>>,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = grid.iter().find(|&&g| g == 0 || g > full) {
        return Err(Error::contract(format!("sweep setting {bad} outside [1, {full}]")));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &g in grid {
        let report = evaluate(&embed(g)?)?;
        rows.push(SweepRow {
            setting: g,
            map: report.micro.map,
        });
    }
    Ok(rows)
}

pub fn sweep_to_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting\tmAP\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.6}", r.setting, r.map);
    }
    s
}
