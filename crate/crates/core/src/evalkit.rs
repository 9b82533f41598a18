//! Retrieval metrics and code-health statistics.
//!
//! Two items are relevant when their label sets intersect. AP@k divides by
//! the number of relevant items found within the top k, and a query with no
//! relevant item in its top k scores 0 and still counts toward the mean.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, validation_err, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::retrieval::{PackedCodeSet, RankedList};

/// Per-row class sets. Single-label data stores singleton sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    num_classes: usize,
    multi_label: bool,
    rows: Vec<Vec<u32>>,
}

impl LabelSet {
    pub fn single(num_classes: usize, labels: &[u32]) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(validation_err!("label {bad} is not below {num_classes}"));
        }
        Ok(Self {
            num_classes,
            multi_label: false,
            rows: labels.iter().map(|&l| vec![l]).collect(),
        })
    }

    /// Multi-hot rows. Empty rows are rejected unless `allow_empty`.
    pub fn multi(num_classes: usize, rows: Vec<Vec<u32>>, allow_empty: bool) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.is_empty() && !allow_empty {
                return Err(validation_err!("row {i} has no labels"));
            }
            if let Some(bad) = row.iter().find(|&&l| l as usize >= num_classes) {
                return Err(validation_err!("row {i}: label {bad} is not below {num_classes}"));
            }
            out.push(row);
        }
        Ok(Self {
            num_classes,
            multi_label: true,
            rows: out,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_multi_label(&self) -> bool {
        self.multi_label
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    /// The class of every row, when each row has exactly one.
    pub fn single_labels(&self) -> Option<Vec<u32>> {
        self.rows.iter().map(|r| (r.len() == 1).then(|| r[0])).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            multi_label: self.multi_label,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// Whether two sorted label sets share a class.
pub fn relevant(a: &[u32], b: &[u32]) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("relevance of an empty label set".into()));
    }
    Ok(sorted_intersect(a, b))
}

fn sorted_intersect(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MapAt(usize),
    RecallAt(usize),
}

impl Metric {
    pub fn cutoff(&self) -> usize {
        match *self {
            Metric::MapAt(k) | Metric::RecallAt(k) => k,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, k) = lower
            .split_once('@')
            .ok_or_else(|| config_err!("metric {s:?} must look like map@K or recall@K"))?;
        let k: usize = k
            .replace([',', '_'], "")
            .parse()
            .map_err(|_| config_err!("bad cutoff in metric {s:?}"))?;
        if k == 0 {
            return Err(config_err!("metric cutoff must be at least 1"));
        }
        match name {
            "map" => Ok(Metric::MapAt(k)),
            "recall" => Ok(Metric::RecallAt(k)),
            _ => Err(config_err!("unknown metric {name:?}")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::MapAt(k) => write!(f, "map@{k}"),
            Metric::RecallAt(k) => write!(f, "recall@{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub queries: usize,
    pub per_query: Option<Vec<f64>>,
}

impl MetricReport {
    pub fn k(&self) -> usize {
        self.metric.cutoff()
    }

    /// `metric<TAB>value`.
    pub fn to_line(&self) -> String {
        format!("{}\t{}", self.metric, self.value)
    }

    /// `metric=… k=… value=… queries=…`.
    pub fn to_key_values(&self) -> String {
        format!(
            "metric={} k={} value={} queries={}",
            self.metric,
            self.k(),
            self.value,
            self.queries
        )
    }
}

fn check_inputs(rankings: &RankedList, q_labels: &LabelSet, db_labels: &LabelSet, k: usize) -> Result<()> {
    if k == 0 {
        return Err(config_err!("k must be at least 1"));
    }
    if rankings.queries() != q_labels.len() {
        return Err(validation_err!(
            "{} ranked queries but {} query labels",
            rankings.queries(),
            q_labels.len()
        ));
    }
    if rankings.db_rows != db_labels.len() {
        return Err(validation_err!(
            "rankings over {} items but {} database labels",
            rankings.db_rows,
            db_labels.len()
        ));
    }
    if rankings.queries() == 0 {
        return Err(validation_err!("no queries to evaluate"));
    }
    let depth = k.min(rankings.db_rows);
    for (q, list) in rankings.lists.iter().enumerate() {
        if list.len() < depth {
            return Err(validation_err!(
                "query {q} is ranked to depth {} but k = {k}",
                list.len()
            ));
        }
        if q_labels.row(q).is_empty() {
            return Err(validation_err!("query {q} has no labels"));
        }
    }
    Ok(())
}

/// Relevance flags of the first `k` entries of query `q`.
fn relevance_prefix(rankings: &RankedList, q: usize, q_labels: &LabelSet, db_labels: &LabelSet, k: usize) -> Vec<bool> {
    let ql = q_labels.row(q);
    rankings.lists[q]
        .iter()
        .take(k)
        .map(|n| {
            let dl = db_labels.row(n.index);
            !dl.is_empty() && sorted_intersect(ql, dl)
        })
        .collect()
}

/// Average precision of one relevance pattern.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn map_at_k(
    rankings: &RankedList,
    q_labels: &LabelSet,
    db_labels: &LabelSet,
    k: usize,
    exec: Execution,
) -> Result<MetricReport> {
    check_inputs(rankings, q_labels, db_labels, k)?;
    let per_query = map_indexed(rankings.queries(), exec, |q| {
        average_precision(&relevance_prefix(rankings, q, q_labels, db_labels, k))
    });
    Ok(MetricReport {
        metric: Metric::MapAt(k),
        value: mean(&per_query),
        queries: per_query.len(),
        per_query: Some(per_query),
    })
}

pub fn recall_at_k(
    rankings: &RankedList,
    q_labels: &LabelSet,
    db_labels: &LabelSet,
    k: usize,
    exec: Execution,
) -> Result<MetricReport> {
    check_inputs(rankings, q_labels, db_labels, k)?;
    let per_query = map_indexed(rankings.queries(), exec, |q| {
        if relevance_prefix(rankings, q, q_labels, db_labels, k).contains(&true) {
            1.0
        } else {
            0.0
        }
    });
    Ok(MetricReport {
        metric: Metric::RecallAt(k),
        value: mean(&per_query),
        queries: per_query.len(),
        per_query: Some(per_query),
    })
}

pub fn evaluate(
    metric: Metric,
    rankings: &RankedList,
    q_labels: &LabelSet,
    db_labels: &LabelSet,
    exec: Execution,
) -> Result<MetricReport> {
    match metric {
        Metric::MapAt(k) => map_at_k(rankings, q_labels, db_labels, k, exec),
        Metric::RecallAt(k) => recall_at_k(rankings, q_labels, db_labels, k, exec),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeStats {
    /// Fraction of rows with each bit set.
    pub activation: Vec<f64>,
    /// Binary entropy of each bit's activation rate, in nats.
    pub entropy: Vec<f64>,
    pub mean_entropy: f64,
    pub unique_codes: usize,
    pub rows: usize,
}

impl CodeStats {
    pub fn to_key_values(&self) -> String {
        let (lo, hi) = self
            .activation
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            });
        let rates: Vec<String> = self.activation.iter().map(|r| format!("{r:.4}")).collect();
        format!(
            "rows={} bits={} unique_codes={} mean_bit_entropy={} min_activation={} max_activation={} activation={}",
            self.rows,
            self.activation.len(),
            self.unique_codes,
            self.mean_entropy,
            lo,
            hi,
            rates.join(",")
        )
    }
}

fn binary_entropy(r: f64) -> f64 {
    if r <= 0.0 || r >= 1.0 {
        0.0
    } else {
        -r * r.ln() - (1.0 - r) * (1.0 - r).ln()
    }
}

pub fn code_stats(codes: &PackedCodeSet) -> Result<CodeStats> {
    if codes.is_empty() {
        return Err(validation_err!("code statistics of an empty set"));
    }
    let rows = codes.rows();
    let mut counts = vec![0usize; codes.bits()];
    let mut seen = HashSet::with_capacity(rows);
    for r in 0..rows {
        for (j, c) in counts.iter_mut().enumerate() {
            if codes.bit(r, j) {
                *c += 1;
            }
        }
        seen.insert(codes.row(r));
    }
    let activation: Vec<f64> = counts.iter().map(|&c| c as f64 / rows as f64).collect();
    let entropy: Vec<f64> = activation.iter().map(|&r| binary_entropy(r)).collect();
    Ok(CodeStats {
        mean_entropy: mean(&entropy),
        activation,
        entropy,
        unique_codes: seen.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::DenseMatrix;
    use crate::retrieval::Neighbor;
    use std::f64::consts::LN_2;

    fn ranked(indices: &[usize], db_rows: usize) -> RankedList {
        RankedList {
            db_rows,
            k: indices.len(),
            lists: vec![indices
                .iter()
                .enumerate()
                .map(|(r, &index)| Neighbor { index, score: r as f64 })
                .collect()],
        }
    }

    #[test]
    fn relevance_semantics() {
        assert!(relevant(&[1], &[1]).unwrap());
        assert!(relevant(&[1, 3], &[3, 7]).unwrap());
        assert!(!relevant(&[1], &[2]).unwrap());
        assert!(relevant(&[], &[2]).is_err());
    }

    #[test]
    fn ap_by_hand() {
        assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, true]), 1.0);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    #[test]
    fn map_and_recall_on_tiny_case() {
        let q = LabelSet::single(2, &[0]).unwrap();
        let db = LabelSet::single(2, &[0, 1, 0, 1]).unwrap();
        let r = ranked(&[0, 1, 2, 3], 4);
        let m = map_at_k(&r, &q, &db, 3, Execution::Sequential).unwrap();
        assert!((m.value - 5.0 / 6.0).abs() < 1e-15);
        let rec = recall_at_k(&ranked(&[1, 0], 4), &q, &db, 1, Execution::Sequential).unwrap();
        assert_eq!(rec.value, 0.0);
        let rec = recall_at_k(&ranked(&[1, 0], 4), &q, &db, 2, Execution::Sequential).unwrap();
        assert_eq!(rec.value, 1.0);
        assert!(map_at_k(&r, &q, &db, 0, Execution::Sequential).is_err());
        // depth 2 is not enough for k = 3 over 4 items
        assert!(map_at_k(&ranked(&[0, 1], 4), &q, &db, 3, Execution::Sequential).is_err());
    }

    #[test]
    fn metric_names() {
        assert_eq!("map@1000".parse::<Metric>().unwrap(), Metric::MapAt(1000));
        assert_eq!("mAP@1,000".parse::<Metric>().unwrap(), Metric::MapAt(1000));
        assert_eq!("recall@1".parse::<Metric>().unwrap(), Metric::RecallAt(1));
        assert!("map@0".parse::<Metric>().is_err());
        assert!("ndcg@10".parse::<Metric>().is_err());
    }

    #[test]
    fn stats_of_collapse_and_enumeration() {
        let zeros = PackedCodeSet::from_binary(&DenseMatrix::zeros(5, 4)).unwrap();
        let s = code_stats(&zeros).unwrap();
        assert_eq!(s.activation, vec![0.0; 4]);
        assert_eq!(s.mean_entropy, 0.0);
        assert_eq!(s.unique_codes, 1);
        let all: Vec<Vec<f64>> = (0..16u32)
            .map(|v| (0..4).map(|j| ((v >> j) & 1) as f64).collect())
            .collect();
        let s = code_stats(&PackedCodeSet::from_binary(&DenseMatrix::from_rows(&all)).unwrap()).unwrap();
        assert_eq!(s.activation, vec![0.5; 4]);
        assert!(s.entropy.iter().all(|e| (e - LN_2).abs() < 1e-15));
        assert_eq!(s.unique_codes, 16);
    }

    #[test]
    fn multi_label_guards() {
        assert!(LabelSet::multi(3, vec![vec![0, 2], vec![]], false).is_err());
        assert!(LabelSet::multi(3, vec![vec![0, 2], vec![]], true).is_ok());
        assert!(LabelSet::multi(3, vec![vec![3]], false).is_err());
        assert!(LabelSet::single(2, &[0, 2]).is_err());
    }
}
