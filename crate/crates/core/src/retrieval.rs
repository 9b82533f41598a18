//! Packed binary codes and exhaustive top-k search.
//!
//! Four distances are supported, all "lower is closer":
//!
//! | measure  | query side     | database side          |
//! |----------|----------------|------------------------|
//! | Hamming  | hard code      | hard code              |
//! | AH       | probabilities  | hard code              |
//! | BCE      | probabilities  | hard code (as target)  |
//! | symBCE   | probs + code   | probs + code (logits)  |
//!
//! AH is the L1 distance between query bit probabilities and database bits,
//! which reduces to Hamming for binarized queries. Ties in any ranking are
//! broken by ascending database index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{config_err, format_err, shape_err, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::hashcoder::sigmoid;
use crate::numkit::{dot, norm2, DenseMatrix};
use crate::objective::clamp_prob;

/// Row-major bit-packed codes, `ceil(bits/8)` bytes per row, bit `j` at byte
/// `j / 8`, position `j % 8` (LSB first). Padding bits are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedCodeSet {
    rows: usize,
    bits: usize,
    data: Vec<u8>,
    logits: Option<Vec<f32>>,
}

#[inline]
pub fn bytes_per_row(bits: usize) -> usize {
    bits.div_ceil(8)
}

fn padding_mask(bits: usize) -> u8 {
    match bits % 8 {
        0 => 0,
        r => !((1u8 << r) - 1),
    }
}

impl PackedCodeSet {
    /// Wraps already-packed rows, checking lengths and padding.
    pub fn from_packed(rows: usize, bits: usize, data: Vec<u8>, logits: Option<Vec<f32>>) -> Result<Self> {
        if bits == 0 {
            return Err(shape_err!("codes need at least one bit"));
        }
        let stride = bytes_per_row(bits);
        if data.len() != rows * stride {
            return Err(shape_err!(
                "{} payload bytes for {rows} rows of {bits} bits",
                data.len()
            ));
        }
        let mask = padding_mask(bits);
        if mask != 0 {
            for r in 0..rows {
                if data[r * stride + stride - 1] & mask != 0 {
                    return Err(Error::Validation(format!("row {r} has non-zero padding bits")));
                }
            }
        }
        if let Some(l) = &logits {
            if l.len() != rows * bits {
                return Err(shape_err!("{} logits for {rows} rows of {bits} bits", l.len()));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite stored logit".into()));
            }
        }
        Ok(Self {
            rows,
            bits,
            data,
            logits,
        })
    }

    /// Packs a 0/1 (or boolean-like, nonzero = 1) matrix.
    pub fn from_binary(codes: &DenseMatrix) -> Result<Self> {
        let (rows, bits) = codes.shape();
        let stride = bytes_per_row(bits);
        let mut data = vec![0u8; rows * stride];
        for r in 0..rows {
            for (j, &v) in codes.row(r).iter().enumerate() {
                if v != 0.0 {
                    data[r * stride + j / 8] |= 1 << (j % 8);
                }
            }
        }
        Self::from_packed(rows, bits, data, None)
    }

    /// Binarizes logits with `σ(z) ≥ ½`, optionally keeping them (as `f32`)
    /// for symBCE.
    pub fn from_logits(z: &DenseMatrix, keep_logits: bool) -> Result<Self> {
        let (rows, bits) = z.shape();
        let stride = bytes_per_row(bits);
        let mut data = vec![0u8; rows * stride];
        for r in 0..rows {
            for (j, &v) in z.row(r).iter().enumerate() {
                if sigmoid(v) >= 0.5 {
                    data[r * stride + j / 8] |= 1 << (j % 8);
                }
            }
        }
        let logits = keep_logits.then(|| z.as_slice().iter().map(|&v| v as f32).collect());
        Self::from_packed(rows, bits, data, logits)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn stride(&self) -> usize {
        bytes_per_row(self.bits)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn packed(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u8] {
        let s = self.stride();
        &self.data[r * s..(r + 1) * s]
    }

    #[inline]
    pub fn bit(&self, r: usize, j: usize) -> bool {
        self.row(r)[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn has_logits(&self) -> bool {
        self.logits.is_some()
    }

    pub fn logits(&self) -> Option<&[f32]> {
        self.logits.as_deref()
    }

    pub fn logits_row(&self, r: usize) -> Option<&[f32]> {
        self.logits.as_deref().map(|l| &l[r * self.bits..(r + 1) * self.bits])
    }

    pub fn without_logits(mut self) -> Self {
        self.logits = None;
        self
    }

    /// Row `r` as a 0/1 vector.
    pub fn unpack_row(&self, r: usize) -> Vec<f64> {
        (0..self.bits).map(|j| if self.bit(r, j) { 1.0 } else { 0.0 }).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let logits = self.logits.as_ref().map(|_| {
            indices
                .iter()
                .flat_map(|&i| self.logits_row(i).unwrap().iter().copied())
                .collect()
        });
        Self {
            rows: indices.len(),
            bits: self.bits,
            data,
            logits,
        }
    }

    pub fn unique_rows(&self) -> usize {
        (0..self.rows).map(|r| self.row(r)).collect::<HashSet<_>>().len()
    }
}

/// Number of differing bits between two packed codes.
pub fn hamming(a: &[u8], b: &[u8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(shape_err!("codes of {} and {} bytes", a.len(), b.len()));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &[u8], b: &[u8]) -> u32 {
    let mut acc = 0;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        acc += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += (x ^ y).count_ones();
    }
    acc
}

#[inline]
fn code_bit(code: &[u8], j: usize) -> bool {
    code[j / 8] >> (j % 8) & 1 == 1
}

fn check_width(p: &[f64], code: &[u8]) -> Result<()> {
    if bytes_per_row(p.len()) != code.len() {
        return Err(shape_err!("{} query bits against a {}-byte code", p.len(), code.len()));
    }
    Ok(())
}

/// `Σ_j |p_j − y_j|`.
pub fn asym_hamming(p: &[f64], code: &[u8]) -> Result<f64> {
    check_width(p, code)?;
    Ok(ah_score(p, code))
}

#[inline]
fn ah_score(p: &[f64], code: &[u8]) -> f64 {
    p.iter()
        .enumerate()
        .map(|(j, &pj)| if code_bit(code, j) { 1.0 - pj } else { pj })
        .sum()
}

/// `BCE(y, p)` with the database code as target, summed over bits.
pub fn bce_score(p: &[f64], code: &[u8]) -> Result<f64> {
    check_width(p, code)?;
    Ok(bce_against(&LogProbs::new(p), code))
}

/// `½[BCE(y_db, p_q) + BCE(y_q, p_db)]`.
pub fn symbce_score(p_query: &[f64], code_query: &[u8], p_db: &[f64], code_db: &[u8]) -> Result<f64> {
    check_width(p_query, code_db)?;
    check_width(p_db, code_query)?;
    if p_query.len() != p_db.len() {
        return Err(shape_err!("{} vs {} bits", p_query.len(), p_db.len()));
    }
    Ok(symbce(
        &LogProbs::new(p_query),
        code_query,
        &LogProbs::new(p_db),
        code_db,
    ))
}

/// Clamped `ln p` and `ln(1 − p)` per bit.
#[derive(Debug, Clone)]
struct LogProbs {
    on: Vec<f64>,
    off: Vec<f64>,
}

impl LogProbs {
    fn new(p: &[f64]) -> Self {
        let p: Vec<f64> = p.iter().map(|&v| clamp_prob(v)).collect();
        Self {
            on: p.iter().map(|v| v.ln()).collect(),
            off: p.iter().map(|v| (1.0 - v).ln()).collect(),
        }
    }
}

#[inline]
fn bce_against(lp: &LogProbs, code: &[u8]) -> f64 {
    -(0..lp.on.len())
        .map(|j| if code_bit(code, j) { lp.on[j] } else { lp.off[j] })
        .sum::<f64>()
}

#[inline]
fn symbce(q: &LogProbs, q_code: &[u8], db: &LogProbs, db_code: &[u8]) -> f64 {
    0.5 * (bce_against(q, db_code) + bce_against(db, q_code))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Measure {
    Hamming,
    AsymHamming,
    Bce,
    SymBce,
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h" | "hamming" => Ok(Measure::Hamming),
            "ah" | "asym" | "asym-hamming" => Ok(Measure::AsymHamming),
            "bce" => Ok(Measure::Bce),
            "symbce" => Ok(Measure::SymBce),
            other => Err(config_err!("unknown measure {other:?} (expected h, ah, bce or symbce)")),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Hamming => "h",
            Measure::AsymHamming => "ah",
            Measure::Bce => "bce",
            Measure::SymBce => "symbce",
        })
    }
}

/// Query-side logits with probabilities and hard codes derived up front.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    logits: DenseMatrix,
    probs: DenseMatrix,
    codes: PackedCodeSet,
}

impl QueryBatch {
    pub fn from_logits(logits: DenseMatrix) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::Validation("non-finite query logits".into()));
        }
        let probs = crate::hashcoder::probabilities(&logits);
        let codes = PackedCodeSet::from_logits(&logits, false)?;
        Ok(Self { logits, probs, codes })
    }

    /// Queries given directly as bit probabilities. Codes use `p ≥ ½`; the
    /// stored logits are those of the clamped probabilities.
    pub fn from_probabilities(probs: DenseMatrix) -> Result<Self> {
        if probs.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("query probabilities must lie in [0, 1]".into()));
        }
        let codes = PackedCodeSet::from_binary(&crate::hashcoder::binarize(&probs))?;
        let logits = DenseMatrix::from_vec(
            probs.rows(),
            probs.cols(),
            probs
                .as_slice()
                .iter()
                .map(|&p| {
                    let p = clamp_prob(p);
                    (p / (1.0 - p)).ln()
                })
                .collect(),
        )?;
        Ok(Self { logits, probs, codes })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits(&self) -> usize {
        self.probs.cols()
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.logits
    }

    pub fn probabilities(&self) -> &DenseMatrix {
        &self.probs
    }

    pub fn codes(&self) -> &PackedCodeSet {
        &self.codes
    }
}

/// One retrieved database item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub score: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-query neighbors sorted by `(score, index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub db_rows: usize,
    pub k: usize,
    pub lists: Vec<Vec<Neighbor>>,
}

impl RankedList {
    pub fn queries(&self) -> usize {
        self.lists.len()
    }

    /// Tab-separated `query rank index score` lines behind a `#` header.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# rankings queries={} db_rows={} k={}",
            self.lists.len(),
            self.db_rows,
            self.k
        );
        for (q, list) in self.lists.iter().enumerate() {
            for (rank, n) in list.iter().enumerate() {
                let _ = writeln!(out, "{q}\t{rank}\t{}\t{}", n.index, n.score);
            }
        }
        out
    }

    /// Inverse of [`RankedList::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| format_err!("empty rankings input"))?;
        let fields = header
            .strip_prefix("# rankings")
            .ok_or_else(|| format_err!("rankings header missing"))?;
        let mut queries = None;
        let mut db_rows = None;
        let mut k = None;
        for kv in fields.split_whitespace() {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| format_err!("bad header field {kv:?}"))?;
            let value: usize = value.parse().map_err(|_| format_err!("bad header value {kv:?}"))?;
            match key {
                "queries" => queries = Some(value),
                "db_rows" => db_rows = Some(value),
                "k" => k = Some(value),
                _ => {}
            }
        }
        let (queries, db_rows, k) = match (queries, db_rows, k) {
            (Some(q), Some(d), Some(k)) => (q, d, k),
            _ => return Err(format_err!("rankings header needs queries, db_rows and k")),
        };
        let mut lists: Vec<Vec<Neighbor>> = vec![Vec::new(); queries];
        for (lineno, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(format_err!("line {}: expected 4 fields", lineno + 2));
            }
            let bad = || format_err!("line {}: malformed entry", lineno + 2);
            let q: usize = parts[0].parse().map_err(|_| bad())?;
            let rank: usize = parts[1].parse().map_err(|_| bad())?;
            let index: usize = parts[2].parse().map_err(|_| bad())?;
            let score: f64 = parts[3].parse().map_err(|_| bad())?;
            if q >= queries || index >= db_rows || rank != lists[q].len() {
                return Err(bad());
            }
            lists[q].push(Neighbor { index, score });
        }
        Ok(Self { db_rows, k, lists })
    }
}

/// Database codes prepared for one measure.
#[derive(Debug)]
pub struct SearchIndex<'a> {
    codes: &'a PackedCodeSet,
    db_logprobs: Option<Vec<LogProbs>>,
}

impl<'a> SearchIndex<'a> {
    pub fn new(codes: &'a PackedCodeSet, measure: Measure) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Validation("empty database".into()));
        }
        let db_logprobs = if measure == Measure::SymBce {
            let logits = codes.logits().ok_or_else(|| {
                Error::Capability("symBCE needs database logits; re-encode with logits enabled".into())
            })?;
            Some(
                logits
                    .chunks_exact(codes.bits())
                    .map(|row| {
                        let p: Vec<f64> = row.iter().map(|&z| sigmoid(z as f64)).collect();
                        LogProbs::new(&p)
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self { codes, db_logprobs })
    }
}

/// Per-byte score tables: entry `[pos][byte]` is the summed contribution of
/// the bits of that code byte, so a row costs one lookup per byte.
struct ByteTable {
    entries: Vec<[f64; 256]>,
}

impl ByteTable {
    /// `on[j]` is added when bit `j` is set, `off[j]` when it is clear.
    fn new(on: &[f64], off: &[f64]) -> Self {
        let entries = on
            .chunks(8)
            .zip(off.chunks(8))
            .map(|(on, off)| {
                let mut t = [0.0; 256];
                for (byte, slot) in t.iter_mut().enumerate() {
                    *slot = (0..on.len())
                        .map(|b| if byte >> b & 1 == 1 { on[b] } else { off[b] })
                        .sum();
                }
                t
            })
            .collect();
        Self { entries }
    }

    #[inline]
    fn score(&self, code: &[u8]) -> f64 {
        self.entries.iter().zip(code).map(|(t, &c)| t[c as usize]).sum()
    }
}

struct PreparedQuery<'q> {
    code: &'q [u8],
    table: Option<ByteTable>,
}

impl<'q> PreparedQuery<'q> {
    fn new(queries: &'q QueryBatch, q: usize, measure: Measure) -> Self {
        let probs = queries.probs.row(q);
        let table = match measure {
            Measure::Hamming => None,
            Measure::AsymHamming => {
                let on: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
                Some(ByteTable::new(&on, probs))
            }
            Measure::Bce | Measure::SymBce => {
                let lp = LogProbs::new(probs);
                let on: Vec<f64> = lp.on.iter().map(|v| -v).collect();
                let off: Vec<f64> = lp.off.iter().map(|v| -v).collect();
                Some(ByteTable::new(&on, &off))
            }
        };
        Self {
            code: queries.codes.row(q),
            table,
        }
    }

    #[inline]
    fn score(&self, index: &SearchIndex<'_>, measure: Measure, i: usize) -> f64 {
        let db = index.codes.row(i);
        match measure {
            Measure::Hamming => hamming_unchecked(self.code, db) as f64,
            Measure::AsymHamming | Measure::Bce => self.table.as_ref().unwrap().score(db),
            Measure::SymBce => {
                let db_lp = &index.db_logprobs.as_ref().unwrap()[i];
                0.5 * (self.table.as_ref().unwrap().score(db) + bce_against(db_lp, self.code))
            }
        }
    }
}

/// Keeps the `k` smallest neighbors seen so far.
struct TopK {
    k: usize,
    heap: BinaryHeap<Neighbor>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, n: Neighbor) {
        if self.heap.len() < self.k {
            self.heap.push(n);
        } else if let Some(top) = self.heap.peek() {
            if n < *top {
                self.heap.pop();
                self.heap.push(n);
            }
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
}

fn validate_query(index: &SearchIndex<'_>, queries: &QueryBatch, k: usize) -> Result<()> {
    if k == 0 {
        return Err(config_err!("k must be at least 1"));
    }
    if queries.bits() != index.codes.bits() {
        return Err(shape_err!(
            "{}-bit queries against {}-bit codes",
            queries.bits(),
            index.codes.bits()
        ));
    }
    Ok(())
}

/// Exact top-k by exhaustive scan.
pub fn topk(
    codes: &PackedCodeSet,
    queries: &QueryBatch,
    measure: Measure,
    k: usize,
    exec: Execution,
) -> Result<RankedList> {
    topk_sharded(codes, queries, measure, k, codes.rows().max(1), exec)
}

/// Top-k computed per database shard of `shard_rows` and merged. The result
/// is identical for every shard size.
pub fn topk_sharded(
    codes: &PackedCodeSet,
    queries: &QueryBatch,
    measure: Measure,
    k: usize,
    shard_rows: usize,
    exec: Execution,
) -> Result<RankedList> {
    let index = SearchIndex::new(codes, measure)?;
    validate_query(&index, queries, k)?;
    let shard_rows = shard_rows.max(1);
    let rows = codes.rows();
    let lists = map_indexed(queries.len(), exec, |q| {
        let prepared = PreparedQuery::new(queries, q, measure);
        let mut merged = TopK::new(k);
        for start in (0..rows).step_by(shard_rows) {
            let mut local = TopK::new(k);
            for i in start..(start + shard_rows).min(rows) {
                local.offer(Neighbor {
                    index: i,
                    score: prepared.score(&index, measure, i),
                });
            }
            for n in local.into_sorted() {
                merged.offer(n);
            }
        }
        merged.into_sorted()
    });
    Ok(RankedList {
        db_rows: rows,
        k,
        lists,
    })
}

/// Brute-force cosine ranking on raw embeddings, scored as `1 − cos`.
pub fn cosine_topk(db: &DenseMatrix, queries: &DenseMatrix, k: usize, exec: Execution) -> Result<RankedList> {
    if k == 0 {
        return Err(config_err!("k must be at least 1"));
    }
    if db.cols() != queries.cols() {
        return Err(shape_err!(
            "{}-dimensional queries against {}-dimensional database",
            queries.cols(),
            db.cols()
        ));
    }
    let db_norms: Vec<f64> = db.row_iter().map(|r| norm2(r).max(1e-12)).collect();
    let lists = map_indexed(queries.rows(), exec, |q| {
        let qr = queries.row(q);
        let qn = norm2(qr).max(1e-12);
        let mut top = TopK::new(k);
        for (i, dn) in db_norms.iter().enumerate() {
            let cos = dot(qr, db.row(i)) / (qn * dn);
            top.offer(Neighbor {
                index: i,
                score: 1.0 - cos,
            });
        }
        top.into_sorted()
    });
    Ok(RankedList {
        db_rows: db.rows(),
        k,
        lists,
    })
}
