//! Bit-packed Hamming retrieval and multi-label mean average precision.
//!
//! Code bit `b` of a row lives in word `b / 64` at bit position `b % 64`
//! and is set iff the code entry is `+1`. Bits past `k` are always zero, so
//! the Hamming distance is a plain popcount of the XOR over whole words.
//!
//! A bank file is an MVHF version-2 block holding the packed words (each
//! `u64` little-endian, `cols` = bytes per row) immediately followed by an
//! MVHF version-1 `u8` block with the aligned label rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::mvhf::{Mvhf, Payload, VERSION_CODES};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// S×k matrix of ±1 code entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryCodes {
    rows: usize,
    k: usize,
    bits: Vec<i8>,
}

impl BinaryCodes {
    pub fn new(rows: usize, k: usize, bits: Vec<i8>) -> Result<Self> {
        if bits.len() != rows * k {
            return Err(Error::Shape(format!(
                "code buffer of length {} cannot hold {rows}x{k}",
                bits.len()
            )));
        }
        if let Some(pos) = bits.iter().position(|&b| b != 1 && b != -1) {
            return Err(Error::Validation(format!(
                "code entry ({}, {}) is {}, expected -1 or +1",
                pos / k.max(1),
                pos % k.max(1),
                bits[pos]
            )));
        }
        Ok(Self { rows, k, bits })
    }

    /// Accepts a real matrix whose entries are exactly ±1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut bits = Vec::with_capacity(t.data().len());
        for (pos, &v) in t.data().iter().enumerate() {
            bits.push(match v {
                1.0 => 1,
                -1.0 => -1,
                _ => {
                    return Err(Error::Validation(format!(
                        "code entry ({}, {}) is {v}, expected -1 or +1",
                        pos / t.cols().max(1),
                        pos % t.cols().max(1)
                    )))
                }
            });
        }
        Self::new(t.rows(), t.cols(), bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.bits[i * self.k..(i + 1) * self.k]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            bits.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            k: self.k,
            bits,
        }
    }
}

pub fn words_per_code(k: usize) -> usize {
    k.div_ceil(64)
}

/// Packed code rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    k: usize,
    words: Vec<u64>,
}

impl PackedCodes {
    /// Adopts raw words, rejecting any set padding bit.
    pub fn from_words(n: usize, k: usize, words: Vec<u64>) -> Result<Self> {
        let wpc = words_per_code(k);
        if words.len() != n * wpc {
            return Err(Error::Shape(format!(
                "{} words cannot hold {n} codes of {k} bits",
                words.len()
            )));
        }
        let tail = k % 64;
        if tail != 0 {
            let pad = !0u64 << tail;
            for i in 0..n {
                if words[(i + 1) * wpc - 1] & pad != 0 {
                    return Err(Error::Validation(format!(
                        "code {i} has bits set beyond k = {k}"
                    )));
                }
            }
        }
        Ok(Self { n, k, words })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let w = words_per_code(self.k);
        &self.words[i * w..(i + 1) * w]
    }

    pub fn unpack(&self) -> BinaryCodes {
        let mut bits = Vec::with_capacity(self.n * self.k);
        for i in 0..self.n {
            let row = self.row(i);
            for b in 0..self.k {
                bits.push(if row[b / 64] >> (b % 64) & 1 == 1 { 1 } else { -1 });
            }
        }
        BinaryCodes {
            rows: self.n,
            k: self.k,
            bits,
        }
    }
}

impl PackedCodes {
    /// Writes a single version-2 MVHF code block: one row per code, each row
    /// the code's little-endian words as bytes.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let wpc = words_per_code(self.k);
        let mut bytes = Vec::with_capacity(self.words.len() * 8);
        for word in &self.words {
            bytes.extend_from_slice(&word.to_le_bytes());
        }
        let block = Mvhf {
            rows: self.n as u64,
            cols: (wpc * 8) as u64,
            k: Some(self.k as u64),
            payload: Payload::U8(bytes),
        };
        block.write_to(&mut w).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let block = Mvhf::read_from(&mut r).map_err(|e| bad(e.to_string()))?;
        let k = block
            .k
            .ok_or_else(|| bad(format!("expected a version {VERSION_CODES} code block")))?
            as usize;
        if block.cols as usize != words_per_code(k) * 8 {
            return Err(bad(format!("row width {} bytes does not match k = {k}", block.cols)));
        }
        let Payload::U8(bytes) = block.payload else {
            return Err(bad("code block must use dtype u8".into()));
        };
        let words = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_words(block.rows as usize, k, words).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }
}

pub fn pack(codes: &BinaryCodes) -> PackedCodes {
    let wpc = words_per_code(codes.k);
    let mut words = vec![0u64; codes.rows * wpc];
    for i in 0..codes.rows {
        let row = &mut words[i * wpc..(i + 1) * wpc];
        for (b, &v) in codes.row(i).iter().enumerate() {
            if v > 0 {
                row[b / 64] |= 1 << (b % 64);
            }
        }
    }
    PackedCodes {
        n: codes.rows,
        k: codes.k,
        words,
    }
}

/// Number of differing bits between two packed codes of equal width.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Bank indices by ascending Hamming distance from `query`, ties by
/// ascending index.
pub fn rank(query: &[u64], k: usize, bank: &PackedCodes) -> Result<Vec<usize>> {
    if k != bank.k {
        return Err(Error::Validation(format!(
            "query has {k} bits, bank has {}",
            bank.k
        )));
    }
    if query.len() != words_per_code(k) {
        return Err(Error::Shape(format!(
            "query has {} words, {k} bits need {}",
            query.len(),
            words_per_code(k)
        )));
    }
    // counting sort on distance keeps equal distances in index order
    let dist: Vec<u32> = (0..bank.n).map(|i| hamming(query, bank.row(i))).collect();
    let mut start = vec![0usize; k + 2];
    for &d in &dist {
        start[d as usize + 1] += 1;
    }
    for i in 1..start.len() {
        start[i] += start[i - 1];
    }
    let mut order = vec![0usize; bank.n];
    for (i, &d) in dist.iter().enumerate() {
        order[start[d as usize]] = i;
        start[d as usize] += 1;
    }
    Ok(order)
}

/// Packed codes with their label rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeBank {
    pub codes: PackedCodes,
    pub labels: Labels,
}

impl CodeBank {
    pub fn new(codes: PackedCodes, labels: Labels) -> Result<Self> {
        if codes.len() != labels.rows() {
            return Err(Error::Validation(format!(
                "{} codes but {} label rows",
                codes.len(),
                labels.rows()
            )));
        }
        Ok(Self { codes, labels })
    }

    pub fn from_codes(codes: &BinaryCodes, labels: Labels) -> Result<Self> {
        Self::new(pack(codes), labels)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn k(&self) -> usize {
        self.codes.k
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.codes.write_to(&mut w)?;
        let labels = Mvhf::matrix(
            self.labels.rows(),
            self.labels.classes(),
            Payload::U8(self.labels.data().to_vec()),
        );
        labels.write_to(&mut w).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: String| Error::format(path, m);
        let packed = PackedCodes::read_from(&mut r, path)?;
        let lm = Mvhf::read_from(&mut r).map_err(|e| bad(format!("label block: {e}")))?;
        let Payload::U8(lbytes) = lm.payload else {
            return Err(bad("label block must use dtype u8".into()));
        };
        let labels = Labels::new(lm.rows as usize, lm.cols as usize, lbytes)?;
        Self::new(packed, labels)
    }
}

/// How many ranked items AP looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Cutoff {
    #[default]
    All,
    Top(usize),
}

impl Cutoff {
    fn resolve(self, n: usize) -> usize {
        match self {
            Cutoff::All => n,
            Cutoff::Top(r) => r.min(n),
        }
    }
}

impl std::str::FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Cutoff::All);
        }
        match s.parse::<usize>() {
            Ok(0) => Err(Error::Config("mAP cutoff must be positive".into())),
            Ok(r) => Ok(Cutoff::Top(r)),
            Err(_) => Err(Error::Config(format!("bad mAP cutoff {s:?}"))),
        }
    }
}

impl Serialize for Cutoff {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cutoff::All => s.serialize_str("all"),
            Cutoff::Top(r) => s.serialize_u64(*r as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Cutoff {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Top(usize),
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == "all" => Ok(Cutoff::All),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("bad cutoff {t:?}"))),
            Raw::Top(r) => Ok(Cutoff::Top(r)),
        }
    }
}

/// AP of one ranked list plus whether any relevant item exists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryAp {
    pub ap: f64,
    pub n_relevant: usize,
}

/// Average precision of `ranking` for a query with label row `query_labels`.
/// An item is relevant iff it shares at least one label with the query. The
/// precision sum over the top `cutoff` ranks is divided by
/// `min(total relevant, cutoff)`; a query with no relevant item scores 0.
pub fn average_precision(ranking: &[usize], query_labels: &[u8], bank_labels: &Labels, cutoff: Cutoff) -> Result<QueryAp> {
    if cutoff == Cutoff::Top(0) {
        return Err(Error::Config("mAP cutoff must be positive".into()));
    }
    if query_labels.len() != bank_labels.classes() {
        return Err(Error::Shape(format!(
            "query has {} classes, bank has {}",
            query_labels.len(),
            bank_labels.classes()
        )));
    }
    let relevant = |i: usize| {
        bank_labels
            .row(i)
            .iter()
            .zip(query_labels)
            .any(|(&a, &b)| a & b == 1)
    };
    let limit = cutoff.resolve(ranking.len());
    let mut total = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &i) in ranking.iter().enumerate() {
        if relevant(i) {
            total += 1;
            if pos < limit {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
            }
        }
    }
    let denom = total.min(limit);
    let ap = if denom == 0 { 0.0 } else { sum / denom as f64 };
    Ok(QueryAp {
        ap,
        n_relevant: total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub cutoff: Cutoff,
    pub per_query_ap: Vec<f64>,
    /// Queries with no relevant bank item (scored as AP 0).
    pub queries_without_relevant: Vec<usize>,
    /// `(R, mean precision over the top R)`
    pub precision_at: Vec<(usize, f64)>,
    pub n_queries: usize,
    pub n_retrieval: usize,
    pub k: usize,
}

impl EvalReport {
    pub fn precision_csv(&self) -> String {
        let mut out = String::from("r,precision\n");
        for (r, p) in &self.precision_at {
            out.push_str(&format!("{r},{p}\n"));
        }
        out
    }
}

fn precision_ranks(n: usize) -> Vec<usize> {
    let mut rs: Vec<usize> = [1, 10, 100, 1000]
        .into_iter()
        .map(|r| r.min(n))
        .filter(|&r| r > 0)
        .collect();
    rs.dedup();
    rs
}

/// mAP of `queries` against `bank`, sharding queries over up to `threads`
/// workers. Results do not depend on the thread count.
pub fn evaluate(queries: &CodeBank, bank: &CodeBank, cutoff: Cutoff, threads: usize) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Validation("no queries to evaluate".into()));
    }
    if queries.k() != bank.k() {
        return Err(Error::Validation(format!(
            "queries have {} bits, bank has {}",
            queries.k(),
            bank.k()
        )));
    }
    if queries.labels.classes() != bank.labels.classes() {
        return Err(Error::Validation(format!(
            "queries have {} classes, bank has {}",
            queries.labels.classes(),
            bank.labels.classes()
        )));
    }
    if cutoff == Cutoff::Top(0) {
        return Err(Error::Config("mAP cutoff must be positive".into()));
    }
    let ranks = precision_ranks(bank.len());
    let one = |q: usize| -> Result<(QueryAp, Vec<usize>)> {
        let order = rank(queries.codes.row(q), queries.k(), &bank.codes)?;
        let qlabels = queries.labels.row(q);
        let ap = average_precision(&order, qlabels, &bank.labels, cutoff)?;
        let mut hits_at = Vec::with_capacity(ranks.len());
        let mut hits = 0;
        let mut next = 0;
        for (pos, &i) in order.iter().enumerate() {
            if next == ranks.len() {
                break;
            }
            if bank.labels.row(i).iter().zip(qlabels).any(|(&a, &b)| a & b == 1) {
                hits += 1;
            }
            if pos + 1 == ranks[next] {
                hits_at.push(hits);
                next += 1;
            }
        }
        Ok((ap, hits_at))
    };

    let nq = queries.len();
    let threads = threads.clamp(1, nq);
    let per: Vec<Result<(QueryAp, Vec<usize>)>> = if threads == 1 {
        (0..nq).map(one).collect()
    } else {
        let chunk = nq.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..nq)
                .step_by(chunk)
                .map(|lo| {
                    let one = &one;
                    s.spawn(move || (lo..(lo + chunk).min(nq)).map(one).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let mut per_query_ap = Vec::with_capacity(nq);
    let mut without = Vec::new();
    let mut hit_sums = vec![0usize; ranks.len()];
    for (q, r) in per.into_iter().enumerate() {
        let (ap, hits) = r?;
        if ap.n_relevant == 0 {
            without.push(q);
        }
        per_query_ap.push(ap.ap);
        for (s, h) in hit_sums.iter_mut().zip(hits) {
            *s += h;
        }
    }
    let map = per_query_ap.iter().sum::<f64>() / nq as f64;
    let precision_at = ranks
        .iter()
        .zip(&hit_sums)
        .map(|(&r, &h)| (r, h as f64 / (r * nq) as f64))
        .collect();
    Ok(EvalReport {
        map,
        cutoff,
        per_query_ap,
        queries_without_relevant: without,
        precision_at,
        n_queries: nq,
        n_retrieval: bank.len(),
        k: bank.k(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codes_from(rows: &[&[i8]]) -> BinaryCodes {
        let k = rows[0].len();
        BinaryCodes::new(rows.len(), k, rows.concat()).unwrap()
    }

    fn single_label(n: usize, classes: usize, f: impl Fn(usize) -> usize) -> Labels {
        let mut data = vec![0u8; n * classes];
        for i in 0..n {
            data[i * classes + f(i)] = 1;
        }
        Labels::new(n, classes, data).unwrap()
    }

    #[test]
    fn all_plus_sets_low_bits() {
        let p = pack(&BinaryCodes::new(1, 16, vec![1; 16]).unwrap());
        assert_eq!(p.words(), &[0xffff]);
    }

    #[test]
    fn wide_codes_cross_word_boundary() {
        let mut bits = vec![-1i8; 128];
        bits[63] = 1;
        bits[64] = 1;
        let p = pack(&BinaryCodes::new(1, 128, bits.clone()).unwrap());
        assert_eq!(p.words(), &[1u64 << 63, 1]);
        assert_eq!(p.unpack().bits(), &bits[..]);
    }

    #[test]
    fn non_binary_entries_are_rejected() {
        assert!(BinaryCodes::new(1, 2, vec![1, 0]).is_err());
        let t = Tensor::from_rows(&[&[1.0, 0.5]]).unwrap();
        assert!(BinaryCodes::from_tensor(&t).is_err());
        assert!(PackedCodes::from_words(1, 4, vec![0x10]).is_err());
    }

    #[test]
    fn hamming_extremes() {
        let a = codes_from(&[&[1, -1, 1, 1, -1], &[-1, 1, -1, -1, 1]]);
        let p = pack(&a);
        assert_eq!(hamming(p.row(0), p.row(0)), 0);
        assert_eq!(hamming(p.row(0), p.row(1)), 5);
    }

    #[test]
    fn rank_puts_self_first_and_breaks_ties_by_index() {
        let bank = pack(&codes_from(&[&[1, 1, 1], &[-1, 1, 1], &[-1, -1, -1], &[1, 1, -1]]));
        let order = rank(bank.row(2), 3, &bank).unwrap();
        assert_eq!(order[0], 2);
        assert_eq!(order, vec![2, 1, 3, 0]);
        let same = pack(&BinaryCodes::new(5, 8, vec![1; 40]).unwrap());
        assert_eq!(rank(same.row(0), 8, &same).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(rank(same.row(0), 16, &same).is_err());
    }

    #[test]
    fn ap_closed_forms() {
        let labels = single_label(10, 2, |i| usize::from(i != 0));
        let q = [1u8, 0];
        let ranking: Vec<usize> = (0..10).collect();
        assert_eq!(average_precision(&ranking, &q, &labels, Cutoff::All).unwrap().ap, 1.0);
        let ranking: Vec<usize> = (1..10).chain([0]).collect();
        let ap = average_precision(&ranking, &q, &labels, Cutoff::All).unwrap().ap;
        assert!((ap - 0.1).abs() < 1e-15);
        let all = single_label(4, 1, |_| 0);
        assert_eq!(average_precision(&[3, 1, 0, 2], &[1], &all, Cutoff::All).unwrap().ap, 1.0);
    }

    #[test]
    fn ap_without_relevant_items_is_zero() {
        let labels = single_label(3, 2, |_| 0);
        let r = average_precision(&[0, 1, 2], &[0, 1], &labels, Cutoff::All).unwrap();
        assert_eq!((r.ap, r.n_relevant), (0.0, 0));
        assert!(average_precision(&[0], &[0, 1], &labels, Cutoff::Top(0)).is_err());
    }

    #[test]
    fn ap_with_cutoff_normalises_by_min() {
        // relevant at ranks 1 and 4 of 5, cutoff 2: (1/1) / min(2, 2)
        let labels = single_label(5, 2, |i| usize::from(!(i == 0 || i == 3)));
        let r = average_precision(&[0, 1, 2, 3, 4], &[1, 0], &labels, Cutoff::Top(2)).unwrap();
        assert_eq!(r.ap, 0.5);
    }

    #[test]
    fn duplicated_queries_score_one() {
        let codes = codes_from(&[&[1, 1, -1, -1], &[-1, -1, 1, 1], &[1, -1, 1, -1]]);
        let bank = CodeBank::from_codes(&codes, single_label(3, 3, |i| i)).unwrap();
        let rep = evaluate(&bank, &bank, Cutoff::All, 2).unwrap();
        assert_eq!(rep.map, 1.0);
        assert_eq!(rep.precision_at, vec![(1, 1.0), (3, 1.0 / 3.0)]);
    }

    #[test]
    fn evaluate_rejects_mismatches() {
        let a = CodeBank::from_codes(&codes_from(&[&[1, -1]]), single_label(1, 2, |_| 0)).unwrap();
        let b = CodeBank::from_codes(&codes_from(&[&[1, -1, 1]]), single_label(1, 2, |_| 0)).unwrap();
        assert!(evaluate(&a, &b, Cutoff::All, 1).is_err());
        let empty = CodeBank::from_codes(&BinaryCodes::new(0, 2, vec![]).unwrap(), Labels::new(0, 2, vec![]).unwrap()).unwrap();
        assert!(evaluate(&empty, &a, Cutoff::All, 1).is_err());
    }

    #[test]
    fn cutoff_parsing_and_json() {
        assert_eq!("all".parse::<Cutoff>().unwrap(), Cutoff::All);
        assert_eq!("50".parse::<Cutoff>().unwrap(), Cutoff::Top(50));
        assert!("0".parse::<Cutoff>().is_err());
        assert_eq!(serde_json::to_string(&Cutoff::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::from_str::<Cutoff>("7").unwrap(), Cutoff::Top(7));
    }

    #[test]
    fn bank_file_round_trip() {
        let codes = BinaryCodes::new(3, 70, (0..210).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect()).unwrap();
        let bank = CodeBank::from_codes(&codes, single_label(3, 4, |i| i)).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bank");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(CodeBank::read(&path).unwrap(), bank);
        std::fs::write(&path, &buf[..buf.len() - 1]).unwrap();
        assert!(CodeBank::read(&path).is_err());
    }

    fn arb_codes(k: usize, n: usize) -> impl Strategy<Value = BinaryCodes> {
        proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], n * k)
            .prop_map(move |bits| BinaryCodes::new(n, k, bits).unwrap())
    }

    proptest! {
        #[test]
        fn pack_unpack_exact(k in prop_oneof![Just(16usize), Just(32), Just(64), Just(128), 1usize..200], n in 0usize..6, seed: u64) {
            let bits: Vec<i8> = (0..n * k).map(|i| if (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1 { 1 } else { -1 }).collect();
            let codes = BinaryCodes::new(n, k, bits).unwrap();
            let p = pack(&codes);
            prop_assert_eq!(p.unpack(), codes);
            let tail = k % 64;
            if tail != 0 {
                for i in 0..n {
                    prop_assert_eq!(p.row(i).last().unwrap() >> tail, 0);
                }
            }
        }

        #[test]
        fn hamming_is_a_metric(c in arb_codes(77, 3)) {
            let p = pack(&c);
            let (a, b, x) = (p.row(0), p.row(1), p.row(2));
            prop_assert_eq!(hamming(a, a), 0);
            prop_assert_eq!(hamming(a, b), hamming(b, a));
            prop_assert!(hamming(a, x) <= hamming(a, b) + hamming(b, x));
            if hamming(a, b) == 0 {
                prop_assert_eq!(c.row(0), c.row(1));
            }
        }

        #[test]
        fn map_ignores_query_order(c in arb_codes(16, 12), perm_seed: u64) {
            let labels = single_label(12, 3, |i| (i * 7 + (perm_seed as usize)) % 3);
            let bank = CodeBank::from_codes(&c.select_rows(&(4..12).collect::<Vec<_>>()), labels.select_rows(&(4..12).collect::<Vec<_>>())).unwrap();
            let q: Vec<usize> = (0..4).collect();
            let mut rev = q.clone();
            rev.reverse();
            let a = evaluate(&CodeBank::from_codes(&c.select_rows(&q), labels.select_rows(&q)).unwrap(), &bank, Cutoff::All, 1).unwrap();
            let b = evaluate(&CodeBank::from_codes(&c.select_rows(&rev), labels.select_rows(&rev)).unwrap(), &bank, Cutoff::All, 3).unwrap();
            prop_assert!((a.map - b.map).abs() < 1e-15);
            prop_assert!(a.per_query_ap.iter().all(|ap| (0.0..=1.0).contains(ap)));
        }
    }
}
