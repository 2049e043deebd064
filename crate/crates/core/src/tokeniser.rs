//! Item ↔ token-tuple codec built from quantised SVD item factors.
//!
//! Each item factor column is min-max normalised to `[0, 1]`, perturbed with
//! a little Gaussian noise, quantised into `v` equal-width bins and shifted
//! into its own token range `[i·v, (i+1)·v)`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::ops::Range;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::linalg::Matrix;
use crate::svd::SvdFactors;

#[derive(Debug, Error)]
pub enum TokeniserError {
    #[error("invalid tokeniser config: {0}")]
    Config(String),
    #[error("factors have {got} columns but tokens_per_item is {want}")]
    RankMismatch { got: usize, want: usize },
    #[error("{items} items cannot be encoded injectively with v^t = {capacity} tuples")]
    Capacity { items: usize, capacity: f64 },
    #[error("{} colliding item pairs remain after {attempts} attempts (first: {:?})", pairs.len(), pairs.first())]
    Collisions { attempts: usize, pairs: Vec<(usize, usize)> },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What to do when two items quantise to the same tuple after every noise redraw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionPolicy {
    /// Abort with the list of colliding pairs.
    #[default]
    Fail,
    /// Keep the lowest item id on the tuple and move the others to the
    /// nearest unused tuple (L1 rings in quantised space, ties by distance
    /// of the bin centre to the item's embedding, then lexicographically).
    NearestFree,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokeniserConfig {
    pub tokens_per_item: usize,
    pub values_per_token: usize,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub max_collision_retries: usize,
    #[serde(default)]
    pub collision_policy: CollisionPolicy,
}

impl TokeniserConfig {
    pub fn new(tokens_per_item: usize, values_per_token: usize) -> Self {
        TokeniserConfig {
            tokens_per_item,
            values_per_token,
            noise_std: 1e-5,
            noise_seed: 0,
            max_collision_retries: 8,
            collision_policy: CollisionPolicy::Fail,
        }
    }

    pub fn validate(&self) -> Result<(), TokeniserError> {
        if self.tokens_per_item < 1 {
            return Err(TokeniserError::Config("tokens_per_item must be >= 1".into()));
        }
        if self.values_per_token < 2 {
            return Err(TokeniserError::Config("values_per_token must be >= 2".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(TokeniserError::Config("noise_std must be positive".into()));
        }
        if self.values_per_token > u32::MAX as usize / self.tokens_per_item {
            return Err(TokeniserError::Config("t·v does not fit in a u32 token id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    OneTokenPerItem,
    MultiTokenPerItem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenisation {
    mode: TokenMode,
    tokens_per_item: usize,
    values_per_token: usize,
    num_items: usize,
    item_to_tokens: Vec<u32>,
    tokens_to_item: HashMap<Vec<u32>, usize>,
    pub noise_seed: u64,
    pub noise_std: f64,
    /// Noise draws used (1 = the first draw was collision-free).
    pub attempts: usize,
    /// Items moved off their quantised tuple by [`CollisionPolicy::NearestFree`].
    pub reassigned: usize,
}

impl Tokenisation {
    /// Identity encoding: item `i` is token `i`.
    pub fn one_token_per_item(num_items: usize) -> Self {
        let item_to_tokens: Vec<u32> = (0..num_items as u32).collect();
        let tokens_to_item = (0..num_items).map(|i| (vec![i as u32], i)).collect();
        Tokenisation {
            mode: TokenMode::OneTokenPerItem,
            tokens_per_item: 1,
            values_per_token: num_items,
            num_items,
            item_to_tokens,
            tokens_to_item,
            noise_seed: 0,
            noise_std: 0.0,
            attempts: 0,
            reassigned: 0,
        }
    }

    /// Multi-token codec from an explicit `num_items × t` table of offset tokens.
    pub fn from_table(
        tokens_per_item: usize,
        values_per_token: usize,
        item_to_tokens: Vec<u32>,
    ) -> Result<Self, TokeniserError> {
        let t = tokens_per_item;
        if t == 0 || item_to_tokens.len() % t != 0 {
            return Err(TokeniserError::Config("table length is not a multiple of t".into()));
        }
        let num_items = item_to_tokens.len() / t;
        let mut tokens_to_item = HashMap::with_capacity(num_items);
        let mut pairs = Vec::new();
        for (item, tuple) in item_to_tokens.chunks(t).enumerate() {
            for (pos, &tok) in tuple.iter().enumerate() {
                let lo = (pos * values_per_token) as u32;
                if tok < lo || tok >= lo + values_per_token as u32 {
                    return Err(TokeniserError::Config(format!(
                        "item {item}: token {tok} outside range of position {pos}"
                    )));
                }
            }
            if let Some(&first) = tokens_to_item.get(tuple) {
                pairs.push((first, item));
            } else {
                tokens_to_item.insert(tuple.to_vec(), item);
            }
        }
        if !pairs.is_empty() {
            return Err(TokeniserError::Collisions { attempts: 0, pairs });
        }
        Ok(Tokenisation {
            mode: TokenMode::MultiTokenPerItem,
            tokens_per_item: t,
            values_per_token,
            num_items,
            item_to_tokens,
            tokens_to_item,
            noise_seed: 0,
            noise_std: 0.0,
            attempts: 0,
            reassigned: 0,
        })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn is_one_token(&self) -> bool {
        self.mode == TokenMode::OneTokenPerItem
    }

    pub fn tokens_per_item(&self) -> usize {
        self.tokens_per_item
    }

    pub fn values_per_token(&self) -> usize {
        self.values_per_token
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn vocab_size(&self) -> usize {
        match self.mode {
            TokenMode::OneTokenPerItem => self.num_items,
            TokenMode::MultiTokenPerItem => self.tokens_per_item * self.values_per_token,
        }
    }

    /// Token ids allowed at tuple position `pos` (0-based).
    pub fn position_range(&self, pos: usize) -> Range<usize> {
        match self.mode {
            TokenMode::OneTokenPerItem => 0..self.num_items,
            TokenMode::MultiTokenPerItem => {
                pos * self.values_per_token..(pos + 1) * self.values_per_token
            }
        }
    }

    pub fn encode(&self, item: usize) -> Option<&[u32]> {
        if item >= self.num_items {
            return None;
        }
        let t = self.tokens_per_item;
        Some(&self.item_to_tokens[item * t..(item + 1) * t])
    }

    pub fn decode(&self, tuple: &[u32]) -> Option<usize> {
        self.tokens_to_item.get(tuple).copied()
    }

    const MAGIC: [u8; 4] = *b"GRTK";
    const VERSION: u32 = 1;

    pub fn write<W: Write>(&self, w: W) -> Result<(), TokeniserError> {
        let mut w = BinWriter::new(w);
        w.header(Self::MAGIC, Self::VERSION)?;
        w.u8(match self.mode {
            TokenMode::OneTokenPerItem => 0,
            TokenMode::MultiTokenPerItem => 1,
        })?;
        w.u32(self.tokens_per_item as u32)?;
        w.u32(self.values_per_token as u32)?;
        w.u64(self.num_items as u64)?;
        w.u64(self.noise_seed)?;
        w.f64(self.noise_std)?;
        w.u32(self.attempts as u32)?;
        w.u64(self.reassigned as u64)?;
        for &tok in &self.item_to_tokens {
            w.u32(tok)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, TokeniserError> {
        let mut r = BinReader::new(r);
        r.header(Self::MAGIC, Self::VERSION)?;
        let mode = r.u8()?;
        let t = r.u32()? as usize;
        let v = r.u32()? as usize;
        let num_items = r.len_u64()?;
        let noise_seed = r.u64()?;
        let noise_std = r.f64()?;
        let attempts = r.u32()? as usize;
        let reassigned = r.len_u64()?;
        let table = (0..num_items * t).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        let mut tok = match mode {
            0 => {
                let tok = Tokenisation::one_token_per_item(num_items);
                if table != tok.item_to_tokens {
                    return Err(FormatError::Corrupt("one-token table is not the identity".into()).into());
                }
                tok
            }
            1 => Tokenisation::from_table(t, v, table)?,
            m => return Err(FormatError::Corrupt(format!("unknown mode {m}")).into()),
        };
        tok.noise_seed = noise_seed;
        tok.noise_std = noise_std;
        tok.attempts = attempts;
        tok.reassigned = reassigned;
        Ok(tok)
    }
}

/// Normalised item factors plus the columns that were constant.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalisedFactors {
    pub values: Matrix,
    pub degenerate_columns: Vec<usize>,
}

/// Per-column min-max normalisation, Gaussian noise, clamp to `[0, 1]`.
///
/// Constant columns become 0.5 before noise and are reported as degenerate.
pub fn normalise_and_noise(e: &Matrix, noise_std: f64, seed: u64) -> NormalisedFactors {
    assert!(e.cols >= 1, "need at least one column");
    let mut out = e.clone();
    let mut degenerate_columns = Vec::new();
    for c in 0..e.cols {
        let col = e.column(c);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let span = hi - lo;
            for r in 0..e.rows {
                out[(r, c)] = (e[(r, c)] - lo) / span;
            }
        } else {
            degenerate_columns.push(c);
            for r in 0..e.rows {
                out[(r, c)] = 0.5;
            }
        }
    }
    if !degenerate_columns.is_empty() {
        warn!("degenerate (constant) embedding columns: {degenerate_columns:?}");
    }
    let normal = Normal::new(0.0, noise_std).expect("noise_std must be finite and positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.data.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    NormalisedFactors {
        values: out,
        degenerate_columns,
    }
}

/// Equal-width bin of `x ∈ [0, 1]` among `v` bins, upper edge clamped.
pub fn quantise_value(x: f64, v: usize) -> u32 {
    ((x * v as f64).floor() as usize).min(v - 1) as u32
}

/// Row-major bin indices of a normalised matrix.
pub fn quantise(x: &Matrix, v: usize) -> Vec<u32> {
    x.data.iter().map(|&val| quantise_value(val, v)).collect()
}

/// Shifts column `i` of a row-major `cols`-wide table by `i·v`.
pub fn offset_tokens(q: &[u32], cols: usize, v: usize) -> Vec<u32> {
    q.iter()
        .enumerate()
        .map(|(idx, &b)| b + ((idx % cols) * v) as u32)
        .collect()
}

fn colliding_pairs(q: &[u32], t: usize) -> Vec<(usize, usize)> {
    let mut first: HashMap<&[u32], usize> = HashMap::new();
    let mut pairs = Vec::new();
    for (item, tuple) in q.chunks(t).enumerate() {
        match first.get(tuple) {
            Some(&f) => pairs.push((f, item)),
            None => {
                first.insert(tuple, item);
            }
        }
    }
    pairs
}

/// Offsets with L1 norm exactly `radius`, in lexicographic order.
fn l1_sphere(dims: usize, radius: i64, out: &mut Vec<Vec<i64>>) {
    fn rec(dims: usize, left: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if cur.len() + 1 == dims {
            let mut last = vec![-left];
            if left != 0 {
                last.push(left);
            }
            for x in last {
                cur.push(x);
                out.push(cur.clone());
                cur.pop();
            }
            return;
        }
        for x in -left..=left {
            cur.push(x);
            rec(dims, left - x.abs(), cur, out);
            cur.pop();
        }
    }
    rec(dims, radius, &mut Vec::with_capacity(dims), out);
}

/// Moves every item whose tuple is taken to the nearest free tuple.
fn repair_collisions(points: &Matrix, q: &mut [u32], t: usize, v: usize) -> usize {
    let mut taken: HashSet<Vec<u32>> = HashSet::with_capacity(points.rows);
    let mut pending = Vec::new();
    for (item, tuple) in q.chunks(t).enumerate() {
        if !taken.insert(tuple.to_vec()) {
            pending.push(item);
        }
    }
    let mut sphere = Vec::new();
    for &item in &pending {
        let origin: Vec<i64> = q[item * t..(item + 1) * t].iter().map(|&b| b as i64).collect();
        let x = points.row(item);
        let mut radius = 1;
        let chosen = loop {
            sphere.clear();
            l1_sphere(t, radius, &mut sphere);
            let mut best: Option<(f64, Vec<u32>)> = None;
            for off in &sphere {
                let cand: Option<Vec<u32>> = origin
                    .iter()
                    .zip(off)
                    .map(|(&o, &d)| {
                        let b = o + d;
                        (0..v as i64).contains(&b).then_some(b as u32)
                    })
                    .collect();
                let Some(cand) = cand else { continue };
                if taken.contains(&cand) {
                    continue;
                }
                let dist: f64 = cand
                    .iter()
                    .zip(x)
                    .map(|(&b, &xi)| {
                        let centre = (b as f64 + 0.5) / v as f64;
                        (centre - xi) * (centre - xi)
                    })
                    .sum();
                if best.as_ref().is_none_or(|(d, c)| dist < *d || (dist == *d && cand < *c)) {
                    best = Some((dist, cand));
                }
            }
            if let Some((_, cand)) = best {
                break cand;
            }
            radius += 1;
        };
        q[item * t..(item + 1) * t].copy_from_slice(&chosen);
        taken.insert(chosen);
    }
    pending.len()
}

/// SVD tokenisation of every item in `factors.item_factors`.
pub fn svd_tokenise(factors: &SvdFactors, cfg: &TokeniserConfig) -> Result<Tokenisation, TokeniserError> {
    cfg.validate()?;
    let (t, v) = (cfg.tokens_per_item, cfg.values_per_token);
    let e = &factors.item_factors;
    if e.cols != t {
        return Err(TokeniserError::RankMismatch { got: e.cols, want: t });
    }
    let capacity = (v as f64).powi(t as i32);
    if e.rows as f64 > capacity {
        return Err(TokeniserError::Capacity {
            items: e.rows,
            capacity,
        });
    }

    // (collisions, attempt, normalised points, bins)
    let mut best: Option<(usize, usize, Matrix, Vec<u32>)> = None;
    for attempt in 0..=cfg.max_collision_retries {
        let seed = cfg.noise_seed.wrapping_add(attempt as u64);
        let norm = normalise_and_noise(e, cfg.noise_std, seed);
        let q = quantise(&norm.values, v);
        let n = colliding_pairs(&q, t).len();
        if best.as_ref().is_none_or(|(b, ..)| n < *b) {
            best = Some((n, attempt, norm.values, q));
        }
        if n == 0 {
            break;
        }
    }
    let (n_collisions, attempt, points, mut q) = best.expect("at least one attempt");
    let attempts = cfg.max_collision_retries + 1;
    let mut reassigned = 0;
    if n_collisions > 0 {
        match cfg.collision_policy {
            CollisionPolicy::Fail => {
                return Err(TokeniserError::Collisions {
                    attempts,
                    pairs: colliding_pairs(&q, t),
                })
            }
            CollisionPolicy::NearestFree => {
                reassigned = repair_collisions(&points, &mut q, t, v);
                info!("reassigned {reassigned} colliding items to nearest free tuples");
            }
        }
    }
    let table = offset_tokens(&q, t, v);
    let mut tok = Tokenisation::from_table(t, v, table)?;
    tok.noise_seed = cfg.noise_seed.wrapping_add(attempt as u64);
    tok.noise_std = cfg.noise_std;
    tok.attempts = attempt + 1;
    tok.reassigned = reassigned;
    Ok(tok)
}

/// Catalogue sizes of the six datasets in the reference memory table.
pub const REFERENCE_DATASETS: [(&str, u64); 6] = [
    ("MovieLens-1M", 3_416),
    ("MovieLens-20M", 138_493),
    ("Yelp", 150_346),
    ("Gowalla", 1_280_969),
    ("Amazon Books", 5_264_307),
    ("LastFM-1b", 32_291_134),
];

/// The nine (t, v) configurations of the reference memory table.
pub const REFERENCE_CONFIGS: [(u64, u64); 9] = [
    (2, 128),
    (2, 512),
    (2, 2048),
    (4, 128),
    (4, 512),
    (4, 2048),
    (8, 128),
    (8, 512),
    (8, 2048),
];

const MIB: f64 = 1024.0 * 1024.0;
const GIB: f64 = 1024.0 * MIB;

/// `12.34 MB` below 1 GiB, `1.23 GB` from there on (binary units).
pub fn format_bytes(bytes: u64) -> String {
    let b = bytes as f64;
    if b >= GIB {
        format!("{:.2} GB", b / GIB)
    } else {
        format!("{:.2} MB", b / MIB)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCell {
    pub tokens_per_item: u64,
    pub values_per_token: u64,
    pub embeddings: u64,
    pub bytes: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub dataset: String,
    pub num_items: u64,
    pub one_token_bytes: u64,
    pub cells: Vec<MemoryCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub embed_dim: u64,
    pub bytes_per_value: u64,
    pub rows: Vec<MemoryRow>,
}

pub fn memory_report(
    datasets: &[(String, u64)],
    embed_dim: u64,
    bytes_per_value: u64,
    configs: &[(u64, u64)],
) -> MemoryReport {
    let per_embedding = embed_dim * bytes_per_value;
    let rows = datasets
        .iter()
        .map(|(name, num_items)| {
            let one_token_bytes = num_items * per_embedding;
            let cells = configs
                .iter()
                .map(|&(t, v)| {
                    let embeddings = t * v;
                    let bytes = embeddings * per_embedding;
                    MemoryCell {
                        tokens_per_item: t,
                        values_per_token: v,
                        embeddings,
                        bytes,
                        percent: bytes as f64 / one_token_bytes as f64 * 100.0,
                    }
                })
                .collect();
            MemoryRow {
                dataset: name.clone(),
                num_items: *num_items,
                one_token_bytes,
                cells,
            }
        })
        .collect();
    MemoryReport {
        embed_dim,
        bytes_per_value,
        rows,
    }
}

fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl MemoryReport {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["Dataset".to_string(), "Num Items".into(), "One-token".into()];
        if let Some(row) = self.rows.first() {
            for c in &row.cells {
                h.push(format!(
                    "t={} v={} ({} embs; {})",
                    c.tokens_per_item,
                    c.values_per_token,
                    c.embeddings,
                    format_bytes(c.bytes)
                ));
            }
        }
        h
    }

    /// Display strings of every row: name, item count, one-token size, percentages.
    pub fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut v = vec![r.dataset.clone(), thousands(r.num_items), format_bytes(r.one_token_bytes)];
                v.extend(r.cells.iter().map(|c| format!("{:.3}%", c.percent)));
                v
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let body = self.cells();
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,num_items,one_token_bytes,one_token_display,t,v,embeddings,bytes,bytes_display,percent\n",
        );
        for r in &self.rows {
            for c in &r.cells {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{:.3}",
                    r.dataset,
                    r.num_items,
                    r.one_token_bytes,
                    format_bytes(r.one_token_bytes),
                    c.tokens_per_item,
                    c.values_per_token,
                    c.embeddings,
                    c.bytes,
                    format_bytes(c.bytes),
                    c.percent
                );
            }
        }
        out
    }
}

/// The reference table: six datasets × nine configurations, 256 float32 per embedding.
pub fn reference_memory_report() -> MemoryReport {
    let datasets: Vec<(String, u64)> = REFERENCE_DATASETS
        .iter()
        .map(|&(n, i)| (n.to_string(), i))
        .collect();
    memory_report(&datasets, 256, 4, &REFERENCE_CONFIGS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalisation_examples() {
        let e = Matrix::from_vec(3, 2, vec![2.0, 3.0, 4.0, 3.0, 6.0, 3.0]);
        let n = normalise_and_noise(&e, 1e-12, 0);
        let col0 = n.values.column(0);
        for (got, want) in col0.iter().zip([0.0, 0.5, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        for got in n.values.column(1) {
            assert!((got - 0.5).abs() < 1e-9);
        }
        assert_eq!(n.degenerate_columns, vec![1]);
    }

    #[test]
    fn noise_is_small_deterministic_and_clamped() {
        let e = Matrix::from_vec(1000, 1, (0..1000).map(|i| i as f64).collect());
        let a = normalise_and_noise(&e, 1e-5, 7);
        let b = normalise_and_noise(&e, 1e-5, 7);
        assert_eq!(a, b);
        for (i, v) in a.values.data.iter().enumerate() {
            assert!((0.0..=1.0).contains(v));
            assert!((v - i as f64 / 999.0).abs() < 1e-4);
        }
    }

    #[test]
    fn quantiser_edges() {
        assert_eq!(quantise_value(0.0, 128), 0);
        assert_eq!(quantise_value(1.0, 128), 127);
        assert_eq!(quantise_value(0.5, 2), 1);
        assert_eq!(quantise_value(0.499_999, 2), 0);
    }

    #[test]
    fn offsets() {
        assert_eq!(offset_tokens(&[3, 5], 2, 128), vec![3, 133]);
        assert_eq!(offset_tokens(&[0, 0, 0], 3, 512), vec![0, 512, 1024]);
        let out = offset_tokens(&[7, 9, 1, 4, 5, 6], 3, 10);
        for (idx, k) in out.iter().enumerate() {
            assert_eq!(*k as usize / 10, idx % 3);
        }
    }

    #[test]
    fn one_token_mode_is_identity() {
        let tok = Tokenisation::one_token_per_item(5);
        assert_eq!(tok.vocab_size(), 5);
        for i in 0..5 {
            assert_eq!(tok.encode(i).unwrap(), &[i as u32]);
            assert_eq!(tok.decode(&[i as u32]), Some(i));
        }
        assert_eq!(tok.encode(5), None);
    }

    #[test]
    fn from_table_rejects_collisions_and_bad_ranges() {
        assert!(matches!(
            Tokenisation::from_table(2, 2, vec![0, 2, 0, 2]),
            Err(TokeniserError::Collisions { .. })
        ));
        assert!(matches!(
            Tokenisation::from_table(2, 2, vec![0, 1]),
            Err(TokeniserError::Config(_))
        ));
    }

    fn factors(e: Matrix) -> SvdFactors {
        let t = e.cols;
        SvdFactors {
            user_factors: Matrix::zeros(1, t),
            singular_values: vec![1.0; t],
            item_factors: e,
            rank_deficient: false,
            seed: 0,
        }
    }

    #[test]
    fn collisions_fail_or_get_repaired() {
        // items 0 and 1 share an embedding; noise cannot split a 2-bin quantiser
        let e = Matrix::from_vec(3, 2, vec![0.0, 0.0, 0.01, 0.01, 1.0, 1.0]);
        let mut cfg = TokeniserConfig::new(2, 2);
        let err = svd_tokenise(&factors(e.clone()), &cfg).unwrap_err();
        match err {
            TokeniserError::Collisions { attempts, pairs } => {
                assert_eq!(attempts, 9);
                assert_eq!(pairs, vec![(0, 1)]);
            }
            other => panic!("unexpected {other:?}"),
        }
        cfg.collision_policy = CollisionPolicy::NearestFree;
        let tok = svd_tokenise(&factors(e), &cfg).unwrap();
        assert_eq!(tok.reassigned, 1);
        assert_eq!(tok.encode(0).unwrap(), &[0, 2]);
        for i in 0..3 {
            assert_eq!(tok.decode(tok.encode(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn capacity_is_checked() {
        let e = Matrix::from_vec(5, 2, (0..10).map(|i| i as f64).collect());
        let mut cfg = TokeniserConfig::new(2, 2);
        cfg.collision_policy = CollisionPolicy::NearestFree;
        assert!(matches!(svd_tokenise(&factors(e), &cfg), Err(TokeniserError::Capacity { .. })));
    }

    #[test]
    fn l1_sphere_counts() {
        let mut s = Vec::new();
        l1_sphere(2, 1, &mut s);
        assert_eq!(s, vec![vec![-1, 0], vec![0, -1], vec![0, 1], vec![1, 0]]);
        s.clear();
        l1_sphere(3, 2, &mut s);
        assert_eq!(s.len(), 18);
        assert!(s.iter().all(|o| o.iter().map(|x| x.abs()).sum::<i64>() == 2));
    }

    #[test]
    fn bytes_formatting() {
        assert_eq!(format_bytes(3416 * 1024), "3.34 MB");
        assert_eq!(format_bytes(1_280_969 * 1024), "1.22 GB");
        assert_eq!(format_bytes(256 * 1024), "0.25 MB");
    }

    #[test]
    fn identity_configuration_is_full_size() {
        let r = memory_report(&[("x".into(), 3416)], 256, 4, &[(1, 3416)]);
        assert_eq!(format!("{:.3}", r.rows[0].cells[0].percent), "100.000");
    }

    #[test]
    fn persisted_round_trip() {
        let tok = Tokenisation::from_table(2, 4, vec![0, 4, 1, 5, 3, 7]).unwrap();
        let mut buf = Vec::new();
        tok.write(&mut buf).unwrap();
        assert_eq!(Tokenisation::read(&buf[..]).unwrap(), tok);
        let one = Tokenisation::one_token_per_item(9);
        let mut buf = Vec::new();
        one.write(&mut buf).unwrap();
        assert_eq!(Tokenisation::read(&buf[..]).unwrap(), one);
    }

    proptest! {
        #[test]
        fn tokens_stay_in_position_ranges(
            rows in 2usize..40, t in 1usize..4, v in 2usize..64, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Matrix::from_vec(rows, t, (0..rows * t).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect());
            let mut cfg = TokeniserConfig::new(t, v);
            cfg.noise_seed = seed;
            cfg.collision_policy = CollisionPolicy::NearestFree;
            match svd_tokenise(&factors(e), &cfg) {
                Ok(tok) => {
                    prop_assert_eq!(tok.vocab_size(), t * v);
                    for item in 0..rows {
                        let tuple = tok.encode(item).unwrap();
                        for (pos, &k) in tuple.iter().enumerate() {
                            prop_assert!(tok.position_range(pos).contains(&(k as usize)));
                        }
                        prop_assert_eq!(tok.decode(tuple), Some(item));
                    }
                }
                Err(TokeniserError::Capacity { .. }) => prop_assert!(rows as f64 > (v as f64).powi(t as i32)),
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            }
        }
    }
}
