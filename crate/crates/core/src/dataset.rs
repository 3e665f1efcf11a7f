//! Interaction ingestion, k-core filtering and reproducible splits.
//!
//! Raw files are delimited text with one `user, item[, timestamp]` record per
//! line. After deduplication and k-core filtering, users and items receive
//! contiguous indices in first-seen order and the edge set is split by a
//! global seeded shuffle.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed interaction as it appears in the raw file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    /// Parsed when present, never used by the models.
    pub timestamp: Option<i64>,
}

/// Deduplicated interaction records in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawInteractions {
    pub records: Vec<Interaction>,
}

impl RawInteractions {
    /// Builds a record set, keeping only the first occurrence of every
    /// `(user, item)` pair.
    pub fn from_records(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut seen = HashSet::new();
        let records = records
            .into_iter()
            .filter(|r| seen.insert((r.user.clone(), r.item.clone())))
            .collect();
        RawInteractions { records }
    }

    /// Convenience constructor for token pairs without timestamps.
    pub fn from_pairs<U: AsRef<str>, I: AsRef<str>>(pairs: impl IntoIterator<Item = (U, I)>) -> Self {
        Self::from_records(pairs.into_iter().map(|(u, i)| Interaction {
            user: u.as_ref().to_string(),
            item: i.as_ref().to_string(),
            timestamp: None,
        }))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.records.iter().map(|r| r.user.as_str()).collect::<HashSet<_>>().len()
    }

    pub fn n_items(&self) -> usize {
        self.records.iter().map(|r| r.item.as_str()).collect::<HashSet<_>>().len()
    }
}

/// Column layout of a delimited interaction file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextFormat {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    /// `None` disables timestamp parsing. A missing column on a line is not an error.
    pub timestamp_col: Option<usize>,
}

impl Default for TextFormat {
    fn default() -> Self {
        TextFormat {
            delimiter: '\t',
            user_col: 0,
            item_col: 1,
            timestamp_col: Some(2),
        }
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: &TextFormat) -> Result<RawInteractions> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), format, &path.display().to_string())
}

/// Parses interactions from any reader. `source_name` is used in error messages.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    format: &TextFormat,
    source_name: &str,
) -> Result<RawInteractions> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).map(str::trim).collect();
        let malformed = |message: String| Error::MalformedLine {
            source_name: source_name.to_string(),
            line: lineno + 1,
            message,
        };
        if fields.len() < 2 {
            return Err(malformed(format!(
                "expected at least 2 fields separated by {:?}, found {}",
                format.delimiter,
                fields.len()
            )));
        }
        let field = |col: usize, what: &str| -> Result<&str> {
            match fields.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(malformed(format!("missing {what} in column {col}"))),
            }
        };
        let user = field(format.user_col, "user")?.to_string();
        let item = field(format.item_col, "item")?.to_string();
        let timestamp = match format.timestamp_col.and_then(|c| fields.get(c)) {
            Some(raw) if !raw.is_empty() => Some(
                raw.parse::<i64>()
                    .map_err(|_| malformed(format!("timestamp {raw:?} is not an integer")))?,
            ),
            _ => None,
        };
        records.push(Interaction {
            user,
            item,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(source_name.to_string()));
    }
    Ok(RawInteractions::from_records(records))
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// every remaining node has degree `>= k`. Surviving records keep their order.
pub fn apply_k_core(raw: &RawInteractions, k: usize) -> Result<RawInteractions> {
    if k == 0 {
        return Err(Error::config("k-core threshold must be at least 1"));
    }
    let mut user_ids = HashMap::new();
    let mut item_ids = HashMap::new();
    let mut edges = Vec::with_capacity(raw.len());
    for r in &raw.records {
        let n = user_ids.len();
        let u = *user_ids.entry(r.user.as_str()).or_insert(n);
        let n = item_ids.len();
        let i = *item_ids.entry(r.item.as_str()).or_insert(n);
        edges.push((u, i));
    }
    let n_users = user_ids.len();
    // users occupy 0..n_users, items follow
    let n_nodes = n_users + item_ids.len();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for (e, &(u, i)) in edges.iter().enumerate() {
        incident[u].push(e);
        incident[n_users + i].push(e);
    }
    let mut degree: Vec<usize> = incident.iter().map(Vec::len).collect();
    let mut alive = vec![true; edges.len()];
    let mut removed = vec![false; n_nodes];
    let mut queue: VecDeque<usize> = (0..n_nodes).filter(|&n| degree[n] < k).collect();
    let mut queued: Vec<bool> = degree.iter().map(|&d| d < k).collect();

    while let Some(node) = queue.pop_front() {
        if removed[node] {
            continue;
        }
        removed[node] = true;
        for &e in &incident[node] {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = edges[e];
            let other = if node == u { n_users + i } else { u };
            degree[other] -= 1;
            degree[node] -= 1;
            if degree[other] < k && !queued[other] {
                queued[other] = true;
                queue.push_back(other);
            }
        }
    }

    let records: Vec<Interaction> = raw
        .records
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(r, _)| r.clone())
        .collect();
    if records.is_empty() {
        return Err(Error::TooSparse(format!(
            "no interactions survive {k}-core filtering"
        )));
    }
    Ok(RawInteractions { records })
}

/// Split ratios, seed, and the fraction of training edges to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// `(train, valid, test)` fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub train_keep_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.8, 0.1, 0.1],
            seed: 2024,
            train_keep_ratio: 1.0,
        }
    }
}

impl SplitConfig {
    /// Every violated constraint, so callers can report them together.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            out.push(format!("split ratios must be strictly positive, got {:?}", self.ratios));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(format!("split ratios must sum to 1, got {sum}"));
        }
        if !(self.train_keep_ratio > 0.0 && self.train_keep_ratio <= 1.0) {
            out.push(format!(
                "train_keep_ratio must lie in (0, 1], got {}",
                self.train_keep_ratio
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// An observed `(user, item)` pair by contiguous index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub user: u32,
    pub item: u32,
}

impl Edge {
    pub fn new(user: u32, item: u32) -> Self {
        Edge { user, item }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, valid or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// ID-mapped interactions with train/validation/test splits.
///
/// Immutable once built; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    /// Row `u` holds the raw token of user `u`.
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub train: Vec<Edge>,
    pub valid: Vec<Edge>,
    pub test: Vec<Edge>,
    train_items: Vec<Vec<u32>>,
}

impl InteractionDataset {
    /// Assembles a dataset from already-indexed splits. Tokens default to the
    /// decimal index when not supplied.
    pub fn from_splits(
        n_users: usize,
        n_items: usize,
        train: Vec<Edge>,
        valid: Vec<Edge>,
        test: Vec<Edge>,
    ) -> Result<Self> {
        let user_tokens = (0..n_users).map(|u| u.to_string()).collect();
        let item_tokens = (0..n_items).map(|i| i.to_string()).collect();
        Self::with_tokens(user_tokens, item_tokens, train, valid, test)
    }

    pub fn with_tokens(
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
        train: Vec<Edge>,
        valid: Vec<Edge>,
        test: Vec<Edge>,
    ) -> Result<Self> {
        let n_users = user_tokens.len();
        let n_items = item_tokens.len();
        for e in train.iter().chain(&valid).chain(&test) {
            if e.user as usize >= n_users || e.item as usize >= n_items {
                return Err(Error::IndexOutOfRange(format!(
                    "edge ({}, {}) outside {n_users} users x {n_items} items",
                    e.user, e.item
                )));
            }
        }
        let train_items = group_by_user(n_users, &train);
        Ok(InteractionDataset {
            n_users,
            n_items,
            user_tokens,
            item_tokens,
            train,
            valid,
            test,
            train_items,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn split(&self, split: Split) -> &[Edge] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Sorted train items of `user`.
    pub fn train_items(&self, user: u32) -> &[u32] {
        &self.train_items[user as usize]
    }

    /// Sorted item lists per user for an arbitrary split.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<u32>> {
        match split {
            Split::Train => self.train_items.clone(),
            other => group_by_user(self.n_users, self.split(other)),
        }
    }

    pub fn user_map(&self) -> HashMap<&str, u32> {
        self.user_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect()
    }

    pub fn item_map(&self) -> HashMap<&str, u32> {
        self.item_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect()
    }

    /// Keeps a seeded random subset of `round(ratio * |train|)` training edges.
    /// Validation and test edges are untouched.
    pub fn with_train_keep_ratio(mut self, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!(
                "train_keep_ratio must lie in (0, 1], got {ratio}"
            )));
        }
        if ratio == 1.0 {
            return Ok(self);
        }
        let n_keep = (self.train.len() as f64 * ratio).round() as usize;
        if n_keep == 0 {
            return Err(Error::TooSparse(format!(
                "train_keep_ratio {ratio} leaves no training edges"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut keep = rand::seq::index::sample(&mut rng, self.train.len(), n_keep).into_vec();
        keep.sort_unstable();
        self.train = keep.into_iter().map(|i| self.train[i]).collect();
        self.train_items = group_by_user(self.n_users, &self.train);
        Ok(self)
    }

    pub fn stats(&self) -> DatasetStats {
        let n_interactions = self.train.len() + self.valid.len() + self.test.len();
        let cells = self.n_users as f64 * self.n_items as f64;
        DatasetStats {
            n_users: self.n_users,
            n_items: self.n_items,
            n_interactions,
            sparsity_percent: 100.0 * (1.0 - n_interactions as f64 / cells),
            n_train: self.train.len(),
            n_valid: self.valid.len(),
            n_test: self.test.len(),
        }
    }
}

fn group_by_user(n_users: usize, edges: &[Edge]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); n_users];
    for e in edges {
        out[e.user as usize].push(e.item);
    }
    for items in &mut out {
        items.sort_unstable();
        items.dedup();
    }
    out
}

/// Counts reported next to the binary cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub sparsity_percent: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

/// Maps tokens to contiguous indices in first-seen order, shuffles all edges
/// with `cfg.seed` and cuts them at the configured ratios. Identical inputs
/// always produce identical splits.
pub fn build_dataset(raw: &RawInteractions, cfg: &SplitConfig) -> Result<InteractionDataset> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::EmptyInput("interaction set".into()));
    }
    let mut user_ids: HashMap<&str, u32> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut edges = Vec::with_capacity(raw.len());
    for r in &raw.records {
        let u = *user_ids.entry(r.user.as_str()).or_insert_with(|| {
            user_tokens.push(r.user.clone());
            (user_tokens.len() - 1) as u32
        });
        let i = *item_ids.entry(r.item.as_str()).or_insert_with(|| {
            item_tokens.push(r.item.clone());
            (item_tokens.len() - 1) as u32
        });
        edges.push(Edge::new(u, i));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    edges.shuffle(&mut rng);

    let n = edges.len();
    let n_train = (n as f64 * cfg.ratios[0] + 1e-9).floor() as usize;
    let n_valid = (n as f64 * cfg.ratios[1] + 1e-9).floor() as usize;
    let n_test = n.saturating_sub(n_train + n_valid);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(Error::TooSparse(format!(
            "{n} interactions give an empty split ({n_train}/{n_valid}/{n_test})"
        )));
    }
    let test = edges.split_off(n_train + n_valid);
    let valid = edges.split_off(n_train);
    let train = edges;

    InteractionDataset::with_tokens(user_tokens, item_tokens, train, valid, test)?
        .with_train_keep_ratio(cfg.train_keep_ratio, cfg.seed)
}

/// Seeded block-structured interactions for smoke tests and demos.
///
/// Users and items are divided into `n_blocks` equal blocks. Each user picks
/// `items_per_user` distinct items of its own block, weighted by a Zipf law
/// `1 / (rank + 1)^zipf_exponent` over the block's items. Tokens are
/// `u<index>` and `i<index>`, so `index / per_block` recovers the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlocks {
    pub n_blocks: usize,
    pub users_per_block: usize,
    pub items_per_block: usize,
    pub items_per_user: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticBlocks {
    fn default() -> Self {
        SyntheticBlocks {
            n_blocks: 2,
            users_per_block: 100,
            items_per_block: 100,
            items_per_user: 20,
            zipf_exponent: 1.0,
            seed: 11,
        }
    }
}

impl SyntheticBlocks {
    pub fn generate(&self) -> Result<RawInteractions> {
        if self.items_per_user == 0 || self.items_per_user > self.items_per_block {
            return Err(Error::config(format!(
                "items_per_user must lie in 1..={}, got {}",
                self.items_per_block, self.items_per_user
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.zipf_exponent;
        let mut pairs = Vec::new();
        for block in 0..self.n_blocks {
            for k in 0..self.users_per_block {
                let user = block * self.users_per_block + k;
                let picked = rand::seq::index::sample_weighted(
                    &mut rng,
                    self.items_per_block,
                    |r| 1.0 / ((r + 1) as f64).powf(a),
                    self.items_per_user,
                )
                .map_err(|e| Error::config(format!("popularity weights: {e}")))?;
                for r in picked {
                    pairs.push((format!("u{user}"), format!("i{}", block * self.items_per_block + r)));
                }
            }
        }
        Ok(RawInteractions::from_pairs(pairs))
    }
}

const CACHE_MAGIC: &[u8; 4] = b"MSGD";
const CACHE_VERSION: u32 = 1;

/// Writes the binary cache: a little-endian header
/// `magic "MSGD", version, n_users, n_items, n_train, n_valid, n_test` (u32 each
/// after the magic), then `(user, item)` u32 pairs for train, valid and test,
/// then the user and item token tables as length-prefixed UTF-8 strings.
pub fn write_cache(dataset: &InteractionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CACHE_MAGIC)?;
    for v in [
        CACHE_VERSION,
        dataset.n_users as u32,
        dataset.n_items as u32,
        dataset.train.len() as u32,
        dataset.valid.len() as u32,
        dataset.test.len() as u32,
    ] {
        write(&v.to_le_bytes())?;
    }
    for e in dataset.train.iter().chain(&dataset.valid).chain(&dataset.test) {
        write(&e.user.to_le_bytes())?;
        write(&e.item.to_le_bytes())?;
    }
    for token in dataset.user_tokens.iter().chain(&dataset.item_tokens) {
        write(&(token.len() as u32).to_le_bytes())?;
        write(token.as_bytes())?;
    }
    drop(write);
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = ByteCursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != CACHE_MAGIC {
        return Err(Error::format(path, "not a dataset cache (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::format(path, format!("unsupported cache version {version}")));
    }
    let n_users = cur.u32()? as usize;
    let n_items = cur.u32()? as usize;
    let sizes = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let mut splits = Vec::with_capacity(3);
    for size in sizes {
        let mut edges = Vec::with_capacity(size);
        for _ in 0..size {
            edges.push(Edge::new(cur.u32()?, cur.u32()?));
        }
        splits.push(edges);
    }
    let mut tokens = Vec::with_capacity(n_users + n_items);
    for _ in 0..n_users + n_items {
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        tokens.push(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::format(path, "token is not valid UTF-8"))?,
        );
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after token table"));
    }
    let item_tokens = tokens.split_off(n_users);
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    InteractionDataset::with_tokens(tokens, item_tokens, train, valid, test).map_err(|e| match e {
        Error::IndexOutOfRange(msg) => Error::format(path, msg),
        other => other,
    })
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(self.path, "unexpected end of file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn parse(text: &str, delimiter: char) -> Result<RawInteractions> {
        let fmt = TextFormat {
            delimiter,
            ..TextFormat::default()
        };
        parse_interactions(text.as_bytes(), &fmt, "mem")
    }

    #[test]
    fn three_line_file() {
        let raw = parse("u1,i1\nu1,i2\nu2,i1\n", ',').unwrap();
        assert_eq!(raw.len(), 3);
        assert_eq!(raw.n_users(), 2);
    }

    #[test]
    fn duplicates_collapse() {
        let raw = parse("u1\ti1\nu1\ti1\nu2\ti2\n", '\t').unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw.records[0].user, "u1");
    }

    #[test]
    fn comments_and_timestamps() {
        let raw = parse("# header\nu1\ti1\t100\n\nu2\ti2\n", '\t').unwrap();
        assert_eq!(raw.records[0].timestamp, Some(100));
        assert_eq!(raw.records[1].timestamp, None);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("u1\ti1\nbroken\n", '\t').unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
        assert!(matches!(parse("u1\ti1\tnot-a-time\n", '\t'), Err(Error::MalformedLine { .. })));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse("# only a comment\n", '\t'), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions("/definitely/not/here.tsv", &TextFormat::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn k_core_fixed_point_is_unchanged() {
        // complete bipartite 3x3: every degree is 3
        let pairs: Vec<(String, String)> = (0..3)
            .flat_map(|u| (0..3).map(move |i| (format!("u{u}"), format!("i{i}"))))
            .collect();
        let raw = RawInteractions::from_pairs(pairs);
        assert_eq!(apply_k_core(&raw, 3).unwrap(), raw);
        assert_eq!(apply_k_core(&raw, 1).unwrap(), raw);
    }

    #[test]
    fn k_core_star_cascades_to_empty() {
        let mut pairs: Vec<(&str, &str)> = vec![("u1", "i1"), ("u1", "i2"), ("u1", "i3")];
        pairs.extend([("u1", "i4"), ("u1", "i5"), ("u2", "i1")]);
        let raw = RawInteractions::from_pairs(pairs);
        assert!(matches!(apply_k_core(&raw, 2), Err(Error::TooSparse(_))));
    }

    fn brute_force_k_core(edges: &[(u32, u32)], k: usize) -> BTreeSet<(u32, u32)> {
        let mut current: BTreeSet<(u32, u32)> = edges.iter().copied().collect();
        loop {
            let mut du: HashMap<u32, usize> = HashMap::new();
            let mut di: HashMap<u32, usize> = HashMap::new();
            for &(u, i) in &current {
                *du.entry(u).or_default() += 1;
                *di.entry(i).or_default() += 1;
            }
            let next: BTreeSet<_> = current
                .iter()
                .copied()
                .filter(|(u, i)| du[u] >= k && di[i] >= k)
                .collect();
            if next.len() == current.len() {
                return next;
            }
            current = next;
        }
    }

    fn random_edges(seed: u64, n_users: u32, n_items: u32, n_edges: usize) -> Vec<(u32, u32)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_edges)
            .map(|_| (rng.random_range(0..n_users), rng.random_range(0..n_items)))
            .collect()
    }

    fn to_raw(edges: &[(u32, u32)]) -> RawInteractions {
        RawInteractions::from_pairs(edges.iter().map(|(u, i)| (format!("u{u}"), format!("i{i}"))))
    }

    fn surviving(raw: &RawInteractions) -> BTreeSet<(u32, u32)> {
        raw.records
            .iter()
            .map(|r| (r.user[1..].parse().unwrap(), r.item[1..].parse().unwrap()))
            .collect()
    }

    #[test]
    fn k_core_matches_brute_force_on_random_graph() {
        // 50 nodes: 25 users, 25 items
        let edges = random_edges(7, 25, 25, 160);
        let oracle = brute_force_k_core(&edges, 3);
        assert!(!oracle.is_empty());
        let got = apply_k_core(&to_raw(&edges), 3).unwrap();
        assert_eq!(surviving(&got), oracle);
    }

    proptest! {
        #[test]
        fn k_core_is_order_invariant(seed in 0u64..500, k in 1usize..4) {
            let edges = random_edges(seed, 12, 12, 70);
            let oracle = brute_force_k_core(&edges, k);
            let mut shuffled = edges.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
            match (apply_k_core(&to_raw(&edges), k), apply_k_core(&to_raw(&shuffled), k)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(surviving(&a), surviving(&b));
                    prop_assert_eq!(surviving(&a), oracle);
                }
                (Err(_), Err(_)) => prop_assert!(oracle.is_empty()),
                _ => prop_assert!(false, "order changed the outcome"),
            }
        }

        #[test]
        fn splits_partition_the_filtered_set(seed in 0u64..1000, n in 20usize..200) {
            let raw = to_raw(&random_edges(seed, 30, 30, n));
            let ds = build_dataset(&raw, &SplitConfig { seed, ..SplitConfig::default() }).unwrap();
            let all: Vec<Edge> = ds.train.iter().chain(&ds.valid).chain(&ds.test).copied().collect();
            let unique: HashSet<Edge> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), raw.len());
            prop_assert_eq!(unique.len(), raw.len());
            let max_user = all.iter().map(|e| e.user).max().unwrap() as usize;
            let max_item = all.iter().map(|e| e.item).max().unwrap() as usize;
            prop_assert_eq!(max_user + 1, ds.n_users);
            prop_assert_eq!(max_item + 1, ds.n_items);
        }
    }

    #[test]
    fn ten_edges_split_eight_one_one() {
        let raw = to_raw(&(0..10).map(|i| (i % 3, i)).collect::<Vec<_>>());
        let ds = build_dataset(&raw, &SplitConfig::default()).unwrap();
        assert_eq!((ds.train.len(), ds.valid.len(), ds.test.len()), (8, 1, 1));
        let again = build_dataset(&raw, &SplitConfig::default()).unwrap();
        assert_eq!(ds, again);
        let other = build_dataset(&raw, &SplitConfig { seed: 99, ..SplitConfig::default() }).unwrap();
        assert_eq!(other.train.len(), 8);
    }

    #[test]
    fn too_small_for_a_split() {
        let raw = to_raw(&[(0, 0), (0, 1), (1, 0)]);
        assert!(matches!(
            build_dataset(&raw, &SplitConfig::default()),
            Err(Error::TooSparse(_))
        ));
    }

    #[test]
    fn invalid_ratios_are_all_reported() {
        let cfg = SplitConfig {
            ratios: [0.9, 0.0, 0.2],
            seed: 0,
            train_keep_ratio: 1.5,
        };
        assert_eq!(cfg.problems().len(), 3);
    }

    #[test]
    fn train_keep_ratio_halves_train_only() {
        let raw = to_raw(&random_edges(3, 40, 40, 130));
        assert_eq!(raw.len(), 125);
        let cfg = SplitConfig::default();
        let full = build_dataset(&raw, &cfg).unwrap();
        assert_eq!(full.train.len(), 100);
        let half = build_dataset(&raw, &SplitConfig { train_keep_ratio: 0.5, ..cfg.clone() }).unwrap();
        assert_eq!(half.train.len(), 50);
        assert_eq!(half.valid, full.valid);
        assert_eq!(half.test, full.test);

        // seeded-mask oracle: same index sample drawn independently
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut idx = rand::seq::index::sample(&mut rng, 100, 50).into_vec();
        idx.sort_unstable();
        let expected: Vec<Edge> = idx.into_iter().map(|i| full.train[i]).collect();
        assert_eq!(half.train, expected);
        let kept: HashSet<Edge> = half.train.iter().copied().collect();
        assert!(kept.iter().all(|e| full.train.contains(e)));
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let raw = to_raw(&random_edges(11, 20, 20, 90));
        let ds = build_dataset(&raw, &SplitConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cache");
        write_cache(&ds, &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back, ds);

        let path2 = dir.path().join("d2.cache");
        write_cache(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path2, &bytes).unwrap();
        assert!(matches!(read_cache(&path2), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&path2, &bytes).unwrap();
        assert!(matches!(read_cache(&path2), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_blocks_stay_inside_blocks() {
        let cfg = SyntheticBlocks::default();
        let raw = cfg.generate().unwrap();
        assert_eq!(raw.len(), 200 * 20);
        for r in &raw.records {
            let u: usize = r.user[1..].parse().unwrap();
            let i: usize = r.item[1..].parse().unwrap();
            assert_eq!(u / 100, i / 100);
        }
        assert_eq!(cfg.generate().unwrap(), raw);
        // the head item of a block is far more popular than the tail
        let count = |tok: &str| raw.records.iter().filter(|r| r.item == tok).count();
        assert!(count("i0") > 3 * count("i99").max(1));
        let bad = SyntheticBlocks { items_per_user: 101, ..cfg };
        assert!(bad.generate().is_err());
    }

    #[test]
    fn stats_sparsity() {
        let ds = InteractionDataset::from_splits(
            2,
            4,
            vec![Edge::new(0, 0), Edge::new(1, 1)],
            vec![Edge::new(0, 2)],
            vec![Edge::new(1, 3)],
        )
        .unwrap();
        let s = ds.stats();
        assert_eq!(s.n_interactions, 4);
        assert!((s.sparsity_percent - 50.0).abs() < 1e-12);
        assert_eq!(ds.train_items(0), &[0]);
    }
}
