//! Vector index over chunks.
//!
//! Stored vectors are unit length, so cosine similarity is the dot product
//! with the normalized query. [`SearchMode::Exact`] scans every entry;
//! [`SearchMode::Approximate`] walks a layered small-world graph (HNSW)
//! built from a fixed seed, so the same entries always give the same graph.
//!
//! Results are ordered by score descending, then chunk id ascending.
//!
//! # File format
//!
//! All integers little-endian. Strings are a `u32` byte length followed by
//! UTF-8 bytes.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TUTORIDX"
//! 8       4     format version (u32, currently 1)
//! 12      8     payload length P (u64)
//! 20      P     payload
//! 20+P    4     CRC-32 (IEEE) of bytes [0, 20+P)
//!
//! payload:
//!   u32   dim
//!   u8    mode (0 = exact, 1 = approximate)
//!   u32   neighbors_per_node
//!   u32   search_breadth
//!   str   model_id
//!   u64   entry count N
//!   N x { str chunk_id, str body, str metadata (JSON), dim x f64 vector }
//!   u8    graph flag (0 = none, 1 = present)
//!   if present:
//!     u32 entry point, u8 top level
//!     N x { u8 level L, (L+1) x { u32 count C, C x u32 neighbor } }
//! ```

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{Chunk, ChunkMetadata};
use crate::embed::EmbeddingVector;

pub const MAGIC: &[u8; 8] = b"TUTORIDX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const CHECKSUM_LEN: usize = 4;
const GRAPH_SEED: u64 = 0x7475_746f_725f_6877;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("duplicate chunk id {0}")]
    DuplicateChunkId(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector from model {got} in an index for {expected}")]
    ModelMismatch { expected: String, got: String },
    #[error("index is empty")]
    EmptyIndex,
    #[error("query vector is zero")]
    ZeroQuery,
    #[error("vector for {0} is not unit length")]
    NotNormalized(String),
    #[error("invalid ANN parameters: {0}")]
    InvalidParams(String),
    #[error("not an index file")]
    BadMagic,
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index checksum mismatch")]
    ChecksumError,
    #[error("index file is truncated")]
    TruncatedFile,
    #[error("index file is corrupt: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, IndexError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnParams {
    pub mode: SearchMode,
    /// Graph degree per layer (twice this on the bottom layer).
    pub neighbors_per_node: usize,
    /// Candidate list size during construction and search.
    pub search_breadth: usize,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            mode: SearchMode::Exact,
            neighbors_per_node: 16,
            search_breadth: 64,
        }
    }
}

impl AnnParams {
    pub fn approximate() -> Self {
        Self {
            mode: SearchMode::Approximate,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.neighbors_per_node < 2 || self.neighbors_per_node > 1024 {
            return Err(IndexError::InvalidParams(
                "neighbors_per_node must be in 2..=1024".into(),
            ));
        }
        if self.search_breadth == 0 {
            return Err(IndexError::InvalidParams("search_breadth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
    pub metadata: ChunkMetadata,
    pub body: String,
}

impl IndexEntry {
    pub fn from_chunk(chunk: &Chunk, vector: EmbeddingVector) -> Self {
        Self {
            chunk_id: chunk.chunk_id.clone(),
            vector,
            metadata: chunk.metadata.clone(),
            body: chunk.body.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    pub source_ref: String,
}

/// Retrieval depth that widens for questions spanning several topic families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalDepth {
    pub base: usize,
    pub extra: usize,
}

impl Default for RetrievalDepth {
    fn default() -> Self {
        Self { base: 5, extra: 3 }
    }
}

impl RetrievalDepth {
    pub fn k_for(&self, topic_families: usize) -> usize {
        if topic_families >= 2 {
            self.base + self.extra
        } else {
            self.base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Graph {
    entry: u32,
    top_level: usize,
    /// `links[node][level]` lists neighbor node indices.
    links: Vec<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    model_id: String,
    params: AnnParams,
    graph: Option<Graph>,
    by_id: HashMap<String, usize>,
}

/// Dot product summed left to right.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Scored candidate; ordering is "better first" under `Ord::cmp` reversed,
/// i.e. a max-heap of `Scored` pops the best.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl VectorIndex {
    /// An index with no entries. Searching it fails with [`IndexError::EmptyIndex`].
    pub fn empty(dim: usize, model_id: &str, params: AnnParams) -> Self {
        Self {
            entries: Vec::new(),
            dim,
            model_id: model_id.to_owned(),
            params,
            graph: None,
            by_id: HashMap::new(),
        }
    }

    pub fn build(entries: Vec<IndexEntry>, params: AnnParams) -> Result<Self> {
        let first = entries.first().ok_or(IndexError::EmptyIndex)?;
        let dim = first.vector.dim();
        let model_id = first.vector.model_id().to_owned();
        Self::assemble(entries, dim, model_id, params, None)
    }

    fn assemble(
        entries: Vec<IndexEntry>,
        dim: usize,
        model_id: String,
        params: AnnParams,
        graph: Option<Graph>,
    ) -> Result<Self> {
        params.validate()?;
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: e.vector.dim(),
                });
            }
            if e.vector.model_id() != model_id {
                return Err(IndexError::ModelMismatch {
                    expected: model_id,
                    got: e.vector.model_id().to_owned(),
                });
            }
            if (e.vector.norm() - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::NotNormalized(e.chunk_id.clone()));
            }
            if by_id.insert(e.chunk_id.clone(), i).is_some() {
                return Err(IndexError::DuplicateChunkId(e.chunk_id.clone()));
            }
        }
        let mut index = Self {
            entries,
            dim,
            model_id,
            params,
            graph: None,
            by_id,
        };
        index.graph = match (params.mode, graph) {
            (SearchMode::Exact, _) => None,
            (SearchMode::Approximate, Some(g)) => Some(g),
            (SearchMode::Approximate, None) => Some(index.build_graph()),
        };
        Ok(index)
    }

    /// New index with `added` entries; an entry whose id already exists
    /// replaces the old one.
    pub fn with_entries(&self, added: Vec<IndexEntry>) -> Result<Self> {
        let replaced: HashSet<&str> = added.iter().map(|e| e.chunk_id.as_str()).collect();
        let mut entries: Vec<IndexEntry> = self
            .entries
            .iter()
            .filter(|e| !replaced.contains(e.chunk_id.as_str()))
            .cloned()
            .collect();
        entries.extend(added);
        if entries.is_empty() {
            return Ok(Self::empty(self.dim, &self.model_id, self.params));
        }
        if self.entries.is_empty() {
            return Self::build(entries, self.params);
        }
        Self::assemble(entries, self.dim, self.model_id.clone(), self.params, None)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn params(&self) -> AnnParams {
        self.params
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, chunk_id: &str) -> Option<&IndexEntry> {
        self.by_id.get(chunk_id).map(|&i| &self.entries[i])
    }

    fn unit_query(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroQuery);
        }
        Ok(query.values().iter().map(|v| v / norm).collect())
    }

    fn score(&self, q: &[f64], node: u32) -> f64 {
        dot(q, self.entries[node as usize].vector.values())
    }

    /// Top `k` entries by cosine similarity, using the index's configured mode.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalResult>> {
        self.search_with_mode(query, k, self.params.mode)
    }

    /// Like [`search`](Self::search) but with an explicit mode. Approximate
    /// falls back to exact when the index has no graph.
    pub fn search_with_mode(
        &self,
        query: &EmbeddingVector,
        k: usize,
        mode: SearchMode,
    ) -> Result<Vec<RetrievalResult>> {
        let q = self.unit_query(query)?;
        let scored = match (&self.graph, mode) {
            (Some(g), SearchMode::Approximate) => self.graph_search(g, &q, k),
            _ => (0..self.entries.len() as u32)
                .map(|n| (n, self.score(&q, n)))
                .collect(),
        };
        Ok(self.rank(scored, k))
    }

    /// Exact search restricted to entries accepted by `keep`.
    pub fn search_where(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: impl Fn(&IndexEntry) -> bool,
    ) -> Result<Vec<RetrievalResult>> {
        let q = self.unit_query(query)?;
        let scored = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| keep(e))
            .map(|(i, _)| (i as u32, self.score(&q, i as u32)))
            .collect();
        Ok(self.rank(scored, k))
    }

    fn rank(&self, mut scored: Vec<(u32, f64)>, k: usize) -> Vec<RetrievalResult> {
        let order = |a: &(u32, f64), b: &(u32, f64)| {
            b.1.total_cmp(&a.1).then_with(|| {
                self.entries[a.0 as usize]
                    .chunk_id
                    .cmp(&self.entries[b.0 as usize].chunk_id)
            })
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        scored
            .into_iter()
            .enumerate()
            .map(|(i, (n, score))| {
                let e = &self.entries[n as usize];
                RetrievalResult {
                    chunk_id: e.chunk_id.clone(),
                    score,
                    rank: i + 1,
                    source_ref: e.metadata.source_ref.clone(),
                }
            })
            .collect()
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            self.params.neighbors_per_node * 2
        } else {
            self.params.neighbors_per_node
        }
    }

    fn build_graph(&self) -> Graph {
        let m = self.params.neighbors_per_node;
        let level_mult = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(GRAPH_SEED);
        let mut graph = Graph {
            entry: 0,
            top_level: 0,
            links: Vec::with_capacity(self.entries.len()),
        };
        for node in 0..self.entries.len() as u32 {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let level = ((-u.ln() * level_mult) as usize).min(32);
            graph.links.push(vec![Vec::new(); level + 1]);
            if node == 0 {
                graph.top_level = level;
                continue;
            }
            self.insert(&mut graph, node, level);
        }
        graph
    }

    fn insert(&self, graph: &mut Graph, node: u32, level: usize) {
        let q = self.entries[node as usize].vector.values();
        let mut entry = Scored {
            score: self.score(q, graph.entry),
            node: graph.entry,
        };
        for l in (level + 1..=graph.top_level).rev() {
            entry = self.greedy(graph, q, entry, l);
        }
        let mut entries = vec![entry];
        for l in (0..=level.min(graph.top_level)).rev() {
            let candidates = self.search_layer(graph, q, &entries, self.params.search_breadth, l);
            let chosen = self.select_neighbors(&candidates, self.params.neighbors_per_node);
            graph.links[node as usize][l] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                self.connect(graph, s.node, node, l);
            }
            entries = candidates;
        }
        if level > graph.top_level {
            graph.top_level = level;
            graph.entry = node;
        }
    }

    /// Adds `new` to `node`'s neighbor list, pruning back to the degree limit.
    fn connect(&self, graph: &mut Graph, node: u32, new: u32, level: usize) {
        let max = self.max_degree(level);
        let list = &mut graph.links[node as usize][level];
        list.push(new);
        if list.len() <= max {
            return;
        }
        let base = self.entries[node as usize].vector.values();
        let mut cands: Vec<Scored> = list
            .iter()
            .map(|&n| Scored {
                score: self.score(base, n),
                node: n,
            })
            .collect();
        cands.sort_unstable_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, max);
        graph.links[node as usize][level] = kept.iter().map(|s| s.node).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbor already kept; top up with the best rejects.
    /// `cands` must be sorted best first.
    fn select_neighbors(&self, cands: &[Scored], max: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(max);
        let mut rejected = Vec::new();
        for &c in cands {
            if kept.len() >= max {
                break;
            }
            let cv = self.entries[c.node as usize].vector.values();
            let diverse = kept.iter().all(|k| self.score(cv, k.node) < c.score);
            if diverse {
                kept.push(c);
            } else {
                rejected.push(c);
            }
        }
        for r in rejected {
            if kept.len() >= max {
                break;
            }
            kept.push(r);
        }
        kept
    }

    fn greedy(&self, graph: &Graph, q: &[f64], mut best: Scored, level: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in &graph.links[best.node as usize][level] {
                let s = Scored {
                    score: self.score(q, n),
                    node: n,
                };
                if s > best {
                    best = s;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; returns up to `breadth` nodes, best first.
    fn search_layer(
        &self,
        graph: &Graph,
        q: &[f64],
        entries: &[Scored],
        breadth: usize,
        level: usize,
    ) -> Vec<Scored> {
        let mut visited = vec![false; self.entries.len()];
        for s in entries {
            visited[s.node as usize] = true;
        }
        let mut frontier: BinaryHeap<Scored> = entries.iter().copied().collect();
        let mut found: BinaryHeap<Reverse<Scored>> = entries.iter().copied().map(Reverse).collect();
        while found.len() > breadth {
            found.pop();
        }
        while let Some(c) = frontier.pop() {
            let worst = found.peek().expect("found is non-empty").0;
            if c < worst && found.len() >= breadth {
                break;
            }
            for &n in &graph.links[c.node as usize][level] {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let s = Scored {
                    score: self.score(q, n),
                    node: n,
                };
                let worst = found.peek().expect("found is non-empty").0;
                if found.len() < breadth || s > worst {
                    frontier.push(s);
                    found.push(Reverse(s));
                    if found.len() > breadth {
                        found.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = found.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    fn graph_search(&self, graph: &Graph, q: &[f64], k: usize) -> Vec<(u32, f64)> {
        let mut entry = Scored {
            score: self.score(q, graph.entry),
            node: graph.entry,
        };
        for l in (1..=graph.top_level).rev() {
            entry = self.greedy(graph, q, entry, l);
        }
        let breadth = self.params.search_breadth.max(k);
        self.search_layer(graph, q, &[entry], breadth, 0)
            .into_iter()
            .map(|s| (s.node, s.score))
            .collect()
    }

    pub fn save(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_u32(&mut p, self.dim as u32);
        p.push(match self.params.mode {
            SearchMode::Exact => 0,
            SearchMode::Approximate => 1,
        });
        put_u32(&mut p, self.params.neighbors_per_node as u32);
        put_u32(&mut p, self.params.search_breadth as u32);
        put_str(&mut p, &self.model_id);
        p.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            put_str(&mut p, &e.chunk_id);
            put_str(&mut p, &e.body);
            put_str(
                &mut p,
                &serde_json::to_string(&e.metadata).expect("metadata serializes"),
            );
            for v in e.vector.values() {
                p.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.graph {
            None => p.push(0),
            Some(g) => {
                p.push(1);
                put_u32(&mut p, g.entry);
                p.push(g.top_level as u8);
                for levels in &g.links {
                    p.push((levels.len() - 1) as u8);
                    for list in levels {
                        put_u32(&mut p, list.len() as u32);
                        for &n in list {
                            put_u32(&mut p, n);
                        }
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(HEADER_LEN + p.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(IndexError::TruncatedFile);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(IndexError::TruncatedFile);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let total = usize::try_from(payload_len)
            .ok()
            .and_then(|p| p.checked_add(HEADER_LEN + CHECKSUM_LEN))
            .ok_or(IndexError::TruncatedFile)?;
        match bytes.len().cmp(&total) {
            Ordering::Less => return Err(IndexError::TruncatedFile),
            Ordering::Greater => return Err(IndexError::Corrupt("trailing bytes".into())),
            Ordering::Equal => {}
        }
        let body_end = total - CHECKSUM_LEN;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(IndexError::ChecksumError);
        }
        decode_payload(&bytes[HEADER_LEN..body_end])
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(IndexError::Corrupt("field runs past end of payload".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| IndexError::Corrupt("invalid UTF-8".into()))
    }
}

fn decode_payload(payload: &[u8]) -> Result<VectorIndex> {
    let mut r = Reader { buf: payload };
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(IndexError::Corrupt("zero dimension".into()));
    }
    let mode = match r.u8()? {
        0 => SearchMode::Exact,
        1 => SearchMode::Approximate,
        m => return Err(IndexError::Corrupt(format!("unknown search mode {m}"))),
    };
    let params = AnnParams {
        mode,
        neighbors_per_node: r.u32()? as usize,
        search_breadth: r.u32()? as usize,
    };
    let model_id = r.str()?.to_owned();
    let count = r.u64()?;
    // Each entry needs at least three length prefixes plus the vector.
    let min_entry = 12u64 + dim as u64 * 8;
    if count.saturating_mul(min_entry) > r.buf.len() as u64 {
        return Err(IndexError::Corrupt("entry count exceeds payload".into()));
    }
    let count = count as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let chunk_id = r.str()?.to_owned();
        let body = r.str()?.to_owned();
        let metadata: ChunkMetadata = serde_json::from_str(r.str()?)
            .map_err(|e| IndexError::Corrupt(format!("metadata: {e}")))?;
        let values = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let vector = EmbeddingVector::new(values, model_id.clone())
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        entries.push(IndexEntry {
            chunk_id,
            vector,
            metadata,
            body,
        });
    }
    let graph = match r.u8()? {
        0 => None,
        1 => Some(decode_graph(&mut r, count)?),
        g => return Err(IndexError::Corrupt(format!("unknown graph flag {g}"))),
    };
    if !r.buf.is_empty() {
        return Err(IndexError::Corrupt("unread payload bytes".into()));
    }
    if graph.is_some() != (mode == SearchMode::Approximate && count > 0) {
        return Err(IndexError::Corrupt("graph presence does not match mode".into()));
    }
    if entries.is_empty() {
        params.validate().map_err(|e| IndexError::Corrupt(e.to_string()))?;
        return Ok(VectorIndex::empty(dim, &model_id, params));
    }
    VectorIndex::assemble(entries, dim, model_id, params, graph).map_err(|e| match e {
        IndexError::InvalidParams(m) => IndexError::Corrupt(m),
        other => other,
    })
}

fn decode_graph(r: &mut Reader<'_>, count: usize) -> Result<Graph> {
    let entry = r.u32()?;
    let top_level = r.u8()? as usize;
    if entry as usize >= count {
        return Err(IndexError::Corrupt("graph entry point out of range".into()));
    }
    let mut links = Vec::with_capacity(count);
    for _ in 0..count {
        let level = r.u8()? as usize;
        if level > top_level {
            return Err(IndexError::Corrupt("node above top level".into()));
        }
        let mut levels = Vec::with_capacity(level + 1);
        for _ in 0..=level {
            let n = r.u32()? as usize;
            if n > r.buf.len() / 4 {
                return Err(IndexError::Corrupt("neighbor list exceeds payload".into()));
            }
            let list = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            levels.push(list);
        }
        links.push(levels);
    }
    if links[entry as usize].len() != top_level + 1 {
        return Err(IndexError::Corrupt("entry point is not on the top level".into()));
    }
    for levels in &links {
        for (l, list) in levels.iter().enumerate() {
            for &n in list {
                if n as usize >= count || links[n as usize].len() <= l {
                    return Err(IndexError::Corrupt("dangling graph edge".into()));
                }
            }
        }
    }
    Ok(Graph {
        entry,
        top_level,
        links,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DifficultyTier;

    pub(crate) fn entry(id: &str, values: &[f64]) -> IndexEntry {
        IndexEntry {
            chunk_id: id.into(),
            vector: EmbeddingVector::new(values.to_vec(), "m")
                .unwrap()
                .normalized()
                .unwrap(),
            metadata: ChunkMetadata {
                topic_domain: "Torsion".into(),
                source_ref: format!("doc:{id}"),
                difficulty_tier: DifficultyTier::Foundational,
                prerequisites: vec![],
                oversized: false,
            },
            body: format!("body of {id}"),
        }
    }

    fn q(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "m").unwrap()
    }

    #[test]
    fn single_entry_self_retrieval() {
        let idx = VectorIndex::build(vec![entry("a", &[0.6, 0.8])], AnnParams::default()).unwrap();
        let r = idx.search(&q(&[0.6, 0.8]), 5).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].rank, 1);
        assert!((r[0].score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = VectorIndex::build(
            vec![entry("b", &[1.0, 0.0]), entry("a", &[1.0, 0.0])],
            AnnParams::default(),
        )
        .unwrap();
        let r = idx.search(&q(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(r[0].chunk_id, "a");
        assert_eq!(r[1].chunk_id, "b");
        assert_eq!((r[0].rank, r[1].rank), (1, 2));
    }

    #[test]
    fn k_is_clamped() {
        let idx = VectorIndex::build(
            vec![entry("a", &[1.0, 0.0]), entry("b", &[0.0, 1.0])],
            AnnParams::default(),
        )
        .unwrap();
        assert_eq!(idx.search(&q(&[1.0, 1.0]), 10).unwrap().len(), 2);
        assert!(idx.search(&q(&[1.0, 1.0]), 0).unwrap().is_empty());
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            VectorIndex::build(vec![entry("a", &[1.0]), entry("a", &[1.0])], AnnParams::default()),
            Err(IndexError::DuplicateChunkId("a".into()))
        );
        assert!(matches!(
            VectorIndex::build(vec![entry("a", &[1.0]), entry("b", &[1.0, 0.0])], AnnParams::default()),
            Err(IndexError::DimensionMismatch { expected: 1, got: 2 })
        ));
        assert_eq!(
            VectorIndex::build(vec![], AnnParams::default()),
            Err(IndexError::EmptyIndex)
        );
        let mut e = entry("a", &[1.0]);
        e.vector = EmbeddingVector::new(vec![2.0], "m").unwrap();
        assert!(matches!(
            VectorIndex::build(vec![e], AnnParams::default()),
            Err(IndexError::NotNormalized(_))
        ));
    }

    #[test]
    fn search_errors() {
        let idx = VectorIndex::build(vec![entry("a", &[1.0, 0.0])], AnnParams::default()).unwrap();
        assert!(matches!(
            idx.search(&q(&[1.0]), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert_eq!(idx.search(&q(&[0.0, 0.0]), 1), Err(IndexError::ZeroQuery));
        let empty = VectorIndex::empty(2, "m", AnnParams::default());
        assert_eq!(empty.search(&q(&[1.0, 0.0]), 1), Err(IndexError::EmptyIndex));
    }

    #[test]
    fn filtered_search() {
        let mut b = entry("b", &[1.0, 0.1]);
        b.metadata.topic_domain = "Bending".into();
        let idx = VectorIndex::build(vec![entry("a", &[1.0, 0.0]), b], AnnParams::default()).unwrap();
        let r = idx
            .search_where(&q(&[1.0, 0.0]), 5, |e| e.metadata.topic_domain == "Bending")
            .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].chunk_id, "b");
        assert_eq!(r[0].rank, 1);
    }

    #[test]
    fn with_entries_replaces_by_id() {
        let idx = VectorIndex::build(vec![entry("a", &[1.0, 0.0])], AnnParams::default()).unwrap();
        let next = idx
            .with_entries(vec![entry("a", &[0.0, 1.0]), entry("b", &[1.0, 1.0])])
            .unwrap();
        assert_eq!(next.len(), 2);
        assert_eq!(next.get("a").unwrap().vector.values(), &[0.0, 1.0]);
        assert_eq!(idx.len(), 1);
        let from_empty = VectorIndex::empty(2, "m", AnnParams::default())
            .with_entries(vec![entry("x", &[1.0, 0.0])])
            .unwrap();
        assert_eq!(from_empty.len(), 1);
    }

    #[test]
    fn adaptive_depth() {
        let d = RetrievalDepth::default();
        assert_eq!(d.k_for(0), 5);
        assert_eq!(d.k_for(1), 5);
        assert_eq!(d.k_for(2), 8);
        assert_eq!(d.k_for(3), 8);
    }

    #[test]
    fn round_trip_three_entries() {
        for params in [AnnParams::default(), AnnParams::approximate()] {
            let idx = VectorIndex::build(
                vec![
                    entry("a", &[1.0, 0.0, 0.2]),
                    entry("b", &[0.1, 1.0, 0.0]),
                    entry("c", &[0.3, 0.3, 1.0]),
                ],
                params,
            )
            .unwrap();
            let loaded = VectorIndex::load(&idx.save()).unwrap();
            assert_eq!(loaded, idx);
            let query = q(&[0.5, 0.2, 0.9]);
            assert_eq!(loaded.search(&query, 3).unwrap(), idx.search(&query, 3).unwrap());
        }
    }

    #[test]
    fn empty_index_round_trip() {
        let idx = VectorIndex::empty(4, "m", AnnParams::approximate());
        assert_eq!(VectorIndex::load(&idx.save()).unwrap(), idx);
    }

    #[test]
    fn corruption_is_detected() {
        let idx = VectorIndex::build(vec![entry("a", &[1.0, 0.0])], AnnParams::default()).unwrap();
        let bytes = idx.save();
        for i in HEADER_LEN..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert_eq!(VectorIndex::load(&bad), Err(IndexError::ChecksumError), "byte {i}");
        }
    }

    #[test]
    fn header_errors() {
        let idx = VectorIndex::build(vec![entry("a", &[1.0, 0.0])], AnnParams::default()).unwrap();
        let bytes = idx.save();
        assert_eq!(VectorIndex::load(&bytes[..5]), Err(IndexError::TruncatedFile));
        assert_eq!(VectorIndex::load(&bytes[..bytes.len() - 1]), Err(IndexError::TruncatedFile));
        let mut v = bytes.clone();
        v[8] = 9;
        assert_eq!(
            VectorIndex::load(&v),
            Err(IndexError::VersionMismatch { found: 9, expected: 1 })
        );
        let mut m = bytes.clone();
        m[0] = b'X';
        assert_eq!(VectorIndex::load(&m), Err(IndexError::BadMagic));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(VectorIndex::load(&long), Err(IndexError::Corrupt(_))));
    }

    #[test]
    fn graph_is_deterministic() {
        let entries: Vec<_> = (0..200)
            .map(|i| {
                let x = i as f64;
                entry(&format!("e{i}"), &[x.sin(), x.cos(), (x * 0.37).sin(), 1.0])
            })
            .collect();
        let a = VectorIndex::build(entries.clone(), AnnParams::approximate()).unwrap();
        let b = VectorIndex::build(entries, AnnParams::approximate()).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.save(), b.save());
    }

    #[test]
    fn graph_degrees_are_bounded() {
        let entries: Vec<_> = (0..300)
            .map(|i| {
                let x = i as f64 * 0.1;
                entry(&format!("e{i:03}"), &[x.sin(), x.cos(), (3.0 * x).sin()])
            })
            .collect();
        let p = AnnParams {
            mode: SearchMode::Approximate,
            neighbors_per_node: 4,
            search_breadth: 16,
        };
        let idx = VectorIndex::build(entries, p).unwrap();
        let g = idx.graph.as_ref().unwrap();
        for levels in &g.links {
            for (l, list) in levels.iter().enumerate() {
                assert!(list.len() <= idx.max_degree(l));
            }
        }
    }
}
