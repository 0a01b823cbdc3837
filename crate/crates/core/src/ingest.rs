//! Extractor fan-in.
//!
//! Layout, formula and vision extractors run out of process and hand their
//! per-page results over as JSON interchange payloads:
//!
//! ```text
//! {"origin": "docling", "doc_id": "lec07", "pages": 6,
//!  "blocks": [{"kind": "text", "page": 1, "order": 0, "body": "..."}]}
//! ```
//!
//! [`parse_extraction`] validates one payload, [`merge_documents`] aligns any
//! number of them by page into a single [`Document`] with per-kind character
//! coverage.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token some layout extractors emit in place of a formula they could not decode.
pub const FORMULA_PLACEHOLDER: &str = "<!-- formula-not-decoded -->";

/// Minimum normalized edit similarity at which two text blocks count as duplicates.
pub const DUPLICATE_SIMILARITY: f64 = 0.9;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("payload is not valid UTF-8: {0}")]
    Encoding(#[from] std::str::Utf8Error),
    #[error("payload does not match the interchange schema: {0}")]
    Schema(String),
    #[error("block on page {page} exceeds document page count {pages}")]
    PageOutOfRange { page: u32, pages: u32 },
    #[error("no blocks to merge")]
    EmptyMerge,
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Text,
    Table,
    Formula,
    Diagram,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [Self::Text, Self::Table, Self::Formula, Self::Diagram];

    /// Intra-page ordering used by the merger.
    fn priority(self) -> u8 {
        match self {
            Self::Text => 0,
            Self::Table => 1,
            Self::Formula => 2,
            Self::Diagram => 3,
        }
    }

    /// Blocks of these kinds are never split across chunks.
    pub fn is_atomic(self) -> bool {
        matches!(self, Self::Formula | Self::Diagram)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Text => "text",
            Self::Table => "table",
            Self::Formula => "formula",
            Self::Diagram => "diagram",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentBlock {
    pub kind: BlockKind,
    /// 1-based page number.
    pub page: u32,
    pub body: String,
    pub origin: String,
    /// Position within the page.
    pub order: u32,
}

impl ContentBlock {
    pub fn char_len(&self) -> usize {
        self.body.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DifficultyTier {
    #[default]
    Foundational,
    Intermediate,
    Advanced,
}

/// Descriptive fields supplied by the caller of [`merge_documents`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DocumentMeta {
    pub doc_id: String,
    pub title: String,
    pub source_path: String,
    pub pages: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_tier: Option<DifficultyTier>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prerequisites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub source_path: String,
    pub pages: u32,
    pub blocks: Vec<ContentBlock>,
    /// Characters per block kind.
    pub coverage: BTreeMap<BlockKind, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_tier: Option<DifficultyTier>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prerequisites: Vec<String>,
}

impl Document {
    pub fn total_chars(&self) -> usize {
        self.coverage.values().sum()
    }

    pub fn meta(&self) -> DocumentMeta {
        DocumentMeta {
            doc_id: self.doc_id.clone(),
            title: self.title.clone(),
            source_path: self.source_path.clone(),
            pages: self.pages,
            difficulty_tier: self.difficulty_tier,
            prerequisites: self.prerequisites.clone(),
        }
    }

    /// Checks the structural invariants of a document received from outside,
    /// e.g. over HTTP.
    pub fn validate(&self) -> Result<()> {
        if self.pages == 0 {
            return Err(IngestError::Schema("pages must be positive".into()));
        }
        let mut prev = None;
        for b in &self.blocks {
            if b.page == 0 || b.page > self.pages {
                return Err(IngestError::PageOutOfRange {
                    page: b.page,
                    pages: self.pages,
                });
            }
            if b.body.trim().is_empty() {
                return Err(IngestError::Schema("block with empty body".into()));
            }
            let key = (b.page, b.order);
            if prev.is_some_and(|p| p > key) {
                return Err(IngestError::Schema("blocks not sorted by (page, order)".into()));
            }
            prev = Some(key);
        }
        if compute_coverage(&self.blocks) != self.coverage {
            return Err(IngestError::Schema("coverage does not match block bodies".into()));
        }
        Ok(())
    }
}

/// One extractor's output after validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub origin: String,
    pub doc_id: String,
    pub pages: u32,
    pub blocks: Vec<ContentBlock>,
    /// Blocks dropped for having an empty body or an undecoded formula.
    pub dropped: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawPayload {
    origin: String,
    doc_id: String,
    pages: u32,
    blocks: Vec<RawBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawBlock {
    kind: BlockKind,
    page: u32,
    order: u32,
    body: String,
}

/// Parses one interchange payload.
///
/// Formula blocks carrying the placeholder token or unbalanced braces are
/// dropped; in other kinds the placeholder is cut out of the body. Blocks that
/// end up empty are dropped too. Every drop is counted in
/// [`Extraction::dropped`].
pub fn parse_extraction(payload: &[u8]) -> Result<Extraction> {
    let text = std::str::from_utf8(payload)?;
    let raw: RawPayload =
        serde_json::from_str(text).map_err(|e| IngestError::Schema(e.to_string()))?;
    if raw.origin.trim().is_empty() {
        return Err(IngestError::Schema("origin must be non-empty".into()));
    }
    if raw.pages == 0 {
        return Err(IngestError::Schema("pages must be positive".into()));
    }

    let mut seen = HashSet::new();
    let mut blocks = Vec::with_capacity(raw.blocks.len());
    let mut dropped = 0;
    for b in raw.blocks {
        if b.page == 0 {
            return Err(IngestError::Schema("page numbers are 1-based".into()));
        }
        if !seen.insert((b.page, b.order)) {
            return Err(IngestError::Schema(format!(
                "duplicate block position page {} order {}",
                b.page, b.order
            )));
        }
        let body = match sanitize_body(b.kind, b.body) {
            Some(body) => body,
            None => {
                dropped += 1;
                continue;
            }
        };
        blocks.push(ContentBlock {
            kind: b.kind,
            page: b.page,
            body,
            origin: raw.origin.clone(),
            order: b.order,
        });
    }
    if dropped > 0 {
        tracing::warn!(origin = %raw.origin, dropped, "dropped unusable extraction blocks");
    }
    Ok(Extraction {
        origin: raw.origin,
        doc_id: raw.doc_id,
        pages: raw.pages,
        blocks,
        dropped,
    })
}

fn sanitize_body(kind: BlockKind, body: String) -> Option<String> {
    let body = if kind == BlockKind::Formula {
        if body.contains(FORMULA_PLACEHOLDER) || !braces_balanced(&body) {
            return None;
        }
        body
    } else if body.contains(FORMULA_PLACEHOLDER) {
        // Removing one occurrence can join its neighbours into another.
        let mut body = body;
        while body.contains(FORMULA_PLACEHOLDER) {
            body = body.replace(FORMULA_PLACEHOLDER, "");
        }
        body
    } else {
        body
    };
    (!body.trim().is_empty()).then_some(body)
}

fn braces_balanced(s: &str) -> bool {
    let mut depth = 0usize;
    let mut escaped = false;
    for c in s.chars() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' => escaped = true,
            '{' => depth += 1,
            '}' => match depth.checked_sub(1) {
                Some(d) => depth = d,
                None => return false,
            },
            _ => {}
        }
    }
    depth == 0
}

/// Serializes blocks back into an interchange payload.
pub fn to_interchange(origin: &str, doc_id: &str, pages: u32, blocks: &[ContentBlock]) -> Vec<u8> {
    let raw = RawPayload {
        origin: origin.to_owned(),
        doc_id: doc_id.to_owned(),
        pages,
        blocks: blocks
            .iter()
            .map(|b| RawBlock {
                kind: b.kind,
                page: b.page,
                order: b.order,
                body: b.body.clone(),
            })
            .collect(),
    };
    serde_json::to_vec(&raw).expect("interchange payload serializes")
}

/// Lowercased, whitespace-collapsed form used for duplicate detection.
fn normalize_for_similarity(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized edit similarity in `[0, 1]` between two block bodies.
pub fn text_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(&normalize_for_similarity(a), &normalize_for_similarity(b))
}

fn compute_coverage(blocks: &[ContentBlock]) -> BTreeMap<BlockKind, usize> {
    let mut coverage = BTreeMap::new();
    for b in blocks {
        *coverage.entry(b.kind).or_insert(0) += b.char_len();
    }
    coverage
}

/// Merges per-extractor block lists into one document.
///
/// Each block is stamped with the origin it arrived under. Blocks are ordered
/// by page, then kind (text, table, formula, diagram), then origin, then their
/// original order, and renumbered within each page. Two text blocks on the same
/// page from different origins whose similarity reaches
/// [`DUPLICATE_SIMILARITY`] collapse to the longer of the pair.
pub fn merge_documents(
    extractions: &[(String, Vec<ContentBlock>)],
    meta: &DocumentMeta,
) -> Result<Document> {
    let mut blocks: Vec<ContentBlock> = Vec::new();
    for (origin, list) in extractions {
        for b in list {
            if b.page == 0 || b.page > meta.pages {
                return Err(IngestError::PageOutOfRange {
                    page: b.page,
                    pages: meta.pages,
                });
            }
            let mut b = b.clone();
            b.origin.clone_from(origin);
            blocks.push(b);
        }
    }
    if blocks.is_empty() {
        return Err(IngestError::EmptyMerge);
    }

    blocks.sort_by(|a, b| {
        (a.page, a.kind.priority(), &a.origin, a.order)
            .cmp(&(b.page, b.kind.priority(), &b.origin, b.order))
    });

    let removed = duplicate_text_blocks(&blocks);
    let mut blocks: Vec<ContentBlock> = blocks
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, b)| b)
        .collect();

    let mut page = 0;
    let mut next = 0;
    for b in &mut blocks {
        if b.page != page {
            page = b.page;
            next = 0;
        }
        b.order = next;
        next += 1;
    }

    Ok(Document {
        doc_id: meta.doc_id.clone(),
        title: meta.title.clone(),
        source_path: meta.source_path.clone(),
        pages: meta.pages,
        coverage: compute_coverage(&blocks),
        blocks,
        difficulty_tier: meta.difficulty_tier,
        prerequisites: meta.prerequisites.clone(),
    })
}

/// Indices of text blocks that lose to a longer near-duplicate from another
/// origin on the same page. Input must be sorted by page.
fn duplicate_text_blocks(blocks: &[ContentBlock]) -> HashSet<usize> {
    let mut removed = HashSet::new();
    let mut start = 0;
    while start < blocks.len() {
        let page = blocks[start].page;
        let end = start + blocks[start..].iter().take_while(|b| b.page == page).count();
        let texts: Vec<(usize, String)> = (start..end)
            .filter(|&i| blocks[i].kind == BlockKind::Text)
            .map(|i| (i, normalize_for_similarity(&blocks[i].body)))
            .collect();
        for (x, (i, a)) in texts.iter().enumerate() {
            for (j, b) in &texts[x + 1..] {
                if removed.contains(i) || removed.contains(j) {
                    continue;
                }
                if blocks[*i].origin == blocks[*j].origin {
                    continue;
                }
                // Edit distance is at least the length difference, so a large
                // length gap rules out a match without the quadratic comparison.
                let (la, lb) = (a.chars().count(), b.chars().count());
                let longest = la.max(lb).max(1) as f64;
                if 1.0 - (la.abs_diff(lb) as f64) / longest < DUPLICATE_SIMILARITY {
                    continue;
                }
                if strsim::normalized_levenshtein(a, b) >= DUPLICATE_SIMILARITY {
                    let loser = if blocks[*j].char_len() > blocks[*i].char_len() { *i } else { *j };
                    removed.insert(loser);
                }
            }
        }
        start = end;
    }
    removed
}
