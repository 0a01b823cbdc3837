//! Heading-aware sliding-window chunking.
//!
//! A document is split into topic segments at heading-like text blocks. Each
//! segment is cut into windows of at most `max_chunk_tokens` whitespace tokens
//! that advance by `max_chunk_tokens - overlap_tokens`. Formula and diagram
//! blocks are treated as indivisible: a window never ends inside one and the
//! overlap never copies one into the following chunk.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{BlockKind, DifficultyTier, Document};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("invalid chunk policy: {0}")]
    Policy(String),
    #[error("document has no text to chunk")]
    EmptyDocument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub max_chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub respect_boundaries: bool,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            max_chunk_tokens: 400,
            overlap_tokens: 50,
            respect_boundaries: true,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.max_chunk_tokens == 0 {
            return Err(ChunkError::Policy("max_chunk_tokens must be positive".into()));
        }
        if self.overlap_tokens >= self.max_chunk_tokens {
            return Err(ChunkError::Policy(format!(
                "overlap_tokens ({}) must be smaller than max_chunk_tokens ({})",
                self.overlap_tokens, self.max_chunk_tokens
            )));
        }
        Ok(())
    }
}

/// `doc_id:pN` or `doc_id:pN-pM`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceRef {
    pub doc_id: String,
    pub first_page: u32,
    pub last_page: u32,
}

impl fmt::Display for SourceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.first_page == self.last_page {
            write!(f, "{}:p{}", self.doc_id, self.first_page)
        } else {
            write!(f, "{}:p{}-p{}", self.doc_id, self.first_page, self.last_page)
        }
    }
}

impl SourceRef {
    pub fn parse(s: &str) -> Option<Self> {
        let (doc_id, pages) = s.rsplit_once(':')?;
        let pages = pages.strip_prefix('p')?;
        let (first, last) = match pages.split_once("-p") {
            Some((a, b)) => (a.parse().ok()?, b.parse().ok()?),
            None => {
                let p = pages.parse().ok()?;
                (p, p)
            }
        };
        (first >= 1 && first <= last && !doc_id.is_empty()).then(|| Self {
            doc_id: doc_id.to_owned(),
            first_page: first,
            last_page: last,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMetadata {
    pub topic_domain: String,
    pub source_ref: String,
    pub difficulty_tier: DifficultyTier,
    #[serde(default)]
    pub prerequisites: Vec<String>,
    /// Set when an indivisible block alone exceeds the token limit.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oversized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub body: String,
    pub token_count: usize,
    pub metadata: ChunkMetadata,
}

/// Deterministic id over body and source reference.
pub fn chunk_id(body: &str, source_ref: &str) -> String {
    let mut h = Sha256::new();
    h.update(body.as_bytes());
    h.update([0u8]);
    h.update(source_ref.as_bytes());
    let digest = h.finalize();
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

/// Whitespace token count, the unit for every budget in this crate.
pub fn count_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

static NUMBERED_HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:\d+(?:\.\d+)+\.?|\d+[.)]|[IVX]+\.)\s+(\S.*)$").unwrap());

const MAX_HEADING_TOKENS: usize = 12;

/// Returns the topic name if the text looks like a heading: one short line
/// that is either numbered ("3.2 Angle of Twist") or written in capitals.
pub fn heading_topic(body: &str) -> Option<String> {
    let line = body.trim();
    if line.is_empty() || line.contains('\n') || count_tokens(line) > MAX_HEADING_TOKENS {
        return None;
    }
    if let Some(caps) = NUMBERED_HEADING.captures(line) {
        let rest = caps[1].trim();
        if rest.chars().next().is_some_and(char::is_alphabetic) {
            return Some(rest.to_owned());
        }
    }
    let letters = line.chars().filter(|c| c.is_alphabetic()).count();
    if letters >= 2 && !line.chars().any(char::is_lowercase) {
        return Some(line.to_owned());
    }
    None
}

#[derive(Debug, Clone, Copy)]
struct Token {
    block: usize,
    start: usize,
    end: usize,
}

struct Segment {
    /// Topic in effect from each token index onward.
    topics: Vec<(usize, String)>,
    tokens: Vec<Token>,
    /// Token index ranges of indivisible blocks.
    groups: Vec<(usize, usize)>,
}

fn tokenize(body: &str, block: usize) -> impl Iterator<Item = Token> + '_ {
    let mut pos = 0;
    body.split_whitespace().map(move |w| {
        let start = pos + body[pos..].find(w).expect("token comes from body");
        pos = start + w.len();
        Token {
            block,
            start,
            end: pos,
        }
    })
}

fn segments(doc: &Document, policy: &ChunkPolicy) -> Vec<Segment> {
    let default_topic = if doc.title.trim().is_empty() {
        doc.doc_id.clone()
    } else {
        doc.title.trim().to_owned()
    };
    let mut out = vec![Segment {
        topics: vec![(0, default_topic)],
        tokens: Vec::new(),
        groups: Vec::new(),
    }];
    for (i, b) in doc.blocks.iter().enumerate() {
        if b.kind == BlockKind::Text {
            if let Some(topic) = heading_topic(&b.body) {
                let current = out.last_mut().expect("non-empty");
                if policy.respect_boundaries && !current.tokens.is_empty() {
                    out.push(Segment {
                        topics: vec![(0, topic)],
                        tokens: Vec::new(),
                        groups: Vec::new(),
                    });
                } else {
                    let at = current.tokens.len();
                    current.topics.retain(|&(j, _)| j < at);
                    current.topics.push((at, topic));
                }
            }
        }
        let seg = out.last_mut().expect("non-empty");
        let first = seg.tokens.len();
        seg.tokens.extend(tokenize(&b.body, i));
        if policy.respect_boundaries && b.kind.is_atomic() && seg.tokens.len() > first {
            seg.groups.push((first, seg.tokens.len()));
        }
    }
    out.retain(|s| !s.tokens.is_empty());
    out
}

impl Segment {
    fn topic_at(&self, token: usize) -> &str {
        self.topics
            .iter()
            .rev()
            .find(|(j, _)| *j <= token)
            .map(|(_, t)| t.as_str())
            .expect("topic at index 0")
    }
}

/// Splits `[0, n)` into windows; returns `(start, end)` token ranges.
fn windows(n: usize, groups: &[(usize, usize)], policy: &ChunkPolicy) -> Vec<(usize, usize)> {
    let max = policy.max_chunk_tokens;
    let overlap = policy.overlap_tokens;
    let straddling = |e: usize| groups.iter().copied().find(|&(gs, ge)| gs < e && e < ge);

    let mut out = Vec::new();
    let mut s = 0;
    loop {
        let mut e = (s + max).min(n);
        let mut cut_before = None;
        if let Some((gs, ge)) = straddling(e) {
            if gs > s {
                e = gs;
                cut_before = Some((gs, ge));
            } else {
                // The window opens on a block larger than the limit.
                e = ge;
            }
        }
        out.push((s, e));
        if e >= n {
            break;
        }
        let mut next = if e - s > overlap { e - overlap } else { e };
        if let Some(ge) = groups
            .iter()
            .filter(|&&(gs, ge)| gs < e && ge > next)
            .map(|&(_, ge)| ge)
            .max()
        {
            next = next.max(ge);
        }
        if let Some((gs, ge)) = cut_before {
            if next + max < ge {
                next = gs;
            }
        }
        s = next;
    }
    out
}

/// Cuts a merged document into chunks.
pub fn chunk_document(doc: &Document, policy: &ChunkPolicy) -> Result<Vec<Chunk>, ChunkError> {
    policy.validate()?;
    let tier = doc.difficulty_tier.unwrap_or_default();
    let mut chunks = Vec::new();
    for seg in segments(doc, policy) {
        for (s, e) in windows(seg.tokens.len(), &seg.groups, policy) {
            let toks = &seg.tokens[s..e];
            let body = render(doc, toks);
            let pages = toks.iter().map(|t| doc.blocks[t.block].page);
            let source_ref = SourceRef {
                doc_id: doc.doc_id.clone(),
                first_page: pages.clone().min().expect("window is non-empty"),
                last_page: pages.max().expect("window is non-empty"),
            }
            .to_string();
            chunks.push(Chunk {
                chunk_id: chunk_id(&body, &source_ref),
                token_count: toks.len(),
                metadata: ChunkMetadata {
                    topic_domain: seg.topic_at(s).to_owned(),
                    source_ref,
                    difficulty_tier: tier,
                    prerequisites: doc.prerequisites.clone(),
                    oversized: toks.len() > policy.max_chunk_tokens,
                },
                body,
            });
        }
    }
    if chunks.is_empty() {
        return Err(ChunkError::EmptyDocument);
    }
    Ok(chunks)
}

/// Original text of a token run, keeping intra-block spacing and separating
/// blocks by a blank line.
fn render(doc: &Document, toks: &[Token]) -> String {
    let mut parts: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let block = toks[i].block;
        let run = toks[i..].iter().take_while(|t| t.block == block).count();
        let body = &doc.blocks[block].body;
        parts.push(&body[toks[i].start..toks[i + run - 1].end]);
        i += run;
    }
    parts.join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{merge_documents, ContentBlock, DocumentMeta};

    fn doc_of(blocks: Vec<(BlockKind, u32, String)>, pages: u32) -> Document {
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(i, (kind, page, body))| ContentBlock {
                kind,
                page,
                body,
                origin: "o".into(),
                order: i as u32,
            })
            .collect();
        merge_documents(
            &[("o".into(), blocks)],
            &DocumentMeta {
                doc_id: "lec07".into(),
                title: "Torsion".into(),
                source_path: "lec07.pdf".into(),
                pages,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn words(range: std::ops::Range<usize>) -> String {
        range.map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    /// Window arithmetic oracle: chunk count for n tokens is
    /// ceil((n - overlap) / (max - overlap)) when n > max.
    fn expected_windows(n: usize, max: usize, overlap: usize) -> usize {
        if n <= max {
            1
        } else {
            (n - overlap).div_ceil(max - overlap)
        }
    }

    #[test]
    fn thousand_tokens_make_three_windows() {
        let doc = doc_of(vec![(BlockKind::Text, 1, words(0..1000))], 1);
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        assert_eq!(expected_windows(1000, 400, 50), 3);
        let counts: Vec<_> = chunks.iter().map(|c| c.token_count).collect();
        assert_eq!(counts, [400, 400, 300]);
        assert!(chunks[1].body.starts_with("w350 "));
        assert!(chunks[2].body.starts_with("w700 "));
    }

    #[test]
    fn window_count_matches_arithmetic() {
        for n in [1, 50, 399, 400, 401, 750, 751, 2000, 2345] {
            let doc = doc_of(vec![(BlockKind::Text, 1, words(0..n))], 1);
            let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
            assert_eq!(chunks.len(), expected_windows(n, 400, 50), "n = {n}");
        }
    }

    #[test]
    fn short_document_is_one_chunk() {
        let doc = doc_of(vec![(BlockKind::Text, 1, words(0..200))], 1);
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].token_count, 200);
        assert_eq!(chunks[0].metadata.source_ref, "lec07:p1");
    }

    #[test]
    fn empty_document() {
        let doc = Document {
            doc_id: "d".into(),
            title: String::new(),
            source_path: String::new(),
            pages: 1,
            blocks: vec![],
            coverage: Default::default(),
            difficulty_tier: None,
            prerequisites: vec![],
        };
        assert_eq!(
            chunk_document(&doc, &ChunkPolicy::default()),
            Err(ChunkError::EmptyDocument)
        );
    }

    #[test]
    fn policy_errors() {
        let doc = doc_of(vec![(BlockKind::Text, 1, "x".into())], 1);
        for (max, overlap) in [(10, 10), (10, 11), (0, 0)] {
            let p = ChunkPolicy {
                max_chunk_tokens: max,
                overlap_tokens: overlap,
                respect_boundaries: true,
            };
            assert!(matches!(chunk_document(&doc, &p), Err(ChunkError::Policy(_))));
        }
    }

    #[test]
    fn headings_become_topics_and_boundaries() {
        let doc = doc_of(
            vec![
                (BlockKind::Text, 1, "1. Shear Stress in Shafts".into()),
                (BlockKind::Text, 1, words(0..30)),
                (BlockKind::Text, 2, "ANGLE OF TWIST".into()),
                (BlockKind::Text, 2, words(30..60)),
            ],
            2,
        );
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].metadata.topic_domain, "Shear Stress in Shafts");
        assert_eq!(chunks[1].metadata.topic_domain, "ANGLE OF TWIST");
        assert_eq!(chunks[1].metadata.source_ref, "lec07:p2");
        assert!(chunks[1].body.starts_with("ANGLE OF TWIST\n\nw30"));
    }

    #[test]
    fn topics_follow_headings_without_boundaries() {
        let doc = doc_of(
            vec![
                (BlockKind::Text, 1, words(0..10)),
                (BlockKind::Text, 1, "BENDING".into()),
                (BlockKind::Text, 1, words(10..700)),
            ],
            1,
        );
        let p = ChunkPolicy {
            respect_boundaries: false,
            ..Default::default()
        };
        let chunks = chunk_document(&doc, &p).unwrap();
        assert_eq!(chunks[0].metadata.topic_domain, "Torsion");
        assert_eq!(chunks[1].metadata.topic_domain, "BENDING");
    }

    #[test]
    fn topic_falls_back_to_title() {
        let doc = doc_of(vec![(BlockKind::Text, 1, "plain words here".into())], 1);
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        assert_eq!(chunks[0].metadata.topic_domain, "Torsion");
    }

    #[test]
    fn heading_detection() {
        assert_eq!(heading_topic("3.2 Angle of Twist").as_deref(), Some("Angle of Twist"));
        assert_eq!(heading_topic("TORSION").as_deref(), Some("TORSION"));
        assert_eq!(heading_topic("II. Statics").as_deref(), Some("Statics"));
        assert_eq!(heading_topic("The shaft twists."), None);
        assert_eq!(heading_topic("12 kN"), None);
        assert_eq!(heading_topic("A\nB"), None);
    }

    #[test]
    fn formula_is_not_split() {
        let formula = r"\tau_{max} = \frac{T c}{J} \quad \text{with} \quad J = \frac{\pi d^4}{32}";
        let n_formula = count_tokens(formula);
        let doc = doc_of(
            vec![
                (BlockKind::Text, 1, words(0..395)),
                (BlockKind::Formula, 2, formula.into()),
                (BlockKind::Text, 3, words(395..600)),
            ],
            3,
        );
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        let holding: Vec<_> = chunks.iter().filter(|c| c.body.contains(formula)).collect();
        assert_eq!(holding.len(), 1);
        assert!(chunks.iter().all(|c| c.token_count <= 400));
        // First window ends right before the formula.
        assert_eq!(chunks[0].token_count, 395);
        assert!(n_formula < 50);
    }

    #[test]
    fn oversized_block_is_its_own_chunk() {
        let big = words(0..450);
        let doc = doc_of(
            vec![
                (BlockKind::Text, 1, words(1000..1100)),
                (BlockKind::Diagram, 2, big.clone()),
                (BlockKind::Text, 3, words(2000..2100)),
            ],
            3,
        );
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        let over: Vec<_> = chunks.iter().filter(|c| c.metadata.oversized).collect();
        assert_eq!(over.len(), 1);
        assert_eq!(over[0].body, big);
        assert_eq!(over[0].token_count, 450);
        assert_eq!(chunks.iter().filter(|c| c.body.contains(&big)).count(), 1);
    }

    #[test]
    fn without_boundaries_formulas_may_split() {
        let doc = doc_of(
            vec![
                (BlockKind::Text, 1, words(0..395)),
                (BlockKind::Formula, 2, words(395..420)),
            ],
            2,
        );
        let p = ChunkPolicy {
            respect_boundaries: false,
            ..Default::default()
        };
        let chunks = chunk_document(&doc, &p).unwrap();
        assert_eq!(chunks[0].token_count, 400);
    }

    #[test]
    fn source_ref_spans_pages() {
        let doc = doc_of(
            vec![
                (BlockKind::Text, 3, words(0..10)),
                (BlockKind::Text, 4, words(10..20)),
            ],
            4,
        );
        let chunks = chunk_document(&doc, &ChunkPolicy::default()).unwrap();
        assert_eq!(chunks[0].metadata.source_ref, "lec07:p3-p4");
        let r = SourceRef::parse(&chunks[0].metadata.source_ref).unwrap();
        assert_eq!((r.first_page, r.last_page), (3, 4));
    }

    #[test]
    fn source_ref_parse() {
        assert_eq!(SourceRef::parse("a:b:p2").unwrap().doc_id, "a:b");
        assert!(SourceRef::parse("d:p0").is_none());
        assert!(SourceRef::parse("d:p3-p2").is_none());
        assert!(SourceRef::parse("d:3").is_none());
    }

    #[test]
    fn chunk_ids_are_stable() {
        assert_eq!(chunk_id("b", "d:p1"), chunk_id("b", "d:p1"));
        assert_ne!(chunk_id("b", "d:p1"), chunk_id("b", "d:p2"));
        assert_ne!(chunk_id("ab", "c"), chunk_id("a", "bc"));
    }

    #[test]
    fn tier_and_prerequisites_flow_from_document() {
        let mut doc = doc_of(vec![(BlockKind::Text, 1, "x y".into())], 1);
        doc.difficulty_tier = Some(DifficultyTier::Advanced);
        doc.prerequisites = vec!["Equilibrium".into()];
        let c = &chunk_document(&doc, &ChunkPolicy::default()).unwrap()[0];
        assert_eq!(c.metadata.difficulty_tier, DifficultyTier::Advanced);
        assert_eq!(c.metadata.prerequisites, ["Equilibrium"]);
    }
}
