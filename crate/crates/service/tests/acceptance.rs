//! Acceptance checks. Prints one PASS/FAIL line per criterion with its
//! measured values and runtime, and exits non-zero if any fail.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tutor_core::answer::{citation_markers, validate_citations, ContextChunk};
use tutor_core::chunker::ChunkMetadata;
use tutor_core::embed::{build_embedder, EmbedderConfig, EmbeddingVector};
use tutor_core::eval::*;
use tutor_core::guardrail::{Guardrail, GuardrailConfig};
use tutor_core::index::*;
use tutor_core::ingest::{
    merge_documents, parse_extraction, to_interchange, BlockKind, ContentBlock, DifficultyTier,
    DocumentMeta,
};

/// Tolerance on the reference classification metrics.
const METRIC_TOL: f64 = 5e-4;
/// Minimum off-domain rejection rate.
const MIN_REJECTION: f64 = 0.90;
/// Minimum approximate recall@10 on every random corpus.
const MIN_RECALL: f64 = 0.95;

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let pass = out.ok && took < limit;
    println!(
        "{} {name}: {} [{:.3}s, limit {}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn classification_metrics_reproduce() -> Outcome {
    let m = classification_metrics(&ConfusionMatrix::new(20, 2, 0, 58)).unwrap();
    let reference = [(m.precision, 0.9091), (m.recall, 1.0), (m.f1, 0.9524), (m.accuracy, 0.975)];
    Outcome {
        ok: reference.iter().all(|(got, want)| (got - want).abs() <= METRIC_TOL),
        detail: format!(
            "precision {:.4} recall {:.4} f1 {:.4} accuracy {:.4} (tol {METRIC_TOL})",
            m.precision, m.recall, m.f1, m.accuracy
        ),
    }
}

fn guardrail_recall() -> Outcome {
    let g = Guardrail::new(GuardrailConfig::default()).unwrap();
    let suite = shipped_suite();
    let (course, off): (Vec<_>, Vec<_>) = suite.iter().partition(|q| q.category == Category::Relevant);
    let accepted = course.iter().filter(|q| g.classify(&q.text).unwrap().relevant).count();
    let rejected = off.iter().filter(|q| !g.classify(&q.text).unwrap().relevant).count();
    let rate = rejected as f64 / off.len() as f64;
    Outcome {
        ok: course.len() == 20 && accepted == 20 && off.len() == 60 && rate >= MIN_REJECTION,
        detail: format!(
            "course relevant {accepted}/{} (fn {}), off-domain rejected {rejected}/{} = {:.3} (min {MIN_REJECTION})",
            course.len(),
            course.len() - accepted,
            off.len(),
            rate
        ),
    }
}

fn retrieval_plumbing(rt: &tokio::runtime::Runtime) -> Outcome {
    let chunks = torsion_chunks();
    let queries = torsion_queries();
    let cfg = EmbedderConfig::local(256);
    let report = rt
        .block_on(run_retrieval_bench(&chunks, &queries, std::slice::from_ref(&cfg), 5))
        .unwrap();
    let row = &report.rows[0];
    let perfect = [row.accuracy_at_k, row.mrr, row.ndcg_at_k]
        .iter()
        .all(|v| *v == Some(1.0));

    // Exact search against a linear scan over the same vectors.
    let e = build_embedder(&cfg).unwrap();
    let bodies: Vec<String> = chunks.iter().map(|c| c.body.clone()).collect();
    let vectors = rt.block_on(e.embed(&bodies)).unwrap();
    let entries: Vec<IndexEntry> = chunks
        .iter()
        .zip(&vectors)
        .map(|(c, v)| IndexEntry::from_chunk(c, v.clone()))
        .collect();
    let idx = VectorIndex::build(entries.clone(), AnnParams::default()).unwrap();
    let mut identical = true;
    for q in &queries {
        let qv = rt.block_on(e.embed(std::slice::from_ref(&q.text))).unwrap().remove(0);
        let got = idx.search(&qv, entries.len()).unwrap();
        let expect = brute_force(&entries, &qv, entries.len());
        identical &= got.len() == expect.len()
            && got
                .iter()
                .zip(&expect)
                .all(|(r, (id, s))| &r.chunk_id == id && r.score.to_bits() == s.to_bits());
    }
    Outcome {
        ok: perfect && identical && torsion_documents().len() == 6 && queries.len() == 5,
        detail: format!(
            "Acc@5 {:?} MRR {:?} NDCG@5 {:?} over {} chunks; exact == brute force: {identical}",
            row.accuracy_at_k,
            row.mrr,
            row.ndcg_at_k,
            chunks.len()
        ),
    }
}

fn brute_force(entries: &[IndexEntry], query: &EmbeddingVector, k: usize) -> Vec<(String, f64)> {
    let norm = query.norm();
    let q: Vec<f64> = query.values().iter().map(|v| v / norm).collect();
    let mut scored: Vec<(String, f64)> = entries
        .iter()
        .map(|e| {
            let mut s = 0.0;
            for (a, b) in q.iter().zip(e.vector.values()) {
                s += a * b;
            }
            (e.chunk_id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingVector::new(v, "m").unwrap().normalized().unwrap()
}

fn random_corpus(seed: u64, n: usize, dim: usize) -> Vec<IndexEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| IndexEntry {
            chunk_id: format!("c{i:05}"),
            vector: unit(&mut rng, dim),
            metadata: ChunkMetadata {
                topic_domain: "t".into(),
                source_ref: "lec:p1".into(),
                difficulty_tier: DifficultyTier::Foundational,
                prerequisites: vec![],
                oversized: false,
            },
            body: String::new(),
        })
        .collect()
}

const ANN_CORPORA: u64 = 10;
const ANN_SIZE: usize = 5000;
const ANN_DIM: usize = 32;
const ANN_QUERIES: usize = 100;

fn ann_fidelity() -> Outcome {
    let mut recalls = Vec::new();
    for seed in 0..ANN_CORPORA {
        let idx = VectorIndex::build(random_corpus(seed, ANN_SIZE, ANN_DIM), AnnParams::approximate()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut hits = 0;
        for _ in 0..ANN_QUERIES {
            let q = unit(&mut rng, ANN_DIM);
            let truth: HashSet<String> = idx
                .search_with_mode(&q, 10, SearchMode::Exact)
                .unwrap()
                .into_iter()
                .map(|r| r.chunk_id)
                .collect();
            hits += idx
                .search_with_mode(&q, 10, SearchMode::Approximate)
                .unwrap()
                .iter()
                .filter(|r| truth.contains(&r.chunk_id))
                .count();
        }
        recalls.push(hits as f64 / (10 * ANN_QUERIES) as f64);
    }
    let min = recalls.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Outcome {
        ok: min >= MIN_RECALL,
        detail: format!(
            "{ANN_CORPORA} corpora x {ANN_SIZE} x {ANN_DIM}-dim, recall@10 min {min:.4} mean {mean:.4} (min {MIN_RECALL})"
        ),
    }
}

fn index_persistence() -> Outcome {
    let idx = VectorIndex::build(random_corpus(77, 2000, 64), AnnParams::approximate()).unwrap();
    let bytes = idx.save();
    let loaded = VectorIndex::load(&bytes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut same = 0;
    for _ in 0..100 {
        let q = unit(&mut rng, 64);
        let a = idx.search_with_mode(&q, 10, SearchMode::Exact).unwrap();
        let b = loaded.search_with_mode(&q, 10, SearchMode::Exact).unwrap();
        let bitwise = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.chunk_id == y.chunk_id && x.rank == y.rank && x.score.to_bits() == y.score.to_bits()
            });
        same += usize::from(bitwise);
    }
    // Single-byte corruption anywhere past the fixed header fields.
    let mut detected = 0;
    let trials = 200;
    for _ in 0..trials {
        let mut bad = bytes.clone();
        let pos = rng.random_range(20..bad.len());
        bad[pos] ^= rng.random_range(1..=255u8);
        detected += usize::from(VectorIndex::load(&bad) == Err(IndexError::ChecksumError));
    }
    Outcome {
        ok: same == 100 && detected == trials,
        detail: format!(
            "{} bytes, {same}/100 queries bit-identical after reload, {detected}/{trials} corruptions -> ChecksumError",
            bytes.len()
        ),
    }
}

fn merge_accounting() -> Outcome {
    let payload = |origin: &str, kind: BlockKind, chars: usize, fill: char| {
        let per = chars / 4;
        let blocks: Vec<ContentBlock> = (1..=4u32)
            .map(|p| ContentBlock {
                kind,
                page: p,
                body: fill.to_string().repeat(if p == 4 { chars - 3 * per } else { per }),
                origin: String::new(),
                order: 0,
            })
            .collect();
        to_interchange(origin, "lecture-full", 4, &blocks)
    };
    let parsed: Vec<(String, Vec<ContentBlock>)> = [
        payload("docling", BlockKind::Text, 3924, 'a'),
        payload("nougat", BlockKind::Formula, 4268, 'x'),
        payload("vision", BlockKind::Diagram, 12568, 'd'),
    ]
    .iter()
    .map(|p| {
        let e = parse_extraction(p).unwrap();
        (e.origin, e.blocks)
    })
    .collect();
    let doc = merge_documents(
        &parsed,
        &DocumentMeta {
            doc_id: "lecture-full".into(),
            title: "Lecture".into(),
            source_path: "lecture.pdf".into(),
            pages: 4,
            ..Default::default()
        },
    )
    .unwrap();
    Outcome {
        ok: doc.total_chars() == 20_760,
        detail: format!("3924 + 4268 + 12568 -> {} total characters", doc.total_chars()),
    }
}

fn pipeline_gating(rt: &tokio::runtime::Runtime) -> Outcome {
    rt.block_on(async {
        let (up, stub) = start_upstream().await;
        let svc = start_service(service_config(&up, generous()), generation_config(&up), None).await;
        for body in torsion_bodies() {
            assert_eq!(svc.post("/ingest", &body).await.0, 200);
        }
        stub.reset();

        let expected = GuardrailConfig::default().rejection_message;
        let suite = shipped_suite();
        let personal: Vec<_> = suite
            .iter()
            .filter(|q| q.category == Category::GeneralPersonal)
            .collect();
        let mut standard = 0;
        for q in &personal {
            let (s, v) = svc.ask(&q.text).await;
            standard += usize::from(s == 200 && v["rejected"] == true && v["answer"] == expected.as_str());
        }
        let calls_off = stub.calls();

        let course: Vec<_> = suite.iter().filter(|q| q.category == Category::Relevant).take(5).collect();
        let mut answered = 0;
        for q in &course {
            let (s, v) = svc.ask(&q.text).await;
            answered += usize::from(s == 200 && v["rejected"] == false);
        }
        let bodies = stub.chat_bodies.lock().unwrap().clone();
        let params_ok = bodies.iter().all(|b| {
            b["max_tokens"] == json!(400)
                && b["temperature"] == json!(0.7)
                && b["presence_penalty"] == json!(0.1)
                && b["frequency_penalty"] == json!(0.1)
        });
        Outcome {
            ok: personal.len() == 20
                && standard == 20
                && calls_off == 0
                && answered == 5
                && stub.chat_calls() == 5
                && params_ok,
            detail: format!(
                "off-domain: {standard}/{} standard rejections, {calls_off} upstream calls; \
                 course: {answered}/5 answered, {} generation calls, decoding parameters ok: {params_ok}",
                personal.len(),
                stub.chat_calls()
            ),
        }
    })
}

fn citation_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut good = 0;
    let cases = 200;
    for _ in 0..cases {
        let n = rng.random_range(1..=8);
        let context: Vec<ContextChunk> = (1..=n)
            .map(|i| ContextChunk {
                result: RetrievalResult {
                    chunk_id: format!("c{i}"),
                    score: 1.0 / i as f64,
                    rank: i,
                    source_ref: format!("lec:p{i}"),
                },
                body: "text".into(),
            })
            .collect();
        let mut text = String::new();
        for _ in 0..rng.random_range(0..30) {
            match rng.random_range(0..6) {
                0 | 1 => text.push_str(&format!("[{}]", rng.random_range(0..12))),
                2 => text.push('['),
                3 => text.push(']'),
                4 => text.push_str(&rng.random_range(0..100).to_string()),
                _ => text.push_str(" word "),
            }
        }
        let a = validate_citations(&text, &context, "s");
        let markers: Vec<usize> = citation_markers(&a.text);
        let marker_set: BTreeSet<usize> = markers.iter().copied().collect();
        let numbers: BTreeSet<usize> = a.citations.iter().map(|c| c.number).collect();
        let mut first_use = Vec::new();
        for m in markers {
            if !first_use.contains(&m) {
                first_use.push(m);
            }
        }
        let contiguous = first_use == (1..=a.citations.len()).collect::<Vec<_>>();
        good += usize::from(marker_set == numbers && contiguous && !numbers.is_empty());
    }
    Outcome {
        ok: good == cases,
        detail: format!("{good}/{cases} fuzzed outputs closed and contiguously numbered"),
    }
}

fn main() -> ExitCode {
    init_key();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let s = Duration::from_secs;
    let results = [
        check("classification metrics", s(1), classification_metrics_reproduce),
        check("guardrail recall", s(1), guardrail_recall),
        check("retrieval metrics plumbing", s(10), || retrieval_plumbing(&rt)),
        check("ANN fidelity", s(60), ann_fidelity),
        check("index persistence", s(10), index_persistence),
        check("merge coverage accounting", s(1), merge_accounting),
        check("pipeline gating", s(30), || pipeline_gating(&rt)),
        check("citation closure", s(10), citation_closure),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
