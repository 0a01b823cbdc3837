#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::chunker::{chunk_document, ChunkPolicy};
use tutor_core::ingest::{merge_documents, parse_extraction, DocumentMeta};

fuzz_target!(|data: &[u8]| {
    let Ok(ex) = parse_extraction(data) else { return };
    let meta = DocumentMeta {
        doc_id: ex.doc_id.clone(),
        title: "fuzz".into(),
        pages: ex.pages,
        ..Default::default()
    };
    let Ok(doc) = merge_documents(&[(ex.origin.clone(), ex.blocks)], &meta) else { return };
    doc.validate().expect("merged documents are valid");
    let policy = ChunkPolicy {
        max_chunk_tokens: 16,
        overlap_tokens: 4,
        respect_boundaries: true,
    };
    if let Ok(chunks) = chunk_document(&doc, &policy) {
        for c in chunks {
            assert!(c.token_count <= 16 || c.metadata.oversized);
        }
    }
});
