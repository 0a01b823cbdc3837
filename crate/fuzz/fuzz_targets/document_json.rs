#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::chunker::{chunk_document, ChunkPolicy};
use tutor_core::ingest::Document;

fuzz_target!(|data: &[u8]| {
    let Ok(doc) = serde_json::from_slice::<Document>(data) else { return };
    if doc.validate().is_err() {
        return;
    }
    let _ = chunk_document(&doc, &ChunkPolicy::default());
});
