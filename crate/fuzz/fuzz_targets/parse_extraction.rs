#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::ingest::{parse_extraction, to_interchange};

fuzz_target!(|data: &[u8]| {
    let Ok(ex) = parse_extraction(data) else { return };
    // Survivors are already sanitized, so a second pass keeps all of them.
    let again = parse_extraction(&to_interchange(&ex.origin, &ex.doc_id, ex.pages, &ex.blocks))
        .expect("re-encoded payload parses");
    assert_eq!(again.dropped, 0);
    assert_eq!(again.blocks, ex.blocks);
});
