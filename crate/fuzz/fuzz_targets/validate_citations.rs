#![no_main]

use std::collections::BTreeSet;

use libfuzzer_sys::fuzz_target;
use tutor_core::answer::{citation_markers, validate_citations, ContextChunk};
use tutor_core::index::RetrievalResult;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let context: Vec<ContextChunk> = (1..=usize::from(n % 10) + 1)
        .map(|i| ContextChunk {
            result: RetrievalResult {
                chunk_id: format!("c{i}"),
                score: 0.5,
                rank: i,
                source_ref: format!("doc:p{i}"),
            },
            body: String::new(),
        })
        .collect();
    let a = validate_citations(text, &context, "fuzz");
    let markers: BTreeSet<usize> = citation_markers(&a.text).into_iter().collect();
    let numbers: BTreeSet<usize> = a.citations.iter().map(|c| c.number).collect();
    assert_eq!(markers, numbers);
    assert_eq!(numbers, (1..=a.citations.len()).collect());
});
