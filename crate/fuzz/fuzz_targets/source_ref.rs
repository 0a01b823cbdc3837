#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::chunker::SourceRef;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Some(r) = SourceRef::parse(s) {
        assert_eq!(SourceRef::parse(&r.to_string()), Some(r));
    }
});
