#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::index::VectorIndex;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = VectorIndex::load(data) {
        let again = VectorIndex::load(&idx.save()).expect("saved index loads");
        assert_eq!(again, idx);
    }
});
