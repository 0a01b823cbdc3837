#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::eval::parse_suite;

fuzz_target!(|data: &[u8]| {
    let _ = parse_suite(data);
});
