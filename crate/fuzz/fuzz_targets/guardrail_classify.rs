#![no_main]

use std::sync::LazyLock;

use libfuzzer_sys::fuzz_target;
use tutor_core::guardrail::{Guardrail, GuardrailConfig};

static GUARD: LazyLock<Guardrail> =
    LazyLock::new(|| Guardrail::new(GuardrailConfig::default()).expect("shipped config"));

fuzz_target!(|data: &[u8]| {
    let Ok(q) = std::str::from_utf8(data) else { return };
    if let Ok(v) = GUARD.classify(q) {
        assert_eq!(v.relevant, v.score >= GUARD.config().threshold);
        assert_eq!(v.rejection_message.is_some(), !v.relevant);
    }
});
