#![no_main]

use libfuzzer_sys::fuzz_target;
use tutor_core::guardrail::{Guardrail, GuardrailConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = GuardrailConfig::from_toml(text) {
        if let Ok(g) = Guardrail::new(cfg) {
            let _ = g.classify("shear stress in a beam");
        }
    }
});
