#![no_main]

use libfuzzer_sys::fuzz_target;

use fpfl::datasets::adult::{load_adult_from_text, AdultOptions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // feed the same bytes as both splits; malformed rows are skipped, never
    // panicked on
    let _ = load_adult_from_text(text, text, &AdultOptions::default());
});
