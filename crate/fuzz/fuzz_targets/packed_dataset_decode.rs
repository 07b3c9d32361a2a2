#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dataset) = fpfl::datasets::packed::decode(data) {
        // decoded datasets must satisfy their own invariants
        dataset.validate().expect("decoded dataset must be valid");
    }
});
