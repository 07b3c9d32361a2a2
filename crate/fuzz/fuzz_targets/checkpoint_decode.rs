#![no_main]

use libfuzzer_sys::fuzz_target;

// Decoding an arbitrary checkpoint must never panic; valid inputs must
// re-encode to the exact same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(model) = fpfl::nn::checkpoint::decode(data) {
        let encoded = fpfl::nn::checkpoint::encode(&model);
        assert_eq!(encoded, data, "checkpoint re-encode must round-trip");
    }
});
