#![no_main]

use libfuzzer_sys::fuzz_target;

use fpfl::datasets::packed::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = serde_json::from_str::<DatasetManifest>(text) {
        let json = serde_json::to_string(&manifest).expect("manifest serializes");
        let _ = serde_json::from_str::<DatasetManifest>(&json).expect("round trip");
    }
});
