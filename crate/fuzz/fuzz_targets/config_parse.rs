#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = fpfl::config::ExperimentConfig::from_toml_str(text) {
        // parsed configs survive a serialization round trip
        let again = fpfl::config::ExperimentConfig::from_toml_str(&config.to_toml())
            .expect("re-serialized config must parse");
        assert_eq!(again, config);
    }
});
