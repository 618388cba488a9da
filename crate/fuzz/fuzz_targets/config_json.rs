#![no_main]

use libfuzzer_sys::fuzz_target;
use supermarket_harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let _ = cfg.validate();
        let _ = cfg.validate_rate_study();
        // anything accepted must survive a round trip
        let back = ExperimentConfig::from_json(&cfg.to_json()).expect("serialized config parses");
        assert_eq!(back.to_json(), cfg.to_json());
    }
});
