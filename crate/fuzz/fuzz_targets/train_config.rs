#![no_main]

use hfsig::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_json(text) {
        assert!(TrainConfig::from_json(&cfg.to_json()).is_ok());
    }
});
