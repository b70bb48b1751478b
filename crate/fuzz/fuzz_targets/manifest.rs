#![no_main]

use hfsig::threatlab::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_json(text) {
        let _ = m.validate();
        let _ = m.clip_count();
        let _ = Manifest::from_json(&m.to_json());
    }
});
