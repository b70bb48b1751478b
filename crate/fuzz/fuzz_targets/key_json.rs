#![no_main]

use hfsig::keydp::KeySet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(keys) = KeySet::from_json(text) {
        assert_eq!(KeySet::from_json(&keys.to_json()).unwrap(), keys);
    }
});
