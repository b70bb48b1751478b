#![no_main]

use hfsig::audio_io::{read_wav, write_wav};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = read_wav(data) {
        assert!(clip.samples().iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        if clip.is_empty() {
            return;
        }
        let again = read_wav(&write_wav(&clip).unwrap()).unwrap();
        assert_eq!(again.len(), clip.len());
    }
});
