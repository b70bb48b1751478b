#![no_main]

use hfsig::checkpoint::Checkpoint;
use hfsig::signet::SignatureNet;
use hfsig::vernet::VerifierNet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::peek_header(data);
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let _ = SignatureNet::<f32>::from_checkpoint(&ckpt);
        let _ = VerifierNet::<f32>::from_checkpoint(&ckpt);
    }
});
