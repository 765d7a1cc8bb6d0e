//! Checkpoint binary decoder: must reject arbitrary bytes without panicking
//! or over-allocating.

#![no_main]

use libfuzzer_sys::fuzz_target;
use palp_lab::denoiser::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Anything that decodes must survive a re-encode round trip.
        let bytes = ckpt.encode();
        Checkpoint::decode(&bytes).expect("re-encoded checkpoint must decode");
    }
});
