//! Flat key=value run-config parser: arbitrary text must produce a typed
//! config or a typed error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use palp_lab::cli::config::FileConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = FileConfig::parse(text);
    }
});
