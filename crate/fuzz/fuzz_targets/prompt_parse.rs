//! Prompt tokenizer under every role: role invariants may reject input but
//! must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use palp_lab::denoiser::embed::{Prompt, PromptRole};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for role in [
            PromptRole::Target,
            PromptRole::Clean,
            PromptRole::Personalization,
            PromptRole::Null,
        ] {
            let _ = Prompt::parse(text, role);
        }
    }
});
