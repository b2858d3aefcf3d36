//! Decoding untrusted model checkpoints must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tsae::sae::read_checkpoint(data);
});
