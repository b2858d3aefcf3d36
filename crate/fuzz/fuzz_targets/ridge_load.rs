//! Decoding untrusted `.ridge` preprocessing sidecars must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tsae::residualize::read_preprocess(data);
});
