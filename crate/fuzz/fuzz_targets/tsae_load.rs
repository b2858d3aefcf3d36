//! Decoding untrusted `.tsae` bytes must never panic or over-allocate.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tsae::dataset::read_trajectories(data);
});
