//! Decoding untrusted steering plan files must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tsae::steering::read_plan(data);
});
