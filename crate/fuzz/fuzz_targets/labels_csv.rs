#![no_main]
use glr_core::tables::read_labels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    read_labels(data).ok();
});
