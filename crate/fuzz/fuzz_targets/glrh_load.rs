#![no_main]
use glr_core::head::checkpoint::load_head;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(head) = load_head(data) {
        assert_eq!(head.to_checkpoint_bytes().unwrap(), data);
    }
});
