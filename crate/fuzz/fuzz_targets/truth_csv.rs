#![no_main]
use glr_core::tables::{read_ground_truth, write_ground_truth};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(truth) = read_ground_truth(data) {
        let mut out = Vec::new();
        write_ground_truth(&truth, &mut out).unwrap();
        assert_eq!(read_ground_truth(out.as_slice()).unwrap(), truth);
    }
});
