#![no_main]
use glr_core::tables::{read_stages, write_stages};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(stages) = read_stages(data) {
        let mut out = Vec::new();
        write_stages(&stages, &mut out).unwrap();
        assert_eq!(read_stages(out.as_slice()).unwrap(), stages);
    }
});
