#![no_main]
use glr_core::{load_embeddings, EmbeddingSet};
use libfuzzer_sys::fuzz_target;

// Anything the loader accepts must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(set) = load_embeddings(data) {
        let bytes = set.to_bytes().expect("accepted set re-encodes");
        assert_eq!(bytes, data);
        assert_eq!(EmbeddingSet::from_bytes(&bytes).unwrap(), set);
    }
});
