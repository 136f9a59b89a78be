#![no_main]
use libfuzzer_sys::fuzz_target;
use pestvl_core::checkpoint::{decode_dump, encode_dump};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = decode_dump(data) {
        let refs: Vec<(&str, &_)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode_dump(&refs);
        assert!(decode_dump(&bytes).is_ok());
    }
});
