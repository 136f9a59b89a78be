#![no_main]
use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pestvl_caption::record::{parse_jsonl, to_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_jsonl(text, Path::new("fuzz")) {
        let written = to_jsonl(&records);
        assert_eq!(parse_jsonl(&written, Path::new("fuzz")).unwrap(), records);
    }
});
