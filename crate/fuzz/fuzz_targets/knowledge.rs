#![no_main]
use libfuzzer_sys::fuzz_target;
use pestvl_caption::KnowledgeBase;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = KnowledgeBase::from_toml_str(text);
    }
});
