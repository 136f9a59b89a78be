#![no_main]
use libfuzzer_sys::fuzz_target;
use pestvl_caption::client::parse_caption_response;
use pestvl_caption::encoder::parse_embedding_response;

// Bodies returned by the captioning and embedding services.
fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else { return };
    if let Ok(caption) = parse_caption_response(body) {
        assert!(!caption.trim().is_empty());
    }
    let _ = parse_embedding_response(body);
});
