#![no_main]
use libfuzzer_sys::fuzz_target;
use pestvl_caption::{build_prompt, Attribute, CotTemplate, ExpertKnowledgeEntry};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let entry = ExpertKnowledgeEntry {
        species_name: "aphid".into(),
        attributes: vec![Attribute {
            facet: "color".into(),
            description: "green".into(),
        }],
    };
    // Raw step text, bypassing the TOML layer.
    let raw = CotTemplate {
        version: "fuzz".into(),
        steps: text.split('\n').map(str::to_string).collect(),
    };
    let _ = raw.placeholders();
    let _ = build_prompt(&entry, &raw, "img.png");
    if let Ok(t) = CotTemplate::from_toml_str(text) {
        let _ = build_prompt(&entry, &t, "img.png");
    }
});
