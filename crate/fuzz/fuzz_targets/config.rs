#![no_main]
use libfuzzer_sys::fuzz_target;
use pestvl_core::config::{apply_override, Config};

// First line is a `key=value` override, the rest a TOML document.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (assignment, doc) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(cfg) = Config::from_toml_str(doc) {
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let _ = Config::from_json(&cfg.to_canonical_json()).unwrap();
    }
    if let Ok(mut value) = toml::from_str::<toml::Value>(doc) {
        let _ = apply_override(&mut value, assignment);
    }
});
