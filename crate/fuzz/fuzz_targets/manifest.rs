#![no_main]
use libfuzzer_sys::fuzz_target;
use pestvl_core::data::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json(text) {
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
    }
});
