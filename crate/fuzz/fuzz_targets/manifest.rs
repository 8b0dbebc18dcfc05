#![no_main]
use libfuzzer_sys::fuzz_target;
use smtl_core::data::SampleManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = SampleManifest::parse(text) {
            let again = SampleManifest::parse(&m.to_jsonl().unwrap()).unwrap();
            assert_eq!(m, again);
        }
    }
});
