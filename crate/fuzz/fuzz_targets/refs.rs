#![no_main]
use libfuzzer_sys::fuzz_target;
use smtl_core::scoring::io::parse_references;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_references(text);
    }
});
