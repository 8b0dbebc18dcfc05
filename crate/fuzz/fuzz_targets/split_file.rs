#![no_main]
use libfuzzer_sys::fuzz_target;
use smtl_core::data::split::{parse_split_file, write_split_file};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ids) = parse_split_file(text) {
            assert_eq!(parse_split_file(&write_split_file(&ids)).unwrap(), ids);
        }
    }
});
