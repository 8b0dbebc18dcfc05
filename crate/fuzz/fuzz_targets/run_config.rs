#![no_main]
use libfuzzer_sys::fuzz_target;
use smtl_core::config::RunConfigFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfigFile::parse(text) {
            let _ = cfg.image_size();
        }
    }
});
