#![no_main]
use libfuzzer_sys::fuzz_target;
use smtl_core::model::ParamSet;

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 20 {
        return;
    }
    if let Ok(set) = ParamSet::decode(data) {
        let mut out = Vec::new();
        set.write_to(&mut out).unwrap();
        assert_eq!(ParamSet::decode(&out).unwrap().fingerprint(), set.fingerprint());
    }
});
