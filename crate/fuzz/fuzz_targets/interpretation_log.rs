#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    kcut_core::roundtrip::interpretation_log(data);
});
