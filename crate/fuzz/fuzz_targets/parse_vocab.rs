#![no_main]

use amc_core::encoder::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = Vocabulary::from_text(text) {
            assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        }
    }
});
