#![no_main]

use amc_core::learners::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = TrainConfig::parse(text) {
            c.validate().unwrap();
        }
    }
});
