#![no_main]

use amc_core::benchmark::{SplitSpec, TrainFraction};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = text.parse::<SplitSpec>();
        if let Ok(f) = text.parse::<TrainFraction>() {
            assert!(f.train_count(10) >= 1);
        }
    }
});
