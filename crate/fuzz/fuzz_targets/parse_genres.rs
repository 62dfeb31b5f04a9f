#![no_main]

use amc_core::benchmark::parse_genres_tsv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_genres_tsv(text);
    }
});
