#![no_main]

use amc_core::screenplay::{parse_script_bytes, split_scenes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(elements) = parse_script_bytes(data, 1 << 20) else {
        return;
    };
    let scenes = split_scenes(&elements);
    for (i, s) in scenes.iter().enumerate() {
        assert_eq!(s.index, i);
    }
});
