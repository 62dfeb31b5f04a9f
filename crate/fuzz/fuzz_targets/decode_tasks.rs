#![no_main]

use amc_core::benchmark::{tasks_from_jsonl, tasks_to_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(tasks) = tasks_from_jsonl(text) {
            let again = tasks_from_jsonl(&tasks_to_jsonl(&tasks).unwrap()).unwrap();
            assert_eq!(again, tasks);
        }
    }
});
