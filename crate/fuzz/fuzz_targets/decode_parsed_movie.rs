#![no_main]

use std::collections::BTreeMap;

use amc_core::benchmark::{build_task, MovieInput, TrainFraction};
use amc_core::screenplay::ParsedMovie;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(movie) = serde_json::from_slice::<ParsedMovie>(data) else {
        return;
    };
    let input = MovieInput::from_parsed(&movie, &BTreeMap::new());
    if let Ok(task) = build_task(&input.movie_id, &input.scenes, vec![], TrainFraction::DEFAULT, 0) {
        let _ = task.validate();
    }
});
