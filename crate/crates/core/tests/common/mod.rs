#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use amc_core::benchmark::{build_benchmark, parse_genres_tsv, BenchmarkSplit, MovieInput, SplitSpec, TrainFraction};
use amc_core::screenplay::{parse_script_bytes, split_scenes, DEFAULT_MAX_BYTES};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub struct Label {
    pub file: String,
    pub scenes: usize,
    pub heading_lines: Vec<usize>,
}

pub fn labels() -> Vec<Label> {
    let text = std::fs::read_to_string(fixture_dir().join("labels.tsv")).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            Label {
                file: cols[0].to_string(),
                scenes: cols[1].parse().unwrap(),
                heading_lines: cols[2].split(',').map(|x| x.parse().unwrap()).collect(),
            }
        })
        .collect()
}

/// `(movie_id, raw bytes)` for every fixture script, sorted by id.
pub fn scripts() -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(fixture_dir().join("scripts"))
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            (id, std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    out
}

pub fn genres() -> BTreeMap<String, Vec<String>> {
    parse_genres_tsv(&std::fs::read_to_string(fixture_dir().join("genres.tsv")).unwrap()).unwrap()
}

pub fn movies() -> Vec<MovieInput> {
    let genres = genres();
    scripts()
        .into_iter()
        .map(|(id, bytes)| MovieInput {
            scenes: split_scenes(&parse_script_bytes(&bytes, DEFAULT_MAX_BYTES).unwrap()),
            genres: genres.get(&id).cloned().unwrap_or_default(),
            movie_id: id,
        })
        .collect()
}

pub const FIXTURE_SPLIT: SplitSpec = SplitSpec {
    train_n: 9,
    dev_n: 2,
    test_n: 2,
};

pub fn fixture_benchmark(seed: u64) -> BenchmarkSplit {
    build_benchmark(&movies(), FIXTURE_SPLIT, TrainFraction::DEFAULT, seed).unwrap()
}
