//! Generated screenplays with a planted speaker signal.
//!
//! Each movie gives each of its main characters a distinct marker word drawn
//! from a pool shared by all movies; a character's lines contain their marker
//! with a fixed probability and are otherwise filler. The marker-to-character
//! mapping changes from movie to movie, so it can only be recovered from the
//! movie's own training scenes. Speaker frequencies are skewed so the
//! majority baseline beats chance.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::benchmark::{build_benchmark, BenchmarkSplit, MovieInput, SplitSpec, TrainFraction};
use crate::derive_seed;
use crate::error::Result;
use crate::screenplay::{parse_script, split_scenes};

const NAMES: [&str; 32] = [
    "ADA", "BORIS", "CLARA", "DMITRI", "EDITH", "FELIX", "GRETA", "HUGO", "IRIS", "JONAS", "KARA", "LEON",
    "MIRA", "NILS", "OLGA", "PAVEL", "QUINN", "ROSA", "SILAS", "TESS", "UMA", "VIKTOR", "WANDA", "XAVIER",
    "YARA", "ZENO", "AUGUST", "BRUNO", "CELIA", "DORIAN", "ELSA", "FABIAN",
];

const LOCATIONS: [&str; 8] = ["KITCHEN", "HARBOR", "OFFICE", "TRAIN", "GARDEN", "CELLAR", "ROOF", "STUDIO"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub movies: usize,
    pub scenes_per_movie: usize,
    pub main_characters: usize,
    pub marker_pool: usize,
    pub filler_words: usize,
    /// Probability that an utterance carries its speaker's marker.
    pub marker_prob: f64,
    /// Relative speaking frequency of the main characters, most talkative first.
    pub speaker_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            movies: 80,
            scenes_per_movie: 25,
            main_characters: 5,
            marker_pool: 30,
            filler_words: 120,
            marker_prob: 0.95,
            speaker_weights: vec![0.36, 0.24, 0.17, 0.13, 0.10],
            seed: 0,
        }
    }
}

pub fn marker_word(i: usize) -> String {
    format!("marker{i}")
}

fn filler_word(i: usize) -> String {
    format!("word{i}")
}

/// Screenplay text for one movie.
pub fn generate_script(cfg: &SynthConfig, movie_id: &str) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, movie_id));
    let k = cfg.main_characters.min(NAMES.len()).min(cfg.marker_pool);
    let names: Vec<&str> = NAMES.choose_multiple(&mut rng, k + 1).copied().collect();
    let (cast, extra) = (&names[..k], names[k]);
    let mut markers: Vec<usize> = (0..cfg.marker_pool).collect();
    markers.shuffle(&mut rng);
    let weights: Vec<f64> = (0..k).map(|i| cfg.speaker_weights.get(i).copied().unwrap_or(0.1)).collect();

    let line = |rng: &mut ChaCha8Rng, marker: Option<usize>| -> String {
        let n = rng.random_range(4..9);
        let mut words: Vec<String> = (0..n).map(|_| filler_word(rng.random_range(0..cfg.filler_words))).collect();
        if let Some(m) = marker {
            if rng.random_bool(cfg.marker_prob) {
                let at = rng.random_range(0..=words.len());
                words.insert(at, marker_word(m));
            }
        }
        let mut s = words.join(" ");
        if let Some(first) = s.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        s.push('.');
        s
    };

    let mut out = format!("{}\n\nwritten by nobody\n\n", movie_id.to_uppercase());
    for t in 0..cfg.scenes_per_movie {
        let loc = LOCATIONS[rng.random_range(0..LOCATIONS.len())];
        out.push_str(&format!("INT. {loc} {t} - DAY\n\n"));
        let n_speakers = rng.random_range(2..=3.min(k).max(1));
        let mut present: Vec<usize> = Vec::new();
        while present.len() < n_speakers.min(k) {
            let total: f64 = (0..k).filter(|i| !present.contains(i)).map(|i| weights[i]).sum();
            let mut x = rng.random_range(0.0..total);
            for i in (0..k).filter(|i| !present.contains(i)) {
                if x < weights[i] {
                    present.push(i);
                    break;
                }
                x -= weights[i];
            }
        }
        out.push_str(&format!("{} walks in. {}\n\n", cast[present[0]], line(&mut rng, None)));
        let turns = present.len() + rng.random_range(0..2);
        for turn in 0..turns {
            let who = present[turn % present.len()];
            out.push_str(&format!("{}\n{}\n\n", cast[who], line(&mut rng, Some(markers[who]))));
        }
        if rng.random_bool(0.1) {
            out.push_str(&format!("{extra}\n{}\n\n", line(&mut rng, None)));
        }
    }
    out
}

/// `(movie_id, script)` pairs.
pub fn generate_corpus(cfg: &SynthConfig) -> Vec<(String, String)> {
    (0..cfg.movies)
        .map(|i| {
            let id = format!("synth_{i:03}");
            let script = generate_script(cfg, &id);
            (id, script)
        })
        .collect()
}

/// Runs the generated corpus through the parser and benchmark builder.
pub fn generate_benchmark(cfg: &SynthConfig, spec: SplitSpec) -> Result<BenchmarkSplit> {
    let mut movies = Vec::new();
    for (id, script) in generate_corpus(cfg) {
        movies.push(MovieInput {
            movie_id: id,
            scenes: split_scenes(&parse_script(&script)?),
            genres: vec!["Synthetic".to_string()],
        });
    }
    build_benchmark(&movies, spec, TrainFraction::DEFAULT, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_scripts_parse_into_scenes() {
        let cfg = SynthConfig::default();
        let script = generate_script(&cfg, "synth_000");
        let scenes = split_scenes(&parse_script(&script).unwrap());
        assert_eq!(scenes.len(), cfg.scenes_per_movie);
        assert!(scenes.iter().all(|s| s.heading.starts_with("INT.")));
        assert_eq!(script, generate_script(&cfg, "synth_000"));
    }

    #[test]
    fn benchmark_has_requested_split() {
        let cfg = SynthConfig {
            movies: 6,
            ..SynthConfig::default()
        };
        let b = generate_benchmark(&cfg, SplitSpec { train_n: 4, dev_n: 1, test_n: 1 }).unwrap();
        assert_eq!((b.train_tasks.len(), b.dev_tasks.len(), b.test_tasks.len()), (4, 1, 1));
        for t in b.all_tasks() {
            assert_eq!(t.characters.len(), 5);
            t.validate().unwrap();
        }
    }
}
