//! Turns parsed movies into few-shot character-guessing tasks.
//!
//! Per movie: pick the most talkative characters, mask each one speaking in
//! a scene with a random `P0..P4` label, cut the scene stream into a leading
//! training part and a trailing test part, and emit one instance per masked
//! speaker. Movies are then shuffled and partitioned into train/dev/test task
//! sets. Every random choice derives from a single seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::screenplay::{ParsedMovie, Scene, Utterance};
use crate::derive_seed;

/// Masking labels, in canonical order.
pub const ID_LABELS: [&str; 5] = ["P0", "P1", "P2", "P3", "P4"];
pub const MAX_CHARACTERS: usize = 5;

pub fn is_id_label(s: &str) -> bool {
    ID_LABELS.contains(&s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizedScene {
    pub movie_id: String,
    pub scene_index: usize,
    pub heading: String,
    /// Utterances with every masked character's name replaced by its label.
    pub utterances: Vec<Utterance>,
    /// Label → canonical character name, for characters speaking in this scene.
    pub id_map: BTreeMap<String, String>,
    /// The answer options for this scene: the movie's main characters.
    pub candidates: Vec<String>,
}

impl AnonymizedScene {
    /// Labels of masked speakers, `P0..P4` order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.id_map.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instance {
    pub movie_id: String,
    pub scene_index: usize,
    pub masked_id: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub movie_id: String,
    pub genres: Vec<String>,
    /// Class labels, most talkative first.
    pub characters: Vec<String>,
    /// Number of leading scenes that form the training part.
    pub train_scene_count: usize,
    /// Every scene of the movie, ordered by index.
    pub scenes: Vec<AnonymizedScene>,
    pub train_instances: Vec<Instance>,
    pub test_instances: Vec<Instance>,
}

impl Task {
    pub fn scene(&self, index: usize) -> Option<&AnonymizedScene> {
        self.scenes.get(index).filter(|s| s.scene_index == index)
    }

    pub fn class_of(&self, name: &str) -> Option<usize> {
        self.characters.iter().position(|c| c == name)
    }

    /// Checks the structural invariants a task must satisfy after decoding.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidData(format!("task {}: {m}", self.movie_id)));
        if self.characters.is_empty() || self.characters.len() > MAX_CHARACTERS {
            return bad(format!("{} characters", self.characters.len()));
        }
        if self.train_scene_count > self.scenes.len() {
            return bad("train_scene_count exceeds scene count".into());
        }
        for (i, s) in self.scenes.iter().enumerate() {
            if s.scene_index != i || s.movie_id != self.movie_id {
                return bad(format!("scene {i} is mis-indexed"));
            }
            let names: BTreeSet<&String> = s.id_map.values().collect();
            if names.len() != s.id_map.len() {
                return bad(format!("scene {i} id_map is not injective"));
            }
            if s.id_map.keys().any(|k| !is_id_label(k)) {
                return bad(format!("scene {i} has an unknown label"));
            }
        }
        let check = |insts: &[Instance], train: bool| -> Result<()> {
            for inst in insts {
                let in_train = inst.scene_index < self.train_scene_count;
                let ok = inst.movie_id == self.movie_id
                    && in_train == train
                    && self.class_of(&inst.answer).is_some()
                    && self
                        .scene(inst.scene_index)
                        .and_then(|s| s.id_map.get(&inst.masked_id))
                        == Some(&inst.answer);
                if !ok {
                    return Err(Error::InvalidData(format!(
                        "task {}: inconsistent instance {:?}",
                        self.movie_id, inst
                    )));
                }
            }
            Ok(())
        };
        check(&self.train_instances, true)?;
        check(&self.test_instances, false)
    }
}

/// A training fraction kept as an exact ratio so the split is free of
/// floating-point rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainFraction {
    num: u64,
    den: u64,
}

impl TrainFraction {
    pub const DEFAULT: TrainFraction = TrainFraction { num: 3, den: 5 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::Config(format!("train fraction {num}/{den} outside [0, 1]")));
        }
        Ok(TrainFraction { num, den })
    }

    /// `max(1, floor(fraction · scenes))`, never more than `scenes`.
    pub fn train_count(&self, scenes: usize) -> usize {
        let n = (scenes as u128 * self.num as u128 / self.den as u128) as usize;
        n.max(1).min(scenes)
    }
}

impl Default for TrainFraction {
    fn default() -> Self {
        TrainFraction::DEFAULT
    }
}

impl fmt::Display for TrainFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for TrainFraction {
    type Err = Error;

    /// Accepts `"3/5"` or a decimal such as `"0.6"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let invalid = || Error::Config(format!("bad train fraction {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| invalid())?;
            let d = d.trim().parse().map_err(|_| invalid())?;
            return TrainFraction::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || s.is_empty() {
            return Err(invalid());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| invalid())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| invalid())? };
        let num = int.checked_mul(den).and_then(|x| x.checked_add(frac_v)).ok_or_else(invalid)?;
        TrainFraction::new(num, den)
    }
}

impl Serialize for TrainFraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainFraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ranks speakers by utterance count; ties go to the earlier first
/// appearance, then to the lexicographically smaller name.
pub fn select_main_characters(movie_id: &str, scenes: &[Scene], k: usize) -> Result<Vec<String>> {
    let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for u in scenes.iter().flat_map(|s| &s.utterances) {
        if u.is_background {
            continue;
        }
        let entry = stats.entry(u.speaker.as_str()).or_insert((0, order));
        entry.0 += 1;
        order += 1;
    }
    if stats.is_empty() {
        return Err(Error::NoDialogue(movie_id.to_string()));
    }
    let mut ranked: Vec<(&str, usize, usize)> = stats.into_iter().map(|(n, (c, f))| (n, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(k).map(|(n, _, _)| n.to_string()).collect())
}

/// Replaces whole-word, case-insensitive occurrences of `name` in `text`.
fn replace_name(text: &str, name: &str, label: &str) -> String {
    let lower_text = text.to_lowercase();
    let lower_name = name.to_lowercase();
    // Lowercasing can change byte lengths for some scripts; fall back to no
    // substitution rather than slicing at the wrong offsets.
    if lower_text.len() != text.len() || lower_name.is_empty() {
        return text.to_string();
    }
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '\'');
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    while let Some(off) = lower_text[pos..].find(&lower_name) {
        let start = pos + off;
        let end = start + lower_name.len();
        let before = text[..start].chars().next_back();
        let after = text[end..].chars().next();
        out.push_str(&text[pos..start]);
        if is_word(before) || is_word(after) {
            out.push_str(&text[start..end]);
        } else {
            out.push_str(label);
        }
        pos = end;
    }
    out.push_str(&text[pos..]);
    out
}

/// Masks the candidates speaking in `scene` with a uniformly random
/// injection into `P0..P4`.
///
/// Speaker fields of masked characters become their label, and mentions of
/// them in background descriptions are replaced as well. Other speakers keep
/// their names.
pub fn anonymize_scene<R: Rng + ?Sized>(
    movie_id: &str,
    scene: &Scene,
    candidates: &[String],
    rng: &mut R,
) -> AnonymizedScene {
    let present: Vec<&String> = candidates
        .iter()
        .filter(|c| scene.utterances.iter().any(|u| !u.is_background && &u.speaker == *c))
        .collect();

    // Partial Fisher-Yates: the first `present.len()` slots form a uniform
    // ordered draw without replacement.
    let mut slots: Vec<usize> = (0..ID_LABELS.len()).collect();
    for i in 0..present.len() {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let label_of: HashMap<&str, &str> = present
        .iter()
        .zip(&slots)
        .map(|(name, &slot)| (name.as_str(), ID_LABELS[slot]))
        .collect();

    let utterances = scene
        .utterances
        .iter()
        .map(|u| {
            if u.is_background {
                let mut text = u.text.clone();
                // Longest names first so "MARY ANN" wins over "MARY".
                let mut names: Vec<_> = label_of.iter().collect();
                names.sort_by_key(|(n, _)| std::cmp::Reverse(n.len()));
                for (name, label) in names {
                    text = replace_name(&text, name, label);
                }
                Utterance::background(text)
            } else {
                match label_of.get(u.speaker.as_str()) {
                    Some(label) => Utterance::spoken(*label, u.text.clone()),
                    None => u.clone(),
                }
            }
        })
        .collect();

    AnonymizedScene {
        movie_id: movie_id.to_string(),
        scene_index: scene.index,
        heading: scene.heading.clone(),
        utterances,
        id_map: label_of
            .iter()
            .map(|(n, l)| (l.to_string(), n.to_string()))
            .collect(),
        candidates: candidates.to_vec(),
    }
}

/// Leading `max(1, floor(fraction · T))` scenes for training, the rest for testing.
pub fn split_train_test<T: Clone>(scenes: &[T], fraction: TrainFraction) -> (Vec<T>, Vec<T>) {
    if scenes.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let n = fraction.train_count(scenes.len());
    (scenes[..n].to_vec(), scenes[n..].to_vec())
}

/// One instance per masked label, `P0..P4` order.
pub fn build_instances(scene: &AnonymizedScene) -> Vec<Instance> {
    scene
        .id_map
        .iter()
        .map(|(label, name)| Instance {
            movie_id: scene.movie_id.clone(),
            scene_index: scene.scene_index,
            masked_id: label.clone(),
            answer: name.clone(),
        })
        .collect()
}

/// Builds one task from a movie's scenes.
pub fn build_task(
    movie_id: &str,
    scenes: &[Scene],
    genres: Vec<String>,
    fraction: TrainFraction,
    seed: u64,
) -> Result<Task> {
    let characters = select_main_characters(movie_id, scenes, MAX_CHARACTERS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, movie_id));
    let anon: Vec<AnonymizedScene> = scenes
        .iter()
        .map(|s| anonymize_scene(movie_id, s, &characters, &mut rng))
        .collect();
    let (train, test) = split_train_test(&anon, fraction);
    Ok(Task {
        movie_id: movie_id.to_string(),
        genres,
        characters,
        train_scene_count: train.len(),
        train_instances: train.iter().flat_map(build_instances).collect(),
        test_instances: test.iter().flat_map(build_instances).collect(),
        scenes: anon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_n: usize,
    pub dev_n: usize,
    pub test_n: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train_n + self.dev_n + self.test_n
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// `"807,100,100"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
        match nums.as_deref() {
            Some(&[train_n, dev_n, test_n]) => Ok(SplitSpec {
                train_n,
                dev_n,
                test_n,
            }),
            _ => Err(Error::Config(format!("bad split {s:?}, expected train,dev,test"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub movies: usize,
    pub characters: usize,
    pub scenes: usize,
    pub train_scenes: usize,
    pub train_instances: usize,
    pub test_scenes: usize,
    pub test_instances: usize,
    pub mean_train_instances_per_character: f64,
}

impl SplitStats {
    pub fn of(tasks: &[Task]) -> Self {
        let mut s = SplitStats {
            movies: tasks.len(),
            ..SplitStats::default()
        };
        for t in tasks {
            s.characters += t.characters.len();
            s.scenes += t.scenes.len();
            s.train_scenes += t.train_scene_count;
            s.test_scenes += t.scenes.len() - t.train_scene_count;
            s.train_instances += t.train_instances.len();
            s.test_instances += t.test_instances.len();
        }
        if s.characters > 0 {
            s.mean_train_instances_per_character = s.train_instances as f64 / s.characters as f64;
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
    pub total: SplitStats,
    pub skipped_movies: Vec<String>,
}

impl fmt::Display for BenchmarkStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>7} {:>11} {:>8} {:>12} {:>12} {:>11} {:>11} {:>10}",
            "split", "movies", "characters", "scenes", "train_scenes", "train_inst", "test_scenes", "test_inst", "inst/char"
        )?;
        for (name, s) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test), ("total", &self.total)] {
            writeln!(
                f,
                "{:<12} {:>7} {:>11} {:>8} {:>12} {:>12} {:>11} {:>11} {:>10.2}",
                name,
                s.movies,
                s.characters,
                s.scenes,
                s.train_scenes,
                s.train_instances,
                s.test_scenes,
                s.test_instances,
                s.mean_train_instances_per_character
            )?;
        }
        if !self.skipped_movies.is_empty() {
            writeln!(f, "skipped (no dialogue): {}", self.skipped_movies.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub split_spec: SplitSpec,
    pub train_frac: TrainFraction,
    pub stats: BenchmarkStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSplit {
    pub seed: u64,
    pub split_spec: SplitSpec,
    pub train_frac: TrainFraction,
    pub train_tasks: Vec<Task>,
    pub dev_tasks: Vec<Task>,
    pub test_tasks: Vec<Task>,
    pub stats: BenchmarkStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl BenchmarkSplit {
    pub fn tasks(&self, split: SplitName) -> &[Task] {
        match split {
            SplitName::Train => &self.train_tasks,
            SplitName::Dev => &self.dev_tasks,
            SplitName::Test => &self.test_tasks,
        }
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &Task> {
        self.train_tasks.iter().chain(&self.dev_tasks).chain(&self.test_tasks)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            split_spec: self.split_spec,
            train_frac: self.train_frac,
            stats: self.stats.clone(),
        }
    }
}

/// A movie ready for task construction.
#[derive(Clone, Debug)]
pub struct MovieInput {
    pub movie_id: String,
    pub scenes: Vec<Scene>,
    pub genres: Vec<String>,
}

impl MovieInput {
    pub fn from_parsed(movie: &ParsedMovie, genres: &BTreeMap<String, Vec<String>>) -> Self {
        MovieInput {
            movie_id: movie.title.clone(),
            scenes: movie.scenes.clone(),
            genres: genres.get(&movie.title).cloned().unwrap_or_default(),
        }
    }
}

/// Builds the full benchmark. Movies without dialogue are skipped with a
/// warning; the rest are processed, shuffled by `seed` and partitioned.
pub fn build_benchmark(
    movies: &[MovieInput],
    spec: SplitSpec,
    fraction: TrainFraction,
    seed: u64,
) -> Result<BenchmarkSplit> {
    let mut seen = BTreeSet::new();
    for m in movies {
        if !seen.insert(m.movie_id.as_str()) {
            return Err(Error::DuplicateMovie(m.movie_id.clone()));
        }
    }

    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for m in movies {
        match build_task(&m.movie_id, &m.scenes, m.genres.clone(), fraction, seed) {
            Ok(t) => tasks.push(t),
            Err(Error::NoDialogue(id)) => {
                log::warn!("skipping movie {id:?}: no dialogue");
                skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    if spec.total() > tasks.len() {
        return Err(Error::SplitTooLarge {
            needed: spec.total(),
            available: tasks.len(),
        });
    }
    if spec.total() < tasks.len() {
        log::warn!("{} movies left out of every split", tasks.len() - spec.total());
    }

    tasks.sort_by(|a, b| a.movie_id.cmp(&b.movie_id));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "meta-split"));
    tasks.shuffle(&mut rng);
    let mut it = tasks.into_iter();
    let train_tasks: Vec<Task> = it.by_ref().take(spec.train_n).collect();
    let dev_tasks: Vec<Task> = it.by_ref().take(spec.dev_n).collect();
    let test_tasks: Vec<Task> = it.by_ref().take(spec.test_n).collect();

    skipped.sort();
    let all: Vec<Task> = train_tasks.iter().chain(&dev_tasks).chain(&test_tasks).cloned().collect();
    let stats = BenchmarkStats {
        train: SplitStats::of(&train_tasks),
        dev: SplitStats::of(&dev_tasks),
        test: SplitStats::of(&test_tasks),
        total: SplitStats::of(&all),
        skipped_movies: skipped,
    };
    Ok(BenchmarkSplit {
        seed,
        split_spec: spec,
        train_frac: fraction,
        train_tasks,
        dev_tasks,
        test_tasks,
        stats,
    })
}

/// Parses a `movie_id<TAB>genre,genre,...` sidecar. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_genres_tsv(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, genres) = line
            .split_once('\t')
            .ok_or_else(|| Error::InvalidData(format!("genres line {}: missing tab", i + 1)))?;
        let genres: Vec<String> = genres
            .split(',')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(str::to_string)
            .collect();
        out.insert(id.trim().to_string(), genres);
    }
    Ok(out)
}

pub fn render_genres_tsv<'a>(tasks: impl Iterator<Item = &'a Task>) -> String {
    let mut rows: Vec<(&str, String)> = tasks.map(|t| (t.movie_id.as_str(), t.genres.join(","))).collect();
    rows.sort();
    rows.into_iter().map(|(id, g)| format!("{id}\t{g}\n")).collect()
}

pub fn tasks_to_jsonl(tasks: &[Task]) -> Result<String> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn tasks_from_jsonl(text: &str) -> Result<Vec<Task>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let t: Task = serde_json::from_str(l)?;
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// Writes `manifest.json`, `{train,dev,test}/tasks.jsonl` and `genres.tsv`.
pub fn write_benchmark(bench: &BenchmarkSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&bench.manifest())? + "\n";
    std::fs::write(dir.join("manifest.json"), manifest)?;
    for split in SplitName::ALL {
        let sub = dir.join(split.as_str());
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join("tasks.jsonl"), tasks_to_jsonl(bench.tasks(split))?)?;
    }
    std::fs::write(dir.join("genres.tsv"), render_genres_tsv(bench.all_tasks()))?;
    Ok(())
}

pub fn read_benchmark(dir: &Path) -> Result<BenchmarkSplit> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let load = |s: SplitName| -> Result<Vec<Task>> {
        tasks_from_jsonl(&std::fs::read_to_string(dir.join(s.as_str()).join("tasks.jsonl"))?)
    };
    let bench = BenchmarkSplit {
        seed: manifest.seed,
        split_spec: manifest.split_spec,
        train_frac: manifest.train_frac,
        train_tasks: load(SplitName::Train)?,
        dev_tasks: load(SplitName::Dev)?,
        test_tasks: load(SplitName::Test)?,
        stats: manifest.stats,
    };
    let mut ids = BTreeSet::new();
    for t in bench.all_tasks() {
        if !ids.insert(&t.movie_id) {
            return Err(Error::DuplicateMovie(t.movie_id.clone()));
        }
    }
    Ok(bench)
}
