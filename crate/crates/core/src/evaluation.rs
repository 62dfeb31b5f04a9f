//! Instance-level accuracy, the random and majority baselines, and
//! accuracy broken down by genre or by number of speakers in the scene.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::Task;
use crate::error::{Error, Result};
use crate::learners::Prediction;

pub const UNKNOWN_GENRE: &str = "unknown";

/// Correct and total counts; the accuracy is their exact ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
}

impl Cell {
    pub fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += correct as usize;
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn percent(&self) -> String {
        self.accuracy().map_or("-".into(), |a| format!("{:.1}", a * 100.0))
    }
}

/// Fraction of correct predictions.
pub fn instance_accuracy(predictions: &[Prediction]) -> Result<f64> {
    let mut cell = Cell::default();
    for p in predictions {
        cell.add(p.is_correct());
    }
    cell.accuracy().ok_or(Error::EmptySet)
}

/// Mean over test instances of `1 / |candidates|`.
pub fn expected_random_accuracy(tasks: &[Task]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in tasks {
        for inst in &t.test_instances {
            let k = t.scene(inst.scene_index).map_or(t.characters.len(), |s| s.candidates.len());
            sum += 1.0 / k.max(1) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    Ok(sum / n as f64)
}

/// Accuracy of uniform guessing among each scene's candidates, averaged
/// over `trials` independent passes.
pub fn random_baseline(tasks: &[Task], seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell = Cell::default();
    for _ in 0..trials.max(1) {
        for t in tasks {
            for inst in &t.test_instances {
                let cands = t
                    .scene(inst.scene_index)
                    .map_or(&t.characters, |s| &s.candidates);
                let guess = &cands[rng.random_range(0..cands.len())];
                cell.add(*guess == inst.answer);
            }
        }
    }
    cell.accuracy().ok_or(Error::EmptySet)
}

/// The character with the most training instances; ties go to the earlier
/// character in the task's list.
pub fn majority_character(task: &Task) -> &str {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for inst in &task.train_instances {
        *counts.entry(inst.answer.as_str()).or_default() += 1;
    }
    let mut best = task.characters[0].as_str();
    let mut best_n = counts.get(best).copied().unwrap_or(0);
    for c in &task.characters[1..] {
        let n = counts.get(c.as_str()).copied().unwrap_or(0);
        if n > best_n {
            best = c;
            best_n = n;
        }
    }
    best
}

/// Predicts each task's majority character for every test instance.
pub fn majority_predictions(tasks: &[Task]) -> Vec<Prediction> {
    tasks
        .iter()
        .flat_map(|t| {
            let guess = majority_character(t);
            t.test_instances.iter().map(move |inst| Prediction {
                movie_id: inst.movie_id.clone(),
                scene_index: inst.scene_index,
                masked_id: inst.masked_id.clone(),
                gold: inst.answer.clone(),
                predicted: guess.to_string(),
                logits: t
                    .characters
                    .iter()
                    .map(|c| Some(if c == guess { 1.0 } else { 0.0 }))
                    .collect(),
            })
        })
        .collect()
}

pub fn majority_baseline(tasks: &[Task]) -> Result<f64> {
    instance_accuracy(&majority_predictions(tasks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Genre,
    Speakers,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genre" => Ok(GroupBy::Genre),
            "speakers" => Ok(GroupBy::Speakers),
            _ => Err(Error::Config(format!("unknown grouping {s:?}, expected genre|speakers"))),
        }
    }
}

/// Accuracy per group. A movie with several genres contributes to each of
/// them; the speaker count of an instance is the number of masked speakers
/// in its scene.
pub fn decompose(predictions: &[Prediction], tasks: &[Task], key: GroupBy) -> BTreeMap<String, Cell> {
    let by_id: HashMap<&str, &Task> = tasks.iter().map(|t| (t.movie_id.as_str(), t)).collect();
    let mut cells: BTreeMap<String, Cell> = BTreeMap::new();
    for p in predictions {
        let task = by_id.get(p.movie_id.as_str());
        let keys: Vec<String> = match key {
            GroupBy::Genre => match task {
                Some(t) if !t.genres.is_empty() => t.genres.clone(),
                _ => vec![UNKNOWN_GENRE.to_string()],
            },
            GroupBy::Speakers => {
                let n = task
                    .and_then(|t| t.scene(p.scene_index))
                    .map_or(0, |s| s.id_map.len());
                vec![n.to_string()]
            }
        };
        for k in keys {
            cells.entry(k).or_default().add(p.is_correct());
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Cell,
    pub by_genre: BTreeMap<String, Cell>,
    pub by_speakers: BTreeMap<String, Cell>,
    /// Test instances in the evaluated tasks.
    pub expected_instances: usize,
    /// True when predictions cover only part of the test instances.
    pub partial: bool,
}

impl EvalReport {
    pub fn new(predictions: &[Prediction], tasks: &[Task]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut overall = Cell::default();
        for p in predictions {
            overall.add(p.is_correct());
        }
        let expected: usize = tasks.iter().map(|t| t.test_instances.len()).sum();
        Ok(EvalReport {
            overall,
            by_genre: decompose(predictions, tasks, GroupBy::Genre),
            by_speakers: decompose(predictions, tasks, GroupBy::Speakers),
            expected_instances: expected,
            partial: predictions.len() < expected,
        })
    }

    pub fn cells(&self, key: GroupBy) -> &BTreeMap<String, Cell> {
        match key {
            GroupBy::Genre => &self.by_genre,
            GroupBy::Speakers => &self.by_speakers,
        }
    }

    /// Aligned text table of overall accuracy plus one grouping.
    pub fn render(&self, key: GroupBy) -> String {
        let title = match key {
            GroupBy::Genre => "genre",
            GroupBy::Speakers => "#speakers",
        };
        let mark = if self.partial { "*" } else { "" };
        let rows: Vec<(String, Cell)> = std::iter::once(("overall".to_string(), self.overall))
            .chain(self.cells(key).iter().map(|(k, c)| (k.clone(), *c)))
            .collect();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(title.len());
        let mut out = format!("{:<width$}  {:>9}  {:>9}\n", title, "accuracy", "instances");
        for (k, c) in rows {
            out.push_str(&format!("{:<width$}  {:>9}  {:>9}\n", k, format!("{}{mark}", c.percent()), c.total));
        }
        if self.partial {
            out.push_str(&format!(
                "* computed on {} of {} test instances\n",
                self.overall.total, self.expected_instances
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(GroupBy::Speakers))
    }
}
