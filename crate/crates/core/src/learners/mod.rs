//! The multi-task baseline, the prototypical network and LEOPARD, with the
//! shared episode sampling, training loop and few-shot evaluation.

mod config;
pub mod leopard;
pub mod mtl;
pub mod proto;

use std::collections::BTreeMap;
use std::path::Path;

use amc_tensor::{checkpoint, Adam, Bound, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{BenchmarkSplit, Task};
use crate::derive_seed;
use crate::encoder::{self, EncoderConfig, TokenizedScene, Vocabulary};
use crate::error::{Error, Result};

pub use config::{EarlyStop, Method, TrainConfig};

/// Resampling budget when a support draw misses a class.
pub const MAX_SUPPORT_ATTEMPTS: usize = 20;

/// One masked speaker of one scene whose tokens survived truncation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub scene: usize,
    pub label: String,
    pub class: usize,
}

/// A task with every scene tokenized once.
#[derive(Debug)]
pub struct PreparedTask<'a> {
    pub task: &'a Task,
    pub tokens: Vec<TokenizedScene>,
}

impl<'a> PreparedTask<'a> {
    pub fn new(task: &'a Task, vocab: &Vocabulary, max_len: usize) -> Self {
        let tokens = task
            .scenes
            .iter()
            .map(|s| encoder::tokenize_scene(s, vocab, max_len))
            .collect();
        PreparedTask { task, tokens }
    }

    pub fn n_classes(&self) -> usize {
        self.task.characters.len()
    }

    /// Encodable instances of `scene`, label order.
    pub fn items(&self, scene: usize) -> Vec<Item> {
        self.task.scenes[scene]
            .id_map
            .iter()
            .filter(|(label, _)| self.tokens[scene].mask(label).is_some())
            .filter_map(|(label, name)| {
                self.task.class_of(name).map(|class| Item {
                    scene,
                    label: label.clone(),
                    class,
                })
            })
            .collect()
    }

    /// Training-part scenes holding at least one encodable instance.
    pub fn train_scenes(&self) -> Vec<usize> {
        (0..self.task.train_scene_count)
            .filter(|&s| !self.items(s).is_empty())
            .collect()
    }

    pub fn items_of(&self, scenes: &[usize]) -> Vec<Item> {
        scenes.iter().flat_map(|&s| self.items(s)).collect()
    }
}

/// Support and query scene indices of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws a meta-training episode from the task's training part: up to
/// `support_batches · batch_size` support scenes covering every class, and up
/// to `query_batch` disjoint query scenes.
pub fn sample_episode(task: &PreparedTask, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let mut scenes = task.train_scenes();
    if scenes.len() < 2 {
        return Err(Error::InvalidData(format!(
            "task {} has fewer than two usable training scenes",
            task.task.movie_id
        )));
    }
    let n_query = cfg.query_batch.min(scenes.len() / 2);
    let n_support = (cfg.support_batches * cfg.batch_size).min(scenes.len() - n_query);
    for _ in 0..MAX_SUPPORT_ATTEMPTS {
        scenes.shuffle(rng);
        let support = scenes[n_query..n_query + n_support].to_vec();
        let mut seen = vec![false; task.n_classes()];
        for item in task.items_of(&support) {
            seen[item.class] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            if !task.items_of(&scenes).iter().any(|i| i.class == missing) {
                return Err(missing_class(task, missing));
            }
            continue;
        }
        return Ok(Episode {
            support,
            query: scenes[..n_query].to_vec(),
        });
    }
    let seen: Vec<usize> = task.items_of(&scenes).iter().map(|i| i.class).collect();
    let missing = (0..task.n_classes()).find(|c| !seen.contains(c)).unwrap_or(0);
    Err(missing_class(task, missing))
}

fn missing_class(task: &PreparedTask, class: usize) -> Error {
    Error::MissingClassInSupport {
        movie_id: task.task.movie_id.clone(),
        character: task.task.characters[class].clone(),
    }
}

/// Encodes `scenes` on `tape` and returns one embedding per encodable item.
pub fn embed_items<'t>(
    params: &Bound<'t>,
    task: &PreparedTask,
    scenes: &[usize],
    cfg: &EncoderConfig,
) -> Result<Vec<(Item, Var<'t>)>> {
    let mut out = Vec::new();
    for &s in scenes {
        let pooled = encoder::encode_scene(params, &task.tokens[s], cfg)?;
        for item in task.items(s) {
            if let Some(v) = pooled.get(&item.label) {
                out.push((item, *v));
            }
        }
    }
    Ok(out)
}

/// Embeddings computed without recording gradients, one short-lived tape
/// per scene so long scenes do not pile up in memory.
pub fn embed_frozen(
    params: &ParamSet,
    task: &PreparedTask,
    scenes: &[usize],
    cfg: &EncoderConfig,
) -> Result<Vec<(Item, Tensor)>> {
    let encoder_params = params.filter(|n| encoder::layer_of(n).is_some());
    let mut out = Vec::new();
    for &s in scenes {
        let tape = Tape::new();
        let bound = encoder_params.bind(&tape, |_| false);
        for (item, v) in embed_items(&bound, task, &[s], cfg)? {
            out.push((item, v.value().clone()));
        }
    }
    Ok(out)
}

/// One scored instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub movie_id: String,
    pub scene_index: usize,
    pub masked_id: String,
    pub gold: String,
    pub predicted: String,
    /// Per character in task order; `None` for characters the learner could
    /// not score (no support example, or the instance was truncated away).
    pub logits: Vec<Option<f64>>,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        self.gold == self.predicted
    }
}

/// Builds predictions for every test instance of `task`, given scores for
/// the encodable ones. Unscored instances fall back to the first character.
pub(crate) fn assemble_predictions(
    task: &PreparedTask,
    scores: &BTreeMap<(usize, String), Vec<Option<f64>>>,
) -> Vec<Prediction> {
    let n = task.n_classes();
    task.task
        .test_instances
        .iter()
        .map(|inst| {
            let logits = scores
                .get(&(inst.scene_index, inst.masked_id.clone()))
                .cloned()
                .unwrap_or_else(|| vec![None; n]);
            let best = argmax(&logits).unwrap_or(0);
            Prediction {
                movie_id: inst.movie_id.clone(),
                scene_index: inst.scene_index,
                masked_id: inst.masked_id.clone(),
                gold: inst.answer.clone(),
                predicted: task.task.characters[best].clone(),
                logits,
            }
        })
        .collect()
}

/// Index of the largest present score; ties go to the lower index.
pub fn argmax(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// A trained learner: its configuration, vocabulary and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TrainConfig,
    vocab: Vec<String>,
}

impl Model {
    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let vocab = (encoder::SPECIAL_TOKENS.len()..self.vocab.len())
            .filter_map(|i| self.vocab.token(i).map(str::to_string))
            .collect();
        let meta = serde_json::to_value(ModelMeta {
            config: self.config.clone(),
            vocab,
        })?;
        Ok(checkpoint::encode(&self.params, &meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = checkpoint::decode(bytes)?;
        let meta: ModelMeta = serde_json::from_value(meta)?;
        meta.config.validate()?;
        Ok(Model {
            config: meta.config,
            vocab: Vocabulary::from_tokens(meta.vocab)?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&std::fs::read(path)?)
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }
}

/// Predicts every test instance of `task` using only the task's own
/// training instances as support. The model is never modified.
pub fn few_shot_evaluate(model: &Model, task: &Task) -> Result<Vec<Prediction>> {
    let prepared = PreparedTask::new(task, &model.vocab, model.config.max_len);
    match model.method() {
        Method::Mtl => mtl::predict(model, &prepared),
        Method::Proto => proto::predict(model, &prepared),
        Method::Leopard => leopard::predict(model, &prepared),
    }
}

/// Mean per-task accuracy over tasks with at least one test instance.
pub fn mean_task_accuracy(model: &Model, tasks: &[Task]) -> Result<Option<f64>> {
    let mut accs = Vec::new();
    for t in tasks.iter().filter(|t| !t.test_instances.is_empty()) {
        let preds = few_shot_evaluate(model, t)?;
        accs.push(preds.iter().filter(|p| p.is_correct()).count() as f64 / preds.len() as f64);
    }
    Ok((!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    pub dev_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 means the initialization).
    pub best_epoch: usize,
}

/// Optimizer state with gradient accumulation, shared by the per-method
/// epoch functions.
pub struct Trainer {
    adam: Adam,
    pending: amc_tensor::GradSet,
    pending_count: usize,
    accumulate: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Trainer {
            adam: Adam::new(cfg.lr),
            pending: Default::default(),
            pending_count: 0,
            accumulate: cfg.accumulate,
            steps: 0,
        }
    }

    /// Adds one minibatch gradient; steps once `accumulate` have arrived.
    pub fn push(&mut self, params: &mut ParamSet, grads: &amc_tensor::GradSet) -> Result<()> {
        self.pending.accumulate(grads)?;
        self.pending_count += 1;
        if self.pending_count >= self.accumulate {
            self.flush(params)?;
        }
        Ok(())
    }

    pub fn flush(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.pending_count == 0 {
            return Ok(());
        }
        let mut g = std::mem::take(&mut self.pending);
        g.scale(1.0 / self.pending_count as f64);
        self.pending_count = 0;
        self.adam.step(params, &g)?;
        self.steps += 1;
        Ok(())
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Trains `config.method` on `bench`. LEOPARD starts from `init`'s encoder
/// (and vocabulary) when given.
pub fn train(bench: &BenchmarkSplit, config: &TrainConfig, init: Option<&Model>) -> Result<TrainOutcome> {
    train_with(bench, config, init, |_, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` with each epoch's log row and the
/// parameters reached at the end of that epoch.
pub fn train_with(
    bench: &BenchmarkSplit,
    config: &TrainConfig,
    init: Option<&Model>,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if bench.train_tasks.is_empty() {
        return Err(Error::Config("benchmark has no training tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, config.method.as_str()));
    let vocab = match init {
        Some(m) => m.vocab.clone(),
        None => Vocabulary::build(&bench.train_tasks, config.vocab_min_count, config.vocab_max_words),
    };
    let enc = config.encoder();
    let mut params = match init {
        Some(m) => {
            if m.config.d_model != config.d_model {
                return Err(Error::Config(format!(
                    "initial model has d_model {}, config asks for {}",
                    m.config.d_model, config.d_model
                )));
            }
            m.params.filter(|n| encoder::layer_of(n).is_some())
        }
        None => encoder::init_params(vocab.len(), &enc, &mut rng),
    };
    let train_tasks: Vec<PreparedTask> = bench
        .train_tasks
        .iter()
        .map(|t| PreparedTask::new(t, &vocab, config.max_len))
        .collect();
    match config.method {
        Method::Mtl => mtl::init_heads(&mut params, bench.all_tasks(), config, &mut rng),
        Method::Proto => {}
        Method::Leopard => leopard::init_params(&mut params, config, &mut rng),
    }
    let mtl_tasks: Vec<PreparedTask> = match config.method {
        Method::Mtl => bench
            .all_tasks()
            .map(|t| PreparedTask::new(t, &vocab, config.max_len))
            .collect(),
        _ => Vec::new(),
    };

    let mut model = Model {
        config: config.clone(),
        vocab,
        params,
    };
    let early = config.early_stop_metric == EarlyStop::DevAccuracy && !bench.dev_tasks.is_empty();
    let mut best = (
        if early { mean_task_accuracy(&model, &bench.dev_tasks)? } else { None },
        0usize,
        model.params.clone(),
    );
    let mut trainer = Trainer::new(config);
    let mut log = Vec::new();
    for epoch in 1..=config.epochs {
        let steps_before = trainer.steps;
        let loss = match config.method {
            Method::Mtl => mtl::run_epoch(&mut model.params, &mut trainer, &mtl_tasks, config, &mut rng)?,
            Method::Proto => proto::run_epoch(&mut model.params, &mut trainer, &train_tasks, config, &mut rng)?,
            Method::Leopard => leopard::run_epoch(&mut model.params, &mut trainer, &train_tasks, config, &mut rng)?,
        };
        let dev_accuracy = if early { mean_task_accuracy(&model, &bench.dev_tasks)? } else { None };
        log::info!(
            "{} epoch {epoch}: loss {loss:.4}, dev accuracy {}",
            config.method,
            dev_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        let row = EpochLog {
            epoch,
            train_loss: loss,
            steps: trainer.steps - steps_before,
            dev_accuracy,
        };
        on_epoch(&row, &model)?;
        log.push(row);
        if !early || dev_accuracy > best.0 {
            best = (dev_accuracy, epoch, model.params.clone());
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
    })
}
