//! Multi-task baseline: a shared encoder with one linear classifier per task.

use std::collections::BTreeMap;

use amc_tensor::{ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{assemble_predictions, embed_frozen, embed_items, Model, PreparedTask, Prediction, TrainConfig, Trainer};
use crate::benchmark::Task;
use crate::error::{Error, Result};

pub fn head_weight(movie_id: &str) -> String {
    format!("mtl.head.{movie_id}.weight")
}

pub fn head_bias(movie_id: &str) -> String {
    format!("mtl.head.{movie_id}.bias")
}

/// Adds an `N_i × D` classifier per task.
pub fn init_heads<'a, R: Rng + ?Sized>(
    params: &mut ParamSet,
    tasks: impl Iterator<Item = &'a Task>,
    cfg: &TrainConfig,
    rng: &mut R,
) {
    for t in tasks {
        let n = t.characters.len();
        params.insert(head_weight(&t.movie_id), Tensor::glorot(n, cfg.d_model, rng));
        params.insert(head_bias(&t.movie_id), Tensor::zeros(&[n]));
    }
}

/// `W e + b` for the task's head.
pub fn logits<'t>(weight: &Var<'t>, bias: &Var<'t>, embedding: &Var<'t>) -> Result<Var<'t>> {
    Ok(weight.matmul(embedding)?.add(bias)?)
}

/// One pass over the training parts of every task, in minibatches of
/// `batch_size` scenes.
pub fn run_epoch(
    params: &mut ParamSet,
    trainer: &mut Trainer,
    tasks: &[PreparedTask],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let enc = cfg.encoder();
    let mut units: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| t.train_scenes().into_iter().map(move |s| (ti, s)))
        .collect();
    units.shuffle(rng);
    let (mut total, mut count) = (0.0, 0usize);
    for batch in units.chunks(cfg.batch_size) {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let mut losses = Vec::new();
        for &(ti, scene) in batch {
            let task = &tasks[ti];
            let w = bound.get(&head_weight(&task.task.movie_id))?;
            let b = bound.get(&head_bias(&task.task.movie_id))?;
            for (item, e) in embed_items(&bound, task, &[scene], &enc)? {
                losses.push(logits(&w, &b, &e)?.cross_entropy(item.class)?);
            }
        }
        if losses.is_empty() {
            continue;
        }
        let n = losses.len();
        let loss = amc_tensor::concat(&losses)?.mean(None)?;
        total += loss.item()? * n as f64;
        count += n;
        let grads = bound.grads(&tape.backward(loss)?);
        trainer.push(params, &grads)?;
    }
    trainer.flush(params)?;
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn predict(model: &Model, task: &PreparedTask) -> Result<Vec<Prediction>> {
    let id = &task.task.movie_id;
    let (w, b) = match (model.params.get(&head_weight(id)), model.params.get(&head_bias(id))) {
        (Ok(w), Ok(b)) => (w.clone(), b.clone()),
        _ => return Err(Error::Config(format!("the multi-task model has no head for task {id:?}"))),
    };
    let test: Vec<usize> = (task.task.train_scene_count..task.task.scenes.len()).collect();
    let mut scores = BTreeMap::new();
    let tape = Tape::new();
    let (w, b) = (tape.constant(w), tape.constant(b));
    for (item, e) in embed_frozen(&model.params, task, &test, &model.config.encoder())? {
        let l = logits(&w, &b, &tape.constant(e))?;
        scores.insert((item.scene, item.label), l.value().data().iter().map(|&v| Some(v)).collect());
    }
    Ok(assemble_predictions(task, &scores))
}
