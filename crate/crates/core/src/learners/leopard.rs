//! LEOPARD: a generator turns support embeddings into a per-task linear head,
//! task-specific parameters are adapted by a few gradient steps on the
//! support set, and task-agnostic parameters are meta-learned from the query
//! loss after adaptation (first-order).

use std::collections::BTreeMap;

use amc_tensor::{concat, sgd_step, stack, Bound, GradSet, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    assemble_predictions, embed_frozen, embed_items, sample_episode, Item, Model, PreparedTask, Prediction,
    TrainConfig, Trainer,
};
use crate::encoder;
use crate::error::{Error, Result};

pub const GEN_HIDDEN_WEIGHT: &str = "leopard.gen.hidden.weight";
pub const GEN_HIDDEN_BIAS: &str = "leopard.gen.hidden.bias";
pub const GEN_OUT_WEIGHT: &str = "leopard.gen.out.weight";
pub const GEN_OUT_BIAS: &str = "leopard.gen.out.bias";
pub const PROJ_WEIGHT: &str = "leopard.proj.weight";
pub const PROJ_BIAS: &str = "leopard.proj.bias";
pub const HEAD_WEIGHT: &str = "leopard.head.weight";
pub const HEAD_BIAS: &str = "leopard.head.bias";

/// Parameters adapted in the inner loop: encoder layers above `nu`, the
/// projection, and the generated head.
pub fn is_task_specific(name: &str, nu: usize) -> bool {
    match encoder::layer_of(name) {
        Some(layer) => layer > nu,
        None => name.starts_with("leopard.proj.") || name.starts_with("leopard.head."),
    }
}

/// Parameters updated only in the outer loop: encoder layers up to `nu` and
/// the generator.
pub fn is_task_agnostic(name: &str, nu: usize) -> bool {
    match encoder::layer_of(name) {
        Some(layer) => layer <= nu,
        None => name.starts_with("leopard.gen."),
    }
}

/// Adds the generator and projection to an encoder parameter set.
pub fn init_params<R: Rng + ?Sized>(params: &mut ParamSet, cfg: &TrainConfig, rng: &mut R) {
    let (d, h, l) = (cfg.d_model, cfg.generator_hidden, cfg.head_width);
    params.insert(GEN_HIDDEN_WEIGHT, Tensor::glorot(h, d, rng));
    params.insert(GEN_HIDDEN_BIAS, Tensor::zeros(&[h]));
    params.insert(GEN_OUT_WEIGHT, Tensor::glorot(l + 1, h, rng));
    params.insert(GEN_OUT_BIAS, Tensor::zeros(&[l + 1]));
    params.insert(PROJ_WEIGHT, Tensor::glorot(l, d, rng));
    params.insert(PROJ_BIAS, Tensor::zeros(&[l]));
}

/// Two-layer tanh network mapping an embedding to a head row and bias.
pub fn generator<'t>(params: &Bound<'t>, e: &Var<'t>) -> Result<Var<'t>> {
    let hidden = params
        .get(GEN_HIDDEN_WEIGHT)?
        .matmul(e)?
        .add(&params.get(GEN_HIDDEN_BIAS)?)?
        .tanh()?;
    Ok(params.get(GEN_OUT_WEIGHT)?.matmul(&hidden)?.add(&params.get(GEN_OUT_BIAS)?)?)
}

/// Maps an embedding into the head's input space.
pub fn project<'t>(params: &Bound<'t>, e: &Var<'t>) -> Result<Var<'t>> {
    Ok(params
        .get(PROJ_WEIGHT)?
        .matmul(e)?
        .add(&params.get(PROJ_BIAS)?)?
        .tanh()?)
}

/// Head rows for `classes`, each the mean generator output over that
/// class's support embeddings. Returns `(weight [rows, l], bias [rows])`.
pub fn generate_head<'t>(
    params: &Bound<'t>,
    support: &[(usize, Var<'t>)],
    classes: &[usize],
) -> Result<(Var<'t>, Var<'t>)> {
    let mut rows = Vec::with_capacity(classes.len());
    let mut biases = Vec::with_capacity(classes.len());
    for &c in classes {
        let outs = support
            .iter()
            .filter(|(class, _)| *class == c)
            .map(|(_, e)| generator(params, e))
            .collect::<Result<Vec<_>>>()?;
        if outs.is_empty() {
            return Err(Error::InvalidData(format!("class {c} has no support embedding")));
        }
        let mean = stack(&outs)?.mean(Some(0))?;
        let width = mean.shape()[0] - 1;
        rows.push(mean.slice(0, width)?);
        biases.push(mean.slice(width, 1)?);
    }
    Ok((stack(&rows)?, concat(&biases)?))
}

/// `W h(e) + b`.
pub fn head_logits<'t>(params: &Bound<'t>, weight: &Var<'t>, bias: &Var<'t>, e: &Var<'t>) -> Result<Var<'t>> {
    Ok(weight.matmul(&project(params, e)?)?.add(bias)?)
}

/// Sorted distinct classes with support.
fn support_classes(items: &[(Item, Tensor)]) -> Vec<usize> {
    let mut c: Vec<usize> = items.iter().map(|(i, _)| i.class).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Generated head values from frozen support embeddings.
pub fn generate_head_values(
    params: &ParamSet,
    support: &[(Item, Tensor)],
    classes: &[usize],
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let consts: Vec<(usize, Var)> = support.iter().map(|(i, e)| (i.class, tape.constant(e.clone()))).collect();
    let (w, b) = generate_head(&bound, &consts, classes)?;
    let out = (w.value().clone(), b.value().clone());
    Ok(out)
}

/// Task-specific parameters (including the head) ready for adaptation.
pub fn task_specific_start(master: &ParamSet, nu: usize, weight: Tensor, bias: Tensor) -> ParamSet {
    let mut p = master.filter(|n| is_task_specific(n, nu));
    p.insert(HEAD_WEIGHT, weight);
    p.insert(HEAD_BIAS, bias);
    p
}

/// Mean support cross-entropy with `adapted` overriding the master
/// parameters, and its gradient with respect to `adapted`.
pub fn support_loss(
    master: &ParamSet,
    adapted: &ParamSet,
    task: &PreparedTask,
    support: &[usize],
    classes: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, GradSet)> {
    let mut combined = master.filter(|n| is_task_agnostic(n, cfg.nu) && encoder::layer_of(n).is_some());
    combined.extend(adapted);
    let tape = Tape::new();
    let bound = combined.bind(&tape, |n| adapted.contains(n));
    let (w, b) = (bound.get(HEAD_WEIGHT)?, bound.get(HEAD_BIAS)?);
    let mut losses = Vec::new();
    for (item, e) in embed_items(&bound, task, support, &cfg.encoder())? {
        if let Some(row) = classes.iter().position(|&c| c == item.class) {
            losses.push(head_logits(&bound, &w, &b, &e)?.cross_entropy(row)?);
        }
    }
    if losses.is_empty() {
        return Ok((0.0, GradSet::new()));
    }
    let loss = concat(&losses)?.mean(None)?;
    let value = loss.item()?;
    Ok((value, bound.grads(&tape.backward(loss)?)))
}

/// `inner_steps` SGD steps on the support loss, applied to a copy.
pub fn adapt(
    master: &ParamSet,
    start: ParamSet,
    task: &PreparedTask,
    support: &[usize],
    classes: &[usize],
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    let mut adapted = start;
    for _ in 0..cfg.inner_steps {
        let (_, grads) = support_loss(master, &adapted, task, support, classes, cfg)?;
        sgd_step(&mut adapted, &grads, cfg.inner_lr)?;
    }
    Ok(adapted)
}

/// Query loss after adaptation and its first-order gradient for the master
/// parameters. The head is regenerated from the (constant) support
/// embeddings plus the constant inner-loop offset, so the generator receives
/// gradient; adapted task-specific parameters stand in for the master ones.
#[allow(clippy::too_many_arguments)]
pub fn outer_gradient(
    master: &ParamSet,
    adapted: &ParamSet,
    head_start: (&Tensor, &Tensor),
    support: &[(Item, Tensor)],
    task: &PreparedTask,
    query: &[usize],
    classes: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, usize, GradSet)> {
    let mut combined = master.filter(|n| is_task_agnostic(n, cfg.nu));
    combined.extend(&adapted.filter(|n| n != HEAD_WEIGHT && n != HEAD_BIAS));
    let tape = Tape::new();
    let bound = combined.bind(&tape, |_| true);

    let delta = |name: &str, start: &Tensor| -> Result<Tensor> {
        let a = adapted.get(name)?;
        Ok(a.zip_map(start, "head offset", |x, y| x - y)?)
    };
    let dw = tape.constant(delta(HEAD_WEIGHT, head_start.0)?);
    let db = tape.constant(delta(HEAD_BIAS, head_start.1)?);
    let consts: Vec<(usize, Var)> = support.iter().map(|(i, e)| (i.class, tape.constant(e.clone()))).collect();
    let (w, b) = generate_head(&bound, &consts, classes)?;
    let (w, b) = (w.add(&dw)?, b.add(&db)?);

    let mut losses = Vec::new();
    for (item, e) in embed_items(&bound, task, query, &cfg.encoder())? {
        if let Some(row) = classes.iter().position(|&c| c == item.class) {
            losses.push(head_logits(&bound, &w, &b, &e)?.cross_entropy(row)?);
        }
    }
    if losses.is_empty() {
        return Ok((0.0, 0, GradSet::new()));
    }
    let n = losses.len();
    let loss = concat(&losses)?.mean(None)?;
    let value = loss.item()?;
    Ok((value, n, bound.grads(&tape.backward(loss)?)))
}

/// One episode per training task; the master parameters are updated after
/// every episode (subject to `accumulate`).
pub fn run_epoch(
    params: &mut ParamSet,
    trainer: &mut Trainer,
    tasks: &[PreparedTask],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let enc = cfg.encoder();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(rng);
    let (mut total, mut count) = (0.0, 0usize);
    for ti in order {
        let task = &tasks[ti];
        let episode = match sample_episode(task, cfg, rng) {
            Ok(e) => e,
            Err(e @ (Error::MissingClassInSupport { .. } | Error::InvalidData(_))) => {
                log::warn!("skipping episode: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let support = embed_frozen(params, task, &episode.support, &enc)?;
        let classes: Vec<usize> = (0..task.n_classes()).collect();
        let (w0, b0) = generate_head_values(params, &support, &classes)?;
        let start = task_specific_start(params, cfg.nu, w0.clone(), b0.clone());
        let adapted = adapt(params, start, task, &episode.support, &classes, cfg)?;
        let (loss, n, grads) =
            outer_gradient(params, &adapted, (&w0, &b0), &support, task, &episode.query, &classes, cfg)?;
        if n == 0 {
            continue;
        }
        total += loss * n as f64;
        count += n;
        trainer.push(params, &grads)?;
    }
    trainer.flush(params)?;
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Generates a head from all of the task's training instances, adapts a
/// copy of the task-specific parameters on them, and scores the test set.
pub fn predict(model: &Model, task: &PreparedTask) -> Result<Vec<Prediction>> {
    let cfg = &model.config;
    let enc = cfg.encoder();
    let master = &model.params;
    let train = task.train_scenes();
    let support = embed_frozen(master, task, &train, &enc)?;
    let classes = support_classes(&support);
    let mut scores = BTreeMap::new();
    if !classes.is_empty() {
        let (w0, b0) = generate_head_values(master, &support, &classes)?;
        let adapted = adapt(master, task_specific_start(master, cfg.nu, w0, b0), task, &train, &classes, cfg)?;
        let mut combined = master.clone();
        combined.extend(&adapted);
        let test: Vec<usize> = (task.task.train_scene_count..task.task.scenes.len()).collect();
        for (item, e) in embed_frozen(&combined, task, &test, &enc)? {
            let tape = Tape::new();
            let bound = combined.bind(&tape, |_| false);
            let logits = head_logits(
                &bound,
                &bound.get(HEAD_WEIGHT)?,
                &bound.get(HEAD_BIAS)?,
                &tape.constant(e),
            )?;
            let mut row = vec![None; task.n_classes()];
            for (r, &c) in classes.iter().enumerate() {
                row[c] = Some(logits.value().data()[r]);
            }
            scores.insert((item.scene, item.label), row);
        }
    }
    Ok(assemble_predictions(task, &scores))
}
