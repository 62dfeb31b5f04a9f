//! Prototypical network: classes are scored by cosine similarity between a
//! query embedding and the mean support embedding of each class.

use std::collections::BTreeMap;

use amc_tensor::{concat, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{
    assemble_predictions, embed_frozen, embed_items, sample_episode, Item, Model, PreparedTask, Prediction,
    TrainConfig, Trainer,
};
use crate::error::{Error, Result};

/// Mean embedding per class; `None` for classes without support.
pub fn prototypes(support: &[(Item, Tensor)], n_classes: usize) -> Result<Vec<Option<Tensor>>> {
    let mut sums: Vec<Option<(Tensor, usize)>> = vec![None; n_classes];
    for (item, e) in support {
        match &mut sums[item.class] {
            Some((acc, n)) => {
                acc.add_assign(e)?;
                *n += 1;
            }
            slot @ None => *slot = Some((e.clone(), 1)),
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| {
            s.map(|(mut t, n)| {
                t.scale_in_place(1.0 / n as f64);
                t
            })
        })
        .collect())
}

/// Cosine similarity of `query` to each prototype, in prototype order.
pub fn score<'t>(query: &Var<'t>, prototypes: &[Var<'t>]) -> Result<Var<'t>> {
    let sims = prototypes
        .iter()
        .map(|p| query.cosine(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(concat(&sims)?)
}

/// One episode per training task, in shuffled task order.
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
        // The support branch is frozen: prototypes enter the tape as constants.
        let protos = prototypes(&embed_frozen(params, task, &episode.support, &enc)?, task.n_classes())?;
        let protos: Vec<Tensor> = protos
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidData("support lost a class".into()))?;

        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let proto_vars: Vec<Var> = protos.into_iter().map(|p| tape.constant(p)).collect();
        let mut losses = Vec::new();
        for (item, e) in embed_items(&bound, task, &episode.query, &enc)? {
            let logits = score(&e, &proto_vars)?.scale(1.0 / cfg.temperature)?;
            losses.push(logits.cross_entropy(item.class)?);
        }
        if losses.is_empty() {
            continue;
        }
        let n = losses.len();
        let loss = concat(&losses)?.mean(None)?;
        total += loss.item()? * n as f64;
        count += n;
        let grads = bound.grads(&tape.backward(loss)?);
        trainer.push(params, &grads)?;
    }
    trainer.flush(params)?;
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Prototypes from every training instance of the task, then cosine scores
/// for each test instance.
pub fn predict(model: &Model, task: &PreparedTask) -> Result<Vec<Prediction>> {
    let enc = model.config.encoder();
    let support: Vec<usize> = task.train_scenes();
    let protos = prototypes(&embed_frozen(&model.params, task, &support, &enc)?, task.n_classes())?;
    let test: Vec<usize> = (task.task.train_scene_count..task.task.scenes.len()).collect();
    let tape = Tape::new();
    let mut scores = BTreeMap::new();
    for (item, e) in embed_frozen(&model.params, task, &test, &enc)? {
        let q = tape.constant(e);
        let logits = protos
            .iter()
            .map(|p| match p {
                Some(p) => q.cosine(&tape.constant(p.clone())).and_then(|c| c.item()).map(Some),
                None => Ok(None),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        scores.insert((item.scene, item.label), logits);
    }
    Ok(assemble_predictions(task, &scores))
}
