//! Minibatch training with focal loss, Adam, dropout, and early stopping on
//! validation PR-AUC.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::eval::{pr_auc, ScoredSet};
use crate::ndiff::{
    clip_global_norm, focal_loss, mean_of, AdamConfig, AdamState, DropoutMode, Graph, Tensor,
    GRAD_CLIP_NORM,
};
use crate::rng::seeded;

use super::forward::{build_forward, eval_forward, BoundModel};
use super::{prepare_input, EmbeddingTable, ModelError, NeuralModel, PreparedInput};

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a validation
    /// PR-AUC improvement.
    pub patience: usize,
    pub learning_rate: f64,
    /// Focal-loss focusing strength.
    pub gamma: f64,
    /// Focal-loss positive-class weight; when unset, `1 − prevalence` of the
    /// training set is used so the rare class is up-weighted.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            learning_rate: 0.001,
            gamma: 2.0,
            alpha: None,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean focal loss over the epoch's training examples.
    pub train_loss: f64,
    pub val_pr_auc: f64,
}

/// A finished training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// The model restored to its best-validation parameters.
    pub model: NeuralModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_pr_auc: f64,
}

struct Example {
    input: PreparedInput,
    positive: bool,
}

fn labeled_examples(
    set: &[Conversation],
    table: &EmbeddingTable,
    model: &NeuralModel,
) -> Result<Vec<Example>, ModelError> {
    set.iter()
        .map(|c| {
            let label = c.label.ok_or_else(|| ModelError::Unlabeled { id: c.id.clone() })?;
            let input = prepare_input(c, table, &model.config, model.config.include_edits)?;
            Ok(Example { input, positive: label.is_positive() })
        })
        .collect()
}

fn validation_pr_auc(
    model: &NeuralModel,
    table: &EmbeddingTable,
    val: &[(String, Example)],
) -> Result<f64, ModelError> {
    let mut ids = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    let mut scores = Vec::with_capacity(val.len());
    for (id, ex) in val {
        ids.push(id.clone());
        labels.push(ex.positive);
        scores.push(eval_forward(model, table, &ex.input)?);
    }
    Ok(pr_auc(&ScoredSet::new(ids, labels, scores)?)?)
}

/// Train a model, returning the parameters from the epoch with the best
/// validation PR-AUC along with the full per-epoch log.
///
/// Every conversation must be labeled; the training set needs both classes
/// (and so does the validation set, since PR-AUC is undefined otherwise). A
/// non-finite training loss aborts with [`ModelError::Diverged`] carrying
/// the last finite parameters.
pub fn train(
    model: NeuralModel,
    table: &EmbeddingTable,
    train_set: &[Conversation],
    validation_set: &[Conversation],
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    let mut model = model;
    if validation_set.is_empty() {
        return Err(ModelError::EmptyValidation);
    }
    let examples = labeled_examples(train_set, table, &model)?;
    let positives = examples.iter().filter(|e| e.positive).count();
    if positives == 0 || positives == examples.len() {
        return Err(ModelError::SingleClass);
    }
    let val: Vec<(String, Example)> = validation_set
        .iter()
        .map(|c| {
            let label = c.label.ok_or_else(|| ModelError::Unlabeled { id: c.id.clone() })?;
            let input = prepare_input(c, table, &model.config, model.config.include_edits)?;
            Ok((c.id.clone(), Example { input, positive: label.is_positive() }))
        })
        .collect::<Result<_, ModelError>>()?;

    let prevalence = positives as f64 / examples.len() as f64;
    let alpha = config.alpha.unwrap_or(1.0 - prevalence);

    let shapes: Vec<(usize, usize)> =
        model.parameters().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = AdamState::new(
        AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() },
        &shapes,
    );
    let mut rng = seeded(config.seed);

    let mut log: Vec<EpochLog> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Vec<(String, Tensor)> = model.parameters().to_vec();
    let mut stale_epochs = 0;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            // Forward + backward for the whole batch on one tape.
            let (batch_loss, grads) = {
                let mut g = Graph::new();
                let bound = BoundModel::bind(&mut g, &model);
                let mut losses = Vec::with_capacity(batch.len());
                for &idx in batch {
                    let ex = &examples[idx];
                    let nodes = build_forward(
                        &mut g,
                        &model,
                        &bound,
                        table,
                        &ex.input,
                        DropoutMode::Train,
                        &mut rng,
                    )?;
                    losses.push(focal_loss(&mut g, nodes.prob, ex.positive, config.gamma, alpha)?);
                }
                let loss_node = mean_of(&mut g, &losses)?;
                let loss = g.value(loss_node).item();
                if !loss.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        checkpoint: Box::new(model.to_checkpoint("", config.seed)),
                    });
                }
                let mut grads = g.backward(loss_node)?;
                let collected: Vec<Tensor> = bound
                    .nodes()
                    .iter()
                    .zip(&shapes)
                    .map(|(&id, &(r, c))| grads.take_or_zeros(id, r, c))
                    .collect();
                (loss, collected)
            };
            loss_sum += batch_loss * batch.len() as f64;

            let mut grads = grads;
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            let snapshot: Vec<(String, Tensor)> = model.parameters().to_vec();
            let mut tensors: Vec<Tensor> = model
                .parameters_mut()
                .iter_mut()
                .map(|(_, t)| std::mem::replace(t, Tensor::zeros(0, 0)))
                .collect();
            adam.step(&mut tensors, &grads)?;
            let finite = tensors.iter().all(Tensor::is_finite);
            for ((_, slot), t) in model.parameters_mut().iter_mut().zip(tensors) {
                *slot = t;
            }
            if !finite {
                // The step itself blew up; report the parameters from just
                // before it.
                let mut last = model.clone();
                for ((_, slot), (_, t)) in last.parameters_mut().iter_mut().zip(snapshot) {
                    *slot = t;
                }
                return Err(ModelError::Diverged {
                    epoch,
                    checkpoint: Box::new(last.to_checkpoint("", config.seed)),
                });
            }
        }
        let train_loss = loss_sum / examples.len() as f64;
        let val_pr_auc = validation_pr_auc(&model, table, &val)?;
        log.push(EpochLog { epoch, train_loss, val_pr_auc });

        if val_pr_auc > best_val {
            best_val = val_pr_auc;
            best_epoch = epoch;
            best_params = model.parameters().to_vec();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }

    for ((_, slot), (_, t)) in model.parameters_mut().iter_mut().zip(best_params) {
        *slot = t;
    }
    Ok(TrainOutcome { model, log, best_epoch, best_val_pr_auc: best_val })
}
