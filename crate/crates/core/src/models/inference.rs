//! Scoring trained models: deterministic prediction, Monte-Carlo dropout
//! sampling, and per-prefix traces.

use crate::corpus::Conversation;
use crate::ndiff::{DropoutMode, Graph};
use crate::rng::seeded;

use super::forward::{build_forward, eval_forward, BoundModel};
use super::{prepare_input, EmbeddingTable, ModelError, NeuralModel};

/// One deterministic forward pass (dropout disabled).
pub fn predict(
    model: &NeuralModel,
    table: &EmbeddingTable,
    c: &Conversation,
) -> Result<f64, ModelError> {
    let input = prepare_input(c, table, &model.config, model.config.include_edits)?;
    eval_forward(model, table, &input)
}

/// Monte-Carlo dropout: `n` stochastic forward passes, returning the sample
/// mean and sample standard deviation.
///
/// Sample `i` draws from a generator seeded with `seed + i`, so results do
/// not depend on evaluation order and any prefix of the samples is itself
/// reproducible. With dropout disabled the forward pass is deterministic and
/// the uncertainty is exactly zero; a single sample also reports zero by
/// convention.
pub fn predict_mc(
    model: &NeuralModel,
    table: &EmbeddingTable,
    c: &Conversation,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), ModelError> {
    if n == 0 {
        return Err(ModelError::BadSampleCount);
    }
    let input = prepare_input(c, table, &model.config, model.config.include_edits)?;
    if model.config.dropout == 0.0 {
        return Ok((eval_forward(model, table, &input)?, 0.0));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeded(seed + i as u64);
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, model);
        let nodes =
            build_forward(&mut g, model, &bound, table, &input, DropoutMode::MonteCarlo, &mut rng)?;
        samples.push(g.value(nodes.prob).item());
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let ss: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok((mean, std))
}

/// One point of a prediction trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// Number of utterances the model has seen.
    pub prefix_len: usize,
    pub mean: f64,
    pub std: f64,
}

/// How a model's prediction and uncertainty evolve as a conversation grows.
#[derive(Debug, Clone)]
pub struct PredictionTrace {
    pub conversation_id: String,
    pub entries: Vec<TraceEntry>,
}

impl PredictionTrace {
    /// CSV export (`prefix_len,mean,std` with a header), ready to plot.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prefix_len,mean,std\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.prefix_len, e.mean, e.std));
        }
        out
    }
}

/// Score every chronological prefix of a conversation with [`predict_mc`].
///
/// Prefixes are taken over the utterances the model actually consumes (edit
/// summaries are excluded here when the model is configured to ignore them,
/// so no prefix is empty). Each prefix is recomputed from scratch with the
/// same base seed; the last entry therefore equals `predict_mc` on the full
/// conversation.
pub fn trace(
    model: &NeuralModel,
    table: &EmbeddingTable,
    c: &Conversation,
    n: usize,
    seed: u64,
) -> Result<PredictionTrace, ModelError> {
    let view = if model.config.include_edits {
        c.clone()
    } else {
        let talk: Vec<_> = c
            .utterances
            .iter()
            .filter(|u| u.kind == crate::corpus::UtteranceKind::TalkPost)
            .cloned()
            .collect();
        if talk.is_empty() {
            return Err(ModelError::EmptyInput { id: c.id.clone() });
        }
        Conversation::from_parts_unchecked(c.id.clone(), c.page.clone(), talk, c.label)
    };
    let mut entries = Vec::with_capacity(view.utterances.len());
    for k in 1..=view.utterances.len() {
        let prefix = view.prefix(k);
        let (mean, std) = predict_mc(model, table, &prefix, n, seed)?;
        entries.push(TraceEntry { prefix_len: k, mean, std });
    }
    Ok(PredictionTrace { conversation_id: c.id.clone(), entries })
}
