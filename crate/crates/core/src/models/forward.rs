//! Forward passes for the three architectures, expressed as tape builders so
//! the same code serves deterministic scoring, Monte-Carlo sampling, and
//! training.

use crate::ndiff::{
    bilstm, dropout, DropoutMode, Graph, NodeId, Tensor,
};
use crate::rng::{seeded, SeededRng};

use super::{
    Architecture, EmbeddingTable, ModelError, NeuralModel, PreparedInput, EDIT_ID, PAD_ID, UNK_ID,
};

/// Model parameters pushed onto a graph, addressable by name.
pub(crate) struct BoundModel<'m> {
    model: &'m NeuralModel,
    nodes: Vec<NodeId>,
}

impl<'m> BoundModel<'m> {
    pub(crate) fn bind(g: &mut Graph, model: &'m NeuralModel) -> BoundModel<'m> {
        let nodes = model
            .parameters()
            .iter()
            .map(|(_, tensor)| g.param(tensor.clone()))
            .collect();
        BoundModel { model, nodes }
    }

    /// Bind against parameter nodes someone else pushed (the gradient-check
    /// harness creates them so it can perturb the underlying tensors).
    pub(crate) fn from_nodes(model: &'m NeuralModel, nodes: Vec<NodeId>) -> BoundModel<'m> {
        debug_assert_eq!(nodes.len(), model.parameters().len());
        BoundModel { model, nodes }
    }

    pub(crate) fn node(&self, name: &str) -> NodeId {
        let pos = self
            .model
            .parameters()
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("model is missing parameter {name}"));
        self.nodes[pos]
    }

    pub(crate) fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Everything a forward pass exposes: the probability node plus the
/// attention distributions (hierarchical only) for inspection.
pub(crate) struct ForwardNodes {
    pub prob: NodeId,
    pub word_attention: Vec<NodeId>,
    pub utterance_attention: Option<NodeId>,
}

/// Look up embeddings for a compacted id sequence as an `[n × d]` node.
/// Table rows are constants; UNK and `<EDIT>` positions are overridden with
/// the trainable vectors so gradient reaches them.
fn embed(
    g: &mut Graph,
    bound: &BoundModel,
    table: &EmbeddingTable,
    ids: &[usize],
) -> Result<NodeId, ModelError> {
    let d = table.dimension();
    let mut base = Tensor::zeros(ids.len(), d);
    let mut overrides: Vec<(usize, NodeId)> = Vec::new();
    for (row, &id) in ids.iter().enumerate() {
        match id {
            UNK_ID => overrides.push((row, bound.node("embed.unk"))),
            EDIT_ID => overrides.push((row, bound.node("embed.edit"))),
            PAD_ID => debug_assert!(false, "padding must be masked out before embedding"),
            _ => {
                let vector = table.vector(id - super::SPECIAL_TOKENS);
                for (j, &v) in vector.iter().enumerate() {
                    base.set(row, j, v);
                }
            }
        }
    }
    let base = g.input(base);
    if overrides.is_empty() {
        return Ok(base);
    }
    Ok(g.override_rows(base, &overrides)?)
}

/// Additive attention over encoder states: project through a tanh layer,
/// score against a context vector, softmax, and pool.
fn attention(
    g: &mut Graph,
    states: NodeId,
    w: NodeId,
    b: NodeId,
    u: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let projected = g.matmul(states, w)?;
    let shifted = g.add_row(projected, b)?;
    let proj = g.tanh(shifted);
    let scores = g.matmul(proj, u)?;
    let all = vec![true; g.value(scores).rows()];
    let weights = g.softmax_col_masked(scores, &all)?;
    let weights_row = g.transpose(weights);
    let pooled = g.matmul(weights_row, states)?;
    Ok((pooled, weights))
}

fn dense_sigmoid(
    g: &mut Graph,
    bound: &BoundModel,
    vector: NodeId,
    mode: DropoutMode,
    rng: &mut SeededRng,
    p: f64,
) -> Result<NodeId, ModelError> {
    let dropped = dropout(g, vector, p, mode, rng)?;
    let wx = g.matmul(dropped, bound.node("dense.w"))?;
    let logit = g.add(wx, bound.node("dense.b"))?;
    Ok(g.sigmoid(logit))
}

/// Build the forward pass for `model` on `input`, returning the probability
/// node (plus attention readouts where the architecture has them).
pub(crate) fn build_forward(
    g: &mut Graph,
    model: &NeuralModel,
    bound: &BoundModel,
    table: &EmbeddingTable,
    input: &PreparedInput,
    mode: DropoutMode,
    rng: &mut SeededRng,
) -> Result<ForwardNodes, ModelError> {
    let p = model.config.dropout;
    match model.config.architecture {
        Architecture::AveragedEmbeddings => {
            let flat = input.flattened();
            if flat.is_empty() {
                return Err(ModelError::EmptyInput { id: input.conversation_id.clone() });
            }
            let emb = embed(g, bound, table, &flat)?;
            let all = vec![true; flat.len()];
            let conversation = g.mean_rows_masked(emb, &all)?;
            let prob = dense_sigmoid(g, bound, conversation, mode, rng, p)?;
            Ok(ForwardNodes { prob, word_attention: Vec::new(), utterance_attention: None })
        }
        Architecture::SequentialRecurrent => {
            let mut flat = input.flattened();
            if flat.is_empty() {
                return Err(ModelError::EmptyInput { id: input.conversation_id.clone() });
            }
            let cap = model.config.max_utterances * model.config.max_tokens_per_utterance;
            if flat.len() > cap {
                log::warn!(
                    "conversation {}: sequence of {} tokens truncated to {cap}",
                    input.conversation_id,
                    flat.len()
                );
                flat.truncate(cap);
            }
            let emb = embed(g, bound, table, &flat)?;
            let emb = dropout(g, emb, p, mode, rng)?;
            let encoded = bilstm(
                g,
                emb,
                bound.node("lstm.fwd.w"),
                bound.node("lstm.fwd.b"),
                bound.node("lstm.bwd.w"),
                bound.node("lstm.bwd.b"),
            )?;
            let prob = dense_sigmoid(g, bound, encoded.final_state, mode, rng, p)?;
            Ok(ForwardNodes { prob, word_attention: Vec::new(), utterance_attention: None })
        }
        Architecture::Hierarchical => {
            let mut utterance_vectors: Vec<NodeId> = Vec::new();
            let mut word_attention: Vec<NodeId> = Vec::new();
            for u in 0..input.utterances() {
                let ids = input.unmasked_row(u);
                if ids.is_empty() {
                    // A fully padded row carries nothing; skipping it is what
                    // keeps padding out of the output.
                    continue;
                }
                let emb = embed(g, bound, table, &ids)?;
                let emb = dropout(g, emb, p, mode, rng)?;
                let encoded = bilstm(
                    g,
                    emb,
                    bound.node("word_lstm.fwd.w"),
                    bound.node("word_lstm.fwd.b"),
                    bound.node("word_lstm.bwd.w"),
                    bound.node("word_lstm.bwd.b"),
                )?;
                let (pooled, weights) = attention(
                    g,
                    encoded.states,
                    bound.node("word_att.w"),
                    bound.node("word_att.b"),
                    bound.node("word_att.u"),
                )?;
                utterance_vectors.push(pooled);
                word_attention.push(weights);
            }
            if utterance_vectors.is_empty() {
                return Err(ModelError::EmptyInput { id: input.conversation_id.clone() });
            }
            let utterances = g.stack_rows(&utterance_vectors)?;
            let utterances = dropout(g, utterances, p, mode, rng)?;
            let encoded = bilstm(
                g,
                utterances,
                bound.node("utt_lstm.fwd.w"),
                bound.node("utt_lstm.fwd.b"),
                bound.node("utt_lstm.bwd.w"),
                bound.node("utt_lstm.bwd.b"),
            )?;
            let (conversation, utt_weights) = attention(
                g,
                encoded.states,
                bound.node("utt_att.w"),
                bound.node("utt_att.b"),
                bound.node("utt_att.u"),
            )?;
            let prob = dense_sigmoid(g, bound, conversation, mode, rng, p)?;
            Ok(ForwardNodes {
                prob,
                word_attention,
                utterance_attention: Some(utt_weights),
            })
        }
    }
}

/// One deterministic (dropout-free) forward pass.
pub(crate) fn eval_forward(
    model: &NeuralModel,
    table: &EmbeddingTable,
    input: &PreparedInput,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, model);
    let mut rng = seeded(0); // Eval mode never draws
    let nodes = build_forward(&mut g, model, &bound, table, input, DropoutMode::Eval, &mut rng)?;
    Ok(g.value(nodes.prob).item())
}

fn expect_architecture(model: &NeuralModel, expected: Architecture) -> Result<(), ModelError> {
    if model.config.architecture != expected {
        return Err(ModelError::ArchitectureMismatch {
            expected,
            found: model.config.architecture,
        });
    }
    Ok(())
}

/// Bag-of-embeddings classifier: mean of all unmasked token embeddings
/// through a dense layer. Invariant to token order.
pub fn forward_averaged(
    input: &PreparedInput,
    table: &EmbeddingTable,
    model: &NeuralModel,
) -> Result<f64, ModelError> {
    expect_architecture(model, Architecture::AveragedEmbeddings)?;
    eval_forward(model, table, input)
}

/// Flat recurrent classifier: every utterance concatenated into one token
/// sequence through a BiLSTM, final states to a dense layer.
pub fn forward_sequential(
    input: &PreparedInput,
    table: &EmbeddingTable,
    model: &NeuralModel,
) -> Result<f64, ModelError> {
    expect_architecture(model, Architecture::SequentialRecurrent)?;
    eval_forward(model, table, input)
}

/// Hierarchical attention network: word-level BiLSTM + attention per
/// utterance, then an utterance-level BiLSTM + attention over the resulting
/// vectors.
pub fn forward_hierarchical(
    input: &PreparedInput,
    table: &EmbeddingTable,
    model: &NeuralModel,
) -> Result<f64, ModelError> {
    expect_architecture(model, Architecture::Hierarchical)?;
    eval_forward(model, table, input)
}

/// Diagnostic: compare the analytic gradient of the focal loss on one input
/// against central finite differences, over every parameter of the model.
/// Returns the worst relative error; a healthy model stays under 1e-4.
///
/// Runs with dropout disabled so the loss is a deterministic function of the
/// parameters.
pub fn model_gradient_check(
    model: &NeuralModel,
    table: &EmbeddingTable,
    input: &PreparedInput,
    positive: bool,
) -> Result<f64, ModelError> {
    use crate::ndiff::{focal_loss, gradcheck, NdiffError};
    let tensors: Vec<Tensor> = model.parameters().iter().map(|(_, t)| t.clone()).collect();
    let err = gradcheck::max_rel_error(
        &|g, ids| {
            let bound = BoundModel::from_nodes(model, ids.to_vec());
            let nodes =
                build_forward(g, model, &bound, table, input, DropoutMode::Eval, &mut seeded(0))
                    .map_err(|e| match e {
                        ModelError::Ndiff(n) => n,
                        other => NdiffError::Format(other.to_string()),
                    })?;
            focal_loss(g, nodes.prob, positive, 2.0, 0.5)
        },
        &tensors,
    )?;
    Ok(err)
}

/// Attention distributions from a deterministic hierarchical pass.
#[derive(Debug, Clone)]
pub struct AttentionReadout {
    pub probability: f64,
    /// Per consumed utterance: attention weight per token, summing to 1.
    pub word_weights: Vec<Vec<f64>>,
    /// Attention weight per consumed utterance, summing to 1.
    pub utterance_weights: Vec<f64>,
}

/// Run the hierarchical model and export its attention weights.
pub fn hierarchical_attention(
    input: &PreparedInput,
    table: &EmbeddingTable,
    model: &NeuralModel,
) -> Result<AttentionReadout, ModelError> {
    expect_architecture(model, Architecture::Hierarchical)?;
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, model);
    let mut rng = seeded(0);
    let nodes = build_forward(&mut g, model, &bound, table, input, DropoutMode::Eval, &mut rng)?;
    let word_weights = nodes
        .word_attention
        .iter()
        .map(|&id| g.value(id).data().to_vec())
        .collect();
    let utterance_weights = nodes
        .utterance_attention
        .map(|id| g.value(id).data().to_vec())
        .unwrap_or_default();
    Ok(AttentionReadout {
        probability: g.value(nodes.prob).item(),
        word_weights,
        utterance_weights,
    })
}
