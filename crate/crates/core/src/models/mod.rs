//! Neural escalation classifiers: averaged embeddings, a sequential
//! recurrent encoder, and a hierarchical attention network, all built on the
//! [`crate::ndiff`] tape.
//!
//! The three architectures share one input convention produced by
//! [`prepare_input`]: a padded token-id grid with masks, where edit summaries
//! are either dropped or prefixed with a dedicated `<EDIT>` token that has
//! its own trainable embedding. The pretrained embedding table stays frozen
//! during training; only the UNK and `<EDIT>` vectors learn.

mod forward;
mod inference;
mod train;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, UtteranceKind};
use crate::eval::EvalError;
use crate::ndiff::{Checkpoint, NdiffError, Tensor};
use crate::rng::seeded;
use crate::text::tokenize;

pub use forward::{
    forward_averaged, forward_hierarchical, forward_sequential, hierarchical_attention,
    model_gradient_check, AttentionReadout,
};
pub use inference::{predict, predict_mc, trace, PredictionTrace, TraceEntry};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome};

/// Token id reserved for padding; always excluded by masks.
pub const PAD_ID: usize = 0;
/// Token id for out-of-vocabulary words; embeds to the trainable UNK vector.
pub const UNK_ID: usize = 1;
/// Token id for the literal `<EDIT>` marker prepended to edit summaries.
pub const EDIT_ID: usize = 2;
/// Number of reserved ids before embedding-table rows start.
pub const SPECIAL_TOKENS: usize = 3;
/// The marker token inserted at the front of each edit summary.
pub const EDIT_TOKEN: &str = "<EDIT>";

/// Seed for the UNK vector draw, fixed so a given embedding file always
/// produces the same table no matter which experiment loads it.
const UNK_INIT_SEED: u64 = 0x756e6b; // "unk"

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no usable embedding lines in {path}")]
    NoEmbeddings { path: PathBuf },
    #[error("embedding for {token:?} has {found} values, expected {expected}")]
    BadEmbeddingWidth { token: String, expected: usize, found: usize },
    #[error("conversation {id} has no utterances the model can read")]
    EmptyInput { id: String },
    #[error("conversation {id} has no label")]
    Unlabeled { id: String },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("Monte-Carlo sampling needs at least one sample")]
    BadSampleCount,
    #[error("model is {found}, expected {expected}")]
    ArchitectureMismatch { expected: Architecture, found: Architecture },
    #[error(
        "training diverged at epoch {epoch} (non-finite loss); the error carries the last finite checkpoint"
    )]
    Diverged { epoch: usize, checkpoint: Box<Checkpoint> },
}

/// The three classifier shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    AveragedEmbeddings,
    SequentialRecurrent,
    Hierarchical,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::AveragedEmbeddings,
        Architecture::SequentialRecurrent,
        Architecture::Hierarchical,
    ];

    /// Stable tag used in checkpoints and CLI flags.
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::AveragedEmbeddings => "averaged",
            Architecture::SequentialRecurrent => "sequential",
            Architecture::Hierarchical => "hierarchical",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Architecture, String> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| format!("unknown architecture {s:?} (averaged, sequential, hierarchical)"))
    }
}

/// Hyper-parameters shared by every architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Hidden units per LSTM direction (each encoder emits twice this).
    pub hidden: usize,
    /// Dropout rate applied before every weighted layer.
    pub dropout: f64,
    pub max_tokens_per_utterance: usize,
    pub max_utterances: usize,
    /// Feed edit summaries to the model (prefixed with `<EDIT>`).
    pub include_edits: bool,
    /// Ablation: keep edit-summary text but omit the `<EDIT>` marker.
    pub strip_edit_token: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::Hierarchical,
            hidden: 128,
            dropout: 0.3,
            max_tokens_per_utterance: 128,
            max_utterances: 50,
            include_edits: false,
            strip_edit_token: false,
        }
    }
}

// ------------------------------------------------------------- embeddings

/// A frozen pretrained embedding table plus the initial UNK vector.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dimension: usize,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    unk_init: Vec<f64>,
}

impl EmbeddingTable {
    /// Build a table directly from token/vector pairs. Later duplicates of a
    /// token are ignored, matching the file loader.
    pub fn from_pairs(
        pairs: Vec<(String, Vec<f64>)>,
        dimension: usize,
    ) -> Result<EmbeddingTable, ModelError> {
        let mut table = EmbeddingTable {
            dimension,
            rows: Vec::new(),
            index: HashMap::new(),
            unk_init: draw_unk(dimension),
        };
        for (token, vector) in pairs {
            if vector.len() != dimension {
                return Err(ModelError::BadEmbeddingWidth {
                    token,
                    expected: dimension,
                    found: vector.len(),
                });
            }
            if !table.index.contains_key(&token) {
                table.index.insert(token, table.rows.len());
                table.rows.push(vector);
            }
        }
        Ok(table)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row index for a token, if it is in the vocabulary.
    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.rows[row]
    }

    /// The seeded uniform(−0.05, 0.05) starting point for the UNK vector.
    pub fn unk_init(&self) -> &[f64] {
        &self.unk_init
    }

    /// Token id under the model's scheme: reserved specials first, then
    /// table rows. Unknown tokens map to [`UNK_ID`].
    pub fn id_of(&self, token: &str) -> usize {
        self.row_of(token).map_or(UNK_ID, |row| row + SPECIAL_TOKENS)
    }
}

fn draw_unk(dimension: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seeded(UNK_INIT_SEED);
    (0..dimension).map(|_| rng.random_range(-0.05..0.05)).collect()
}

/// Load a text-format embedding file: one token followed by `dimension`
/// whitespace-separated reals per line. Malformed lines are skipped with a
/// warning; a file with no usable lines is an error. The first occurrence of
/// a duplicated token wins.
pub fn load_embeddings(path: &Path, dimension: usize) -> Result<EmbeddingTable, ModelError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let mut table = EmbeddingTable {
        dimension,
        rows: Vec::new(),
        index: HashMap::new(),
        unk_init: draw_unk(dimension),
    };
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) if v.len() == dimension => v,
            Ok(v) => {
                log::warn!(
                    "{}:{}: expected {dimension} values, found {}; line skipped",
                    path.display(),
                    lineno + 1,
                    v.len()
                );
                continue;
            }
            Err(e) => {
                log::warn!("{}:{}: {e}; line skipped", path.display(), lineno + 1);
                continue;
            }
        };
        if !table.index.contains_key(token) {
            table.index.insert(token.to_string(), table.rows.len());
            table.rows.push(values);
        }
    }
    if table.rows.is_empty() {
        return Err(ModelError::NoEmbeddings { path: path.to_path_buf() });
    }
    Ok(table)
}

// ----------------------------------------------------------- input layout

/// A conversation rendered as a padded token-id grid with masks. Row `u`,
/// column `t` is the id of token `t` of utterance `u`; masked-off cells hold
/// [`PAD_ID`] and must never influence a model's output.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub conversation_id: String,
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl PreparedInput {
    pub fn utterances(&self) -> usize {
        self.ids.len()
    }

    /// Unmasked token ids of one row, in order.
    pub fn unmasked_row(&self, u: usize) -> Vec<usize> {
        self.ids[u]
            .iter()
            .zip(&self.mask[u])
            .filter_map(|(&id, &keep)| keep.then_some(id))
            .collect()
    }

    /// All unmasked token ids in reading order.
    pub fn flattened(&self) -> Vec<usize> {
        (0..self.ids.len()).flat_map(|u| self.unmasked_row(u)).collect()
    }
}

/// Tokenize and index a conversation for the neural models.
///
/// Edit summaries are dropped entirely when `include_edits` is off. When on,
/// each gets the literal [`EDIT_TOKEN`] at position 0 — unless the
/// `strip_edit_token` ablation is set, which keeps the summary text but omits
/// the marker. Utterances are truncated to the configured token cap and the
/// conversation to the utterance cap, keeping the earliest content.
pub fn prepare_input(
    c: &Conversation,
    table: &EmbeddingTable,
    config: &ModelConfig,
    include_edits: bool,
) -> Result<PreparedInput, ModelError> {
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for utterance in &c.utterances {
        let is_edit = utterance.kind == UtteranceKind::EditSummary;
        if is_edit && !include_edits {
            continue;
        }
        let mut ids: Vec<usize> = Vec::new();
        if is_edit && !config.strip_edit_token {
            ids.push(EDIT_ID);
        }
        ids.extend(tokenize(&utterance.text).iter().map(|t| table.id_of(t)));
        ids.truncate(config.max_tokens_per_utterance);
        if ids.is_empty() {
            // Nothing tokenizable (pure punctuation, say); the row would be
            // all padding, so leave it out.
            continue;
        }
        rows.push(ids);
        if rows.len() == config.max_utterances {
            break;
        }
    }
    if rows.is_empty() {
        return Err(ModelError::EmptyInput { id: c.id.clone() });
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(1);
    let mask: Vec<Vec<bool>> = rows
        .iter()
        .map(|r| (0..width).map(|t| t < r.len()).collect())
        .collect();
    for row in &mut rows {
        row.resize(width, PAD_ID);
    }
    Ok(PreparedInput { conversation_id: c.id.clone(), ids: rows, mask })
}

// ------------------------------------------------------------- the model

/// A trained (or freshly initialized) neural classifier: architecture,
/// hyper-parameters, and named parameter tensors. The embedding table is not
/// part of the model; it is frozen and supplied alongside.
#[derive(Debug, Clone)]
pub struct NeuralModel {
    pub config: ModelConfig,
    dimension: usize,
    params: Vec<(String, Tensor)>,
}

/// Expected parameter names and shapes for an architecture. The order here
/// fixes both the seeded initialization draw order and the optimizer slot
/// layout, so it must stay stable.
fn expected_shapes(arch: Architecture, d: usize, h: usize) -> Vec<(String, usize, usize)> {
    let mut shapes = vec![
        ("embed.unk".to_string(), 1, d),
        ("embed.edit".to_string(), 1, d),
    ];
    let lstm = |prefix: &str, input: usize, out: &mut Vec<(String, usize, usize)>| {
        for dir in ["fwd", "bwd"] {
            out.push((format!("{prefix}.{dir}.w"), input + h, 4 * h));
            out.push((format!("{prefix}.{dir}.b"), 1, 4 * h));
        }
    };
    let attention = |prefix: &str, width: usize, out: &mut Vec<(String, usize, usize)>| {
        out.push((format!("{prefix}.w"), width, width));
        out.push((format!("{prefix}.b"), 1, width));
        out.push((format!("{prefix}.u"), width, 1));
    };
    match arch {
        Architecture::AveragedEmbeddings => {
            shapes.push(("dense.w".to_string(), d, 1));
        }
        Architecture::SequentialRecurrent => {
            lstm("lstm", d, &mut shapes);
            shapes.push(("dense.w".to_string(), 2 * h, 1));
        }
        Architecture::Hierarchical => {
            lstm("word_lstm", d, &mut shapes);
            attention("word_att", 2 * h, &mut shapes);
            lstm("utt_lstm", 2 * h, &mut shapes);
            attention("utt_att", 2 * h, &mut shapes);
            shapes.push(("dense.w".to_string(), 2 * h, 1));
        }
    }
    shapes.push(("dense.b".to_string(), 1, 1));
    shapes
}

impl NeuralModel {
    /// Randomly initialize a model: weight matrices uniform in
    /// ±1/√fan_in, biases zero, UNK copied from the table's seeded draw, and
    /// the `<EDIT>` vector uniform(−0.05, 0.05).
    pub fn init(config: ModelConfig, table: &EmbeddingTable, seed: u64) -> NeuralModel {
        use rand::Rng;
        let d = table.dimension();
        let mut rng = seeded(seed);
        let params = expected_shapes(config.architecture, d, config.hidden)
            .into_iter()
            .map(|(name, rows, cols)| {
                let tensor = match name.as_str() {
                    "embed.unk" => Tensor::row(table.unk_init()),
                    "embed.edit" => {
                        let mut t = Tensor::zeros(1, d);
                        for v in t.data_mut() {
                            *v = rng.random_range(-0.05..0.05);
                        }
                        t
                    }
                    _ if name.ends_with(".b") => Tensor::zeros(rows, cols),
                    _ => {
                        let scale = 1.0 / (rows as f64).sqrt();
                        let mut t = Tensor::zeros(rows, cols);
                        for v in t.data_mut() {
                            *v = rng.random_range(-scale..scale);
                        }
                        t
                    }
                };
                (name, tensor)
            })
            .collect();
        NeuralModel { config, dimension: d, params }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Package the parameters as a checkpoint.
    pub fn to_checkpoint(&self, config_hash: &str, seed: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.config.architecture.tag(), config_hash, seed);
        for (name, tensor) in &self.params {
            ckpt.insert(name, tensor);
        }
        ckpt
    }

    /// Rebuild a model from a checkpoint, validating the architecture tag
    /// and every parameter shape against the config.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        config: ModelConfig,
        dimension: usize,
    ) -> Result<NeuralModel, ModelError> {
        if ckpt.architecture != config.architecture.tag() {
            let found = Architecture::ALL
                .into_iter()
                .find(|a| a.tag() == ckpt.architecture)
                .ok_or_else(|| {
                    ModelError::Ndiff(NdiffError::Format(format!(
                        "unknown architecture tag {:?}",
                        ckpt.architecture
                    )))
                })?;
            return Err(ModelError::ArchitectureMismatch {
                expected: config.architecture,
                found,
            });
        }
        let params = expected_shapes(config.architecture, dimension, config.hidden)
            .into_iter()
            .map(|(name, rows, cols)| Ok((name.clone(), ckpt.tensor(&name, rows, cols)?)))
            .collect::<Result<Vec<_>, NdiffError>>()?;
        Ok(NeuralModel { config, dimension, params })
    }
}

#[cfg(test)]
mod tests;
