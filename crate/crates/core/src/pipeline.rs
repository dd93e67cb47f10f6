//! End-to-end experiment stages shared by the command-line interface and the
//! integration tests.
//!
//! Each stage reads its inputs — the configured raw corpus for [`ingest`],
//! artifacts from the experiment output directory for everything else —
//! writes one or more artifact files, and returns a small summary for
//! logging. Every artifact begins with `# config_hash=…` and `# seed=…`
//! lines; stages that consume artifacts refuse inputs whose embedded hash
//! disagrees with the current configuration, so a directory holding remnants
//! of a different experiment fails loudly instead of silently blending runs.
//! All files are written atomically (temp file + rename), which keeps
//! aborted runs from leaving partial artifacts behind, and all outputs are
//! byte-identical across reruns with the same configuration and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::corpus::{
    apply_filters, load_corpus, merge_edit_summaries, save_corpus, Conversation, CorpusError,
    Label, MergeReport, RejectReason, UtteranceKind,
};
use crate::dataset::{
    apply_manifest, load_manifest, match_by_length, median_length, save_manifest, split,
    DatasetError, Splits,
};
use crate::eval::{
    break_even_f1, early_estimation, permutation_test, pr_auc, random_baseline, BucketCurve,
    EvalError, ScoredSet,
};
use crate::features::{FeatureError, FeatureExtractor, FeatureSet};
use crate::linear::{
    bag_of_words_matrix, bag_of_words_vocabulary, fit, grid_search, save_model, GridEntry,
    LinearError, Regularization,
};
use crate::models::{
    load_embeddings, predict, predict_mc, trace, train, Architecture, EmbeddingTable, ModelError,
    NeuralModel, PredictionTrace,
};
use crate::ndiff::{Checkpoint, NdiffError};
use crate::{ioutil, report};

/// Canonical artifact file names inside the experiment output directory.
pub mod artifact {
    use crate::models::Architecture;

    pub const CLEAN_CORPUS: &str = "corpus.clean.jsonl";
    pub const INGEST_REPORT: &str = "ingest_report.csv";
    pub const MATCHED_CORPUS: &str = "matched.jsonl";
    pub const MATCH_REPORT: &str = "match_report.csv";
    pub const SPLIT_MANIFEST: &str = "splits.csv";
    pub const LINEAR_MODEL: &str = "linear.json";
    pub const GRID_TABLE: &str = "grid.csv";
    pub const EVALUATION: &str = "evaluation.csv";
    pub const EARLY_EVAL: &str = "early_eval.csv";
    pub const EARLY_EVAL_CHART: &str = "early_eval.svg";
    pub const WORDS: &str = "words.csv";

    pub fn features(split: &str) -> String {
        format!("features_{split}.csv")
    }

    pub fn model(arch: Architecture) -> String {
        format!("model_{}.json", arch.tag())
    }

    pub fn train_log(arch: Architecture) -> String {
        format!("train_log_{}.csv", arch.tag())
    }

    pub fn trace_csv(conversation_id: &str) -> String {
        format!("trace_{}.csv", sanitize(conversation_id))
    }

    pub fn trace_chart(conversation_id: &str) -> String {
        format!("trace_{}.svg", sanitize(conversation_id))
    }

    /// Conversation ids may contain characters that are awkward in file
    /// names; anything outside `[A-Za-z0-9._-]` becomes `-`.
    pub fn sanitize(id: &str) -> String {
        id.chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '-' })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(
        "{path} was produced under config hash {found} but the current config hashes to \
         {expected}; refusing to mix artifacts from different experiments"
    )]
    HashMismatch { path: PathBuf, expected: String, found: String },
    #[error("missing artifact {path}; run the `{produced_by}` stage first")]
    MissingArtifact { path: PathBuf, produced_by: String },
    #[error("{path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
    #[error("line {line}: conversation {id} has no talk posts")]
    NoTalkPosts { line: usize, id: String },
    #[error("conversation {id} has no label; stages past ingest need labeled data")]
    Unlabeled { id: String },
    #[error("conversation {id} not found in the matched corpus")]
    UnknownConversation { id: String },
    #[error("config.paths.embeddings is required for neural stages")]
    MissingEmbeddings,
}

// ---------------------------------------------------------------- plumbing

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    fs::create_dir_all(&cfg.paths.output_dir).map_err(io_err(&cfg.paths.output_dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    ioutil::write_atomic(path, bytes).map_err(io_err(path))
}

/// The `# key=value` comment block every artifact starts with.
fn header_block(cfg: &ExperimentConfig) -> String {
    cfg.artifact_header().iter().map(|h| format!("# {h}\n")).collect()
}

/// The `config_hash` recorded in an artifact's leading comment lines.
fn embedded_hash(path: &Path) -> Result<Option<String>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(rest) = trimmed.strip_prefix('#') else {
            break; // headers appear only before the first content line
        };
        if let Some((key, value)) = rest.trim().split_once('=') {
            if key.trim() == "config_hash" {
                return Ok(Some(value.trim().to_string()));
            }
        }
    }
    Ok(None)
}

/// Require that an artifact exists and was produced under this exact
/// configuration.
fn check_artifact(
    path: &Path,
    cfg: &ExperimentConfig,
    produced_by: &str,
) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            produced_by: produced_by.to_string(),
        });
    }
    let found = embedded_hash(path)?.ok_or_else(|| PipelineError::BadArtifact {
        path: path.to_path_buf(),
        message: "missing `# config_hash=` header".to_string(),
    })?;
    let expected = cfg.hash();
    if found != expected {
        return Err(PipelineError::HashMismatch { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

fn positive(c: &Conversation) -> Result<bool, PipelineError> {
    match c.label {
        Some(label) => Ok(label.is_positive()),
        None => Err(PipelineError::Unlabeled { id: c.id.clone() }),
    }
}

fn partition_labeled(
    cs: Vec<Conversation>,
) -> Result<(Vec<Conversation>, Vec<Conversation>), PipelineError> {
    let (mut escalated, mut pool) = (Vec::new(), Vec::new());
    for c in cs {
        match c.label {
            Some(Label::Escalated) => escalated.push(c),
            Some(Label::NotEscalated) => pool.push(c),
            None => return Err(PipelineError::Unlabeled { id: c.id }),
        }
    }
    Ok((escalated, pool))
}

fn load_extractor(cfg: &ExperimentConfig) -> Result<FeatureExtractor, PipelineError> {
    match &cfg.paths.lexicons {
        Some(dir) => Ok(FeatureExtractor::from_dir(dir)?),
        None => Ok(FeatureExtractor::builtin()),
    }
}

/// Load the configured embedding table, required by every neural stage.
pub fn load_embedding_table(cfg: &ExperimentConfig) -> Result<EmbeddingTable, PipelineError> {
    let path = cfg.paths.embeddings.as_ref().ok_or(PipelineError::MissingEmbeddings)?;
    Ok(load_embeddings(path, cfg.embedding_dimension)?)
}

/// Load the clean corpus written by [`ingest`], verifying its config hash.
pub fn load_clean_corpus(cfg: &ExperimentConfig) -> Result<Vec<Conversation>, PipelineError> {
    let path = cfg.output_path(artifact::CLEAN_CORPUS);
    check_artifact(&path, cfg, "ingest")?;
    Ok(load_corpus(path)?)
}

/// Load the matched corpus written by [`match_corpus`], verifying its hash.
pub fn load_matched_corpus(cfg: &ExperimentConfig) -> Result<Vec<Conversation>, PipelineError> {
    let path = cfg.output_path(artifact::MATCHED_CORPUS);
    check_artifact(&path, cfg, "match")?;
    Ok(load_corpus(path)?)
}

/// Rebuild the train/validation/test splits from the matched corpus and the
/// split manifest, verifying both hashes.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits, PipelineError> {
    let matched = load_matched_corpus(cfg)?;
    let path = cfg.output_path(artifact::SPLIT_MANIFEST);
    check_artifact(&path, cfg, "split")?;
    let manifest = load_manifest(path)?;
    Ok(apply_manifest(&matched, &manifest)?)
}

// ------------------------------------------------------------------ ingest

/// Fixed reporting order for rejection rows.
const REJECT_REASONS: [RejectReason; 4] = [
    RejectReason::TooFewUtterances,
    RejectReason::TooManyUtterances,
    RejectReason::TooFewTokens,
    RejectReason::TooFewParticipants,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    pub input: usize,
    pub kept: usize,
    pub rejections: BTreeMap<RejectReason, usize>,
    pub merge: MergeReport,
}

/// Parse raw corpus lines without the usual construction-time validation,
/// keeping 1-based line numbers for error messages. Used only by `ingest`,
/// which re-validates every conversation as it rebuilds them.
fn read_raw_conversations(path: &Path) -> Result<Vec<(usize, Conversation)>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw: Conversation = serde_json::from_str(trimmed)
            .map_err(|source| CorpusError::Parse { line: lineno, source })?;
        out.push((lineno, raw));
    }
    Ok(out)
}

/// Load the raw corpus, re-merge edit summaries (dropping those by
/// non-participants or outside the talk window), apply the quality filters,
/// and write the clean corpus plus a rejection report.
///
/// The report satisfies `kept + Σ rejections = input`: every input
/// conversation is either kept or rejected for exactly one reason. Edit
/// exclusions are counted separately — they remove utterances, never whole
/// conversations.
pub fn ingest(cfg: &ExperimentConfig) -> Result<IngestSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let raw = read_raw_conversations(&cfg.paths.corpus)?;
    let input = raw.len();

    let mut merge_total = MergeReport::default();
    let mut merged = Vec::with_capacity(input);
    for (lineno, conv) in raw {
        let (talk, edits): (Vec<_>, Vec<_>) =
            conv.utterances.into_iter().partition(|u| u.kind == UtteranceKind::TalkPost);
        if talk.is_empty() {
            return Err(PipelineError::NoTalkPosts { line: lineno, id: conv.id });
        }
        let talk_conv = Conversation::new(conv.id, conv.page, talk, conv.label)
            .map_err(|source| CorpusError::Invalid { line: lineno, source: Box::new(source) })?;
        let (full, merge) = merge_edit_summaries(&talk_conv, edits)?;
        merge_total.added += merge.added;
        merge_total.excluded_non_participant += merge.excluded_non_participant;
        merge_total.excluded_out_of_window += merge.excluded_out_of_window;
        merged.push(full);
    }

    let (kept, filter_report) = apply_filters(merged, &cfg.filter);
    debug_assert_eq!(kept.len() + filter_report.total_rejected(), input);
    save_corpus(cfg.output_path(artifact::CLEAN_CORPUS), &kept, &cfg.artifact_header())?;

    let mut rejections = BTreeMap::new();
    for reason in REJECT_REASONS {
        rejections.insert(reason, filter_report.rejections.get(&reason).copied().unwrap_or(0));
    }

    let mut buf = header_block(cfg);
    buf.push_str("metric,count\n");
    let _ = writeln!(buf, "input_conversations,{input}");
    let _ = writeln!(buf, "kept,{}", kept.len());
    for reason in REJECT_REASONS {
        let _ = writeln!(buf, "rejected_{reason},{}", rejections[&reason]);
    }
    let _ = writeln!(buf, "edits_merged,{}", merge_total.added);
    let _ = writeln!(buf, "edits_excluded_non_participant,{}", merge_total.excluded_non_participant);
    let _ = writeln!(buf, "edits_excluded_out_of_window,{}", merge_total.excluded_out_of_window);
    write_file(&cfg.output_path(artifact::INGEST_REPORT), buf.as_bytes())?;

    log::info!(
        "ingest: {input} conversations in, {} kept, {} rejected",
        kept.len(),
        filter_report.total_rejected()
    );
    Ok(IngestSummary { input, kept: kept.len(), rejections, merge: merge_total })
}

// ------------------------------------------------------------------- match

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSummary {
    pub positives: usize,
    pub matched_negatives: usize,
    /// Positives that received fewer negatives than requested.
    pub deficit_positives: usize,
    pub median_escalated: f64,
    pub median_not_escalated: f64,
}

/// Build the length-matched dataset from the clean corpus: every escalated
/// conversation plus up to `max_matches_per_positive` not-escalated
/// conversations of identical utterance length.
pub fn match_corpus(cfg: &ExperimentConfig) -> Result<MatchSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let clean = load_clean_corpus(cfg)?;
    let (escalated, pool) = partition_labeled(clean)?;
    let (matched, report) = match_by_length(&escalated, &pool, &cfg.matching)?;
    save_corpus(cfg.output_path(artifact::MATCHED_CORPUS), &matched, &cfg.artifact_header())?;

    let by_class = |label: Label| -> Vec<Conversation> {
        matched.iter().filter(|c| c.label == Some(label)).cloned().collect()
    };
    let summary = MatchSummary {
        positives: escalated.len(),
        matched_negatives: report.matched,
        deficit_positives: report.deficits.len(),
        median_escalated: median_length(&by_class(Label::Escalated)),
        median_not_escalated: median_length(&by_class(Label::NotEscalated)),
    };

    let mut buf = header_block(cfg);
    buf.push_str("metric,value\n");
    let _ = writeln!(buf, "positives,{}", summary.positives);
    let _ = writeln!(buf, "matched_negatives,{}", summary.matched_negatives);
    let _ = writeln!(buf, "deficit_positives,{}", summary.deficit_positives);
    let _ = writeln!(buf, "median_length_escalated,{}", summary.median_escalated);
    let _ = writeln!(buf, "median_length_not_escalated,{}", summary.median_not_escalated);
    write_file(&cfg.output_path(artifact::MATCH_REPORT), buf.as_bytes())?;

    log::info!(
        "match: {} positives, {} matched negatives ({} deficits)",
        summary.positives,
        summary.matched_negatives,
        summary.deficit_positives
    );
    Ok(summary)
}

// ------------------------------------------------------------------- split

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSummary {
    /// `(split, escalated, not_escalated)` for train/validation/test.
    pub counts: Vec<(String, usize, usize)>,
}

/// Stratified-split the matched corpus and write the manifest.
pub fn split_corpus(cfg: &ExperimentConfig) -> Result<SplitSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let matched = load_matched_corpus(cfg)?;
    let splits = split(&matched, &cfg.split)?;
    save_manifest(cfg.output_path(artifact::SPLIT_MANIFEST), &splits, &cfg.artifact_header())?;

    let mut counts = Vec::new();
    for (name, part) in
        [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)]
    {
        let pos = part.iter().filter(|c| c.label == Some(Label::Escalated)).count();
        counts.push((name.to_string(), pos, part.len() - pos));
    }
    log::info!("split: {counts:?}");
    Ok(SplitSummary { counts })
}

// --------------------------------------------------------------- featurize

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturizeSummary {
    pub feature_set: FeatureSet,
    pub columns: usize,
    /// `(split, rows)` for train/validation/test.
    pub rows: Vec<(String, usize)>,
}

fn write_feature_csv(
    cfg: &ExperimentConfig,
    path: &Path,
    convs: &[Conversation],
    extractor: &FeatureExtractor,
    set: FeatureSet,
    with_gradients: bool,
) -> Result<usize, PipelineError> {
    let mut buf = header_block(cfg);
    let mut columns = 0;
    let mut expected: Option<Vec<String>> = None;
    for c in convs {
        let (names, values) = extractor.features(c, set, with_gradients)?;
        match &expected {
            Some(first) if *first != names => {
                return Err(PipelineError::BadArtifact {
                    path: path.to_path_buf(),
                    message: format!("feature names for {} disagree with earlier rows", c.id),
                });
            }
            Some(_) => {}
            None => {
                if let Some(bad) = names.iter().find(|n| n.contains(',')) {
                    return Err(PipelineError::BadArtifact {
                        path: path.to_path_buf(),
                        message: format!("feature name {bad:?} contains a comma"),
                    });
                }
                columns = names.len();
                let _ = writeln!(buf, "conversation_id,label,{}", names.join(","));
                expected = Some(names);
            }
        }
        let row: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(buf, "{},{},{}", c.id, u8::from(positive(c)?), row.join(","));
    }
    if expected.is_none() {
        buf.push_str("conversation_id,label\n");
    }
    write_file(path, buf.as_bytes())?;
    Ok(columns)
}

/// Write one aggregated-feature CSV per split for the configured featureset.
pub fn featurize(cfg: &ExperimentConfig) -> Result<FeaturizeSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let splits = load_splits(cfg)?;
    let extractor = load_extractor(cfg)?;
    let set = cfg.features.feature_set()?;

    let mut rows = Vec::new();
    let mut columns = 0;
    for (name, part) in
        [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)]
    {
        let path = cfg.output_path(&artifact::features(name));
        let cols = write_feature_csv(cfg, &path, part, &extractor, set, cfg.features.gradients)?;
        columns = columns.max(cols);
        rows.push((name.to_string(), part.len()));
    }
    log::info!("featurize: {set} ({columns} columns) for {rows:?}");
    Ok(FeaturizeSummary { feature_set: set, columns, rows })
}

/// An aggregated-feature CSV read back into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub feature_names: Vec<String>,
    pub ids: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<bool>,
}

/// Read a CSV written by [`featurize`], verifying its config hash.
pub fn load_feature_table(
    path: &Path,
    cfg: &ExperimentConfig,
) -> Result<FeatureTable, PipelineError> {
    check_artifact(path, cfg, "featurize")?;
    let bad = |message: String| PipelineError::BadArtifact { path: path.to_path_buf(), message };
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

    let (_, head) = lines.next().ok_or_else(|| bad("empty feature table".to_string()))?;
    let mut cols = head.split(',');
    if cols.next() != Some("conversation_id") || cols.next() != Some("label") {
        return Err(bad("header must start with conversation_id,label".to_string()));
    }
    let feature_names: Vec<String> = cols.map(str::to_string).collect();

    let (mut ids, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default();
        let label = match fields.next() {
            Some("0") => false,
            Some("1") => true,
            other => return Err(bad(format!("line {}: bad label {other:?}", i + 1))),
        };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        if values.len() != feature_names.len() {
            return Err(bad(format!(
                "line {}: expected {} feature values, found {}",
                i + 1,
                feature_names.len(),
                values.len()
            )));
        }
        ids.push(id.to_string());
        x.push(values);
        y.push(label);
    }
    Ok(FeatureTable { feature_names, ids, x, y })
}

// ------------------------------------------------------------ linear stages

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLinearSummary {
    pub regularization: Regularization,
    pub c: f64,
    pub validation_pr_auc: f64,
    pub features: usize,
    pub rows: usize,
}

fn load_train_val_tables(
    cfg: &ExperimentConfig,
) -> Result<(FeatureTable, FeatureTable), PipelineError> {
    let train_tbl = load_feature_table(&cfg.output_path(&artifact::features("train")), cfg)?;
    let val_tbl = load_feature_table(&cfg.output_path(&artifact::features("validation")), cfg)?;
    if train_tbl.feature_names != val_tbl.feature_names {
        return Err(PipelineError::BadArtifact {
            path: cfg.output_path(&artifact::features("validation")),
            message: "feature columns disagree with the training table".to_string(),
        });
    }
    Ok((train_tbl, val_tbl))
}

/// Fit a logistic model at the configured regularization and C, report its
/// validation PR-AUC, and save it as `linear.json`.
pub fn train_linear(cfg: &ExperimentConfig) -> Result<TrainLinearSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let (train_tbl, val_tbl) = load_train_val_tables(cfg)?;
    let reg = cfg.linear.regularization()?;
    let model = fit(&train_tbl.x, &train_tbl.y, &train_tbl.feature_names, reg, cfg.linear.c, cfg.seed)?;
    let scores = model.predict_proba(&val_tbl.x)?;
    let set = ScoredSet::new(val_tbl.ids.clone(), val_tbl.y.clone(), scores)?;
    let auc = pr_auc(&set)?;
    save_model(cfg.output_path(artifact::LINEAR_MODEL), &model, &cfg.hash(), cfg.seed)?;
    log::info!("train-linear: {reg} C={} validation PR-AUC {auc:.4}", cfg.linear.c);
    Ok(TrainLinearSummary {
        regularization: reg,
        c: cfg.linear.c,
        validation_pr_auc: auc,
        features: train_tbl.feature_names.len(),
        rows: train_tbl.x.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub best_regularization: Regularization,
    pub best_c: f64,
    pub best_validation_pr_auc: f64,
    pub entries: Vec<GridEntry>,
}

/// Grid-search regularization mode × C on the feature tables, save the best
/// model as `linear.json`, and write the full score table.
pub fn grid(cfg: &ExperimentConfig) -> Result<GridSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let (train_tbl, val_tbl) = load_train_val_tables(cfg)?;
    let (best, entries) = grid_search(
        &train_tbl.x,
        &train_tbl.y,
        &val_tbl.x,
        &val_tbl.y,
        &train_tbl.feature_names,
        &cfg.linear.c_grid,
        cfg.seed,
    )?;
    save_model(cfg.output_path(artifact::LINEAR_MODEL), &best, &cfg.hash(), cfg.seed)?;

    let mut buf = header_block(cfg);
    buf.push_str("regularization,c,val_pr_auc\n");
    for e in &entries {
        let _ = writeln!(buf, "{},{},{}", e.regularization, e.c, e.val_pr_auc);
    }
    write_file(&cfg.output_path(artifact::GRID_TABLE), buf.as_bytes())?;

    // Same tie rule as the search itself: the first maximum wins.
    let winner = entries
        .iter()
        .cloned()
        .reduce(|best, e| if e.val_pr_auc > best.val_pr_auc { e } else { best })
        .expect("grid produced at least one entry");
    log::info!(
        "grid: best {} C={} validation PR-AUC {:.4}",
        winner.regularization,
        winner.c,
        winner.val_pr_auc
    );
    Ok(GridSummary {
        best_regularization: winner.regularization,
        best_c: winner.c,
        best_validation_pr_auc: winner.val_pr_auc,
        entries,
    })
}

// ------------------------------------------------------------ neural stages

#[derive(Debug, Clone, PartialEq)]
pub struct TrainNeuralSummary {
    pub architecture: Architecture,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_pr_auc: f64,
}

/// Train the configured architecture on the splits, checkpoint the
/// best-validation parameters, and write the per-epoch training log.
pub fn train_neural(cfg: &ExperimentConfig) -> Result<TrainNeuralSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let splits = load_splits(cfg)?;
    let table = load_embedding_table(cfg)?;
    let arch = cfg.model.architecture;
    let model = NeuralModel::init(cfg.model.clone(), &table, cfg.seed);
    let outcome = train(model, &table, &splits.train, &splits.validation, &cfg.train)?;

    let ckpt = outcome.model.to_checkpoint(&cfg.hash(), cfg.seed);
    ckpt.save(&cfg.output_path(&artifact::model(arch)))?;

    let mut buf = header_block(cfg);
    buf.push_str("epoch,train_loss,val_pr_auc\n");
    for e in &outcome.log {
        let _ = writeln!(buf, "{},{},{}", e.epoch, e.train_loss, e.val_pr_auc);
    }
    write_file(&cfg.output_path(&artifact::train_log(arch)), buf.as_bytes())?;

    log::info!(
        "train-neural: {arch} best epoch {} validation PR-AUC {:.4}",
        outcome.best_epoch,
        outcome.best_val_pr_auc
    );
    Ok(TrainNeuralSummary {
        architecture: arch,
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_pr_auc: outcome.best_val_pr_auc,
    })
}

/// Load a checkpoint written by [`train_neural`] for `arch`, verifying its
/// config hash and rebuilding the model against `table`.
pub fn load_checkpoint_model(
    cfg: &ExperimentConfig,
    arch: Architecture,
    table: &EmbeddingTable,
) -> Result<NeuralModel, PipelineError> {
    let path = cfg.output_path(&artifact::model(arch));
    if !path.exists() {
        return Err(PipelineError::MissingArtifact { path, produced_by: "train-neural".to_string() });
    }
    let ckpt = Checkpoint::load(&path)?;
    let expected = cfg.hash();
    if ckpt.config_hash != expected {
        return Err(PipelineError::HashMismatch { path, expected, found: ckpt.config_hash });
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.architecture = arch;
    Ok(NeuralModel::from_checkpoint(&ckpt, model_cfg, table.dimension())?)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub pr_auc: f64,
    pub break_even_f1: f64,
    /// Paired permutation p-value of the PR-AUC difference to the random
    /// baseline.
    pub p_vs_random: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub rows: Vec<EvalRow>,
    pub test_size: usize,
    pub test_positives: usize,
}

fn scored_from(
    pairs: &[(String, bool)],
    scores: Vec<f64>,
) -> Result<ScoredSet, PipelineError> {
    let ids = pairs.iter().map(|(id, _)| id.clone()).collect();
    let labels = pairs.iter().map(|&(_, l)| l).collect();
    Ok(ScoredSet::new(ids, labels, scores)?)
}

fn feature_xy(
    extractor: &FeatureExtractor,
    convs: &[Conversation],
    set: FeatureSet,
    with_gradients: bool,
) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<bool>), PipelineError> {
    let mut names = Vec::new();
    let mut x = Vec::with_capacity(convs.len());
    let mut y = Vec::with_capacity(convs.len());
    for c in convs {
        let (n, v) = extractor.features(c, set, with_gradients)?;
        if names.is_empty() {
            names = n;
        }
        x.push(v);
        y.push(positive(c)?);
    }
    Ok((names, x, y))
}

/// Retrain every requested model family on the train/validation splits and
/// score the held-out test split, mirroring the toolkit's standard report:
/// a random baseline, bag-of-words, each featureset with and without
/// gradient features, and whichever neural checkpoints are present in the
/// output directory.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvaluateSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let splits = load_splits(cfg)?;
    let extractor = load_extractor(cfg)?;

    let test_pairs: Vec<(String, bool)> = splits
        .test
        .iter()
        .map(|c| Ok((c.id.clone(), positive(c)?)))
        .collect::<Result<_, PipelineError>>()?;
    let train_labels: Vec<bool> =
        splits.train.iter().map(positive).collect::<Result<_, PipelineError>>()?;

    let mut scored: Vec<(String, ScoredSet)> = Vec::new();
    let random = random_baseline(&train_labels, &test_pairs, cfg.seed);
    scored.push(("random".to_string(), random.clone()));

    // Bag of words: vocabulary and scaling fit on the training split only.
    let vocab = bag_of_words_vocabulary(&splits.train, cfg.linear.bag_of_words_vocab);
    let y_val: Vec<bool> =
        splits.validation.iter().map(positive).collect::<Result<_, PipelineError>>()?;
    let (bow, _) = grid_search(
        &bag_of_words_matrix(&splits.train, &vocab),
        &train_labels,
        &bag_of_words_matrix(&splits.validation, &vocab),
        &y_val,
        &vocab,
        &cfg.linear.c_grid,
        cfg.seed,
    )?;
    let bow_scores = bow.predict_proba(&bag_of_words_matrix(&splits.test, &vocab))?;
    scored.push(("bag-of-words".to_string(), scored_from(&test_pairs, bow_scores)?));

    // Feature models: toxicity and sentiment with the full repertoire,
    // the richer sets both without and with gradient features.
    let feature_rows: [(FeatureSet, bool, &str); 8] = [
        (FeatureSet::Toxicity, true, "toxicity"),
        (FeatureSet::Sentiment, true, "sentiment"),
        (FeatureSet::Politeness, false, "politeness"),
        (FeatureSet::Politeness, true, "politeness+gradients"),
        (FeatureSet::Collaboration, false, "collaboration"),
        (FeatureSet::Collaboration, true, "collaboration+gradients"),
        (FeatureSet::Combined, false, "combined"),
        (FeatureSet::Combined, true, "combined+gradients"),
    ];
    for (set, grads, row_name) in feature_rows {
        let (fnames, x_train, fy_train) = feature_xy(&extractor, &splits.train, set, grads)?;
        let (_, x_val, fy_val) = feature_xy(&extractor, &splits.validation, set, grads)?;
        let (_, x_test, _) = feature_xy(&extractor, &splits.test, set, grads)?;
        let (model, _) =
            grid_search(&x_train, &fy_train, &x_val, &fy_val, &fnames, &cfg.linear.c_grid, cfg.seed)?;
        let scores = model.predict_proba(&x_test)?;
        scored.push((row_name.to_string(), scored_from(&test_pairs, scores)?));
    }

    // Neural rows: one per checkpoint present, scored deterministically.
    let mut table: Option<EmbeddingTable> = None;
    for arch in Architecture::ALL {
        if !cfg.output_path(&artifact::model(arch)).exists() {
            continue;
        }
        if table.is_none() {
            table = Some(load_embedding_table(cfg)?);
        }
        let table = table.as_ref().expect("just loaded");
        let model = load_checkpoint_model(cfg, arch, table)?;
        let mut scores = Vec::with_capacity(splits.test.len());
        for c in &splits.test {
            scores.push(predict(&model, table, c)?);
        }
        let row_name = match arch {
            Architecture::Hierarchical if cfg.model.include_edits => "hierarchical+edits".to_string(),
            _ => arch.tag().to_string(),
        };
        scored.push((row_name, scored_from(&test_pairs, scores)?));
    }

    let mut rows = Vec::with_capacity(scored.len());
    for (i, (name, set)) in scored.iter().enumerate() {
        let p = permutation_test(
            set,
            &random,
            pr_auc,
            cfg.eval.permutation_iterations,
            cfg.seed.wrapping_add(i as u64),
        )?;
        rows.push(EvalRow {
            model: name.clone(),
            pr_auc: pr_auc(set)?,
            break_even_f1: break_even_f1(set)?,
            p_vs_random: p,
        });
    }

    let mut buf = header_block(cfg);
    buf.push_str("model,pr_auc,break_even_f1,p_vs_random\n");
    for r in &rows {
        let _ = writeln!(buf, "{},{},{},{}", r.model, r.pr_auc, r.break_even_f1, r.p_vs_random);
    }
    write_file(&cfg.output_path(artifact::EVALUATION), buf.as_bytes())?;

    let test_positives = test_pairs.iter().filter(|&&(_, l)| l).count();
    log::info!("evaluate: {} rows on {} test conversations", rows.len(), test_pairs.len());
    Ok(EvaluateSummary { rows, test_size: test_pairs.len(), test_positives })
}

// ------------------------------------------------------------------- trace

/// Trace one conversation from the matched corpus through the configured
/// architecture's checkpoint, writing the per-prefix CSV and an SVG chart.
pub fn trace_conversation(
    cfg: &ExperimentConfig,
    conversation_id: &str,
) -> Result<PredictionTrace, PipelineError> {
    ensure_output_dir(cfg)?;
    let matched = load_matched_corpus(cfg)?;
    let conv = matched
        .iter()
        .find(|c| c.id == conversation_id)
        .ok_or_else(|| PipelineError::UnknownConversation { id: conversation_id.to_string() })?;
    let table = load_embedding_table(cfg)?;
    let model = load_checkpoint_model(cfg, cfg.model.architecture, &table)?;
    let tr = trace(&model, &table, conv, cfg.eval.mc_samples, cfg.seed)?;

    let mut buf = header_block(cfg);
    buf.push_str(&tr.to_csv());
    write_file(&cfg.output_path(&artifact::trace_csv(conversation_id)), buf.as_bytes())?;
    write_file(
        &cfg.output_path(&artifact::trace_chart(conversation_id)),
        report::trace_chart(&tr).as_bytes(),
    )?;
    log::info!("trace: {} over {} prefixes", conversation_id, tr.entries.len());
    Ok(tr)
}

// -------------------------------------------------------------- early eval

/// Bucket-curve evaluation of the configured architecture's checkpoint on
/// the test split: PR-AUC and mean MC-dropout uncertainty per observed
/// fraction, written as CSV plus a dual-axis SVG chart.
pub fn early_eval(cfg: &ExperimentConfig) -> Result<BucketCurve, PipelineError> {
    ensure_output_dir(cfg)?;
    let splits = load_splits(cfg)?;
    let table = load_embedding_table(cfg)?;
    let model = load_checkpoint_model(cfg, cfg.model.architecture, &table)?;

    // `early_estimation` takes an infallible scorer; stash the first model
    // error (none is expected — prefixes are never empty) and surface it
    // after the sweep.
    let mut failure: Option<ModelError> = None;
    let curve = early_estimation(&splits.test, |prefix| {
        match predict_mc(&model, &table, prefix, cfg.eval.mc_samples, cfg.seed) {
            Ok(pair) => pair,
            Err(e) => {
                if failure.is_none() {
                    failure = Some(e);
                }
                (0.5, 0.0)
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }

    let mut buf = header_block(cfg);
    buf.push_str("fraction,pr_auc,mean_uncertainty\n");
    for p in &curve.points {
        let _ = writeln!(buf, "{},{},{}", p.fraction, p.pr_auc, p.mean_uncertainty);
    }
    write_file(&cfg.output_path(artifact::EARLY_EVAL), buf.as_bytes())?;
    write_file(
        &cfg.output_path(artifact::EARLY_EVAL_CHART),
        report::early_eval_chart(&curve).as_bytes(),
    )?;
    log::info!("early-eval: {} buckets", curve.points.len());
    Ok(curve)
}

// ------------------------------------------------------------------- words

#[derive(Debug, Clone, PartialEq)]
pub struct WordsSummary {
    /// `(word, weight)` ranked by absolute weight, largest first.
    pub words: Vec<(String, f64)>,
}

/// Fit the bag-of-words model (grid-searched) and write the top-20 signed
/// coefficients: which words pull toward escalation and which away.
pub fn top_words(cfg: &ExperimentConfig) -> Result<WordsSummary, PipelineError> {
    ensure_output_dir(cfg)?;
    let splits = load_splits(cfg)?;
    let vocab = bag_of_words_vocabulary(&splits.train, cfg.linear.bag_of_words_vocab);
    let y_train: Vec<bool> =
        splits.train.iter().map(positive).collect::<Result<_, PipelineError>>()?;
    let y_val: Vec<bool> =
        splits.validation.iter().map(positive).collect::<Result<_, PipelineError>>()?;
    let (model, _) = grid_search(
        &bag_of_words_matrix(&splits.train, &vocab),
        &y_train,
        &bag_of_words_matrix(&splits.validation, &vocab),
        &y_val,
        &vocab,
        &cfg.linear.c_grid,
        cfg.seed,
    )?;
    let words = model.coefficients(20);

    let mut buf = header_block(cfg);
    buf.push_str("rank,word,weight\n");
    for (i, (word, weight)) in words.iter().enumerate() {
        let _ = writeln!(buf, "{},{},{}", i + 1, word, weight);
    }
    write_file(&cfg.output_path(artifact::WORDS), buf.as_bytes())?;
    log::info!("words: top {} coefficients", words.len());
    Ok(WordsSummary { words })
}
