//! Per-utterance linguistic markers and their per-conversation aggregation.
//!
//! Four featuresets are supported, mirroring the classic marker families for
//! conversational analysis:
//!
//! - `toxicity`: toxicity and severe-toxicity scores carried on utterances;
//! - `sentiment`: positive and negative opinion-word counts;
//! - `politeness`: strategy patterns (greetings, apologies, gratitude,
//!   deference, please, directness, ...), hedging terms, and 1st/2nd person
//!   pronoun rates;
//! - `collaboration`: idea introduction and adoption, hedging and certainty
//!   terms, pronoun rates, style accommodation, and reply gaps.
//!
//! `combined` is the union of politeness and collaboration; columns they
//! share (hedging terms, pronoun rates) appear once.
//!
//! Every marker is computed per utterance, giving a [`FeatureMatrix`], and
//! then aggregated per conversation by [`aggregate`]: the column mean plus
//! the slope of a least-squares line fit against normalized utterance
//! position. The slope captures drift — a dispute that starts polite and
//! turns hostile has the same mean politeness as its mirror image but the
//! opposite gradient.

mod lexicon;

pub use lexicon::{Category, Lexicon, Position};

use crate::corpus::Conversation;
use crate::text;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;
use thiserror::Error;

/// Errors from lexicon parsing and feature extraction.
#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("lexicon {lexicon}, line {line}: {message}")]
    LexiconParse { lexicon: String, line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("utterance {utterance} is missing the {field} field; run ingest with a toxicity source")]
    MissingToxicity { utterance: String, field: &'static str },
}

/// Whether lexicon counts are reported raw or divided by utterance length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    RawCount,
    PerToken,
}

/// Per-utterance feature values for one conversation: rows are utterances in
/// order, columns are named features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub conversation_id: String,
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Append the columns of `other`, skipping names already present (the
    /// politeness and collaboration featuresets share some markers).
    fn concat_dedup(mut self, other: FeatureMatrix) -> FeatureMatrix {
        assert_eq!(self.conversation_id, other.conversation_id);
        assert_eq!(self.rows.len(), other.rows.len());
        for (j, name) in other.names.iter().enumerate() {
            if self.names.iter().any(|n| n == name) {
                continue;
            }
            self.names.push(name.clone());
            for (row, orow) in self.rows.iter_mut().zip(&other.rows) {
                row.push(orow[j]);
            }
        }
        self
    }

    /// Keep only the named columns, in the given order.
    fn select(&self, names: &[&str]) -> FeatureMatrix {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.names.iter().position(|m| m == n).expect("selected column exists"))
            .collect();
        FeatureMatrix {
            conversation_id: self.conversation_id.clone(),
            names: names.iter().map(|n| n.to_string()).collect(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
        }
    }
}

/// Column means and least-squares slopes for one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures {
    pub conversation_id: String,
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl AggregatedFeatures {
    /// Flatten to a single named vector: all means, then (optionally) all
    /// gradients.
    pub fn vector(&self, with_gradients: bool) -> (Vec<String>, Vec<f64>) {
        let mut names: Vec<String> = self.names.iter().map(|n| format!("{n}:mean")).collect();
        let mut values = self.mean.clone();
        if with_gradients {
            names.extend(self.names.iter().map(|n| format!("{n}:gradient")));
            values.extend_from_slice(&self.gradient);
        }
        (names, values)
    }
}

/// Mean and positional gradient of every column.
///
/// The gradient is the least-squares slope of column values against
/// normalized positions `x_i = i/(n-1)`, so slopes are comparable across
/// conversation lengths. A single-row matrix has a zero gradient.
pub fn aggregate(fm: &FeatureMatrix) -> AggregatedFeatures {
    let n = fm.rows.len();
    let k = fm.names.len();
    let mut mean = vec![0.0; k];
    for row in &fm.rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut gradient = vec![0.0; k];
    if n >= 2 {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let x_mean = xs.iter().sum::<f64>() / n as f64;
        let denom: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
        for (j, g) in gradient.iter_mut().enumerate() {
            let num: f64 =
                fm.rows.iter().zip(&xs).map(|(row, x)| (x - x_mean) * (row[j] - mean[j])).sum();
            *g = num / denom;
        }
    }
    AggregatedFeatures { conversation_id: fm.conversation_id.clone(), names: fm.names.clone(), mean, gradient }
}

/// One column per lexicon category: non-overlapping, leftmost-greedy match
/// counts, divided by the utterance token count under
/// [`Normalize::PerToken`] (utterances with no tokens score 0).
pub fn extract_lexicon_features(c: &Conversation, lex: &Lexicon, normalize: Normalize) -> FeatureMatrix {
    let names: Vec<String> = lex.categories.iter().map(|cat| cat.name.clone()).collect();
    let rows = c
        .utterances
        .iter()
        .map(|u| {
            let tokens = text::tokenize(&u.text);
            lex.categories
                .iter()
                .map(|cat| {
                    let count = cat.count_matches(&tokens) as f64;
                    match normalize {
                        Normalize::RawCount => count,
                        Normalize::PerToken if tokens.is_empty() => 0.0,
                        Normalize::PerToken => count / tokens.len() as f64,
                    }
                })
                .collect()
        })
        .collect();
    FeatureMatrix { conversation_id: c.id.clone(), names, rows }
}

static PRONOUNS: LazyLock<Lexicon> = LazyLock::new(|| {
    Lexicon::parse("pronouns", include_str!("../../data/lexicons/pronouns.lex"))
        .expect("builtin pronoun lexicon parses")
});

/// Per-token rates of 1st/2nd/3rd person pronouns (columns `pronouns_1st`,
/// `pronouns_2nd`, `pronouns_3rd`). The word lists are fixed.
pub fn extract_pronoun_features(c: &Conversation) -> FeatureMatrix {
    extract_lexicon_features(c, &PRONOUNS, Normalize::PerToken)
}

fn content_words(tokens: &[String], function_words: &HashSet<&str>) -> BTreeSet<String> {
    tokens
        .iter()
        .filter(|t| t.chars().count() >= 3 && !function_words.contains(t.as_str()))
        .cloned()
        .collect()
}

/// Idea introduction and adoption, per utterance.
///
/// An idea is a content-word type: at least three characters and not on the
/// function-word list. `ideas_introduced` counts types never used earlier in
/// the conversation; `ideas_adopted` counts types first used earlier by a
/// different author and used by this author for the first time here;
/// `ideas_adopted_certainty` repeats the adopted count when the utterance
/// also contains a certainty term, else 0.
pub fn extract_idea_features(
    c: &Conversation,
    certainty: &Lexicon,
    function_words: &Lexicon,
) -> FeatureMatrix {
    let fw = function_words.word_set();
    let mut first_author: HashMap<String, String> = HashMap::new();
    let mut used_by: HashSet<(String, String)> = HashSet::new();
    let rows = c
        .utterances
        .iter()
        .map(|u| {
            let tokens = text::tokenize(&u.text);
            let types = content_words(&tokens, &fw);
            let mut introduced = 0.0;
            let mut adopted = 0.0;
            for t in &types {
                match first_author.get(t) {
                    None => introduced += 1.0,
                    Some(author) => {
                        if *author != u.author && !used_by.contains(&(u.author.clone(), t.clone())) {
                            adopted += 1.0;
                        }
                    }
                }
            }
            let certain = certainty.categories.iter().any(|cat| cat.count_matches(&tokens) > 0);
            for t in types {
                first_author.entry(t.clone()).or_insert_with(|| u.author.clone());
                used_by.insert((u.author.clone(), t));
            }
            vec![introduced, adopted, if certain { adopted } else { 0.0 }]
        })
        .collect();
    FeatureMatrix {
        conversation_id: c.id.clone(),
        names: vec!["ideas_introduced".into(), "ideas_adopted".into(), "ideas_adopted_certainty".into()],
        rows,
    }
}

/// Style accommodation: for an utterance whose author differs from the
/// previous one, the Jaccard similarity of the two utterances' function-word
/// type sets; 0 otherwise (including the first utterance and when both sets
/// are empty).
pub fn extract_accommodation(c: &Conversation, function_words: &Lexicon) -> FeatureMatrix {
    let fw = function_words.word_set();
    let sets: Vec<HashSet<String>> = c
        .utterances
        .iter()
        .map(|u| text::tokenize(&u.text).into_iter().filter(|t| fw.contains(t.as_str())).collect())
        .collect();
    let rows = c
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let value = if i == 0 || u.author == c.utterances[i - 1].author {
                0.0
            } else {
                let inter = sets[i].intersection(&sets[i - 1]).count();
                let union = sets[i].union(&sets[i - 1]).count();
                if union == 0 {
                    0.0
                } else {
                    inter as f64 / union as f64
                }
            };
            vec![value]
        })
        .collect();
    FeatureMatrix { conversation_id: c.id.clone(), names: vec!["accommodation".into()], rows }
}

/// Log reply gap: `ln(1 + seconds since the previous utterance)`, 0 for the
/// first utterance.
pub fn extract_reply_gap(c: &Conversation) -> FeatureMatrix {
    let rows = c
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let value = if i == 0 {
                0.0
            } else {
                let gap = (u.timestamp - c.utterances[i - 1].timestamp).max(0) as f64;
                (1.0 + gap).ln()
            };
            vec![value]
        })
        .collect();
    FeatureMatrix { conversation_id: c.id.clone(), names: vec!["reply_gap".into()], rows }
}

/// Copy the toxicity and severe-toxicity scores into feature columns.
/// Errors if any utterance is missing either field.
pub fn toxicity_columns(c: &Conversation) -> Result<FeatureMatrix, FeatureError> {
    let mut rows = Vec::with_capacity(c.utterances.len());
    for u in &c.utterances {
        let tox = u.toxicity.ok_or(FeatureError::MissingToxicity {
            utterance: u.id.clone(),
            field: "toxicity",
        })?;
        let severe = u.severe_toxicity.ok_or(FeatureError::MissingToxicity {
            utterance: u.id.clone(),
            field: "severe_toxicity",
        })?;
        rows.push(vec![tox, severe]);
    }
    Ok(FeatureMatrix {
        conversation_id: c.id.clone(),
        names: vec!["toxicity".into(), "severe_toxicity".into()],
        rows,
    })
}

/// The marker families a feature-based model can be trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSet {
    Toxicity,
    Sentiment,
    Politeness,
    Collaboration,
    /// Politeness and collaboration together, shared columns deduplicated.
    Combined,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 5] = [
        FeatureSet::Toxicity,
        FeatureSet::Sentiment,
        FeatureSet::Politeness,
        FeatureSet::Collaboration,
        FeatureSet::Combined,
    ];
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::Toxicity => "toxicity",
            FeatureSet::Sentiment => "sentiment",
            FeatureSet::Politeness => "politeness",
            FeatureSet::Collaboration => "collaboration",
            FeatureSet::Combined => "combined",
        })
    }
}

impl FromStr for FeatureSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toxicity" => Ok(FeatureSet::Toxicity),
            "sentiment" => Ok(FeatureSet::Sentiment),
            "politeness" => Ok(FeatureSet::Politeness),
            "collaboration" => Ok(FeatureSet::Collaboration),
            "combined" => Ok(FeatureSet::Combined),
            other => Err(format!("unknown featureset {other:?}")),
        }
    }
}

/// Loads the lexicons once and exposes featureset extraction.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    politeness: Lexicon,
    hedges: Lexicon,
    certainty: Lexicon,
    sentiment: Lexicon,
    function_words: Lexicon,
}

impl FeatureExtractor {
    /// The lexicons compiled into the binary.
    pub fn builtin() -> FeatureExtractor {
        let parse = |name: &str, content: &str| {
            Lexicon::parse(name, content).expect("builtin lexicon parses")
        };
        FeatureExtractor {
            politeness: parse("politeness", include_str!("../../data/lexicons/politeness.lex")),
            hedges: parse("hedges", include_str!("../../data/lexicons/hedges.lex")),
            certainty: parse("certainty", include_str!("../../data/lexicons/certainty.lex")),
            sentiment: parse("sentiment", include_str!("../../data/lexicons/sentiment.lex")),
            function_words: parse(
                "function_words",
                include_str!("../../data/lexicons/function_words.lex"),
            ),
        }
    }

    /// Load `politeness.lex`, `hedges.lex`, `certainty.lex`, `sentiment.lex`,
    /// and `function_words.lex` from a directory, overriding the builtins.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<FeatureExtractor, FeatureError> {
        let dir = dir.as_ref();
        Ok(FeatureExtractor {
            politeness: Lexicon::load(dir.join("politeness.lex"))?,
            hedges: Lexicon::load(dir.join("hedges.lex"))?,
            certainty: Lexicon::load(dir.join("certainty.lex"))?,
            sentiment: Lexicon::load(dir.join("sentiment.lex"))?,
            function_words: Lexicon::load(dir.join("function_words.lex"))?,
        })
    }

    /// The per-utterance feature matrix for one featureset.
    pub fn matrix(&self, c: &Conversation, set: FeatureSet) -> Result<FeatureMatrix, FeatureError> {
        match set {
            FeatureSet::Toxicity => toxicity_columns(c),
            FeatureSet::Sentiment => Ok(extract_lexicon_features(c, &self.sentiment, Normalize::RawCount)),
            FeatureSet::Politeness => {
                let strategies = extract_lexicon_features(c, &self.politeness, Normalize::RawCount);
                let hedges = extract_lexicon_features(c, &self.hedges, Normalize::RawCount);
                let pronouns = extract_pronoun_features(c).select(&["pronouns_1st", "pronouns_2nd"]);
                Ok(strategies.concat_dedup(hedges).concat_dedup(pronouns))
            }
            FeatureSet::Collaboration => {
                let ideas = extract_idea_features(c, &self.certainty, &self.function_words);
                let hedges = extract_lexicon_features(c, &self.hedges, Normalize::RawCount);
                let certainty = extract_lexicon_features(c, &self.certainty, Normalize::RawCount);
                let pronouns = extract_pronoun_features(c);
                let accommodation = extract_accommodation(c, &self.function_words);
                let gaps = extract_reply_gap(c);
                Ok(ideas
                    .concat_dedup(hedges)
                    .concat_dedup(certainty)
                    .concat_dedup(pronouns)
                    .concat_dedup(accommodation)
                    .concat_dedup(gaps))
            }
            FeatureSet::Combined => {
                let p = self.matrix(c, FeatureSet::Politeness)?;
                let col = self.matrix(c, FeatureSet::Collaboration)?;
                Ok(p.concat_dedup(col))
            }
        }
    }

    /// The aggregated feature vector for one conversation: means, plus
    /// gradients when requested.
    pub fn features(
        &self,
        c: &Conversation,
        set: FeatureSet,
        with_gradients: bool,
    ) -> Result<(Vec<String>, Vec<f64>), FeatureError> {
        Ok(aggregate(&self.matrix(c, set)?).vector(with_gradients))
    }
}

#[cfg(test)]
mod tests;
