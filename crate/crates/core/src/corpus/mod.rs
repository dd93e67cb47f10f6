//! Conversation data model, corpus IO, edit-summary merging, and quality
//! filters.
//!
//! A corpus is stored as a line-delimited UTF-8 file: one JSON conversation
//! record per line. Lines that are empty or start with `#` are skipped, which
//! lets artifact files carry a metadata header. Unknown JSON fields are
//! ignored so the format can grow.

mod toxicity;

pub use toxicity::{fetch_toxicity, HttpToxicityClient, ToxicityError, ToxicityFixture, ToxicitySource};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::text;

/// Where an utterance came from: a talk-page post or an edit summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceKind {
    /// A post on the discussion page.
    #[serde(rename = "talk")]
    TalkPost,
    /// A revision comment merged into the conversation.
    #[serde(rename = "edit")]
    EditSummary,
}

/// Escalation outcome of a conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// The dispute was referred to mediation.
    Escalated,
    /// No mediation record was found.
    NotEscalated,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Escalated)
    }
}

/// One utterance in a conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub author: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub text: String,
    pub kind: UtteranceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxicity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severe_toxicity: Option<f64>,
}

impl Utterance {
    pub fn is_edit_summary(&self) -> bool {
        self.kind == UtteranceKind::EditSummary
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::EmptyText { utterance: self.id.clone() });
        }
        for (name, v) in [("toxicity", self.toxicity), ("severe_toxicity", self.severe_toxicity)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CorpusError::ToxicityOutOfRange {
                        utterance: self.id.clone(),
                        field: name,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}

/// An ordered conversation with an optional escalation label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub page: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Build a conversation, sorting utterances by timestamp and checking
    /// the type invariants: at least one utterance, non-empty texts,
    /// toxicity fields in `[0,1]`, and every edit summary timestamped
    /// within the talk-post window.
    pub fn new(
        id: impl Into<String>,
        page: impl Into<String>,
        mut utterances: Vec<Utterance>,
        label: Option<Label>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(CorpusError::EmptyConversation { conversation: id });
        }
        for u in &utterances {
            u.validate()?;
        }
        utterances.sort_by_key(|u| u.timestamp);
        let c = Conversation { id, page: page.into(), label, utterances };
        c.check_edit_window()?;
        Ok(c)
    }

    /// Construct without re-checking the edit-summary window. Used for
    /// prefixes and truncations of already-valid conversations, which may
    /// legitimately end inside an edit run.
    pub(crate) fn from_parts_unchecked(
        id: String,
        page: String,
        utterances: Vec<Utterance>,
        label: Option<Label>,
    ) -> Self {
        Conversation { id, page, label, utterances }
    }

    fn check_edit_window(&self) -> Result<(), CorpusError> {
        let talk_times: Vec<i64> = self
            .utterances
            .iter()
            .filter(|u| u.kind == UtteranceKind::TalkPost)
            .map(|u| u.timestamp)
            .collect();
        let edits = self.utterances.iter().filter(|u| u.is_edit_summary());
        for e in edits {
            let (first, last) = match (talk_times.first(), talk_times.last()) {
                (Some(&f), Some(&l)) => (f, l),
                _ => {
                    return Err(CorpusError::EditOutsideWindow {
                        conversation: self.id.clone(),
                        utterance: e.id.clone(),
                    })
                }
            };
            if e.timestamp < first || e.timestamp > last {
                return Err(CorpusError::EditOutsideWindow {
                    conversation: self.id.clone(),
                    utterance: e.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Distinct authors over all utterances.
    pub fn participants(&self) -> HashSet<&str> {
        self.utterances.iter().map(|u| u.author.as_str()).collect()
    }

    /// Authors of talk posts only; the participant set used when deciding
    /// which edit summaries belong to the conversation.
    pub fn talk_participants(&self) -> HashSet<&str> {
        self.utterances
            .iter()
            .filter(|u| u.kind == UtteranceKind::TalkPost)
            .map(|u| u.author.as_str())
            .collect()
    }

    /// First `n` utterances as a conversation. `n` is clamped to the length
    /// and must be at least 1.
    pub fn prefix(&self, n: usize) -> Conversation {
        let n = n.clamp(1, self.utterances.len());
        Conversation::from_parts_unchecked(
            self.id.clone(),
            self.page.clone(),
            self.utterances[..n].to_vec(),
            self.label,
        )
    }
}

/// Errors from corpus construction, IO, and filtering.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("conversation {conversation} has no utterances")]
    EmptyConversation { conversation: String },
    #[error("utterance {utterance} has empty text")]
    EmptyText { utterance: String },
    #[error("utterance {utterance}: {field} = {value} outside [0,1]")]
    ToxicityOutOfRange { utterance: String, field: &'static str, value: f64 },
    #[error("conversation {conversation}: edit summary {utterance} outside the talk-post window")]
    EditOutsideWindow { conversation: String, utterance: String },
    #[error("merge input {utterance} is not an edit summary")]
    NotAnEditSummary { utterance: String },
    #[error("conversation {conversation} has no utterances before t={escalation_time}")]
    EmptyAfterTruncation { conversation: String, escalation_time: i64 },
}

/// Read a line-delimited corpus. Lines are parsed independently; errors
/// carry the 1-based line number.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Conversation>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw: Conversation =
            serde_json::from_str(trimmed).map_err(|source| CorpusError::Parse { line: lineno, source })?;
        let conv = Conversation::new(raw.id, raw.page, raw.utterances, raw.label)
            .map_err(|source| CorpusError::Invalid { line: lineno, source: Box::new(source) })?;
        out.push(conv);
    }
    Ok(out)
}

/// Write a corpus in the line-delimited format, with optional `#` header
/// lines (metadata such as the config hash).
pub fn save_corpus(
    path: impl AsRef<Path>,
    conversations: &[Conversation],
    header: &[String],
) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for h in header {
        writeln!(buf, "# {h}")?;
    }
    for c in conversations {
        serde_json::to_writer(&mut buf, c).map_err(|e| CorpusError::Io(e.into()))?;
        writeln!(buf)?;
    }
    crate::ioutil::write_atomic(path, &buf)?;
    Ok(())
}

/// Tokens over all utterances of a conversation.
pub fn token_count(c: &Conversation) -> usize {
    c.utterances.iter().map(|u| text::count_tokens(&u.text)).sum()
}

/// What happened to the edit summaries offered to [`merge_edit_summaries`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub added: usize,
    pub excluded_non_participant: usize,
    pub excluded_out_of_window: usize,
}

impl MergeReport {
    pub fn excluded(&self) -> usize {
        self.excluded_non_participant + self.excluded_out_of_window
    }
}

/// Interleave edit summaries into a talk-post conversation.
///
/// Only edits authored by a talk-post participant and timestamped within the
/// inclusive `[first, last]` talk-post window are kept; the rest are counted
/// in the report. Talk posts are never altered.
pub fn merge_edit_summaries(
    talk: &Conversation,
    edits: Vec<Utterance>,
) -> Result<(Conversation, MergeReport), CorpusError> {
    let participants = talk.talk_participants();
    let talk_times: Vec<i64> = talk
        .utterances
        .iter()
        .filter(|u| u.kind == UtteranceKind::TalkPost)
        .map(|u| u.timestamp)
        .collect();
    let window = match (talk_times.first(), talk_times.last()) {
        (Some(&f), Some(&l)) => Some((f, l)),
        _ => None,
    };

    let mut report = MergeReport::default();
    let mut merged = talk.utterances.clone();
    for e in edits {
        if !e.is_edit_summary() {
            return Err(CorpusError::NotAnEditSummary { utterance: e.id });
        }
        if !participants.contains(e.author.as_str()) {
            report.excluded_non_participant += 1;
            continue;
        }
        match window {
            Some((first, last)) if e.timestamp >= first && e.timestamp <= last => {
                report.added += 1;
                merged.push(e);
            }
            _ => report.excluded_out_of_window += 1,
        }
    }
    // Stable sort: talk posts stay ahead of edits sharing a timestamp.
    merged.sort_by_key(|u| u.timestamp);
    let conv = Conversation::new(talk.id.clone(), talk.page.clone(), merged, talk.label)?;
    Ok((conv, report))
}

/// Quality thresholds applied by [`apply_filters`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FilterConfig {
    pub min_utterances: usize,
    pub min_tokens: usize,
    pub max_utterances: usize,
    pub min_participants: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_utterances: 5, min_tokens: 250, max_utterances: 50, min_participants: 2 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_utterances == 0 || self.min_tokens == 0 || self.max_utterances == 0 || self.min_participants == 0 {
            return Err("filter thresholds must be positive".into());
        }
        if self.min_utterances > self.max_utterances {
            return Err(format!(
                "min_utterances ({}) exceeds max_utterances ({})",
                self.min_utterances, self.max_utterances
            ));
        }
        Ok(())
    }
}

/// First filter rule a conversation failed. Checks run in a fixed order so
/// rejection reports are deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewUtterances,
    TooManyUtterances,
    TooFewTokens,
    TooFewParticipants,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::TooFewUtterances => "too_few_utterances",
            RejectReason::TooManyUtterances => "too_many_utterances",
            RejectReason::TooFewTokens => "too_few_tokens",
            RejectReason::TooFewParticipants => "too_few_participants",
        };
        f.write_str(s)
    }
}

/// Per-reason rejection counts from one [`apply_filters`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub rejections: BTreeMap<RejectReason, usize>,
}

impl FilterReport {
    pub fn total_rejected(&self) -> usize {
        self.rejections.values().sum()
    }
}

fn first_failure(c: &Conversation, cfg: &FilterConfig) -> Option<RejectReason> {
    let n = c.utterances.len();
    if n < cfg.min_utterances {
        return Some(RejectReason::TooFewUtterances);
    }
    if n > cfg.max_utterances {
        return Some(RejectReason::TooManyUtterances);
    }
    if token_count(c) < cfg.min_tokens {
        return Some(RejectReason::TooFewTokens);
    }
    if c.participants().len() < cfg.min_participants {
        return Some(RejectReason::TooFewParticipants);
    }
    None
}

/// Keep conversations passing every quality rule; report one reason per
/// rejection (the first failing check).
pub fn apply_filters(cs: Vec<Conversation>, cfg: &FilterConfig) -> (Vec<Conversation>, FilterReport) {
    let mut kept = Vec::with_capacity(cs.len());
    let mut report = FilterReport::default();
    for c in cs {
        match first_failure(&c, cfg) {
            None => kept.push(c),
            Some(reason) => *report.rejections.entry(reason).or_insert(0) += 1,
        }
    }
    (kept, report)
}

/// Restrict a conversation to utterances strictly before `escalation_time`.
pub fn truncate_before_escalation(
    c: &Conversation,
    escalation_time: i64,
) -> Result<Conversation, CorpusError> {
    let utterances: Vec<Utterance> =
        c.utterances.iter().filter(|u| u.timestamp < escalation_time).cloned().collect();
    if utterances.is_empty() {
        return Err(CorpusError::EmptyAfterTruncation {
            conversation: c.id.clone(),
            escalation_time,
        });
    }
    Ok(Conversation::from_parts_unchecked(
        c.id.clone(),
        c.page.clone(),
        utterances,
        c.label,
    ))
}
