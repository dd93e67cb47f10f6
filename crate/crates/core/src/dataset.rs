//! Length-matched dataset construction and train/validation/test splits.
//!
//! Escalated conversations are rare, and longer disputes are more likely to
//! escalate, so a classifier trained on the raw corpus could lean on length
//! alone. [`match_by_length`] controls for that by pairing every escalated
//! conversation with up to a fixed number of non-escalated conversations of
//! exactly the same utterance count. [`split`] then produces stratified,
//! seeded train/validation/test partitions, and the split manifest records
//! the assignment so an experiment can be replayed.

use crate::corpus::{Conversation, Label};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Controls for [`match_by_length`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Negatives requested per positive; fewer are taken when the pool runs
    /// out of conversations of the right length.
    pub max_matches_per_positive: usize,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { max_matches_per_positive: 10, seed: 0 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.max_matches_per_positive == 0 {
            return Err(DatasetError::BadConfig(
                "max_matches_per_positive must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one matching run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchReport {
    /// Negatives selected in total.
    pub matched: usize,
    /// Positives that received fewer matches than requested, with the size
    /// of the shortfall.
    pub deficits: BTreeMap<String, usize>,
}

fn check_unique_ids<'a>(cs: impl Iterator<Item = &'a Conversation>) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for c in cs {
        if !seen.insert(c.id.as_str()) {
            return Err(DatasetError::DuplicateId { id: c.id.clone() });
        }
    }
    Ok(())
}

fn require_label(c: &Conversation, expected: Label) -> Result<(), DatasetError> {
    match c.label {
        Some(l) if l == expected => Ok(()),
        Some(_) => Err(DatasetError::WrongClass { id: c.id.clone(), expected: class_name(expected) }),
        None => Err(DatasetError::Unlabeled { id: c.id.clone() }),
    }
}

fn class_name(l: Label) -> &'static str {
    match l {
        Label::Escalated => "escalated",
        Label::NotEscalated => "not_escalated",
    }
}

/// Pair every escalated conversation with up to `max_matches_per_positive`
/// non-escalated conversations of exactly the same utterance count, sampled
/// without replacement across the whole run.
///
/// Positives are processed in ascending id order and pool buckets are sorted
/// by id before sampling, so the result depends only on the inputs and the
/// seed, not on input order. Shortfalls are logged and reported, never
/// errors.
pub fn match_by_length(
    escalated: &[Conversation],
    pool: &[Conversation],
    cfg: &MatchConfig,
) -> Result<(Vec<Conversation>, MatchReport), DatasetError> {
    cfg.validate()?;
    check_unique_ids(escalated.iter().chain(pool.iter()))?;
    for c in escalated {
        require_label(c, Label::Escalated)?;
    }
    for c in pool {
        require_label(c, Label::NotEscalated)?;
    }

    let mut buckets: HashMap<usize, Vec<&Conversation>> = HashMap::new();
    for c in pool {
        buckets.entry(c.utterances.len()).or_default().push(c);
    }
    for b in buckets.values_mut() {
        b.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut positives: Vec<&Conversation> = escalated.iter().collect();
    positives.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rng = rng::seeded(cfg.seed);
    let mut out: Vec<Conversation> = positives.iter().map(|&c| c.clone()).collect();
    let mut report = MatchReport::default();
    for p in &positives {
        let want = cfg.max_matches_per_positive;
        let mut got = 0;
        if let Some(b) = buckets.get_mut(&p.utterances.len()) {
            got = want.min(b.len());
            for _ in 0..got {
                let i = rng.random_range(0..b.len());
                out.push(b.swap_remove(i).clone());
            }
        }
        report.matched += got;
        if got < want {
            log::warn!(
                "positive {} (length {}) matched {got}/{want} negatives",
                p.id,
                p.utterances.len()
            );
            report.deficits.insert(p.id.clone(), want - got);
        }
    }
    Ok((out, report))
}

/// Per-class conversation counts for one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub escalated: usize,
    pub not_escalated: usize,
}

/// How large each split should be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    /// Absolute per-class counts. The three splits must cover each class
    /// exactly.
    Counts { train: ClassCounts, validation: ClassCounts, test: ClassCounts },
    /// Per-class fractions summing to 1. Counts are apportioned by largest
    /// remainder so every conversation lands in exactly one split.
    Fractions { train: f64, validation: f64, test: f64 },
}

/// Stratified split request: sizes plus the shuffling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { sizes: SplitSizes::Fractions { train: 0.6, validation: 0.2, test: 0.2 }, seed: 0 }
    }
}

/// The three disjoint parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Conversation>,
    pub validation: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

impl Splits {
    pub fn manifest(&self) -> Vec<(String, SplitName)> {
        let mut rows = Vec::new();
        for (name, part) in
            [(SplitName::Train, &self.train), (SplitName::Validation, &self.validation), (SplitName::Test, &self.test)]
        {
            rows.extend(part.iter().map(|c| (c.id.clone(), name)));
        }
        rows
    }
}

/// Which split a conversation was assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split name {other:?}")),
        }
    }
}

/// Apportion `n` items over three fractions by largest remainder; ties go to
/// the earlier split.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in &by_remainder {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

impl SplitSizes {
    /// Per-split (escalated, not_escalated) counts for the class totals at
    /// hand, or an error naming the class the spec cannot cover.
    fn resolve(&self, n_pos: usize, n_neg: usize) -> Result<[(usize, usize); 3], DatasetError> {
        match self {
            SplitSizes::Counts { train, validation, test } => {
                for (class, requested, available) in [
                    ("escalated", train.escalated + validation.escalated + test.escalated, n_pos),
                    (
                        "not_escalated",
                        train.not_escalated + validation.not_escalated + test.not_escalated,
                        n_neg,
                    ),
                ] {
                    if requested != available {
                        return Err(DatasetError::CountsMismatch { class, requested, available });
                    }
                }
                Ok([
                    (train.escalated, train.not_escalated),
                    (validation.escalated, validation.not_escalated),
                    (test.escalated, test.not_escalated),
                ])
            }
            SplitSizes::Fractions { train, validation, test } => {
                let fs = [*train, *validation, *test];
                if fs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(DatasetError::BadConfig(format!(
                        "split fractions {fs:?} must lie in [0,1] and sum to 1"
                    )));
                }
                let p = apportion(n_pos, fs);
                let n = apportion(n_neg, fs);
                Ok([(p[0], n[0]), (p[1], n[1]), (p[2], n[2])])
            }
        }
    }
}

/// Stratified uniform split without replacement: shuffle each class under
/// the seed, then deal out the requested counts to train, validation, and
/// test in that order.
pub fn split(dataset: &[Conversation], spec: &SplitSpec) -> Result<Splits, DatasetError> {
    check_unique_ids(dataset.iter())?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for c in dataset {
        match c.label {
            Some(Label::Escalated) => pos.push(c),
            Some(Label::NotEscalated) => neg.push(c),
            None => return Err(DatasetError::Unlabeled { id: c.id.clone() }),
        }
    }
    pos.sort_by(|a, b| a.id.cmp(&b.id));
    neg.sort_by(|a, b| a.id.cmp(&b.id));
    let counts = spec.sizes.resolve(pos.len(), neg.len())?;

    let mut rng = rng::seeded(spec.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut pos = pos.into_iter();
    let mut neg = neg.into_iter();
    let mut parts: Vec<Vec<Conversation>> = Vec::with_capacity(3);
    for (np, nn) in counts {
        let mut part: Vec<Conversation> = Vec::with_capacity(np + nn);
        part.extend(pos.by_ref().take(np).cloned());
        part.extend(neg.by_ref().take(nn).cloned());
        parts.push(part);
    }
    let mut parts = parts.into_iter();
    Ok(Splits {
        train: parts.next().unwrap(),
        validation: parts.next().unwrap(),
        test: parts.next().unwrap(),
    })
}

/// Median utterance count of a set of conversations (mean of the middle two
/// when the count is even). Returns 0 for an empty set.
pub fn median_length(cs: &[Conversation]) -> f64 {
    if cs.is_empty() {
        return 0.0;
    }
    let mut lens: Vec<usize> = cs.iter().map(|c| c.utterances.len()).collect();
    lens.sort_unstable();
    let n = lens.len();
    if n % 2 == 1 {
        lens[n / 2] as f64
    } else {
        (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
    }
}

/// Write the split assignment as CSV (`conversation_id,split`), preceded by
/// `#` metadata lines.
pub fn save_manifest(
    path: impl AsRef<Path>,
    splits: &Splits,
    header: &[String],
) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for h in header {
        writeln!(buf, "# {h}")?;
    }
    writeln!(buf, "conversation_id,split")?;
    for (id, name) in splits.manifest() {
        writeln!(buf, "{id},{name}")?;
    }
    crate::ioutil::write_atomic(path, &buf)?;
    Ok(())
}

/// Read a manifest written by [`save_manifest`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, SplitName)>, DatasetError> {
    let content = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != "conversation_id,split" {
                return Err(DatasetError::ManifestParse {
                    line: lineno,
                    message: format!("expected header row, found {line:?}"),
                });
            }
            saw_header = true;
            continue;
        }
        let (id, name) = line.rsplit_once(',').ok_or_else(|| DatasetError::ManifestParse {
            line: lineno,
            message: "expected conversation_id,split".into(),
        })?;
        let name = SplitName::from_str(name)
            .map_err(|message| DatasetError::ManifestParse { line: lineno, message })?;
        rows.push((id.to_string(), name));
    }
    Ok(rows)
}

/// Re-create splits from a manifest. The manifest and the dataset must name
/// exactly the same conversations.
pub fn apply_manifest(
    dataset: &[Conversation],
    manifest: &[(String, SplitName)],
) -> Result<Splits, DatasetError> {
    check_unique_ids(dataset.iter())?;
    let mut assignment: HashMap<&str, SplitName> = HashMap::new();
    for (id, name) in manifest {
        if assignment.insert(id.as_str(), *name).is_some() {
            return Err(DatasetError::DuplicateId { id: id.clone() });
        }
    }
    let ids: HashSet<&str> = dataset.iter().map(|c| c.id.as_str()).collect();
    if let Some((id, _)) = manifest.iter().find(|(id, _)| !ids.contains(id.as_str())) {
        return Err(DatasetError::ManifestUnknown { id: id.clone() });
    }
    let mut splits = Splits { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for c in dataset {
        match assignment.get(c.id.as_str()) {
            Some(SplitName::Train) => splits.train.push(c.clone()),
            Some(SplitName::Validation) => splits.validation.push(c.clone()),
            Some(SplitName::Test) => splits.test.push(c.clone()),
            None => return Err(DatasetError::ManifestMissing { id: c.id.clone() }),
        }
    }
    Ok(splits)
}

/// Errors from matching, splitting, and manifest IO.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("conversation {id} is unlabeled")]
    Unlabeled { id: String },
    #[error("conversation {id} is not labeled {expected}")]
    WrongClass { id: String, expected: &'static str },
    #[error("duplicate conversation id {id}")]
    DuplicateId { id: String },
    #[error("split spec requests {requested} {class} conversations but the dataset has {available}")]
    CountsMismatch { class: &'static str, requested: usize, available: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("conversation {id} is missing from the split manifest")]
    ManifestMissing { id: String },
    #[error("manifest names unknown conversation {id}")]
    ManifestUnknown { id: String },
}
