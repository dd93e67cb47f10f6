//! Metrics and evaluation protocols: PR-AUC, break-even F1, a
//! distribution-aware random baseline, paired permutation tests, and
//! early-estimation bucket curves.
//!
//! Ranking metrics group tied scores and evaluate precision/recall at group
//! boundaries, so results are deterministic regardless of input order.
//! PR-AUC uses the average-precision formulation rather than trapezoidal
//! interpolation, which is invalid in PR space.

use crate::corpus::Conversation;
use crate::rng;
use rand::Rng;
use thiserror::Error;

/// Predictions over a labeled set: parallel ids, true labels, and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub ids: Vec<String>,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoredSet {
    pub fn new(ids: Vec<String>, labels: Vec<bool>, scores: Vec<f64>) -> Result<ScoredSet, EvalError> {
        if ids.len() != labels.len() || ids.len() != scores.len() {
            return Err(EvalError::LengthMismatch {
                ids: ids.len(),
                labels: labels.len(),
                scores: scores.len(),
            });
        }
        for (id, &s) in ids.iter().zip(&scores) {
            if !(0.0..=1.0).contains(&s) || s.is_nan() {
                return Err(EvalError::ScoreOutOfRange { id: id.clone(), score: s });
            }
        }
        Ok(ScoredSet { ids, labels, scores })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn require_both_classes(&self) -> Result<(), EvalError> {
        let pos = self.labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == self.len() {
            return Err(EvalError::SingleClass { positives: pos, total: self.len() });
        }
        Ok(())
    }

    /// Indices sorted by score descending, tied scores kept adjacent with a
    /// stable id order inside the tie.
    fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .expect("scores are not NaN")
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        idx
    }

    /// (true positives, false positives) after each tie group of the
    /// descending ranking.
    fn group_counts(&self) -> Vec<(usize, usize)> {
        let ranking = self.ranking();
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < ranking.len() {
            let score = self.scores[ranking[i]];
            while i < ranking.len() && self.scores[ranking[i]] == score {
                if self.labels[ranking[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            out.push((tp, fp));
        }
        out
    }
}

/// Area under the precision-recall curve, as average precision over tie
/// groups: `AP = Σ ΔR·P` with precision and recall read at group boundaries.
pub fn pr_auc(s: &ScoredSet) -> Result<f64, EvalError> {
    s.require_both_classes()?;
    let total_pos = s.labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_tp = 0.0;
    for (tp, fp) in s.group_counts() {
        let (tp, fp) = (tp as f64, fp as f64);
        ap += (tp - prev_tp) / total_pos * (tp / (tp + fp));
        prev_tp = tp;
    }
    Ok(ap)
}

/// F1 at the operating point where precision and recall are closest
/// (ties broken toward higher F1), sweeping every distinct score threshold.
pub fn break_even_f1(s: &ScoredSet) -> Result<f64, EvalError> {
    s.require_both_classes()?;
    let total_pos = s.labels.iter().filter(|&&l| l).count() as f64;
    let mut best: Option<(f64, f64)> = None; // (|P-R|, F1)
    for (tp, fp) in s.group_counts() {
        let (tp, fp) = (tp as f64, fp as f64);
        let precision = tp / (tp + fp);
        let recall = tp / total_pos;
        let gap = (precision - recall).abs();
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let better = match best {
            None => true,
            Some((best_gap, best_f1)) => gap < best_gap || (gap == best_gap && f1 > best_f1),
        };
        if better {
            best = Some((gap, f1));
        }
    }
    Ok(best.expect("non-empty scored set").1)
}

/// Scores drawn from the training class distribution: with probability equal
/// to the training positive prevalence an item scores at the top of the
/// range, otherwise at the bottom, with a sub-1e-6 jitter inside each band
/// so rankings are fully ordered yet scores stay within [0,1].
pub fn random_baseline(
    train_labels: &[bool],
    test: &[(String, bool)],
    seed: u64,
) -> ScoredSet {
    let prevalence = if train_labels.is_empty() {
        0.0
    } else {
        train_labels.iter().filter(|&&l| l).count() as f64 / train_labels.len() as f64
    };
    let mut rng = rng::seeded(seed);
    let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (id, label) in test {
        let base = if rng.random::<f64>() < prevalence { 1.0 } else { 0.0 };
        let jitter = rng.random::<f64>() * 1e-6;
        ids.push(id.clone());
        labels.push(*label);
        scores.push(base * (1.0 - 1e-6) + jitter);
    }
    ScoredSet { ids, labels, scores }
}

/// Paired randomized permutation test on any metric.
///
/// The observed statistic is `metric(a) − metric(b)`. Each iteration flips
/// the two systems' scores per conversation with probability ½ and
/// recomputes the statistic; the p-value is
/// `(1 + #{|Δ*| ≥ |Δ|}) / (iterations + 1)`.
pub fn permutation_test(
    a: &ScoredSet,
    b: &ScoredSet,
    metric: impl Fn(&ScoredSet) -> Result<f64, EvalError>,
    iterations: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if iterations == 0 {
        return Err(EvalError::NoIterations);
    }
    // Align b to a's id order; ids and labels must agree.
    let mut b_index = std::collections::HashMap::with_capacity(b.len());
    for (j, id) in b.ids.iter().enumerate() {
        b_index.insert(id.as_str(), j);
    }
    if a.len() != b.len() {
        return Err(EvalError::IdMismatch);
    }
    let mut b_scores = vec![0.0; a.len()];
    for (i, id) in a.ids.iter().enumerate() {
        let &j = b_index.get(id.as_str()).ok_or(EvalError::IdMismatch)?;
        if a.labels[i] != b.labels[j] {
            return Err(EvalError::IdMismatch);
        }
        b_scores[i] = b.scores[j];
    }

    let aligned_b =
        ScoredSet { ids: a.ids.clone(), labels: a.labels.clone(), scores: b_scores };
    let observed = metric(a)? - metric(&aligned_b)?;

    let mut rng = rng::seeded(seed);
    let mut hits = 0;
    let mut swapped_a = a.clone();
    let mut swapped_b = aligned_b.clone();
    for _ in 0..iterations {
        for i in 0..a.len() {
            if rng.random::<bool>() {
                swapped_a.scores[i] = aligned_b.scores[i];
                swapped_b.scores[i] = a.scores[i];
            } else {
                swapped_a.scores[i] = a.scores[i];
                swapped_b.scores[i] = aligned_b.scores[i];
            }
        }
        let delta = metric(&swapped_a)? - metric(&swapped_b)?;
        if delta.abs() >= observed.abs() {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (iterations + 1) as f64)
}

/// One point of an early-estimation curve.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketPoint {
    /// Fraction of each conversation observed, in {0.1, ..., 1.0}.
    pub fraction: f64,
    pub pr_auc: f64,
    pub mean_uncertainty: f64,
}

/// PR-AUC and mean predictive uncertainty per observed-prefix fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketCurve {
    pub points: Vec<BucketPoint>,
}

/// Evaluate a scorer on chronological prefixes of each conversation.
///
/// Only conversations with more than 10 utterances qualify. For each
/// fraction `f = i/10`, the scorer sees the first `⌈f·n⌉` utterances and
/// must return `(mean score, uncertainty)`; the bucket records the PR-AUC of
/// the means and the average uncertainty.
pub fn early_estimation(
    conversations: &[Conversation],
    mut score_prefix: impl FnMut(&Conversation) -> (f64, f64),
) -> Result<BucketCurve, EvalError> {
    let mut qualifying = Vec::new();
    for c in conversations {
        if c.utterances.len() <= 10 {
            continue;
        }
        let label = c.label.ok_or_else(|| EvalError::Unlabeled { id: c.id.clone() })?;
        qualifying.push((c, label.is_positive()));
    }
    if qualifying.is_empty() {
        return Err(EvalError::NoQualifyingConversations);
    }

    let mut points = Vec::with_capacity(10);
    for tenth in 1..=10u32 {
        let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        let mut uncertainty_sum = 0.0;
        for &(c, label) in &qualifying {
            // Integer ceiling of f·n, avoiding float rounding at exact tenths.
            let n = c.utterances.len();
            let prefix_len = (tenth as usize * n).div_ceil(10);
            let (mean, std) = score_prefix(&c.prefix(prefix_len));
            ids.push(c.id.clone());
            labels.push(label);
            scores.push(mean);
            uncertainty_sum += std;
        }
        let set = ScoredSet::new(ids, labels, scores)?;
        points.push(BucketPoint {
            fraction: tenth as f64 / 10.0,
            pr_auc: pr_auc(&set)?,
            mean_uncertainty: uncertainty_sum / qualifying.len() as f64,
        });
    }
    Ok(BucketCurve { points })
}

/// Errors from metric computation and evaluation protocols.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("parallel lists disagree: {ids} ids, {labels} labels, {scores} scores")]
    LengthMismatch { ids: usize, labels: usize, scores: usize },
    #[error("score {score} for {id} outside [0,1]")]
    ScoreOutOfRange { id: String, score: f64 },
    #[error("ranking metrics need both classes; got {positives} positives of {total}")]
    SingleClass { positives: usize, total: usize },
    #[error("the two scored sets must cover the same ids with the same labels")]
    IdMismatch,
    #[error("permutation test needs at least one iteration")]
    NoIterations,
    #[error("conversation {id} is unlabeled")]
    Unlabeled { id: String },
    #[error("no labeled conversations with more than 10 utterances")]
    NoQualifyingConversations,
}
