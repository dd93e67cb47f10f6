//! Synthetic benchmark corpus with planted escalation signals.
//!
//! Real dispute corpora cannot ship with the code, so the benchmark suite
//! and the end-to-end examples run on generated conversations whose
//! escalation signal is planted by construction. Three signals are layered,
//! each chosen to be visible to some readers and invisible to others:
//!
//! * **Marker drift.** Every conversation draws a marker density and a
//!   certainty share from the same per-class distributions, so the *mean*
//!   hedging and certainty counts overlap heavily between classes. In most
//!   escalated conversations (85%) the certainty share stays on its baseline
//!   until about 65% of the way through, then ramps up sharply: hedges give
//!   way to certainty terms. The trend — not the level — carries the label,
//!   and it is concentrated late, so score trajectories over growing
//!   prefixes only separate near the end. The remaining 15% never drift,
//!   which caps how separable the classes are on this signal alone.
//! * **Boundary bigram.** Half of the escalated conversations contain the
//!   two-token sequence "must revert" inside a single late utterance; the
//!   same share of matched conversations contain the same two tokens, but
//!   split across an utterance boundary ("... must" / "revert ..."). Token
//!   counts and the flattened token stream are identical either way; only a
//!   reader that respects utterance boundaries can tell the classes apart.
//! * **Edit-summary marker.** Both classes carry edit summaries, but only in
//!   escalated conversations do the summaries say "undo"; matched
//!   conversations put "undo" in ordinary talk posts at the same rate. The
//!   word alone is uninformative — what separates the classes is the
//!   conjunction of the word and the utterance being an edit summary.
//!
//! Marker words are drawn from the builtin hedging and certainty lexicons so
//! the lexicon-based features see the drift too. Filler text sprinkles
//! politeness, sentiment, and pronoun words at equal rates in both classes,
//! which keeps every feature family populated without leaking the label.

use crate::corpus::{Conversation, CorpusError, Label, Utterance, UtteranceKind};
use crate::models::{EmbeddingTable, ModelError};
use crate::rng::{seeded, SeededRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

/// Hedging terms; a subset of the builtin hedges lexicon (single tokens
/// only, so one token is one marker).
const HEDGES: &[&str] = &[
    "maybe", "perhaps", "possibly", "might", "somewhat", "apparently", "presumably", "probably",
    "likely", "roughly", "seems", "unsure",
];

/// Certainty terms; a subset of the builtin certainty lexicon. "must" is
/// deliberately excluded here — it is reserved for the boundary bigram so
/// its count stays matched across classes.
const CERTAINTY: &[&str] = &[
    "certainly",
    "definitely",
    "obviously",
    "clearly",
    "undoubtedly",
    "surely",
    "absolutely",
    "plainly",
    "evidently",
    "indeed",
    "always",
    "never",
];

/// Neutral filler with politeness, sentiment, and pronoun words mixed in at
/// equal rates for both classes.
const FILLER: &[&str] = &[
    "the", "page", "article", "section", "discussion", "source", "edit", "text", "link", "change",
    "note", "topic", "this", "that", "it", "we", "you", "i", "they", "good", "bad", "wrong",
    "great", "thanks", "please", "sorry", "agree",
];

const AUTHORS: &[&str] = &["alice", "bob", "carol", "dan", "erin", "frank"];

/// Fraction of the conversation after which the certainty ramp starts.
const RAMP_START: f64 = 0.65;

/// Certainty share the ramp climbs toward.
const RAMP_PEAK: f64 = 0.95;

/// Probability an escalated conversation actually drifts. The remainder stay
/// on their baseline, which caps how separable the classes are on the drift
/// alone: no single signal makes the task trivial.
const DRIFT_RATE: f64 = 0.85;

/// Probability a conversation carries the boundary bigram (in its adjacent
/// or split form, by class).
const BIGRAM_RATE: f64 = 0.5;

/// Probability an edit summary comes with the "undo" marker.
const UNDO_RATE: f64 = 0.9;

/// Edits (and the matching talk-post "undo" mentions) land in the last 40%
/// of the conversation, keeping all planted signals late.
const EDIT_WINDOW_START: f64 = 0.6;

/// Shape of the generated corpus. The defaults give 2002 conversations at an
/// exact 10:1 class imbalance, every conversation long enough for prefix
/// curves over ten buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Total conversations; one in `negatives_per_positive + 1` escalates.
    pub conversations: usize,
    pub negatives_per_positive: usize,
    pub min_talk_posts: usize,
    pub max_talk_posts: usize,
    pub min_tokens_per_post: usize,
    pub max_tokens_per_post: usize,
    /// Interleave 2–3 edit summaries per conversation.
    pub edit_summaries: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            conversations: 2002,
            negatives_per_positive: 10,
            min_talk_posts: 12,
            max_talk_posts: 16,
            min_tokens_per_post: 6,
            max_tokens_per_post: 10,
            edit_summaries: true,
            seed: 0,
        }
    }
}

fn pick<'a>(rng: &mut SeededRng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// One marker-or-filler token. `q` is the probability a marker is a
/// certainty term rather than a hedge.
fn draw_token(rng: &mut SeededRng, marker_rate: f64, q: f64) -> &'static str {
    if rng.random::<f64>() < marker_rate {
        if rng.random::<f64>() < q {
            pick(rng, CERTAINTY)
        } else {
            pick(rng, HEDGES)
        }
    } else {
        pick(rng, FILLER)
    }
}

/// Generate one conversation. Talk post `u` gets timestamp `10 * u`; edit
/// summaries land strictly between talk posts, authored by participants, so
/// a participant/window merge keeps all of them.
fn generate_conversation(
    rng: &mut SeededRng,
    id: &str,
    positive: bool,
    cfg: &SynthConfig,
) -> Result<Conversation, CorpusError> {
    let n = rng.random_range(cfg.min_talk_posts..=cfg.max_talk_posts);
    let n_participants = rng.random_range(2..=3);
    let first = rng.random_range(0..AUTHORS.len());
    let participants: Vec<&str> =
        (0..n_participants).map(|k| AUTHORS[(first + k) % AUTHORS.len()]).collect();

    // Per-conversation marker statistics, drawn from the same distribution
    // for both classes: the levels carry (almost) no label information.
    let marker_rate = rng.random_range(0.12..0.30);
    let q0 = rng.random_range(0.20..0.50);
    let drifts = positive && rng.random::<f64>() < DRIFT_RATE;

    let mut posts: Vec<Vec<String>> = Vec::with_capacity(n);
    for u in 0..n {
        let f = u as f64 / (n - 1) as f64;
        let ramp = ((f - RAMP_START) / (1.0 - RAMP_START)).clamp(0.0, 1.0);
        let q = if drifts { q0 + (RAMP_PEAK - q0) * ramp } else { q0 };
        let len = rng.random_range(cfg.min_tokens_per_post..=cfg.max_tokens_per_post);
        posts.push((0..len).map(|_| draw_token(rng, marker_rate, q).to_string()).collect());
    }

    // Edit summaries, plus the "undo" marker: escalated conversations say it
    // in edits, matched conversations say it in talk posts, at the same
    // rate. Edits reuse the talk filler pool so the text alone does not give
    // away which utterances are edits.
    let edit_window = ((n as f64 * EDIT_WINDOW_START) as usize).clamp(1, n - 2);
    let n_edits = if cfg.edit_summaries { rng.random_range(2..=3) } else { 0 };
    let mut edits: Vec<(usize, Vec<String>)> = Vec::with_capacity(n_edits);
    for _ in 0..n_edits {
        let after = rng.random_range(edit_window..n - 1);
        let len = rng.random_range(5..=8);
        let mut text: Vec<String> = (0..len).map(|_| pick(rng, FILLER).to_string()).collect();
        if rng.random::<f64>() < UNDO_RATE {
            if positive {
                let pos = rng.random_range(0..=text.len());
                text.insert(pos, "undo".into());
            } else {
                let post = rng.random_range(edit_window..n);
                let pos = rng.random_range(0..=posts[post].len());
                posts[post].insert(pos, "undo".into());
            }
        }
        edits.push((after, text));
    }

    // Boundary bigram: same two tokens in both classes, adjacent within one
    // late utterance when escalated, split across the boundary otherwise.
    // Planted last so nothing else can slip between the boundary tokens.
    if rng.random::<f64>() < BIGRAM_RATE {
        let star = n - 2;
        if positive {
            let pos = rng.random_range(0..=posts[star].len());
            posts[star].insert(pos, "revert".into());
            posts[star].insert(pos, "must".into());
        } else {
            posts[star].push("must".into());
            posts[star + 1].insert(0, "revert".into());
        }
    }

    let mut utterances = Vec::with_capacity(n + n_edits);
    for (u, tokens) in posts.iter().enumerate() {
        let f = u as f64 / (n - 1) as f64;
        let ramp = ((f - RAMP_START) / (1.0 - RAMP_START)).clamp(0.0, 1.0);
        let base = 0.03 + 0.25 * rng.random::<f64>();
        let tox = if positive { base + 0.25 * ramp * rng.random::<f64>() } else { base };
        utterances.push(Utterance {
            id: format!("{id}-t{u}"),
            author: participants[u % participants.len()].to_string(),
            timestamp: 10 * u as i64,
            text: tokens.join(" "),
            kind: UtteranceKind::TalkPost,
            toxicity: Some(tox.min(0.95)),
            severe_toxicity: Some((tox * 0.3).min(0.95)),
        });
    }
    for (e, (after, tokens)) in edits.into_iter().enumerate() {
        utterances.push(Utterance {
            id: format!("{id}-e{e}"),
            author: participants[rng.random_range(0..participants.len())].to_string(),
            timestamp: 10 * after as i64 + rng.random_range(1..=9),
            text: tokens.join(" "),
            kind: UtteranceKind::EditSummary,
            toxicity: Some(0.02),
            severe_toxicity: Some(0.01),
        });
    }

    let label = if positive { Label::Escalated } else { Label::NotEscalated };
    Conversation::new(id.to_string(), format!("Talk:Synth {id}"), utterances, Some(label))
}

/// Generate the corpus. Conversation `i` escalates exactly when `i` is a
/// multiple of `negatives_per_positive + 1`, so the class ratio is exact and
/// the two classes interleave. The same config and seed always reproduce the
/// same corpus.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Conversation>, CorpusError> {
    assert!(cfg.min_talk_posts >= 3, "conversations need room for the late-signal window");
    assert!(cfg.min_talk_posts <= cfg.max_talk_posts && cfg.min_tokens_per_post <= cfg.max_tokens_per_post);
    let mut rng = seeded(cfg.seed);
    let mut out = Vec::with_capacity(cfg.conversations);
    for i in 0..cfg.conversations {
        let positive = i % (cfg.negatives_per_positive + 1) == 0;
        let id = format!("synth-{i:05}");
        out.push(generate_conversation(&mut rng, &id, positive, cfg)?);
    }
    Ok(out)
}

/// Every token the generator can emit, sorted and deduplicated.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v: BTreeSet<&'static str> = BTreeSet::new();
    for pool in [HEDGES, CERTAINTY, FILLER] {
        v.extend(pool.iter().copied());
    }
    v.extend(["must", "revert", "undo"]);
    v.into_iter().collect()
}

/// Deterministic random embeddings covering [`vocabulary`].
pub fn embedding_pairs(dimension: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = seeded(seed);
    vocabulary()
        .into_iter()
        .map(|w| (w.to_string(), (0..dimension).map(|_| rng.random_range(-0.5..0.5)).collect()))
        .collect()
}

/// The embeddings as a ready-to-use lookup table.
pub fn table(dimension: usize, seed: u64) -> Result<EmbeddingTable, ModelError> {
    EmbeddingTable::from_pairs(embedding_pairs(dimension, seed), dimension)
}

/// Write the embeddings in the `token v1..vd` text format.
pub fn write_embeddings(path: impl AsRef<Path>, dimension: usize, seed: u64) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for (token, vector) in embedding_pairs(dimension, seed) {
        write!(buf, "{token}")?;
        for v in vector {
            write!(buf, " {v}")?;
        }
        writeln!(buf)?;
    }
    crate::ioutil::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::load_embeddings;
    use crate::text::tokenize;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig { conversations: 220, ..SynthConfig::default() }
    }

    fn talk_posts(c: &Conversation) -> Vec<&Utterance> {
        c.utterances.iter().filter(|u| u.kind == UtteranceKind::TalkPost).collect()
    }

    fn marker_fraction(tokens: &[String], pool: &[&str]) -> f64 {
        let set: HashSet<&str> = pool.iter().copied().collect();
        let hits = tokens.iter().filter(|t| set.contains(t.as_str())).count();
        hits as f64 / tokens.len() as f64
    }

    #[test]
    fn corpus_shape_ratio_and_determinism() {
        let cfg = small();
        let corpus = generate(&cfg).unwrap();
        assert_eq!(corpus.len(), 220);
        let positives =
            corpus.iter().filter(|c| c.label == Some(Label::Escalated)).count();
        assert_eq!(positives, 20);
        for c in &corpus {
            let talk = talk_posts(c);
            assert!(talk.len() > 10, "{} has only {} talk posts", c.id, talk.len());
            assert!(c.utterances.iter().any(|u| u.kind == UtteranceKind::EditSummary));
        }
        let again = generate(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&corpus).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        let other = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(
            serde_json::to_string(&corpus).unwrap(),
            serde_json::to_string(&other).unwrap()
        );
    }

    #[test]
    fn early_prefixes_are_class_blind_but_late_certainty_separates() {
        let corpus = generate(&SynthConfig { conversations: 1100, ..SynthConfig::default() })
            .unwrap();
        // Average certainty fraction over the first 60% and last 20% of talk
        // posts, per class.
        let mut stats = [[0.0f64; 2]; 2]; // [class][early, late]
        let mut counts = [[0usize; 2]; 2];
        for c in &corpus {
            let talk = talk_posts(c);
            let n = talk.len();
            let class = usize::from(c.label == Some(Label::Escalated));
            for (u, post) in talk.iter().enumerate() {
                let f = u as f64 / (n - 1) as f64;
                let tokens = tokenize(&post.text);
                let frac = marker_fraction(&tokens, CERTAINTY);
                if f <= 0.6 {
                    stats[class][0] += frac;
                    counts[class][0] += 1;
                } else if f >= 0.8 {
                    stats[class][1] += frac;
                    counts[class][1] += 1;
                }
            }
        }
        let mean = |c: usize, w: usize| stats[c][w] / counts[c][w] as f64;
        let early_gap = (mean(1, 0) - mean(0, 0)).abs();
        assert!(early_gap < 0.02, "early certainty fractions differ: {early_gap}");
        let late_gap = mean(1, 1) - mean(0, 1);
        assert!(late_gap > 0.04, "late certainty should rise for positives: {late_gap}");
    }

    #[test]
    fn boundary_bigram_is_adjacent_only_within_escalated_utterances() {
        let corpus = generate(&SynthConfig { conversations: 880, ..SynthConfig::default() })
            .unwrap();
        let mut adjacent = [0usize; 2];
        let mut split_form = [0usize; 2];
        let mut convs = [0usize; 2];
        for c in &corpus {
            let class = usize::from(c.label == Some(Label::Escalated));
            convs[class] += 1;
            let talk = talk_posts(c);
            let within: usize = talk
                .iter()
                .map(|p| {
                    let t = tokenize(&p.text);
                    t.windows(2).filter(|w| w[0] == "must" && w[1] == "revert").count()
                })
                .sum();
            // The split form: "must" ends one post, "revert" starts the next.
            let split = talk.windows(2).any(|w| {
                tokenize(&w[0].text).last().map(String::as_str) == Some("must")
                    && tokenize(&w[1].text).first().map(String::as_str) == Some("revert")
            });
            assert!(within <= 1);
            adjacent[class] += within;
            split_form[class] += usize::from(split);
            if class == 1 {
                assert!(!split, "{} has the split form", c.id);
            } else {
                assert_eq!(within, 0, "{} leaks the adjacent bigram", c.id);
            }
        }
        // Roughly half of each class carries its variant of the bigram.
        let pos_rate = adjacent[1] as f64 / convs[1] as f64;
        let neg_rate = split_form[0] as f64 / convs[0] as f64;
        assert!((0.35..0.65).contains(&pos_rate), "adjacent rate {pos_rate}");
        assert!((0.35..0.65).contains(&neg_rate), "split rate {neg_rate}");
    }

    #[test]
    fn undo_lives_in_edits_for_positives_and_talk_for_negatives() {
        let corpus = generate(&SynthConfig { conversations: 550, ..SynthConfig::default() })
            .unwrap();
        let mut per_class = [0usize; 2];
        let mut convs = [0usize; 2];
        for c in &corpus {
            let class = usize::from(c.label == Some(Label::Escalated));
            convs[class] += 1;
            for u in &c.utterances {
                let hits = tokenize(&u.text).iter().filter(|t| *t == "undo").count();
                per_class[class] += hits;
                if hits > 0 {
                    let expected = if class == 1 {
                        UtteranceKind::EditSummary
                    } else {
                        UtteranceKind::TalkPost
                    };
                    assert_eq!(u.kind, expected, "undo in the wrong place in {}", c.id);
                }
            }
        }
        let rates = [per_class[0] as f64 / convs[0] as f64, per_class[1] as f64 / convs[1] as f64];
        assert!(
            (rates[0] - rates[1]).abs() < 0.4,
            "undo rates should match across classes: {rates:?}"
        );
    }

    #[test]
    fn edits_are_mergeable_and_within_the_talk_window() {
        let corpus = generate(&small()).unwrap();
        for c in &corpus {
            let talk = talk_posts(c);
            let participants: HashSet<&str> =
                talk.iter().map(|u| u.author.as_str()).collect();
            let (first, last) = (talk[0].timestamp, talk[talk.len() - 1].timestamp);
            for u in c.utterances.iter().filter(|u| u.kind == UtteranceKind::EditSummary) {
                assert!(participants.contains(u.author.as_str()));
                assert!(u.timestamp > first && u.timestamp < last);
            }
        }
    }

    #[test]
    fn embeddings_cover_the_vocabulary_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.vec");
        write_embeddings(&path, 8, 13).unwrap();
        let loaded = load_embeddings(&path, 8).unwrap();
        assert_eq!(loaded.len(), vocabulary().len());
        let direct = table(8, 13).unwrap();
        for word in vocabulary() {
            let (a, b) = (loaded.row_of(word), direct.row_of(word));
            assert!(a.is_some() && b.is_some(), "{word} missing");
            assert_eq!(loaded.vector(a.unwrap()), direct.vector(b.unwrap()), "mismatch for {word}");
        }
        // Every token the generator emits has a vector: no UNK at train time.
        let corpus = generate(&small()).unwrap();
        for c in corpus.iter().take(30) {
            for u in &c.utterances {
                for t in tokenize(&u.text) {
                    assert!(loaded.row_of(&t).is_some(), "no embedding for {t:?}");
                }
            }
        }
    }
}
