use super::*;
use crate::corpus::{Label, Utterance, UtteranceKind};
use approx::assert_relative_eq;
use proptest::prelude::*;

fn conv(parts: &[(&str, i64, &str)]) -> Conversation {
    let utterances = parts
        .iter()
        .enumerate()
        .map(|(i, (author, ts, text))| Utterance {
            id: format!("u{i}"),
            author: author.to_string(),
            timestamp: *ts,
            text: text.to_string(),
            kind: UtteranceKind::TalkPost,
            toxicity: None,
            severe_toxicity: None,
        })
        .collect();
    Conversation::new("c1", "Talk:P", utterances, Some(Label::Escalated)).unwrap()
}

fn single(text: &str) -> Conversation {
    conv(&[("A", 0, text)])
}

#[test]
fn lexicon_parses_categories_and_positions() {
    let lex = Lexicon::parse(
        "demo",
        "# comment\n[anywhere]\nfoo\na long phrase\n\n[starts] @start\nbar\n",
    )
    .unwrap();
    assert_eq!(lex.categories.len(), 2);
    assert_eq!(lex.categories[0].position, Position::Anywhere);
    assert_eq!(lex.categories[1].position, Position::UtteranceStart);
    // Longest pattern first.
    assert_eq!(lex.categories[0].patterns[0], vec!["a", "long", "phrase"]);
}

#[test]
fn lexicon_rejects_bad_input() {
    assert!(matches!(
        Lexicon::parse("demo", "orphan pattern\n"),
        Err(FeatureError::LexiconParse { line: 1, .. })
    ));
    assert!(matches!(
        Lexicon::parse("demo", "[a]\nx\n[a]\ny\n"),
        Err(FeatureError::LexiconParse { line: 3, .. })
    ));
    assert!(matches!(
        Lexicon::parse("demo", "[a]\nNotLower\n"),
        Err(FeatureError::LexiconParse { line: 2, .. })
    ));
    assert!(matches!(
        Lexicon::parse("demo", "[a] @nonsense\n"),
        Err(FeatureError::LexiconParse { line: 1, .. })
    ));
}

#[test]
fn hedge_counts_match_twice() {
    let lex = Lexicon::parse("hedges", "[hedging_terms]\nmaybe\nperhaps\n").unwrap();
    let fm = extract_lexicon_features(&single("maybe we could perhaps wait"), &lex, Normalize::RawCount);
    assert_eq!(fm.column("hedging_terms").unwrap(), vec![2.0]);
}

#[test]
fn start_category_matches_only_at_token_zero() {
    let lex = Lexicon::parse("greet", "[greeting_start] @start\nhi\n").unwrap();
    let hit = extract_lexicon_features(&single("hi there friend"), &lex, Normalize::RawCount);
    assert_eq!(hit.column("greeting_start").unwrap(), vec![1.0]);
    let miss = extract_lexicon_features(&single("i said hi to him"), &lex, Normalize::RawCount);
    assert_eq!(miss.column("greeting_start").unwrap(), vec![0.0]);
}

#[test]
fn empty_category_yields_zero_column() {
    let lex = Lexicon::parse("empty", "[nothing]\n").unwrap();
    let fm = extract_lexicon_features(&single("some words here"), &lex, Normalize::RawCount);
    assert_eq!(fm.column("nothing").unwrap(), vec![0.0]);
}

#[test]
fn matching_is_greedy_and_non_overlapping() {
    let lex = Lexicon::parse("g", "[gratitude]\nthank\nthank you\n").unwrap();
    let fm = extract_lexicon_features(&single("thank you very much"), &lex, Normalize::RawCount);
    // "thank you" consumes both tokens; "thank" must not double-count.
    assert_eq!(fm.column("gratitude").unwrap(), vec![1.0]);
}

#[test]
fn pronoun_rates_are_per_token() {
    let fm = extract_pronoun_features(&single("i think you exaggerate"));
    assert_eq!(fm.column("pronouns_1st").unwrap(), vec![0.25]);
    assert_eq!(fm.column("pronouns_2nd").unwrap(), vec![0.25]);
    assert_eq!(fm.column("pronouns_3rd").unwrap(), vec![0.0]);

    let all_you = extract_pronoun_features(&single("you you you"));
    assert_eq!(all_you.column("pronouns_2nd").unwrap(), vec![1.0]);

    let none = extract_pronoun_features(&single("nothing personal here"));
    assert!(none.rows[0].iter().all(|&v| v == 0.0));
}

fn extractor() -> FeatureExtractor {
    FeatureExtractor::builtin()
}

#[test]
fn ideas_adoption_requires_another_author() {
    let ex = extractor();
    let c = conv(&[("A", 0, "the citation is unreliable"), ("B", 10, "the citation needs review")]);
    let fm = extract_idea_features(&c, &ex.certainty, &ex.function_words);
    let adopted = fm.column("ideas_adopted").unwrap();
    assert_eq!(adopted[0], 0.0, "first utterance has no prior speaker");
    assert!(adopted[1] >= 1.0, "citation is adopted by B");
    // u1 introduces citation + unreliable; u2 introduces needs + review.
    assert_eq!(fm.column("ideas_introduced").unwrap(), vec![2.0, 2.0]);
}

#[test]
fn adoption_with_certainty_copies_adopted_count() {
    let ex = extractor();
    let c = conv(&[
        ("A", 0, "the citation looks unreliable"),
        ("B", 10, "certainly the citation seems unreliable to me"),
    ]);
    let fm = extract_idea_features(&c, &ex.certainty, &ex.function_words);
    assert_eq!(fm.column("ideas_adopted").unwrap()[1], 2.0);
    assert_eq!(fm.column("ideas_adopted_certainty").unwrap()[1], 2.0);

    let calm = conv(&[
        ("A", 0, "the citation looks unreliable"),
        ("B", 10, "the citation does look unreliable to me"),
    ]);
    let fm = extract_idea_features(&calm, &ex.certainty, &ex.function_words);
    assert_eq!(fm.column("ideas_adopted").unwrap()[1], 2.0);
    assert_eq!(fm.column("ideas_adopted_certainty").unwrap()[1], 0.0);
}

#[test]
fn same_author_does_not_adopt_own_idea() {
    let ex = extractor();
    let c = conv(&[("A", 0, "consider the citation"), ("A", 10, "the citation again")]);
    let fm = extract_idea_features(&c, &ex.certainty, &ex.function_words);
    assert_eq!(fm.column("ideas_adopted").unwrap(), vec![0.0, 0.0]);
}

#[test]
fn accommodation_follows_jaccard_of_function_words() {
    let ex = extractor();
    // "the and of" in both utterances, different authors.
    let c = conv(&[("A", 0, "the start and end of it"), ("B", 10, "the middle and half of that")]);
    let fm = extract_accommodation(&c, &ex.function_words);
    let col = fm.column("accommodation").unwrap();
    assert_eq!(col[0], 0.0);
    // A: {the, and, of, it}; B: {the, and, of, that}; J = 3/5.
    assert_relative_eq!(col[1], 0.6);

    let same_author = conv(&[("A", 0, "the start and end"), ("A", 10, "the middle and half")]);
    let fm = extract_accommodation(&same_author, &ex.function_words);
    assert_eq!(fm.column("accommodation").unwrap()[1], 0.0);

    let disjoint = conv(&[("A", 0, "quietly walking home"), ("B", 10, "birds sing loudly")]);
    let fm = extract_accommodation(&disjoint, &ex.function_words);
    assert_eq!(fm.column("accommodation").unwrap()[1], 0.0);
}

#[test]
fn reply_gap_is_log_of_elapsed_seconds() {
    let c = conv(&[("A", 100, "first words"), ("B", 100, "instant reply"), ("A", 106, "slow reply")]);
    let col = extract_reply_gap(&c).column("reply_gap").unwrap();
    assert_eq!(col[0], 0.0);
    assert_eq!(col[1], 0.0);
    assert_relative_eq!(col[2], 7.0f64.ln());
}

#[test]
fn aggregate_matches_closed_form() {
    let fm = FeatureMatrix {
        conversation_id: "c".into(),
        names: vec!["f".into()],
        rows: vec![vec![0.0], vec![1.0], vec![2.0]],
    };
    let agg = aggregate(&fm);
    assert_relative_eq!(agg.mean[0], 1.0);
    assert_relative_eq!(agg.gradient[0], 2.0);

    let flat = FeatureMatrix {
        conversation_id: "c".into(),
        names: vec!["f".into()],
        rows: vec![vec![0.7]; 4],
    };
    let agg = aggregate(&flat);
    assert_relative_eq!(agg.mean[0], 0.7);
    assert_relative_eq!(agg.gradient[0], 0.0);

    let one = FeatureMatrix {
        conversation_id: "c".into(),
        names: vec!["f".into()],
        rows: vec![vec![5.0]],
    };
    let agg = aggregate(&one);
    assert_eq!(agg.gradient, vec![0.0]);
}

#[test]
fn toxicity_columns_copy_or_fail_with_id() {
    let mut c = conv(&[("A", 0, "first words"), ("B", 10, "second words")]);
    c.utterances[0].toxicity = Some(0.1);
    c.utterances[0].severe_toxicity = Some(0.01);
    c.utterances[1].toxicity = Some(0.3);
    c.utterances[1].severe_toxicity = Some(0.02);
    let fm = toxicity_columns(&c).unwrap();
    assert_eq!(fm.column("toxicity").unwrap(), vec![0.1, 0.3]);
    assert_eq!(fm.column("severe_toxicity").unwrap(), vec![0.01, 0.02]);

    c.utterances[1].severe_toxicity = None;
    match toxicity_columns(&c).unwrap_err() {
        FeatureError::MissingToxicity { utterance, field } => {
            assert_eq!(utterance, "u1");
            assert_eq!(field, "severe_toxicity");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn featureset_shapes_and_shared_columns() {
    let ex = extractor();
    let mut c = conv(&[
        ("A", 0, "hello there i think the citation is unreliable please review"),
        ("B", 60, "thanks maybe you are right about the citation"),
        ("A", 120, "certainly we should fix it"),
    ]);
    for u in &mut c.utterances {
        u.toxicity = Some(0.05);
        u.severe_toxicity = Some(0.0);
    }

    let politeness = ex.matrix(&c, FeatureSet::Politeness).unwrap();
    assert_eq!(politeness.names.len(), 16);
    let collaboration = ex.matrix(&c, FeatureSet::Collaboration).unwrap();
    assert_eq!(collaboration.names.len(), 10);
    let combined = ex.matrix(&c, FeatureSet::Combined).unwrap();
    // Shared columns (hedging terms, 1st/2nd pronoun rates) appear once.
    assert_eq!(combined.names.len(), 23);
    let mut unique = combined.names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), combined.names.len());

    for set in FeatureSet::ALL {
        let fm = ex.matrix(&c, set).unwrap();
        assert_eq!(fm.rows.len(), c.utterances.len());
        let (names, values) = ex.features(&c, set, true).unwrap();
        assert_eq!(names.len(), 2 * fm.names.len());
        assert_eq!(values.len(), names.len());
        let (names, values) = ex.features(&c, set, false).unwrap();
        assert_eq!(names.len(), fm.names.len());
        assert_eq!(values.len(), names.len());
    }
}

#[test]
fn featureset_names_roundtrip() {
    for set in FeatureSet::ALL {
        assert_eq!(set.to_string().parse::<FeatureSet>().unwrap(), set);
    }
    assert!("nonsense".parse::<FeatureSet>().is_err());
}

fn arb_matrix() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..8).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), n).prop_map(move |rows| {
            FeatureMatrix { conversation_id: "c".into(), names: vec!["a".into(), "b".into()], rows }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_is_affine_equivariant(fm in arb_matrix(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let base = aggregate(&fm);
        let mut scaled = fm.clone();
        for row in &mut scaled.rows {
            row[0] = a * row[0] + b;
        }
        let agg = aggregate(&scaled);
        prop_assert!((agg.mean[0] - (a * base.mean[0] + b)).abs() < 1e-9);
        prop_assert!((agg.gradient[0] - a * base.gradient[0]).abs() < 1e-9);
    }

    #[test]
    fn reversal_negates_gradient(fm in arb_matrix()) {
        let base = aggregate(&fm);
        let mut rev = fm.clone();
        rev.rows.reverse();
        let agg = aggregate(&rev);
        for j in 0..fm.names.len() {
            prop_assert!((agg.mean[j] - base.mean[j]).abs() < 1e-9);
            prop_assert!((agg.gradient[j] + base.gradient[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn rates_and_counts_stay_in_range(texts in prop::collection::vec("[a-z ]{1,40}", 1..6)) {
        let parts: Vec<(&str, i64, &str)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (if i % 2 == 0 { "A" } else { "B" }, i as i64, t.as_str()))
            .collect();
        // Blank-only texts are invalid utterances; substitute a word.
        let parts: Vec<(&str, i64, &str)> = parts
            .into_iter()
            .map(|(a, t, s)| (a, t, if s.trim().is_empty() { "word" } else { s }))
            .collect();
        let c = conv(&parts);
        let ex = extractor();

        let pronouns = extract_pronoun_features(&c);
        for row in &pronouns.rows {
            for &v in row {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let acc = extract_accommodation(&c, &ex.function_words);
        for row in &acc.rows {
            prop_assert!((0.0..=1.0).contains(&row[0]));
        }
        for set in [FeatureSet::Sentiment, FeatureSet::Politeness, FeatureSet::Collaboration] {
            let fm = ex.matrix(&c, set).unwrap();
            for row in &fm.rows {
                for &v in row {
                    prop_assert!(v >= 0.0, "negative feature value {v}");
                }
            }
        }
    }

    #[test]
    fn introduced_sum_counts_distinct_content_types(
        texts in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,5}", 1..6),
    ) {
        let parts: Vec<(&str, i64, &str)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (if i % 2 == 0 { "A" } else { "B" }, i as i64, t.as_str()))
            .collect();
        let c = conv(&parts);
        let ex = extractor();
        let fm = extract_idea_features(&c, &ex.certainty, &ex.function_words);
        let total: f64 = fm.column("ideas_introduced").unwrap().iter().sum();

        let fw = ex.function_words.word_set();
        let mut distinct: HashSet<String> = HashSet::new();
        for u in &c.utterances {
            distinct.extend(content_words(&text::tokenize(&u.text), &fw));
        }
        prop_assert_eq!(total as usize, distinct.len());
    }
}
