use approx::assert_abs_diff_eq;
use rand::Rng;

use super::*;
use crate::corpus::{Conversation, Label, Utterance, UtteranceKind};
use crate::ndiff::Tensor;
use crate::rng::seeded;

fn utt(i: usize, author: &str, text: &str) -> Utterance {
    Utterance {
        id: format!("u{i}"),
        author: author.to_string(),
        timestamp: i as i64,
        text: text.to_string(),
        kind: UtteranceKind::TalkPost,
        toxicity: None,
        severe_toxicity: None,
    }
}

fn edit_utt(i: usize, author: &str, text: &str) -> Utterance {
    Utterance { kind: UtteranceKind::EditSummary, ..utt(i, author, text) }
}

fn conv(id: &str, label: Option<Label>, texts: &[&str]) -> Conversation {
    let utterances = texts
        .iter()
        .enumerate()
        .map(|(i, t)| utt(i, if i % 2 == 0 { "A" } else { "B" }, t))
        .collect();
    Conversation::new(id, "Talk:Page", utterances, label).unwrap()
}

fn tiny_table(d: usize) -> EmbeddingTable {
    let words = [
        "the", "revert", "please", "discuss", "stop", "now", "citation", "needed", "rv", "pov",
        "thanks", "page", "war", "again",
    ];
    let mut rng = seeded(77);
    let pairs = words
        .iter()
        .map(|w| (w.to_string(), (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()))
        .collect();
    EmbeddingTable::from_pairs(pairs, d).unwrap()
}

fn small_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        hidden: 4,
        dropout: 0.3,
        max_tokens_per_utterance: 16,
        max_utterances: 10,
        ..ModelConfig::default()
    }
}

// --------------------------------------------------------------- embeddings

#[test]
fn load_embeddings_parses_and_skips_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.txt");
    std::fs::write(
        &path,
        "hello 0.1 0.2\nshort 0.5\nbroken x y\nhello 9.0 9.0\nworld 1.0 -1.0\n",
    )
    .unwrap();
    let table = load_embeddings(&path, 2).unwrap();
    assert_eq!(table.len(), 2);
    let row = table.row_of("hello").unwrap();
    assert_eq!(table.vector(row), &[0.1, 0.2], "first duplicate wins");
    assert!(table.row_of("short").is_none());
    assert!(table.row_of("broken").is_none());
    assert_eq!(table.id_of("world"), table.row_of("world").unwrap() + SPECIAL_TOKENS);
    assert_eq!(table.id_of("absent"), UNK_ID);
}

#[test]
fn load_embeddings_with_no_usable_lines_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.txt");
    std::fs::write(&path, "only 0.1\nbad x y\n").unwrap();
    assert!(matches!(load_embeddings(&path, 2), Err(ModelError::NoEmbeddings { .. })));
    assert!(matches!(
        load_embeddings(&dir.path().join("missing.txt"), 2),
        Err(ModelError::Io { .. })
    ));
}

#[test]
fn unk_vector_is_deterministic_and_bounded() {
    let a = tiny_table(8);
    let b = tiny_table(8);
    assert_eq!(a.unk_init(), b.unk_init());
    assert!(a.unk_init().iter().all(|v| v.abs() < 0.05));
}

// ------------------------------------------------------------ prepare_input

#[test]
fn prepare_input_builds_padded_grid_with_masks() {
    let table = tiny_table(4);
    let config = small_config(Architecture::AveragedEmbeddings);
    let c = conv("c1", None, &["revert the page", "please discuss"]);
    let input = prepare_input(&c, &table, &config, false).unwrap();
    assert_eq!(input.utterances(), 2);
    assert_eq!(input.ids[0].len(), 3);
    assert_eq!(input.mask[0], vec![true, true, true]);
    assert_eq!(input.mask[1], vec![true, true, false]);
    assert_eq!(input.ids[1][2], PAD_ID);
    assert_eq!(input.ids[0][0], table.id_of("revert"));
    assert_eq!(input.flattened().len(), 5);
}

#[test]
fn prepare_input_handles_edit_summaries_three_ways() {
    let table = tiny_table(4);
    let c = Conversation::new(
        "c1",
        "Talk:Page",
        vec![utt(0, "A", "please discuss"), edit_utt(1, "B", "rv POV"), utt(2, "B", "stop now")],
        None,
    )
    .unwrap();

    let mut config = small_config(Architecture::AveragedEmbeddings);
    let dropped = prepare_input(&c, &table, &config, false).unwrap();
    assert_eq!(dropped.utterances(), 2, "edits are dropped when not included");

    let with_edits = prepare_input(&c, &table, &config, true).unwrap();
    assert_eq!(with_edits.utterances(), 3);
    assert_eq!(
        with_edits.unmasked_row(1),
        vec![EDIT_ID, table.id_of("rv"), table.id_of("pov")],
        "edit summaries start with the <EDIT> marker"
    );

    config.strip_edit_token = true;
    let stripped = prepare_input(&c, &table, &config, true).unwrap();
    assert_eq!(
        stripped.unmasked_row(1),
        vec![table.id_of("rv"), table.id_of("pov")],
        "the ablation keeps the text but not the marker"
    );
}

#[test]
fn prepare_input_empty_after_edit_removal_errors() {
    let table = tiny_table(4);
    let config = small_config(Architecture::AveragedEmbeddings);
    let c = Conversation::from_parts_unchecked(
        "only-edits".into(),
        "Talk:Page".into(),
        vec![edit_utt(0, "A", "rv pov")],
        None,
    );
    assert!(matches!(
        prepare_input(&c, &table, &config, false),
        Err(ModelError::EmptyInput { .. })
    ));
}

#[test]
fn prepare_input_truncates_to_caps_keeping_earliest() {
    let table = tiny_table(4);
    let config = ModelConfig {
        max_tokens_per_utterance: 2,
        max_utterances: 2,
        ..small_config(Architecture::AveragedEmbeddings)
    };
    let c = conv(
        "c1",
        None,
        &["revert the page now", "please discuss the war", "stop stop stop stop"],
    );
    let input = prepare_input(&c, &table, &config, false).unwrap();
    assert_eq!(input.utterances(), 2);
    assert_eq!(input.unmasked_row(0), vec![table.id_of("revert"), table.id_of("the")]);
    assert_eq!(input.unmasked_row(1), vec![table.id_of("please"), table.id_of("discuss")]);
}

// ------------------------------------------------------------ architectures

#[test]
fn averaged_is_invariant_to_token_order() {
    let table = tiny_table(6);
    let config = ModelConfig { dropout: 0.0, ..small_config(Architecture::AveragedEmbeddings) };
    let model = NeuralModel::init(config.clone(), &table, 3);
    let a = conv("a", None, &["revert the page", "please discuss now"]);
    let b = conv("b", None, &["now please the", "discuss page revert"]);
    let ia = prepare_input(&a, &table, &config, false).unwrap();
    let ib = prepare_input(&b, &table, &config, false).unwrap();
    let pa = forward_averaged(&ia, &table, &model).unwrap();
    let pb = forward_averaged(&ib, &table, &model).unwrap();
    assert_abs_diff_eq!(pa, pb, epsilon = 1e-12);
}

#[test]
fn averaged_repeated_token_collapses_to_one() {
    let table = tiny_table(6);
    let config = ModelConfig { dropout: 0.0, ..small_config(Architecture::AveragedEmbeddings) };
    let model = NeuralModel::init(config.clone(), &table, 3);
    let once = conv("a", None, &["stop"]);
    let thrice = conv("b", None, &["stop stop stop"]);
    let pa = predict(&model, &table, &once).unwrap();
    let pb = predict(&model, &table, &thrice).unwrap();
    assert_abs_diff_eq!(pa, pb, epsilon = 1e-12);
}

#[test]
fn averaged_zero_dense_weights_gives_exactly_half() {
    let table = tiny_table(6);
    let config = small_config(Architecture::AveragedEmbeddings);
    let mut model = NeuralModel::init(config, &table, 3);
    for (name, tensor) in model.parameters_mut() {
        if name.starts_with("dense.") {
            *tensor = Tensor::zeros(tensor.rows(), tensor.cols());
        }
    }
    let c = conv("a", None, &["revert the page"]);
    assert_eq!(predict(&model, &table, &c).unwrap(), 0.5);
}

#[test]
fn sequential_consumes_token_order() {
    let table = tiny_table(6);
    let config = small_config(Architecture::SequentialRecurrent);
    let model = NeuralModel::init(config.clone(), &table, 0);
    let a = conv("a", None, &["revert the page"]);
    let b = conv("b", None, &["page the revert"]);
    let pa = predict(&model, &table, &a).unwrap();
    let pb = predict(&model, &table, &b).unwrap();
    assert!((pa - pb).abs() > 1e-12, "permuting tokens should move the output: {pa} vs {pb}");
    assert!(pa > 0.0 && pa < 1.0);
}

#[test]
fn sequential_ignores_utterance_boundaries() {
    let table = tiny_table(6);
    let config = small_config(Architecture::SequentialRecurrent);
    let model = NeuralModel::init(config.clone(), &table, 1);
    let split = conv("a", None, &["revert the", "page now"]);
    let joined = conv("b", None, &["revert the page now"]);
    let pa = predict(&model, &table, &split).unwrap();
    let pb = predict(&model, &table, &joined).unwrap();
    assert_eq!(pa, pb, "the flat encoder sees one concatenated sequence");
}

#[test]
fn sequential_truncates_sequences_over_the_cap() {
    let table = tiny_table(6);
    let config = ModelConfig {
        max_tokens_per_utterance: 2,
        max_utterances: 2,
        dropout: 0.0,
        ..small_config(Architecture::SequentialRecurrent)
    };
    let model = NeuralModel::init(config.clone(), &table, 1);
    // Token cap is 2*2 = 4; both rows fill it exactly, so a hypothetical
    // third utterance can never matter — compare against the first four
    // tokens spelled out directly.
    let c = conv("a", None, &["revert the", "page now", "stop stop"]);
    let direct = conv("b", None, &["revert the", "page now"]);
    let pa = predict(&model, &table, &c).unwrap();
    let pb = predict(&model, &table, &direct).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn hierarchical_attention_weights_are_distributions() {
    let table = tiny_table(6);
    let config = small_config(Architecture::Hierarchical);
    let model = NeuralModel::init(config.clone(), &table, 5);
    let c = conv("a", None, &["revert the page", "thanks", "please discuss the war now"]);
    let input = prepare_input(&c, &table, &config, false).unwrap();
    let readout = hierarchical_attention(&input, &table, &model).unwrap();

    assert_eq!(readout.word_weights.len(), 3);
    for weights in &readout.word_weights {
        assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(weights.iter().all(|&w| w >= 0.0));
    }
    // A one-token utterance has nowhere else to look.
    assert_eq!(readout.word_weights[1], vec![1.0]);
    assert_abs_diff_eq!(readout.utterance_weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    assert!(readout.probability > 0.0 && readout.probability < 1.0);
}

#[test]
fn hierarchical_consumes_utterance_order() {
    let table = tiny_table(6);
    let config = small_config(Architecture::Hierarchical);
    let model = NeuralModel::init(config.clone(), &table, 2);
    let a = conv("a", None, &["revert the page", "thanks"]);
    let b = conv("b", None, &["thanks", "revert the page"]);
    let pa = predict(&model, &table, &a).unwrap();
    let pb = predict(&model, &table, &b).unwrap();
    assert!((pa - pb).abs() > 1e-12, "utterance order should matter: {pa} vs {pb}");
}

#[test]
fn forward_helpers_guard_their_architecture() {
    let table = tiny_table(6);
    let config = small_config(Architecture::Hierarchical);
    let model = NeuralModel::init(config.clone(), &table, 2);
    let c = conv("a", None, &["revert the page"]);
    let input = prepare_input(&c, &table, &config, false).unwrap();
    assert!(matches!(
        forward_averaged(&input, &table, &model),
        Err(ModelError::ArchitectureMismatch { .. })
    ));
    assert!(matches!(
        forward_sequential(&input, &table, &model),
        Err(ModelError::ArchitectureMismatch { .. })
    ));
    assert!(forward_hierarchical(&input, &table, &model).is_ok());
}

// ------------------------------------------------------------ full gradcheck

#[test]
fn hierarchical_model_passes_full_gradient_check() {
    // Tiny config: d=4, hidden=3, 2 utterances x 3 tokens, with UNK and
    // <EDIT> positions exercised so the trainable embeddings get gradient.
    let table = tiny_table(4);
    let config = ModelConfig {
        hidden: 3,
        dropout: 0.0,
        ..small_config(Architecture::Hierarchical)
    };
    let model = NeuralModel::init(config.clone(), &table, 8);
    let input = PreparedInput {
        conversation_id: "gc".into(),
        ids: vec![
            vec![UNK_ID, table.id_of("revert"), table.id_of("page")],
            vec![EDIT_ID, table.id_of("rv"), PAD_ID],
        ],
        mask: vec![vec![true, true, true], vec![true, true, false]],
    };
    let err = model_gradient_check(&model, &table, &input, true).unwrap();
    assert!(err < 1e-4, "hierarchical gradient check failed: {err}");
}

// ------------------------------------------------------------------ masking

#[test]
fn padding_never_changes_any_architecture() {
    let table = tiny_table(6);
    for arch in Architecture::ALL {
        let config = ModelConfig { dropout: 0.0, ..small_config(arch) };
        let model = NeuralModel::init(config.clone(), &table, 4);
        let c = conv("a", None, &["revert the page", "please discuss"]);
        let compact = prepare_input(&c, &table, &config, false).unwrap();

        // Same content with extra padded columns and a fully padded row.
        let mut padded = compact.clone();
        for (row, mask) in padded.ids.iter_mut().zip(&mut padded.mask) {
            row.extend([PAD_ID, PAD_ID]);
            mask.extend([false, false]);
        }
        let width = padded.ids[0].len();
        padded.ids.push(vec![PAD_ID; width]);
        padded.mask.push(vec![false; width]);

        let a = super::forward::eval_forward(&model, &table, &compact).unwrap();
        let b = super::forward::eval_forward(&model, &table, &padded).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }
}

// ----------------------------------------------------------------- training

fn planted_set(n_each: usize) -> Vec<Conversation> {
    let mut out = Vec::new();
    for i in 0..n_each {
        out.push(conv(
            &format!("pos{i}"),
            Some(Label::Escalated),
            &["revert revert the page", "stop the war now"],
        ));
        out.push(conv(
            &format!("neg{i}"),
            Some(Label::NotEscalated),
            &["thanks please discuss", "citation needed again"],
        ));
    }
    out
}

#[test]
fn train_overfits_a_planted_keyword() {
    let table = tiny_table(6);
    let config = small_config(Architecture::AveragedEmbeddings);
    let model = NeuralModel::init(config, &table, 0);
    let set = planted_set(5);
    let tc = TrainConfig {
        batch_size: 16,
        max_epochs: 200,
        patience: 200,
        learning_rate: 0.05,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train(model, &table, &set, &set, &tc).unwrap();
    assert!(
        outcome.log.iter().any(|e| e.train_loss < 0.01),
        "planted signal should be overfit within 200 epochs; final loss {}",
        outcome.log.last().unwrap().train_loss
    );
    assert_eq!(outcome.best_val_pr_auc, 1.0);
}

#[test]
fn train_log_is_deterministic_per_seed() {
    let table = tiny_table(6);
    let config = small_config(Architecture::AveragedEmbeddings);
    let set = planted_set(3);
    let run = |seed: u64| {
        let model = NeuralModel::init(config.clone(), &table, 9);
        let tc = TrainConfig {
            max_epochs: 5,
            patience: 5,
            learning_rate: 0.01,
            seed,
            ..TrainConfig::default()
        };
        train(model, &table, &set, &set, &tc).unwrap().log
    };
    assert_eq!(run(4), run(4), "same seed must reproduce the log exactly");
    assert_ne!(run(4), run(5), "a different seed should change the trajectory");
}

#[test]
fn train_validates_its_inputs() {
    let table = tiny_table(6);
    let config = small_config(Architecture::AveragedEmbeddings);
    let set = planted_set(2);
    let tc = TrainConfig::default();

    let model = NeuralModel::init(config.clone(), &table, 0);
    assert!(matches!(
        train(model, &table, &set, &[], &tc),
        Err(ModelError::EmptyValidation)
    ));

    let model = NeuralModel::init(config.clone(), &table, 0);
    let single: Vec<Conversation> =
        set.iter().filter(|c| c.label == Some(Label::Escalated)).cloned().collect();
    assert!(matches!(
        train(model, &table, &single, &set, &tc),
        Err(ModelError::SingleClass)
    ));

    let model = NeuralModel::init(config.clone(), &table, 0);
    let mut unlabeled = set.clone();
    unlabeled[0].label = None;
    assert!(matches!(
        train(model, &table, &unlabeled, &set, &tc),
        Err(ModelError::Unlabeled { .. })
    ));
}

#[test]
fn train_divergence_reports_last_finite_checkpoint() {
    let table = tiny_table(6);
    let config = small_config(Architecture::AveragedEmbeddings);
    let model = NeuralModel::init(config, &table, 0);
    let set = planted_set(3);
    let tc = TrainConfig {
        batch_size: 64, // one batch per epoch
        max_epochs: 10,
        learning_rate: f64::MAX,
        seed: 0,
        ..TrainConfig::default()
    };
    match train(model, &table, &set, &set, &tc) {
        Err(ModelError::Diverged { epoch, checkpoint }) => {
            assert!(epoch <= 3, "divergence should hit almost immediately, got epoch {epoch}");
            for (name, p) in &checkpoint.parameters {
                assert!(
                    p.data.iter().all(|v| v.is_finite()),
                    "checkpoint parameter {name} must be finite"
                );
            }
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

// ---------------------------------------------------------------- inference

#[test]
fn predict_mc_degenerate_cases() {
    let table = tiny_table(6);
    let c = conv("a", None, &["revert the page", "thanks"]);

    let no_dropout = ModelConfig { dropout: 0.0, ..small_config(Architecture::Hierarchical) };
    let model = NeuralModel::init(no_dropout, &table, 1);
    let (mean, std) = predict_mc(&model, &table, &c, 30, 0).unwrap();
    assert_eq!(std, 0.0, "no dropout means no spread");
    assert!(mean > 0.0 && mean < 1.0);

    let config = small_config(Architecture::Hierarchical);
    let model = NeuralModel::init(config, &table, 1);
    let (_, std1) = predict_mc(&model, &table, &c, 1, 0).unwrap();
    assert_eq!(std1, 0.0, "a single sample has no spread by convention");
    assert!(matches!(predict_mc(&model, &table, &c, 0, 0), Err(ModelError::BadSampleCount)));
}

#[test]
fn predict_mc_is_deterministic_per_seed() {
    let table = tiny_table(6);
    let config = small_config(Architecture::SequentialRecurrent);
    let model = NeuralModel::init(config, &table, 1);
    let c = conv("a", None, &["revert the page", "thanks"]);
    let first = predict_mc(&model, &table, &c, 10, 42).unwrap();
    let second = predict_mc(&model, &table, &c, 10, 42).unwrap();
    assert_eq!(first, second);
    let other = predict_mc(&model, &table, &c, 10, 43).unwrap();
    assert_ne!(first, other, "a different seed should draw different masks");
    assert!(first.1 > 0.0, "dropout at p=0.3 should produce visible spread");
}

#[test]
fn predict_mc_mean_stabilizes_for_large_n() {
    let table = tiny_table(6);
    let config = small_config(Architecture::AveragedEmbeddings);
    let model = NeuralModel::init(config, &table, 6);
    let c = conv("a", None, &["revert the page now", "please discuss"]);
    let n = 10_000;
    let (m1, s1) = predict_mc(&model, &table, &c, n, 100).unwrap();
    let (m2, s2) = predict_mc(&model, &table, &c, n, 900).unwrap();
    let tolerance = 3.0 * (s1.max(s2) / (n as f64).sqrt());
    assert!(
        (m1 - m2).abs() <= tolerance,
        "independent seeds disagree: {m1} vs {m2} (tolerance {tolerance})"
    );
}

#[test]
fn trace_covers_every_prefix_and_ends_at_the_full_prediction() {
    let table = tiny_table(6);
    let config = small_config(Architecture::Hierarchical);
    let model = NeuralModel::init(config, &table, 3);
    let c = Conversation::new(
        "t1",
        "Talk:Page",
        vec![
            utt(0, "A", "revert the page"),
            edit_utt(1, "B", "rv pov"),
            utt(2, "B", "please discuss"),
            utt(3, "A", "stop the war"),
        ],
        Some(Label::Escalated),
    )
    .unwrap();

    let tr = trace(&model, &table, &c, 5, 7).unwrap();
    // include_edits is off, so the model consumes the three talk posts.
    assert_eq!(tr.entries.len(), 3);
    for (i, e) in tr.entries.iter().enumerate() {
        assert_eq!(e.prefix_len, i + 1);
        assert!(e.mean >= 0.0 && e.mean <= 1.0);
        assert!(e.std >= 0.0);
    }
    let (full_mean, full_std) = predict_mc(&model, &table, &c, 5, 7).unwrap();
    let last = tr.entries.last().unwrap();
    assert_eq!((last.mean, last.std), (full_mean, full_std));

    let csv = tr.to_csv();
    assert!(csv.starts_with("prefix_len,mean,std\n"));
    assert_eq!(csv.lines().count(), 4);
}

// -------------------------------------------------------------- checkpoints

#[test]
fn model_checkpoint_roundtrip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let table = tiny_table(6);
    let config = small_config(Architecture::Hierarchical);
    let model = NeuralModel::init(config.clone(), &table, 11);
    let c = conv("a", None, &["revert the page", "thanks"]);
    let before = predict(&model, &table, &c).unwrap();

    model.to_checkpoint("hash123", 11).save(&path).unwrap();
    let ckpt = crate::ndiff::Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.config_hash, "hash123");
    let restored = NeuralModel::from_checkpoint(&ckpt, config.clone(), table.dimension()).unwrap();
    let after = predict(&restored, &table, &c).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());

    // Wrong hidden size: shapes no longer line up.
    let wrong = ModelConfig { hidden: 5, ..config.clone() };
    assert!(matches!(
        NeuralModel::from_checkpoint(&ckpt, wrong, table.dimension()),
        Err(ModelError::Ndiff(crate::ndiff::NdiffError::ParameterShape { .. }))
    ));

    // Wrong architecture tag.
    let other = ModelConfig { architecture: Architecture::AveragedEmbeddings, ..config };
    assert!(matches!(
        NeuralModel::from_checkpoint(&ckpt, other, table.dimension()),
        Err(ModelError::ArchitectureMismatch { .. })
    ));
}
