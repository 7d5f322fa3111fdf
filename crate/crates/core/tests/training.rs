//! Training loop, evaluation and checkpoint behaviour.

use std::fs;
use std::sync::Arc;

use tart_core::encoder::{EmbeddingTable, Vocab};
use tart_core::episodes::{make_synthetic_corpus, ClassSplit, Corpus, Example, ExampleInput, SynthConfig, SynthMeta};
use tart_core::head::{HeadConfig, HeadKind};
use tart_core::model::{ModelSpec, TartModel, EMBEDDINGS};
use tart_core::seed::Stream;
use tart_core::training::{
    evaluate, load_checkpoint, save_checkpoint, train, train_from, AdamConfig, TrainConfig, TrainState,
};
use tart_core::{Matrix, TartError};

fn small_synth(gap: f64) -> (Corpus, SynthMeta) {
    make_synthetic_corpus(&SynthConfig {
        n_classes: 15,
        per_class: 12,
        inter_class_gap: gap,
        dim: 8,
        informative_dim: 4,
        nuisance_scale: 1.0,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn spec(kind: HeadKind, input_dim: usize, output_dim: usize) -> ModelSpec {
    ModelSpec {
        kind,
        input_dim,
        output_dim,
        n_way: 5,
        vocab: None,
        embeddings: None,
        head: HeadConfig::default(),
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        episodes_per_epoch: 20,
        val_episodes: 20,
        test_episodes: 50,
        patience: 3,
        max_epochs: Some(6),
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn loss_falls_on_an_easy_task() {
    let (corpus, meta) = small_synth(4.0);
    let cfg = TrainConfig {
        patience: 100,
        max_epochs: Some(3),
        ..quick_cfg()
    };
    let out = train(&spec(HeadKind::Tart, 8, 8), &corpus, &meta.split, &cfg, 3).unwrap();
    assert_eq!(out.log.len(), 3);
    assert!(out.log[2].train_loss < out.log[0].train_loss, "{:?}", out.log);
}

#[test]
fn frozen_parameters_stop_after_one_flat_epoch() {
    let (corpus, meta) = small_synth(1.0);
    let cfg = TrainConfig {
        patience: 1,
        max_epochs: None,
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..quick_cfg()
    };
    let s = spec(HeadKind::Tart, 8, 8);
    let out = train(&s, &corpus, &meta.split, &cfg, 9).unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.log[0].val_accuracy, out.log[1].val_accuracy);
    assert_eq!(out.log[1].epochs_since_improvement, 1);
    assert_eq!(out.best_epoch, 1);
    // nothing moved, but the optimizer counted every step
    assert_eq!(out.best.model, s.init(9).unwrap());
    assert_eq!(out.best.adam.step, 20);
}

#[test]
fn early_stopping_bound_holds() {
    let (corpus, meta) = small_synth(1.0);
    let cfg = TrainConfig {
        patience: 2,
        max_epochs: Some(40),
        ..quick_cfg()
    };
    let out = train(&spec(HeadKind::Proto, 8, 8), &corpus, &meta.split, &cfg, 5).unwrap();
    assert!(out.log.len() as u64 <= out.best_epoch + 2);
    let best = out.log.iter().map(|l| l.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.best.best_val_acc, best);
    assert_eq!(out.log[(out.best_epoch - 1) as usize].val_accuracy, best);
}

#[test]
fn same_seed_gives_identical_runs() {
    let (corpus, meta) = small_synth(1.0);
    let s = spec(HeadKind::Tart, 8, 8);
    let a = train(&s, &corpus, &meta.split, &quick_cfg(), 21).unwrap();
    let b = train(&s, &corpus, &meta.split, &quick_cfg(), 21).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    let c = train(&s, &corpus, &meta.split, &quick_cfg(), 22).unwrap();
    assert_ne!(a.best.model, c.best.model);
}

#[test]
fn lambda_zero_logs_zero_regularizer() {
    let (corpus, meta) = small_synth(1.0);
    let mut s = spec(HeadKind::Tart, 8, 8);
    s.head.lambda = 0.0;
    let out = train(&s, &corpus, &meta.split, &quick_cfg(), 2).unwrap();
    for line in &out.log {
        assert_eq!(line.lambda, 0.0);
        assert_eq!(line.drr_term.to_bits(), 0.0f64.to_bits());
        assert_eq!(line.train_loss, line.cls_loss);
        let json = line.to_json_line();
        assert!(json.contains("\"drr_term\":0.0"), "{json}");
    }
}

/// One-hot class means of norm 10 and tiny noise.
fn separable() -> (Corpus, ClassSplit) {
    let mut examples = Vec::new();
    for c in 0..5 {
        for i in 0..10 {
            let mut v = vec![0.0; 6];
            v[c] = 10.0;
            v[5] = 0.01 * (i as f64 - 4.5);
            examples.push(Example {
                input: ExampleInput::Vector(v),
                label: format!("s{c}"),
            });
        }
    }
    let labels: Vec<String> = (0..5).map(|c| format!("s{c}")).collect();
    (Corpus::new(examples), ClassSplit::new(vec![], vec![], labels).unwrap())
}

fn identity_model(kind: HeadKind, dim: usize) -> TartModel {
    let mut m = spec(kind, dim, dim).init(0).unwrap();
    m.encoder.projection = Matrix::identity(dim);
    m
}

#[test]
fn separable_data_is_classified_perfectly() {
    let (corpus, split) = separable();
    for kind in [HeadKind::Tart, HeadKind::Proto] {
        let model = identity_model(kind, 6);
        let feats = model.featurize(&corpus).unwrap();
        let plan = TrainConfig::default().plan(&split.test, 100, 1, Stream::Test);
        let r = evaluate(&model, &corpus, &feats, &plan).unwrap();
        assert_eq!(r.mean_accuracy, 1.0, "{kind}");
        assert_eq!(r.ci95, 0.0);
        assert_eq!(r.n_episodes, 100);
    }
}

/// Nearest true class mean, the best any classifier can do on average.
fn nearest_mean_accuracy(corpus: &Corpus, meta: &SynthMeta) -> f64 {
    let test: Vec<usize> = meta
        .split
        .test
        .iter()
        .map(|l| meta.labels.iter().position(|m| m == l).unwrap())
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for ex in corpus.examples().iter().filter(|e| meta.split.test.contains(&e.label)) {
        let ExampleInput::Vector(x) = &ex.input else {
            unreachable!()
        };
        let d = |c: usize| {
            meta.class_means[c]
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let best = *test.iter().min_by(|&&a, &&b| d(a).total_cmp(&d(b))).unwrap();
        hits += usize::from(meta.labels[best] == ex.label);
        total += 1;
    }
    hits as f64 / total as f64
}

#[test]
fn wide_gap_is_easy_for_the_baseline() {
    // gap of ten noise units; separated classes pushed out to a comparable norm
    let (corpus, meta) = make_synthetic_corpus(&SynthConfig {
        inter_class_gap: 10.0,
        separated_scale: 40.0,
        dim: 16,
        informative_dim: 16,
        seed: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let oracle = nearest_mean_accuracy(&corpus, &meta);
    assert!(oracle > 0.99, "{oracle}");
    let model = identity_model(HeadKind::Proto, 16);
    let feats = model.featurize(&corpus).unwrap();
    let r = evaluate(
        &model,
        &corpus,
        &feats,
        &TrainConfig::default().plan(&meta.split.test, 200, 2, Stream::Test),
    )
    .unwrap();
    assert!(r.mean_accuracy > 0.95, "{}", r.mean_accuracy);
}

#[test]
fn collapsed_clusters_take_the_degenerate_path() {
    // every test episode holds the three clustered classes of the last block,
    // whose means coincide when the gap is zero
    let (corpus, meta) = make_synthetic_corpus(&SynthConfig {
        inter_class_gap: 0.0,
        noise: 1e-12,
        dim: 16,
        informative_dim: 16,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = spec(HeadKind::Tart, 16, 16).init(1).unwrap();
    let feats = model.featurize(&corpus).unwrap();
    let r = evaluate(
        &model,
        &corpus,
        &feats,
        &TrainConfig::default().plan(&meta.split.test, 20, 0, Stream::Test),
    )
    .unwrap();
    assert!(r.all_degenerate);
    assert_eq!(r.skipped_degenerate, 20);
}

/// Every class shares one Gaussian, so no model can beat chance. Classes
/// are large so that 1000 episodes rarely reuse an example.
fn label_free_corpus() -> (Corpus, ClassSplit) {
    let (corpus, meta) = make_synthetic_corpus(&SynthConfig {
        n_classes: 15,
        per_class: 1000,
        inter_class_gap: 0.0,
        shared_scale: 0.0,
        separated_scale: 0.0,
        dim: 16,
        informative_dim: 16,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    (corpus, meta.split)
}

#[test]
fn untrained_model_is_at_chance() {
    let (corpus, split) = label_free_corpus();
    let model = spec(HeadKind::Tart, 16, 16).init(3).unwrap();
    let feats = model.featurize(&corpus).unwrap();
    let plan = TrainConfig::default().plan(&split.test, 1000, 6, Stream::Test);
    let r = evaluate(&model, &corpus, &feats, &plan).unwrap();
    let sigma = r.ci95 / 1.96;
    assert!(
        (r.mean_accuracy - 0.2).abs() <= 3.0 * sigma,
        "{} +- {sigma}",
        r.mean_accuracy
    );
}

#[test]
fn worker_count_does_not_change_reports() {
    let (corpus, meta) = small_synth(1.0);
    let model = spec(HeadKind::Tart, 8, 8).init(1).unwrap();
    let feats = model.featurize(&corpus).unwrap();
    let mut cfg = TrainConfig::default();
    let plan = cfg.plan(&meta.split.test, 1000, 4, Stream::Test);
    let one = evaluate(&model, &corpus, &feats, &plan).unwrap();
    cfg.workers = 4;
    let four = evaluate(
        &model,
        &corpus,
        &feats,
        &cfg.plan(&meta.split.test, 1000, 4, Stream::Test),
    )
    .unwrap();
    assert_eq!(one, four);
    assert_eq!(one.to_json(), four.to_json());
    cfg.workers = 7;
    let seven = evaluate(
        &model,
        &corpus,
        &feats,
        &cfg.plan(&meta.split.test, 1000, 4, Stream::Test),
    )
    .unwrap();
    assert_eq!(one, seven);
}

fn duplicated_corpus() -> (Corpus, ClassSplit) {
    // every label has the same examples, so every prototype set is rank one
    let mut examples = Vec::new();
    for c in 0..5 {
        for _ in 0..8 {
            examples.push(Example {
                input: ExampleInput::Vector(vec![1.0, 0.5, 2.0]),
                label: format!("d{c}"),
            });
        }
    }
    let labels: Vec<String> = (0..5).map(|c| format!("d{c}")).collect();
    (Corpus::new(examples), ClassSplit::new(labels, vec![], vec![]).unwrap())
}

#[test]
fn all_degenerate_training_is_an_error() {
    let (corpus, split) = duplicated_corpus();
    let model = spec(HeadKind::Tart, 3, 5).init(0).unwrap();
    let feats = model.featurize(&corpus).unwrap();
    let err = train_from(TrainState::new(model), &corpus, &feats, &split, &quick_cfg(), 0).unwrap_err();
    assert!(matches!(err, TartError::Training(_)), "{err}");
}

#[test]
fn all_degenerate_evaluation_is_flagged() {
    let (corpus, split) = duplicated_corpus();
    let model = spec(HeadKind::Tart, 3, 5).init(0).unwrap();
    let feats = model.featurize(&corpus).unwrap();
    let r = evaluate(
        &model,
        &corpus,
        &feats,
        &TrainConfig::default().plan(&split.train, 30, 0, Stream::Test),
    )
    .unwrap();
    assert!(r.all_degenerate);
    assert_eq!(r.n_episodes, 0);
    assert_eq!(r.skipped_degenerate, 30);
    assert_eq!(r.mean_accuracy, 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, meta) = small_synth(1.0);
    let s = spec(HeadKind::Tart, 8, 8);
    let out = train(&s, &corpus, &meta.split, &quick_cfg(), 13).unwrap();
    let path = dir.path().join("a.tart");
    save_checkpoint(&out.best, &path).unwrap();
    let loaded = load_checkpoint(&path, &s).unwrap();
    assert_eq!(loaded, out.best);
    let again = dir.path().join("b.tart");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let feats = out.best.model.featurize(&corpus).unwrap();
    let plan = TrainConfig::default().plan(&meta.split.test, 200, 13, Stream::Test);
    let before = evaluate(&out.best.model, &corpus, &feats, &plan).unwrap();
    let after = evaluate(&loaded.model, &corpus, &feats, &plan).unwrap();
    assert_eq!(before, after);
    assert!(before
        .accuracies
        .iter()
        .zip(&after.accuracies)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(HeadKind::Tart, 8, 8);
    let state = TrainState::new(s.init(1).unwrap());
    let path = dir.path().join("c.tart");
    save_checkpoint(&state, &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let cut = dir.path().join("cut.tart");
    for len in [0, 5, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&cut, &bytes[..len]).unwrap();
        assert!(
            matches!(load_checkpoint(&cut, &s), Err(TartError::Checkpoint(_))),
            "len {len}"
        );
    }
    let mut v2 = bytes.clone();
    v2[9] = b'2';
    fs::write(&cut, &v2).unwrap();
    let msg = load_checkpoint(&cut, &s).unwrap_err().to_string();
    assert!(msg.contains("version 2"), "{msg}");

    // a TART checkpoint does not load into a PROTO configuration
    let proto = spec(HeadKind::Proto, 8, 8);
    assert!(matches!(load_checkpoint(&path, &proto), Err(TartError::Checkpoint(_))));
    // nor into a different width
    assert!(matches!(
        load_checkpoint(&path, &spec(HeadKind::Tart, 8, 9)),
        Err(TartError::Checkpoint(_))
    ));
}

#[test]
fn trainable_embeddings_are_updated_and_saved() {
    let words: Vec<String> = ["alpha", "beta", "gamma", "delta", "omega", "sigma"]
        .map(String::from)
        .to_vec();
    let vocab = Vocab::new(words.clone()).unwrap();
    let mut vectors = Matrix::zeros(vocab.len(), 3);
    for i in 0..words.len() {
        vectors.set(i, i % 3, 1.0 + i as f64 * 0.1);
    }
    let table = EmbeddingTable {
        vectors,
        trainable: true,
    };
    let mut examples = Vec::new();
    for c in 0..5 {
        for i in 0..6 {
            let text = format!("{} {} {}", words[c], words[(c + i) % 6], words[5 - (i % 3)]);
            examples.push(Example {
                input: ExampleInput::Text(text),
                label: format!("t{c}"),
            });
        }
    }
    let corpus = Corpus::new(examples);
    let labels: Vec<String> = (0..5).map(|c| format!("t{c}")).collect();
    let s = ModelSpec {
        kind: HeadKind::Proto,
        input_dim: 3,
        output_dim: 5,
        n_way: 5,
        vocab: Some(Arc::new(vocab)),
        embeddings: Some(Arc::new(table.clone())),
        head: HeadConfig::default(),
    };
    let model = s.init(0).unwrap();
    assert!(model.param_names().contains(&EMBEDDINGS));
    let feats = model.featurize(&corpus).unwrap();
    let mut state = TrainState::new(model);
    // one manual step through the public pieces
    let ep = tart_core::episodes::sample_episode(&corpus, &labels, 5, 1, 2, 0).unwrap();
    let mut tape = tart_core::Tape::new();
    let fwd = state.model.forward(&mut tape, &feats, &ep).unwrap();
    tape.backward(fwd.loss).unwrap();
    let mut grads = state.model.gradients(&tape, &fwd.vars).unwrap();
    let cfg = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    state
        .adam
        .step(&mut state.model.params_mut(), &mut grads, &cfg)
        .unwrap();
    let updated = &state.model.encoder.embeddings.as_ref().unwrap().vectors;
    assert_ne!(updated, &table.vectors);
    // the shared spec table is untouched
    assert_eq!(s.embeddings.as_ref().unwrap().vectors, table.vectors);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tart");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path, &s).unwrap();
    assert_eq!(&loaded.model.encoder.embeddings.as_ref().unwrap().vectors, updated);
    assert_eq!(loaded, state);
}
