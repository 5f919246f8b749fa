use super::*;
use crate::corpus::synth::{shapes_corpus, synthetic_tables, SynthConfig};
use crate::corpus::{Dataset, Pair, PairSampler, Vocab};
use crate::error::Error;
use crate::model::{ArchConfig, Branch, CombinerConfig, FccModel, Freeze};

fn fixture(config: &SynthConfig) -> (FccModel, Dataset) {
    let corpus = shapes_corpus(config).unwrap();
    let arch = ArchConfig::desk();
    let combiner = CombinerConfig::default();
    let tables = synthetic_tables(&corpus.records, arch.embed_dim, 5).unwrap();
    let vocab = Vocab::build(&corpus.records, None, 1);
    let data = Dataset::from_images(corpus.records, &corpus.images, &vocab, &tables, arch.image_size, arch.seq_len);
    let model = FccModel::new(arch, combiner, vocab, tables, 13).unwrap();
    (model, data)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        folds: 2,
        patience: None,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    let (model, data) = fixture(&SynthConfig::overfit(1));
    let rows: Vec<usize> = (0..data.len()).collect();
    let run = || train_split(&data, &model, &rows[..14], Some(&rows[14..]), &quick(2), Freeze::default(), 0).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a.params.checksum(""), b.params.checksum(""));
    assert_ne!(a.params.checksum(""), model.params.checksum(""));
    assert_eq!(la.epochs.len(), 3);
    assert!(la.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
}

#[test]
fn untrained_validation_accuracy_is_near_chance() {
    let (model, data) = fixture(&SynthConfig::overfit(2));
    let rows: Vec<usize> = (0..data.len()).collect();
    let pairs = validation_pairs(&rows, 0).unwrap().unwrap();
    assert_eq!(pairs.iter().filter(|p| p.positive()).count() * 2, pairs.len());
    let acc = pair_accuracy(&model, &data, &pairs).unwrap();
    assert!((acc - 0.5).abs() <= 0.15, "untrained accuracy {acc}");
}

#[test]
fn training_batches_are_balanced() {
    let rows: Vec<usize> = (0..70).collect();
    let sampler = PairSampler::new(rows, 32, 4).unwrap();
    for epoch in 0..3 {
        for batch in sampler.epoch(epoch) {
            if batch.len() == 32 {
                assert_eq!((batch.positives(), batch.negatives()), (16, 16));
            } else {
                assert_eq!(batch.positives(), batch.negatives());
            }
        }
    }
}

#[test]
fn overflowing_updates_abort_with_the_last_good_model() {
    let (model, data) = fixture(&SynthConfig::overfit(3));
    let rows: Vec<usize> = (0..data.len()).collect();
    let cfg = TrainConfig {
        learning_rate: 1e36,
        ..quick(5)
    };
    match train_split(&data, &model, &rows, None, &cfg, Freeze::default(), 0) {
        Err(Error::Diverged { epoch, last_good, .. }) => {
            assert!(epoch >= 1);
            let last = last_good.expect("last good model");
            assert!(last.params.iter().all(|p| p.tensor.data().iter().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l)),
    }
}

#[test]
fn frozen_trunks_are_bitwise_unchanged_and_fusion_moves() {
    let (model, data) = fixture(&SynthConfig::overfit(4));
    let rows: Vec<usize> = (0..data.len()).collect();
    let (trained, _) = train_split(&data, &model, &rows, None, &quick(1), Freeze::TRUNKS, 0).unwrap();
    for prefix in ["vision.", "language."] {
        assert_eq!(trained.params.checksum(prefix), model.params.checksum(prefix), "{prefix}");
    }
    assert_ne!(trained.params.checksum("fusion."), model.params.checksum("fusion."));
}

#[test]
fn classifier_outputs_are_distributions() {
    let (model, data) = fixture(&SynthConfig::overfit(5));
    let classes = data.labels().unwrap();
    assert_eq!(classes.len(), 4);
    for branch in [Branch::Vision, Branch::Language] {
        let clf = Classifier::new(branch, &model, classes.clone(), 1).unwrap();
        let p = clf.probabilities(&data, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(p.shape(), &[5, 4]);
        for i in 0..5 {
            let s: f32 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "{branch:?} row {i} sums to {s}");
        }
    }
}

#[test]
fn classifier_rejects_bad_taxonomies() {
    let (model, data) = fixture(&SynthConfig::overfit(6));
    assert!(matches!(
        Classifier::new(Branch::Vision, &model, vec!["circle".into()], 0),
        Err(Error::Config(_))
    ));
    let clf = Classifier::new(Branch::Language, &model, vec!["circle".into(), "square".into()], 0).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    assert!(matches!(clf.accuracy(&data, &rows), Err(Error::Config(_))));

    let mut single = data.clone();
    for r in &mut single.records {
        r.label = Some("only".into());
    }
    assert!(matches!(
        train_supervised_classifier(&single, &rows, Branch::Language, &model, &quick(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn caption_classifier_separates_keyword_classes() {
    let (model, data) = fixture(&SynthConfig::overfit(7));
    let rows: Vec<usize> = (0..data.len())
        .filter(|&i| matches!(data.records[i].label.as_deref(), Some("circle" | "square")))
        .collect();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::caption_classifier()
    };
    let (clf, log) = train_supervised_classifier(&data, &rows, Branch::Language, &model, &cfg).unwrap();
    assert_eq!(clf.classes, vec!["circle".to_string(), "square".to_string()]);
    let acc = clf.accuracy(&data, &rows).unwrap();
    assert!(acc >= 0.9, "accuracy {acc}, log {:?}", log.last());
}

#[test]
fn frozen_fine_tuning_keeps_the_trunk() {
    let (model, data) = fixture(&SynthConfig::overfit(8));
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut clf = Classifier::new(Branch::Vision, &model, data.labels().unwrap(), 2).unwrap();
    let before = clf.params.clone();
    fine_tune(&mut clf, &data, &rows, None, &quick(2), true).unwrap();
    assert_eq!(clf.params.checksum("vision."), before.checksum("vision."));
    assert_ne!(clf.params.checksum(HEAD), before.checksum(HEAD));
}

#[test]
fn direct_score_examples() {
    let one_hot = |i: usize| {
        let mut v = vec![0.0f32; 4];
        v[i] = 1.0;
        v
    };
    assert_eq!(direct_decision(&one_hot(2), &one_hot(2), DIRECT_THRESHOLD).unwrap(), (true, 1.0));
    assert_eq!(direct_decision(&one_hot(0), &one_hot(3), DIRECT_THRESHOLD).unwrap(), (false, 0.0));
    let uniform = vec![1.0f32 / 22.0; 22];
    let (positive, score) = direct_decision(&uniform, &uniform, DIRECT_THRESHOLD).unwrap();
    assert!(!positive);
    assert!((score - 1.0 / 22.0).abs() < 1e-6);
    assert!(matches!(direct_score(&one_hot(0), &uniform), Err(Error::Config(_))));
}

#[test]
fn direct_combination_requires_one_taxonomy() {
    let (model, data) = fixture(&SynthConfig::overfit(9));
    let v = Classifier::new(Branch::Vision, &model, vec!["a".into(), "b".into()], 0).unwrap();
    let t = Classifier::new(Branch::Language, &model, vec!["a".into(), "c".into()], 0).unwrap();
    let pairs = [Pair { figure: 0, caption: 0 }];
    assert!(matches!(
        baseline_direct_combination(&v, &t, &data, &pairs, DIRECT_THRESHOLD),
        Err(Error::Config(_))
    ));
}

#[test]
fn supervised_pretrain_copies_and_freezes_trunks() {
    let (model, data) = fixture(&SynthConfig::overfit(10));
    let classes = data.labels().unwrap();
    let v = Classifier::new(Branch::Vision, &model, classes.clone(), 21).unwrap();
    let t = Classifier::new(Branch::Language, &model, classes, 22).unwrap();
    let (trained, log) = baseline_supervised_pretrain(&data, &model, &v, &t, &quick(1)).unwrap();
    assert_eq!(log.folds.len(), 2);
    assert_eq!(trained.params.checksum("vision."), v.params.checksum("vision."));
    assert_eq!(trained.params.checksum("language."), t.params.checksum("language."));
    assert_ne!(trained.params.checksum("fusion."), model.params.checksum("fusion."));
}

#[test]
fn cross_validated_runs_are_reproducible() {
    let (model, data) = fixture(&SynthConfig::overfit(11));
    let (a, la) = train_fcc(&data, &model, &quick(1)).unwrap();
    let (b, lb) = train_fcc(&data, &model, &quick(1)).unwrap();
    assert!(la.same_metrics(&lb));
    assert_eq!(a.params.checksum(""), b.params.checksum(""));
    assert_eq!(la.folds.len(), 2);
    assert!(la.mean_val_accuracy.is_some());
    let lines = la.to_jsonl().unwrap();
    assert!(lines.lines().count() >= 2 * 2);
    assert!(!a.training_ids.is_empty() && a.training_ids.len() < data.len());
}

#[test]
fn cached_fusion_training_matches_the_full_network() {
    let (model, data) = fixture(&SynthConfig::overfit(12));
    let rows: Vec<usize> = (0..data.len()).collect();
    let cfg = quick(2);
    let (cached, cached_log) = train_split(&data, &model, &rows[..14], Some(&rows[14..]), &cfg, Freeze::TRUNKS, 0).unwrap();

    let sampler = PairSampler::new(rows[..14].to_vec(), cfg.batch_size, cfg.seed).unwrap();
    let batches = |e: u64| sampler.epoch(e).into_iter().map(|b| b.pairs).collect();
    let val = validation_pairs(&rows[14..], cfg.seed).unwrap();
    let mut full = model.clone();
    let full_log = super::fit::fit(&mut full, &data, &batches, val.as_deref(), &cfg, Freeze::TRUNKS, 0).unwrap();

    assert_eq!(cached.params.checksum("vision."), model.params.checksum("vision."));
    for (a, b) in cached.params.iter().zip(full.params.iter()) {
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert!((x - y).abs() <= 1e-5, "{}: {x} vs {y}", a.name);
        }
    }
    for (a, b) in cached_log.epochs.iter().zip(&full_log.epochs) {
        assert!((a.train_loss - b.train_loss).abs() < 1e-5);
        assert_eq!(a.val_accuracy, b.val_accuracy);
    }
}

#[test]
fn overfit_training_loss_only_has_transient_upticks() {
    // Fixed pairs, so epoch losses differ only through the updates.
    let (mut model, data) = fixture(&SynthConfig::overfit(2));
    let rows: Vec<usize> = (0..data.len()).collect();
    let pairs = PairSampler::new(rows, 64, 0).unwrap().epoch_pairs(0);
    let batches = |_: u64| vec![pairs.clone()];
    let log = super::fit::fit(&mut model, &data, &batches, None, &quick(40), Freeze::default(), 0).unwrap();
    let losses: Vec<f64> = log.epochs[1..].iter().map(|e| e.train_loss).collect();
    for (epoch, w) in losses.windows(2).enumerate() {
        assert!(w[1] <= 1.05 * w[0], "epoch {}: {} after {}", epoch + 2, w[1], w[0]);
    }
    assert!(losses[losses.len() - 1] < 0.5 * losses[0], "{losses:?}");
}
