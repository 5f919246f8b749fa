use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::corpus::synth::{shapes_corpus, synthetic_tables, SynthConfig};
use crate::corpus::{Dataset, Pair, Vocab};
use crate::error::Error;
use crate::model::{ArchConfig, Branch, CombinerConfig, FccModel, CORRESPOND};
use crate::training::TrainConfig;

fn fixture(config: &SynthConfig) -> (FccModel, Dataset) {
    let corpus = shapes_corpus(config).unwrap();
    let arch = ArchConfig::desk();
    let tables = synthetic_tables(&corpus.records, arch.embed_dim, 5).unwrap();
    let vocab = Vocab::build(&corpus.records, None, 1);
    let data = Dataset::from_images(corpus.records, &corpus.images, &vocab, &tables, arch.image_size, arch.seq_len);
    let model = FccModel::new(arch, CombinerConfig::default(), vocab, tables, 17).unwrap();
    (model, data)
}

/// Makes the fusion head ignore its input and always favor `class`.
fn constant_predictor(model: &mut FccModel, class: usize) {
    let w = model.params.tensor_mut("fusion.dense1.weight").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = model.params.tensor_mut("fusion.dense1.bias").unwrap();
    b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i == class { 3.0 } else { 0.0 });
}

#[test]
fn oracle_scores_give_perfect_recall() {
    let m = 12;
    let mut d = vec![0.0f32; m * m];
    for i in 0..m {
        d[i * m + i] = 1.0;
    }
    let r = retrieval_from_scores(&Tensor::new([m, m], d).unwrap(), &DEFAULT_KS).unwrap();
    assert_eq!(r.caption_to_figure, vec![1.0; 3]);
    assert_eq!(r.figure_to_caption, vec![1.0; 3]);
    assert!(r.is_consistent());
}

#[test]
fn constant_scores_rank_by_index() {
    let m = 20;
    let r = retrieval_from_scores(&Tensor::new([m, m], vec![0.5f32; m * m]).unwrap(), &DEFAULT_KS).unwrap();
    assert_eq!(r.caption_ranks, (0..m).collect::<Vec<_>>());
    assert_eq!(r.figure_ranks, (0..m).collect::<Vec<_>>());
    for (i, &k) in r.ks.iter().enumerate() {
        assert_eq!(r.caption_to_figure[i], k as f64 / m as f64);
        assert_eq!(r.figure_to_caption[i], k as f64 / m as f64);
    }
}

#[test]
fn ranks_match_a_full_sort_and_recalls_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = rng.gen_range(10..30);
        // Coarse values force many ties.
        let d: Vec<f32> = (0..m * m).map(|_| f32::from(rng.gen_range(0u8..4))).collect();
        let scores = Tensor::new([m, m], d.clone()).unwrap();
        let r = retrieval_from_scores(&scores, &DEFAULT_KS).unwrap();
        assert!(r.is_consistent());
        for q in 0..m {
            let row = &d[q * m..(q + 1) * m];
            let order = ranking(row);
            let mut seen = order.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..m).collect::<Vec<_>>(), "ranking is a permutation");
            assert_eq!(order.iter().position(|&j| j == q).unwrap(), r.caption_ranks[q]);
            let column: Vec<f32> = (0..m).map(|c| d[c * m + q]).collect();
            assert_eq!(ranking(&column).iter().position(|&j| j == q).unwrap(), r.figure_ranks[q]);
        }
    }
}

#[test]
fn too_few_candidates_for_the_cut_offs() {
    let scores = Tensor::new([5, 5], vec![0.0f32; 25]).unwrap();
    assert!(matches!(retrieval_from_scores(&scores, &DEFAULT_KS), Err(Error::Config(_))));
    let (model, data) = fixture(&SynthConfig::overfit(1));
    assert!(matches!(
        eval_bidirectional_retrieval(&model, &data, &[0, 1, 2], &DEFAULT_KS, Scorer::Correspondence),
        Err(Error::Config(_))
    ));
}

#[test]
fn correspondence_scores_match_pair_predictions() {
    let (model, data) = fixture(&SynthConfig::overfit(2));
    let rows = [3, 7, 1, 12];
    let s = score_matrix(&model, &data, &rows, Scorer::Correspondence).unwrap();
    let pairs: Vec<Pair> = rows
        .iter()
        .flat_map(|&c| rows.iter().map(move |&f| Pair { figure: f, caption: c }))
        .collect();
    let p = model.predict(&data, &pairs).unwrap();
    for (i, v) in s.data().iter().enumerate() {
        assert!((v - p.row(i)[CORRESPOND]).abs() < 1e-6);
    }
    let dot = score_matrix(&model, &data, &rows, Scorer::DotProduct).unwrap();
    let v = model.vision_features(&data, &rows).unwrap();
    let t = model.text_features(&data, &rows).unwrap();
    let expected: f32 = t.row(2).iter().zip(v.row(1)).map(|(a, b)| a * b).sum();
    assert!((dot.data()[2 * 4 + 1] - expected).abs() < 1e-5);
}

#[test]
fn retrieval_on_a_model_is_consistent_and_dumps_ranks() {
    let (model, data) = fixture(&SynthConfig::overfit(3));
    let rows: Vec<usize> = (0..10).collect();
    let r = eval_bidirectional_retrieval(&model, &data, &rows, &DEFAULT_KS, Scorer::Correspondence).unwrap();
    assert!(r.is_consistent());
    assert_eq!(r.figure_to_caption[2], 1.0, "R10 over 10 candidates");
    let ids: Vec<String> = rows.iter().map(|&i| data.records[i].id.clone()).collect();
    let csv = r.ranks_csv(&ids);
    assert_eq!(csv.lines().count(), 1 + 20);
    let report = r.report("first ten");
    assert_eq!(report.get("caption_to_figure/R10"), Some(1.0));
}

#[test]
fn constant_predictor_is_exactly_at_chance() {
    let (mut model, data) = fixture(&SynthConfig::overfit(4));
    let rows: Vec<usize> = (0..data.len()).collect();
    for class in [CORRESPOND, 1 - CORRESPOND] {
        constant_predictor(&mut model, class);
        assert_eq!(eval_fcc_accuracy(&model, &data, &rows, 9).unwrap(), 0.5);
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let (model, data) = fixture(&SynthConfig::overfit(5));
    let rows: Vec<usize> = (0..data.len()).collect();
    let acc = eval_fcc_accuracy(&model, &data, &rows, 2).unwrap();
    assert!((acc - 0.5).abs() <= 0.15, "{acc}");
}

#[test]
fn training_records_cannot_be_test_records() {
    let (mut model, data) = fixture(&SynthConfig::overfit(6));
    model.training_ids.insert(data.records[4].id.clone());
    assert!(matches!(
        eval_fcc_accuracy(&model, &data, &[1, 2, 3, 4], 0),
        Err(Error::Contract(_))
    ));
    assert!(eval_fcc_accuracy(&model, &data, &[1, 2, 3], 0).is_ok());
}

#[test]
fn transfer_validates_its_inputs() {
    let (model, data) = fixture(&SynthConfig::overfit(7));
    let cfg = TrainConfig {
        epochs: 1,
        folds: 2,
        ..TrainConfig::default()
    };
    let one_class: Vec<usize> = (0..data.len()).step_by(4).collect();
    assert!(matches!(
        eval_transfer_classification(&model, TrunkSource::Random, TrunkMode::Frozen, Branch::Vision, &data, &one_class, &cfg),
        Err(Error::Config(_))
    ));
    let rows: Vec<usize> = (0..data.len()).collect();
    assert!(matches!(
        eval_transfer_classification(&model, TrunkSource::External, TrunkMode::Frozen, Branch::Language, &data, &rows, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn transfer_report_lists_folds_and_classes() {
    let (model, data) = fixture(&SynthConfig::overfit(8));
    let before = model.params.checksum("");
    let rows: Vec<usize> = (0..data.len()).collect();
    let cfg = TrainConfig {
        epochs: 2,
        folds: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let r = eval_transfer_classification(&model, TrunkSource::Fcc(&model), TrunkMode::Frozen, Branch::Vision, &data, &rows, &cfg)
        .unwrap();
    assert_eq!(model.params.checksum(""), before);
    let acc = r.get("accuracy").unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(r.get("fold1/accuracy").is_some());
    assert!(r.get("class/circle/accuracy").is_some());
    let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}
