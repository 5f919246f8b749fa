use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::corpus::synth::{shapes_corpus, synthetic_tables, SynthConfig};
use crate::corpus::{sample_batches, Dataset, Pair, Vocab, PAD};
use crate::error::Error;
use crate::nn::{collect_grads, AdamConfig, AdamState, Mode};

fn fixture_with(mode: CombinerMode, op: CombineOp) -> (FccModel, Dataset) {
    let corpus = shapes_corpus(&SynthConfig::overfit(3)).unwrap();
    let arch = ArchConfig::desk();
    let combiner = CombinerConfig::new(mode, op);
    let sub = combiner.sub_dim(arch.embed_dim).unwrap();
    let tables = synthetic_tables(&corpus.records, sub, 7).unwrap();
    let vocab = Vocab::build(&corpus.records, None, 1);
    let data = Dataset::from_images(corpus.records, &corpus.images, &vocab, &tables, arch.image_size, arch.seq_len);
    let model = FccModel::new(arch, combiner, vocab, tables, 11).unwrap();
    (model, data)
}

fn fixture(mode: CombinerMode) -> (FccModel, Dataset) {
    fixture_with(mode, CombineOp::Concat)
}

fn combined(model: &FccModel, data: &Dataset, rows: &[usize]) -> Tensor<f32> {
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, &|_| true);
    let captions: Vec<_> = rows.iter().map(|&i| &data.captions[i]).collect();
    let v = model.combine(&mut tape, &binding, &captions).unwrap();
    tape.value(v).clone()
}

#[test]
fn mode_a_output_is_the_learnt_lookup() {
    let (model, data) = fixture(CombinerMode::A);
    let out = combined(&model, &data, &[0, 1]);
    let d = model.arch.embed_dim;
    assert_eq!(out.shape(), &[2, model.arch.seq_len, d]);
    let table = model.params.tensor("language.embedding").unwrap();
    for (n, caption) in [&data.captions[0], &data.captions[1]].into_iter().enumerate() {
        for (pos, &id) in caption.tokens.iter().enumerate() {
            let start = (n * model.arch.seq_len + pos) * d;
            assert_eq!(&out.data()[start..start + d], table.row(id));
        }
    }
}

#[test]
fn add_mode_matches_concat_for_a_single_source() {
    let (a, data) = fixture_with(CombinerMode::A, CombineOp::Concat);
    let (b, _) = fixture_with(CombinerMode::A, CombineOp::Add);
    assert_eq!(combined(&a, &data, &[2]), combined(&b, &data, &[2]));
}

#[test]
fn mode_c_splits_into_learnt_lemma_concept_thirds() {
    let (model, data) = fixture(CombinerMode::C);
    let d = model.arch.embed_dim;
    let sub = d / 3;
    let out = combined(&model, &data, &[0]);
    let caption = &data.captions[0];
    let record = &data.records[0];
    let lemma = model.tables().lemma.as_ref().unwrap();
    let concept = model.tables().concept.as_ref().unwrap();
    let mut saw_absent = false;
    for pos in 0..model.arch.seq_len {
        let v = &out.data()[pos * d..(pos + 1) * d];
        if pos >= caption.length {
            assert!(v.iter().all(|&x| x == 0.0), "padding position {pos} must be zero");
            continue;
        }
        assert_eq!(&v[sub..2 * sub], lemma.lookup(&record.lemmas.as_ref().unwrap()[pos]));
        match record.concepts.as_ref().unwrap()[pos].first() {
            Some(c) => assert_eq!(&v[2 * sub..], concept.lookup(c)),
            None => {
                saw_absent = true;
                assert!(v[2 * sub..].iter().all(|&x| x == 0.0));
            }
        }
    }
    assert!(saw_absent, "fixture caption should contain tokens without concepts");
}

#[test]
fn mode_c_without_tables_is_a_configuration_error() {
    let vocab = Vocab::from_words(vec!["x".into()]);
    let combiner = CombinerConfig::new(CombinerMode::C, CombineOp::Concat);
    let err = FccModel::new(ArchConfig::desk(), combiner, vocab, Default::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn desk_vision_shapes_and_wrong_size() {
    let (model, data) = fixture(CombinerMode::A);
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, &|_| true);
    let (images, _) = model.visual_inputs(&data, &[0, 1]).unwrap();
    let x = tape.leaf(images.unwrap(), false);
    let out = trunks::vision_forward(&mut tape, &model.params, &binding, &model.arch, x, Mode::Infer).unwrap();
    assert_eq!(tape.shape(out.features), &[2, 32]);
    let sides: Vec<usize> = out.block_maps.iter().map(|&m| tape.shape(m)[2]).collect();
    assert_eq!(sides, model.arch.vision_map_sizes());

    let bad = tape.leaf(Tensor::zeros([2, 3, 16, 16]), false);
    let err = trunks::vision_forward(&mut tape, &model.params, &binding, &model.arch, bad, Mode::Infer).unwrap_err();
    assert!(matches!(err, Error::Autodiff(crate::autodiff::AutodiffError::Dimension { axis: 2, .. })), "{err}");
}

#[test]
fn bypass_returns_stored_features_verbatim() {
    let (mut model, mut data) = fixture(CombinerMode::A);
    for (i, r) in data.records.iter_mut().enumerate() {
        r.visual_feature = Some((0..32).map(|j| (i * 32 + j) as f32 / 7.0).collect());
    }
    model.visual = VisualSource::Precomputed;
    let f = model.vision_features(&data, &[3, 1]).unwrap();
    assert_eq!(f.row(0), data.records[3].visual_feature.as_deref().unwrap());
    assert_eq!(f.row(1), data.records[1].visual_feature.as_deref().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let table = export_features(&model, &data, Branch::Vision, dir.path().join("v.txt")).unwrap();
    assert_eq!(table.get(&data.records[5].id).unwrap(), data.records[5].visual_feature.as_deref().unwrap());
}

#[test]
fn padding_captions_share_a_feature_and_the_last_position_is_unseen() {
    let (model, mut data) = fixture(CombinerMode::A);
    let len = model.arch.seq_len;
    data.captions[0].tokens = vec![PAD; len];
    data.captions[1].tokens = vec![PAD; len];
    let f = model.text_features(&data, &[0, 1]).unwrap();
    assert_eq!(f.row(0), f.row(1));

    // The first pool floors 146 positions to 29 windows, dropping the
    // convolution output that alone covers the final input token.
    let base = model.text_features(&data, &[2]).unwrap();
    data.captions[2].tokens[len - 1] = 5;
    assert_eq!(model.text_features(&data, &[2]).unwrap(), base);
    data.captions[2].tokens[len - 2] = 5;
    assert_ne!(model.text_features(&data, &[2]).unwrap(), base);
}

#[test]
fn fusion_probabilities() {
    let (model, data) = fixture(CombinerMode::A);
    let all: Vec<usize> = (0..6).collect();
    let v = model.vision_features(&data, &all).unwrap();
    let t = model.text_features(&data, &all).unwrap();
    let p = model.fuse_and_classify(&v, &t).unwrap();
    for row in p.data().chunks(2) {
        assert!((f64::from(row[0]) + f64::from(row[1]) - 1.0).abs() <= 1e-6);
    }
    assert_eq!(model.fuse_and_classify(&t, &v).unwrap(), p);
    let zero = model.fuse_and_classify(&Tensor::zeros([6, 32]), &t).unwrap();
    for row in zero.data().chunks(2).skip(1) {
        assert_eq!(row, &zero.data()[..2]);
    }
    let err = model.fuse_and_classify(&Tensor::zeros([6, 16]), &Tensor::zeros([6, 16])).unwrap_err();
    assert!(matches!(err, Error::Autodiff(_)));
}

#[test]
fn loss_examples() {
    let p = Tensor::new([2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
    assert_eq!(fcc_loss(&Tensor::new([1, 2], vec![0.0, 1.0]).unwrap(), &[true]).unwrap(), 0.0);
    assert!((fcc_loss(&Tensor::new([1, 2], vec![0.5, 0.5]).unwrap(), &[false]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((fcc_loss(&p, &[true, true]).unwrap() - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
}

#[test]
fn predict_matches_tape_forward() {
    let (model, data) = fixture(CombinerMode::B);
    let pairs = [Pair { figure: 0, caption: 0 }, Pair { figure: 0, caption: 4 }, Pair { figure: 7, caption: 7 }];
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, &|_| true);
    let fwd = model.forward(&mut tape, &binding, model.inputs(&data, &pairs).unwrap(), Mode::Infer, Freeze::default()).unwrap();
    let direct = softmax_rows(tape.value(fwd.logits));
    assert_eq!(model.predict(&data, &pairs).unwrap(), direct);
}

#[test]
fn one_step_moves_every_parameter_group() {
    let (mut model, data) = fixture(CombinerMode::C);
    let before = model.params.clone();
    let pairs = sample_batches(data.len(), 0, 32).unwrap().epoch(0).remove(0).pairs;
    let targets: Vec<usize> = pairs.iter().map(|p| usize::from(p.positive())).collect();
    let mut adam = AdamState::new(AdamConfig::new(1e-3, 1e-5), &model.params);
    let grads = {
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape, &|_| false);
        let inputs = model.inputs(&data, &pairs).unwrap();
        let fwd = model.forward(&mut tape, &binding, inputs, Mode::Train, Freeze::default()).unwrap();
        let loss = fcc_loss_on_tape(&mut tape, fwd.logits, &targets).unwrap();
        collect_grads(&binding, tape.backward(loss).unwrap())
    };
    adam.step(&mut model.params, &grads).unwrap();
    for group in ["vision.", "language.block", "language.embedding", "fusion."] {
        assert_ne!(model.params.checksum(group), before.checksum(group), "{group} unchanged");
    }
    let emb = model.params.tensor("language.embedding").unwrap();
    assert!(emb.row(0).iter().all(|&v| v == 0.0), "padding row must stay zero");
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let (mut model, data) = fixture(CombinerMode::C);
    model.training_ids.insert(data.records[0].id.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fcck");
    save_checkpoint(&model, &path).unwrap();

    let mut loaded = load_checkpoint(&path, Some(CombinerMode::C)).unwrap();
    assert!(!loaded.tables_ready());
    loaded.attach_tables(model.tables().clone()).unwrap();
    for (a, b) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(loaded.training_ids, model.training_ids);
    let pairs = [Pair { figure: 1, caption: 2 }, Pair { figure: 3, caption: 3 }];
    assert_eq!(model.predict(&data, &pairs).unwrap(), loaded.predict(&data, &pairs).unwrap());

    let mut other = model.tables().clone();
    other.concept = synthetic_tables(&data.records, 10, 99).unwrap().concept;
    assert!(matches!(loaded.attach_tables(other), Err(Error::Config(_))));

    assert!(matches!(load_checkpoint(&path, Some(CombinerMode::A)), Err(Error::Config(_))));

    let bytes = std::fs::read(&path).unwrap();
    let tampered = dir.path().join("bad.fcck");
    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&tampered, &b).unwrap();
    assert!(matches!(load_checkpoint(&tampered, None), Err(Error::Format(_))));
    let mut b = bytes.clone();
    b[4] = 9;
    std::fs::write(&tampered, &b).unwrap();
    assert!(matches!(load_checkpoint(&tampered, None), Err(Error::Format(_))));
    std::fs::write(&tampered, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_checkpoint(&tampered, None), Err(Error::Io { .. })));
}

#[test]
fn exported_text_features_round_trip() {
    let (model, data) = fixture(CombinerMode::A);
    let subset = data.subset(&[0, 1, 2]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    export_features(&model, &subset, Branch::Language, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("3 32"));
    let back = crate::corpus::EmbeddingTable::load(&path, crate::corpus::TableKind::Concept).unwrap();
    let direct = model.text_features(&subset, &[0, 1, 2]).unwrap();
    for (i, r) in subset.records.iter().enumerate() {
        for (a, b) in back.get(&r.id).unwrap().iter().zip(direct.row(i)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}
