use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, init_conv1d, init_conv_block_2d};
use super::*;
use crate::autodiff::{AutodiffError, Tape, Tensor};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

fn block_store(cin: usize, cout: usize) -> ParamStore {
    let mut store = ParamStore::new();
    init_conv_block_2d(&mut store, "b", cin, cout, &mut rng()).unwrap();
    store
}

fn run_block(store: &ParamStore, x: Tensor<f32>, mode: Mode, pool: Pool2d) -> Result<Tensor<f32>, crate::Error> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, &|_| false);
    let refs = layers::bind_conv_block_2d(store, &binding, "b")?;
    let xv = tape.constant(x);
    let out = layers::conv_block_2d(&mut tape, xv, &refs, mode, pool)?;
    Ok(tape.value(out.output).clone())
}

#[test]
fn vision_block_halves_spatial_extent() {
    let store = block_store(3, 64);
    let y = run_block(&store, Tensor::zeros([1, 3, 224, 224]), Mode::Infer, Pool2d::Halve).unwrap();
    assert_eq!(y.shape(), &[1, 64, 112, 112]);
}

#[test]
fn terminal_vision_block_pools_globally() {
    let store = block_store(256, 512);
    let y = run_block(&store, Tensor::zeros([1, 256, 28, 28]), Mode::Infer, Pool2d::Global).unwrap();
    assert_eq!(y.shape(), &[1, 512]);
}

#[test]
fn zero_input_gives_zero_output_with_zero_beta() {
    let store = block_store(2, 4);
    let y = run_block(&store, Tensor::zeros([2, 2, 6, 6]), Mode::Train, Pool2d::Halve).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn vision_block_rejects_channel_mismatch() {
    let store = block_store(3, 4);
    let err = run_block(&store, Tensor::zeros([2, 2, 6, 6]), Mode::Train, Pool2d::Halve).unwrap_err();
    assert!(matches!(err, crate::Error::Autodiff(AutodiffError::Dimension { axis: 1, .. })));
}

fn run_block_1d(store: &ParamStore, x: Tensor<f32>, pool: Pool1d) -> Result<Tensor<f32>, crate::Error> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, &|_| false);
    let conv = layers::bind_affine(store, &binding, "c")?;
    let xv = tape.constant(x);
    let y = layers::conv_block_1d(&mut tape, xv, conv, pool)?.output;
    Ok(tape.value(y).clone())
}

#[test]
fn first_language_block_shape() {
    let mut store = ParamStore::new();
    init_conv1d(&mut store, "c", 300, 512, 5, &mut rng()).unwrap();
    let y = run_block_1d(&store, Tensor::zeros([1, 1000, 300]), Pool1d::Window(5)).unwrap();
    assert_eq!(y.shape(), &[1, 199, 512]);
}

#[test]
fn terminal_language_block_shape() {
    let mut store = ParamStore::new();
    init_conv1d(&mut store, "c", 512, 512, 5, &mut rng()).unwrap();
    let y = run_block_1d(&store, Tensor::zeros([1, 39, 512]), Pool1d::Global).unwrap();
    assert_eq!(y.shape(), &[1, 512]);
}

#[test]
fn constant_sequence_gives_constant_conv_output() {
    let mut store = ParamStore::new();
    init_conv1d(&mut store, "c", 4, 3, 5, &mut rng()).unwrap();
    store.tensor_mut("c.bias").unwrap().data_mut().copy_from_slice(&[0.5, 0.5, 0.5]);
    let y = run_block_1d(&store, Tensor::full([1, 20, 4], 0.3), Pool1d::Window(1)).unwrap();
    for f in 0..3 {
        let first = y.data()[f];
        assert!((0..16).all(|t| y.data()[t * 3 + f] == first));
    }
}

#[test]
fn short_sequence_is_a_dimension_error() {
    let mut store = ParamStore::new();
    init_conv1d(&mut store, "c", 4, 3, 5, &mut rng()).unwrap();
    let err = run_block_1d(&store, Tensor::zeros([1, 4, 4]), Pool1d::Window(5)).unwrap_err();
    assert!(matches!(err, crate::Error::Autodiff(AutodiffError::Dimension { .. })));
}

fn bn_store(c: usize) -> ParamStore {
    let mut store = ParamStore::new();
    layers::init_batchnorm(&mut store, "bn", c).unwrap();
    store
}

fn run_bn(store: &ParamStore, x: Tensor<f32>, mode: Mode) -> Tensor<f32> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, &|_| false);
    let refs = layers::bind_batchnorm(store, &binding, "bn").unwrap();
    let xv = tape.constant(x);
    let (y, _) = layers::batchnorm_forward(&mut tape, xv, &refs, mode).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_variance_channel_maps_to_beta() {
    let mut store = bn_store(2);
    store.tensor_mut("bn.beta").unwrap().data_mut().copy_from_slice(&[0.25, -1.0]);
    let x = Tensor::new([3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
    let y = run_bn(&store, x, Mode::Train);
    for n in 0..3 {
        assert_eq!(y.data()[n * 2 + 1], -1.0);
    }
}

#[test]
fn train_mode_standardizes_channels() {
    let store = bn_store(3);
    let x = Tensor::<f32>::uniform([6, 3, 4, 4], 3.0, &mut rng()).map(|v| v * 2.0 + 1.5);
    let y = run_bn(&store, x, Mode::Train);
    for c in 0..3 {
        let vals: Vec<f64> = (0..6)
            .flat_map(|n| y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
            .map(f64::from)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn infer_mode_with_unit_statistics_is_identity() {
    let store = bn_store(2);
    let x = Tensor::<f32>::uniform([3, 2], 1.0, &mut rng());
    let y = run_bn(&store, x.clone(), Mode::Infer);
    let scale = 1.0 / (1.0f32 + 1e-5).sqrt();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a * scale - b).abs() < 1e-7);
    }
}

#[test]
fn running_stats_follow_momentum() {
    let mut store = bn_store(1);
    let update = StatUpdate {
        prefix: "bn".into(),
        stats: crate::autodiff::BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        },
    };
    update.apply(&mut store).unwrap();
    assert!((store.tensor("bn.running_mean").unwrap().item() - 0.1).abs() < 1e-7);
    assert!((store.tensor("bn.running_var").unwrap().item() - 1.2).abs() < 1e-6);
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::zeros([1]), ParamRole::Weight).unwrap();
    assert!(store.insert("a", Tensor::zeros([1]), ParamRole::Weight).is_err());
}

#[test]
fn running_stats_are_not_trainable() {
    let store = bn_store(4);
    assert_eq!(store.trainable_count(), 8);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, &|_| false);
    let flags: Vec<bool> = binding.vars().iter().map(|v| tape.requires_grad(*v)).collect();
    assert_eq!(flags, vec![true, true, false, false]);
}

#[test]
fn gradient_suite_passes_for_one_seed() {
    for entry in crate::gradsuite::run_suite::<f32>(1).unwrap() {
        assert!(entry.passed(), "{} failed: {:?}", entry.check, entry.report);
    }
    for entry in crate::gradsuite::run_suite::<f64>(1).unwrap() {
        assert!(entry.passed(), "{} failed: {:?}", entry.check, entry.report);
    }
}
