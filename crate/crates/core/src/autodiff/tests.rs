use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn mul_by_zero_annihilates() {
    let mut tape = Tape::new();
    let a = tape.constant(t32(&[3], &[1.0, 2.0, 3.0]));
    let b = tape.constant(t32(&[3], &[0.0, 0.0, 0.0]));
    let c = tape.apply(Primitive::Mul, &[a, b]).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn maxpool1d_floors_odd_lengths() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 996, 2]));
    let y = tape.maxpool1d(x, 5).unwrap();
    assert_eq!(tape.shape(y), &[1, 199, 2]);
}

#[test]
fn log_softmax_of_equal_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(t32(&[1, 2], &[0.0, 0.0]));
    let y = tape.log_softmax(x).unwrap();
    let ln2 = -(2.0f32).ln();
    assert_eq!(tape.value(y).data(), &[ln2, ln2]);
}

#[test]
fn log_softmax_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(t32(&[1, 2], &[1000.0, 0.0]));
    let y = tape.log_softmax(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.0);
}

#[test]
fn mean_gradient_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(t32(&[4], &[1.0, -2.0, 3.0, 5.0]), true);
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn squared_norm_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t32(&[2], &[3.0, 4.0]), true);
    let n = tape.apply(Primitive::L2NormSquared, &[x]).unwrap();
    let g = tape.backward(n).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0, 8.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(t32(&[2], &[3.0, 4.0]), true);
    let n = tape.l2_norm(x).unwrap();
    assert_eq!(tape.value(n).item(), 5.0);
    let g = tape.backward(n).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.6, 0.8]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(t32(&[2], &[3.0, 4.0]), true);
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(AutodiffError::Contract(_))));
}

#[test]
fn unreached_leaves_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t32(&[2], &[1.0, 2.0]), true);
    let unused = tape.leaf(t32(&[3], &[1.0, 2.0, 3.0]), true);
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn shape_mismatch_names_axis() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 4]));
    match tape.add(a, b) {
        Err(AutodiffError::Dimension { axis, .. }) => assert_eq!(axis, 1),
        other => panic!("expected dimension error, got {other:?}"),
    }
    let w = tape.constant(Tensor::zeros([4, 2, 3, 3]));
    let x = tape.constant(Tensor::zeros([1, 3, 8, 8]));
    match tape.conv2d(x, w, 1, Padding::Same) {
        Err(AutodiffError::Dimension { axis, .. }) => assert_eq!(axis, 1),
        other => panic!("expected channel mismatch, got {other:?}"),
    }
}

#[test]
fn overflow_is_a_numeric_error() {
    let mut tape = Tape::new();
    let a = tape.constant(t32(&[1], &[3e38]));
    let b = tape.constant(t32(&[1], &[10.0]));
    assert!(matches!(tape.mul(a, b), Err(AutodiffError::Numeric { .. })));
}

#[test]
fn maxpool_ties_pick_lowest_index_and_route_one_unit() {
    let mut tape = Tape::new();
    let x = tape.leaf(t32(&[1, 1, 2, 4], &[1.0, 1.0, 0.0, 2.0, 1.0, 0.0, 2.0, 2.0]), true);
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(
        g.get(x).unwrap().data(),
        &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn concat_splits_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(t32(&[2, 1], &[1.0, 2.0]), true);
    let b = tape.leaf(t32(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), true);
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let w = tape.constant(t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let p = tape.mul(c, w).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0, 4.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut r = rng(3);
    let x = Tensor::<f64>::uniform([2, 2, 5, 4], 1.0, &mut r);
    let w = Tensor::<f64>::uniform([3, 2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv2d(xv, wv, 1, Padding::Same).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 5, 4]);
    let yd = tape.value(y).data();
    let at = |n: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= 5 || j >= 4 {
            0.0
        } else {
            x.data()[((n * 2 + c) * 5 + i as usize) * 4 + j as usize]
        }
    };
    for n in 0..2 {
        for o in 0..3 {
            for i in 0..5 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * at(n, c, i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                            }
                        }
                    }
                    let got = yd[((n * 3 + o) * 5 + i) * 4 + j];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut r = rng(4);
    let x = Tensor::<f64>::uniform([2, 9, 3], 1.0, &mut r);
    let w = Tensor::<f64>::uniform([4, 5, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv1d(xv, wv, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 4]);
    for n in 0..2 {
        for t in 0..5 {
            for f in 0..4 {
                let mut acc = 0.0;
                for k in 0..5 {
                    for d in 0..3 {
                        acc += w.data()[(f * 5 + k) * 3 + d] * x.data()[(n * 9 + t + k) * 3 + d];
                    }
                }
                let got = tape.value(y).data()[(n * 5 + t) * 4 + f];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

/// Scalar probe `mean(out ⊙ r)` with a fixed random `r`, so no symmetry of the
/// primitive can cancel its gradient.
fn probe<T: Element>(tape: &mut Tape<'_, T>, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(Tensor::uniform(shape, 1.0, &mut rng(seed)));
    let p = tape.mul(out, r)?;
    tape.mean(p)
}

#[test]
fn conv2d_weight_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let x = Tensor::<f32>::uniform([1, 2, 8, 8], 1.0, &mut r);
    let w = Tensor::<f32>::uniform([3, 2, 3, 3], 0.5, &mut r);
    let report = gradient_check(
        &[("x", x), ("w", w)],
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], 1, Padding::Same)?;
            probe(tape, y, 5)
        },
        1e-2,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn dense_layer_gradient_check() {
    let mut r = rng(12);
    let x = Tensor::<f32>::uniform([4, 3], 1.0, &mut r);
    let w = Tensor::<f32>::uniform([3, 2], 1.0, &mut r);
    let b = Tensor::<f32>::uniform([2], 1.0, &mut r);
    let report = gradient_check(
        &[("x", x), ("w", w), ("b", b)],
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let y = tape.bias_add(h, v[2], 1)?;
            probe(tape, y, 6)
        },
        1e-2,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.params.len(), 3);
}

#[test]
fn identity_has_zero_error() {
    let x = Tensor::<f32>::new([1], vec![0.75]).unwrap();
    let report = gradient_check(&[("x", x)], |_, v| Ok(v[0]), 1e-2).unwrap();
    assert_eq!(report.max_rel_error(), 0.0);
}

#[test]
fn batchnorm_train_gradient_check() {
    let mut r = rng(13);
    let x = Tensor::<f32>::uniform([4, 3], 1.0, &mut r);
    let g = Tensor::<f32>::uniform([3], 1.0, &mut r);
    let b = Tensor::<f32>::uniform([3], 1.0, &mut r);
    let report = gradient_check(
        &[("x", x), ("gamma", g), ("beta", b)],
        |tape, v| {
            let (y, _) = tape.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            probe(tape, y, 7)
        },
        1e-2,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batchnorm_rejects_single_sample_training() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 3]));
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(
        tape.batchnorm_train(x, g, b, 1e-5),
        Err(AutodiffError::DegenerateStatistics(_))
    ));
}

#[test]
fn backward_is_linear() {
    let mut r = rng(21);
    let x = Tensor::<f64>::uniform([6], 1.0, &mut r);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let f = tape.sum_squares(v).unwrap();
        let g = tape.mean(v).unwrap();
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let s = tape.add(fa, gb).unwrap();
        tape.backward(s).unwrap().take(v).unwrap()
    };
    let f = grad_of(1.0, 0.0);
    let g = grad_of(0.0, 1.0);
    let combined = grad_of(2.5, -1.5);
    for i in 0..6 {
        let expect = 2.5 * f.data()[i] - 1.5 * g.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform([3, 4, 10, 10], 1.0, &mut r));
        let w = tape.constant(Tensor::uniform([5, 4, 3, 3], 1.0, &mut r));
        let y = tape.conv2d(x, w, 1, Padding::Same).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let run = || {
        let mut r = rng(8);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::uniform([9, 3, 6, 6], 1.0, &mut r), true);
        let w = tape.leaf(Tensor::uniform([4, 3, 3, 3], 1.0, &mut r), true);
        let y = tape.conv2d(x, w, 1, Padding::Same).unwrap();
        let l = probe(&mut tape, y, 2).unwrap();
        let g = tape.backward(l).unwrap();
        (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let par = run();
    crate::par::set_parallel(false);
    let seq = run();
    crate::par::set_parallel(true);
    assert_eq!(par, seq);
}

