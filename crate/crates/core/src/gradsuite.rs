//! Finite-difference checks over every primitive and layer, at small random
//! shapes. Inputs that feed a kink (ReLU at 0, max-pool ties) are drawn away
//! from it so the central difference never straddles the non-differentiable
//! point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradient_check, AutodiffError, Element, GradCheckReport, Padding, Tape, Tensor, Var};
use crate::nn::layers::{self, Affine, BatchNormRefs, ConvBlock2dRefs};
use crate::nn::{Mode, Pool1d, Pool2d};

pub const F32_TOLERANCE: f64 = 1e-2;
pub const F64_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub check: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn probe<T: Element>(tape: &mut Tape<'_, T>, out: Var, rng_seed: u64) -> Result<Var, AutodiffError> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x9e37_79b9);
    let r = tape.constant(Tensor::uniform(shape, 1.0, &mut rng));
    let p = tape.mul(out, r)?;
    tape.mean(p)
}

fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), limit, rng)
}

/// Values with magnitude in [0.1, 1] and random sign.
fn away_from_zero<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            T::from_f64_lossy(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.05 apart, randomly placed, so every pooling
/// window has a unique maximum separated from the runner-up.
fn distinct<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data: Vec<T> = (0..n)
        .map(|i| T::from_f64_lossy(-1.0 + 0.05 * i as f64))
        .collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Check = fn(u64, f64) -> Result<GradCheckReport, AutodiffError>;

fn checks<T: Element>() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", check_matmul::<T>),
        ("add", check_add::<T>),
        ("bias_add", check_bias_add::<T>),
        ("mul", check_mul::<T>),
        ("concat", check_concat::<T>),
        ("relu", check_relu::<T>),
        ("conv2d_same", check_conv2d_same::<T>),
        ("conv2d_valid_stride2", check_conv2d_strided::<T>),
        ("maxpool2d", check_maxpool2d::<T>),
        ("global_maxpool2d", check_global_maxpool2d::<T>),
        ("conv1d_valid", check_conv1d_valid::<T>),
        ("conv1d_same", check_conv1d_same::<T>),
        ("maxpool1d", check_maxpool1d::<T>),
        ("global_maxpool1d", check_global_maxpool1d::<T>),
        ("embedding", check_embedding::<T>),
        ("batchnorm_train", check_batchnorm_train::<T>),
        ("batchnorm_infer", check_batchnorm_infer::<T>),
        ("log_softmax", check_log_softmax::<T>),
        ("nll_loss", check_nll::<T>),
        ("mean", check_mean::<T>),
        ("l2_norm", check_l2_norm::<T>),
        ("l2_norm_squared", check_sum_squares::<T>),
        ("layer_dense", check_dense_layer::<T>),
        ("layer_conv_block_2d_train", check_conv_block_2d_train::<T>),
        ("layer_conv_block_2d_infer_global", check_conv_block_2d_infer::<T>),
        ("layer_conv_block_1d", check_conv_block_1d::<T>),
        ("layer_conv_block_1d_global", check_conv_block_1d_global::<T>),
        ("layer_fusion_head", check_fusion_head::<T>),
    ]
}

/// Runs every check for one seed.
pub fn run_suite<T: Element>(seed: u64) -> Result<Vec<SuiteEntry>, AutodiffError> {
    let tol = if std::mem::size_of::<T>() == 4 {
        F32_TOLERANCE
    } else {
        F64_TOLERANCE
    };
    checks::<T>()
        .into_iter()
        .map(|(name, f)| {
            f(seed, tol).map(|report| SuiteEntry {
                check: name,
                seed,
                report,
            })
        })
        .collect()
}

pub fn check_names() -> Vec<&'static str> {
    checks::<f32>().into_iter().map(|(n, _)| n).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_matmul<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let a = uniform::<T>(&mut r, &[3, 4], 1.0);
    let b = uniform::<T>(&mut r, &[4, 2], 1.0);
    gradient_check(&[("a", a), ("b", b)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, seed)
    }, tol)
}

fn check_add<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let a = uniform::<T>(&mut r, &[2, 3, 2], 1.0);
    let b = uniform::<T>(&mut r, &[2, 3, 2], 1.0);
    gradient_check(&[("a", a), ("b", b)], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, seed)
    }, tol)
}

fn check_bias_add<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[2, 3, 4], 1.0);
    let b = uniform::<T>(&mut r, &[3], 1.0);
    gradient_check(&[("x", x), ("bias", b)], |t, v| {
        let y = t.bias_add(v[0], v[1], 1)?;
        probe(t, y, seed)
    }, tol)
}

fn check_mul<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let a = uniform::<T>(&mut r, &[5], 1.0);
    let b = uniform::<T>(&mut r, &[5], 1.0);
    gradient_check(&[("a", a), ("b", b)], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, seed)
    }, tol)
}

fn check_concat<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let a = uniform::<T>(&mut r, &[2, 3, 2], 1.0);
    let b = uniform::<T>(&mut r, &[2, 3, 1], 1.0);
    gradient_check(&[("a", a), ("b", b)], |t, v| {
        let y = t.concat(&[v[0], v[1]], 2)?;
        probe(t, y, seed)
    }, tol)
}

fn check_relu<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = away_from_zero::<T>(&mut rng(seed), &[3, 4]);
    gradient_check(&[("x", x)], |t, v| {
        let y = t.relu(v[0])?;
        probe(t, y, seed)
    }, tol)
}

fn check_conv2d_same<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[2, 2, 5, 5], 1.0);
    let w = uniform::<T>(&mut r, &[3, 2, 3, 3], 0.5);
    gradient_check(&[("x", x), ("w", w)], |t, v| {
        let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
        probe(t, y, seed)
    }, tol)
}

fn check_conv2d_strided<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[1, 2, 7, 6], 1.0);
    let w = uniform::<T>(&mut r, &[2, 2, 3, 3], 0.5);
    gradient_check(&[("x", x), ("w", w)], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, Padding::Valid)?;
        probe(t, y, seed)
    }, tol)
}

fn check_maxpool2d<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = distinct::<T>(&mut rng(seed), &[2, 2, 5, 4]);
    gradient_check(&[("x", x)], |t, v| {
        let y = t.maxpool2d(v[0], 2, 2)?;
        probe(t, y, seed)
    }, tol)
}

fn check_global_maxpool2d<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = distinct::<T>(&mut rng(seed), &[2, 3, 3, 3]);
    gradient_check(&[("x", x)], |t, v| {
        let y = t.global_maxpool2d(v[0])?;
        probe(t, y, seed)
    }, tol)
}

fn check_conv1d_valid<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[2, 8, 3], 1.0);
    let w = uniform::<T>(&mut r, &[4, 5, 3], 0.5);
    gradient_check(&[("x", x), ("w", w)], |t, v| {
        let y = t.conv1d(v[0], v[1], Padding::Valid)?;
        probe(t, y, seed)
    }, tol)
}

fn check_conv1d_same<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[1, 6, 2], 1.0);
    let w = uniform::<T>(&mut r, &[3, 3, 2], 0.5);
    gradient_check(&[("x", x), ("w", w)], |t, v| {
        let y = t.conv1d(v[0], v[1], Padding::Same)?;
        probe(t, y, seed)
    }, tol)
}

fn check_maxpool1d<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = distinct::<T>(&mut rng(seed), &[2, 11, 3]);
    gradient_check(&[("x", x)], |t, v| {
        let y = t.maxpool1d(v[0], 5)?;
        probe(t, y, seed)
    }, tol)
}

fn check_global_maxpool1d<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = distinct::<T>(&mut rng(seed), &[2, 7, 3]);
    gradient_check(&[("x", x)], |t, v| {
        let y = t.global_maxpool1d(v[0])?;
        probe(t, y, seed)
    }, tol)
}

fn check_embedding<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let table = uniform::<T>(&mut r, &[6, 3], 1.0);
    let ids: Vec<usize> = (0..8).map(|_| r.gen_range(0..6)).collect();
    gradient_check(&[("table", table)], |t, v| {
        let y = t.embedding(v[0], &ids, &[2, 4])?;
        probe(t, y, seed)
    }, tol)
}

fn check_batchnorm_train<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[4, 3, 2, 2], 1.0);
    let g = uniform::<T>(&mut r, &[3], 1.0);
    let b = uniform::<T>(&mut r, &[3], 1.0);
    gradient_check(&[("x", x), ("gamma", g), ("beta", b)], |t, v| {
        let (y, _) = t.batchnorm_train(v[0], v[1], v[2], layers::BN_EPS)?;
        probe(t, y, seed)
    }, tol)
}

fn check_batchnorm_infer<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[3, 2], 1.0);
    let g = uniform::<T>(&mut r, &[2], 1.0);
    let b = uniform::<T>(&mut r, &[2], 1.0);
    let mean: Vec<T> = (0..2).map(|_| T::from_f64_lossy(r.gen_range(-0.5..0.5))).collect();
    let var: Vec<T> = (0..2).map(|_| T::from_f64_lossy(r.gen_range(0.5..2.0))).collect();
    gradient_check(&[("x", x), ("gamma", g), ("beta", b)], |t, v| {
        let y = t.batchnorm_infer(v[0], v[1], v[2], &mean, &var, layers::BN_EPS)?;
        probe(t, y, seed)
    }, tol)
}

fn check_log_softmax<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = uniform::<T>(&mut rng(seed), &[3, 4], 2.0);
    gradient_check(&[("x", x)], |t, v| {
        let y = t.log_softmax(v[0])?;
        probe(t, y, seed)
    }, tol)
}

fn check_nll<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[4, 3], 2.0);
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    gradient_check(&[("logits", x)], |t, v| {
        let y = t.log_softmax(v[0])?;
        t.nll_loss(y, &targets)
    }, tol)
}

fn check_mean<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = uniform::<T>(&mut rng(seed), &[2, 3, 2, 2], 1.0);
    gradient_check(&[("x", x)], |t, v| t.mean(v[0]), tol)
}

fn check_l2_norm<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = uniform::<T>(&mut rng(seed), &[7], 1.0);
    gradient_check(&[("x", x)], |t, v| t.l2_norm(v[0]), tol)
}

fn check_sum_squares<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let x = uniform::<T>(&mut rng(seed), &[2, 3], 1.0);
    gradient_check(&[("x", x)], |t, v| t.sum_squares(v[0]), tol)
}

fn check_dense_layer<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let x = uniform::<T>(&mut r, &[4, 3], 1.0);
    let w = uniform::<T>(&mut r, &[3, 2], 1.0);
    let b = uniform::<T>(&mut r, &[2], 1.0);
    gradient_check(&[("x", x), ("weight", w), ("bias", b)], |t, v| {
        let y = layers::dense(t, v[0], Affine { weight: v[1], bias: v[2] })?;
        probe(t, y, seed)
    }, tol)
}

fn block_params<T: Element>(r: &mut ChaCha8Rng, cin: usize, cout: usize) -> Vec<Tensor<T>> {
    vec![
        uniform(r, &[cout, cin, 3, 3], 0.5),
        uniform(r, &[cout], 0.1),
        uniform::<T>(r, &[cout], 1.0).map(|v| v.abs() + T::from_f64_lossy(0.5)),
        uniform(r, &[cout], 0.1),
        uniform(r, &[cout, cout, 3, 3], 0.5),
        uniform(r, &[cout], 0.1),
        uniform::<T>(r, &[cout], 1.0).map(|v| v.abs() + T::from_f64_lossy(0.5)),
        uniform(r, &[cout], 0.1),
    ]
}

const BLOCK_NAMES: [&str; 9] = ["x", "conv0.w", "conv0.b", "bn0.gamma", "bn0.beta", "conv1.w", "conv1.b", "bn1.gamma", "bn1.beta"];

fn block_refs<'s, T: Element>(v: &[Var], mean: &'s [T], var: &'s [T]) -> ConvBlock2dRefs<'s, T> {
    let bn = |g: Var, b: Var| BatchNormRefs {
        gamma: g,
        beta: b,
        running_mean: mean,
        running_var: var,
    };
    ConvBlock2dRefs {
        convs: [
            Affine { weight: v[1], bias: v[2] },
            Affine { weight: v[5], bias: v[6] },
        ],
        norms: [bn(v[3], v[4]), bn(v[7], v[8])],
    }
}

/// The block's ReLU and pooling kinks are exercised by the primitive checks;
/// here the seed is re-drawn until no pre-activation or pooling margin lies
/// within a few finite-difference steps of a kink.
fn conv_block_check<T: Element>(seed: u64, tol: f64, mode: Mode, pool: Pool2d) -> Result<GradCheckReport, AutodiffError> {
    let (cin, cout, hw) = (2, 2, 4);
    let mean = vec![T::zero(); cout];
    let var = vec![T::one(); cout];
    let mut r = rng(seed);
    let mut params;
    loop {
        params = vec![uniform::<T>(&mut r, &[2, cin, hw, hw], 1.0)];
        params.extend(block_params::<T>(&mut r, cin, cout));
        if block_margin(&params, &mean, &var, mode, pool)? > 0.05 {
            break;
        }
    }
    let named: Vec<(&str, Tensor<T>)> = BLOCK_NAMES.iter().copied().zip(params).collect();
    gradient_check(&named, |t, v| {
        let refs = block_refs(v, &mean, &var);
        let out = layers::conv_block_2d(t, v[0], &refs, mode, pool)?;
        probe(t, out.output, seed)
    }, tol)
}

/// Smallest distance of any ReLU input from zero and of any pooling winner
/// from its runner-up.
fn block_margin<T: Element>(params: &[Tensor<T>], mean: &[T], var: &[T], mode: Mode, pool: Pool2d) -> Result<f64, AutodiffError> {
    let mut t = Tape::new();
    let v: Vec<Var> = params.iter().map(|p| t.leaf_ref(p, false)).collect();
    let refs = block_refs(&v, mean, var);
    let mut margin = f64::INFINITY;
    let mut h = v[0];
    for (conv, bn) in refs.convs.iter().zip(&refs.norms) {
        let c = t.conv2d(h, conv.weight, 1, Padding::Same)?;
        let c = t.bias_add(c, conv.bias, 1)?;
        let (n, _) = layers::batchnorm_forward(&mut t, c, bn, mode)?;
        margin = t
            .value(n)
            .data()
            .iter()
            .map(|x| x.to_f64().unwrap().abs())
            .fold(margin, f64::min);
        h = t.relu(n)?;
    }
    let pre = t.value(h);
    let shape = pre.shape();
    let (hh, ww) = (shape[2], shape[3]);
    let (win, stride) = match pool {
        Pool2d::Halve => (2, 2),
        Pool2d::Global => (hh, hh),
    };
    for plane in pre.data().chunks(hh * ww) {
        for oy in 0..=(hh - win) / stride {
            for ox in 0..=(ww - win) / stride {
                let mut vals: Vec<f64> = (0..win * win)
                    .map(|k| plane[(oy * stride + k / win) * ww + ox * stride + k % win].to_f64().unwrap())
                    .collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] > 0.0 {
                    margin = margin.min(vals[0] - vals[1]);
                }
            }
        }
    }
    Ok(margin)
}

fn check_conv_block_2d_train<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    conv_block_check::<T>(seed, tol, Mode::Train, Pool2d::Halve)
}

fn check_conv_block_2d_infer<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    conv_block_check::<T>(seed, tol, Mode::Infer, Pool2d::Global)
}

fn check_conv_block_1d<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    conv_block_1d_check::<T>(seed, tol, Pool1d::Window(5))
}

fn check_conv_block_1d_global<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    conv_block_1d_check::<T>(seed, tol, Pool1d::Global)
}

fn conv_block_1d_check<T: Element>(seed: u64, tol: f64, pool: Pool1d) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let (x, w, b) = loop {
        let x = uniform::<T>(&mut r, &[2, 14, 3], 1.0);
        let w = uniform::<T>(&mut r, &[3, 5, 3], 0.5);
        let b = uniform::<T>(&mut r, &[3], 0.1);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf_ref(&x, false), t.leaf_ref(&w, false), t.leaf_ref(&b, false));
        let c = t.conv1d(xv, wv, Padding::Valid)?;
        let c = t.bias_add(c, bv, 2)?;
        let pre = t.value(c);
        let relu_margin = pre.data().iter().map(|v| v.to_f64().unwrap().abs()).fold(f64::INFINITY, f64::min);
        let s = pre.shape().to_vec();
        let win = match pool {
            Pool1d::Window(k) => k,
            Pool1d::Global => s[1],
        };
        let mut pool_margin = f64::INFINITY;
        for n in 0..s[0] {
            for o in 0..s[1] / win {
                for f in 0..s[2] {
                    let mut vals: Vec<f64> = (0..win)
                        .map(|k| pre.data()[(n * s[1] + o * win + k) * s[2] + f].to_f64().unwrap().max(0.0))
                        .collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] > 0.0 {
                        pool_margin = pool_margin.min(vals[0] - vals[1]);
                    }
                }
            }
        }
        if relu_margin.min(pool_margin) > 0.05 {
            break (x, w, b);
        }
    };
    gradient_check(&[("x", x), ("weight", w), ("bias", b)], |t, v| {
        let y = layers::conv_block_1d(t, v[0], Affine { weight: v[1], bias: v[2] }, pool)?.output;
        probe(t, y, seed)
    }, tol)
}

fn check_fusion_head<T: Element>(seed: u64, tol: f64) -> Result<GradCheckReport, AutodiffError> {
    let mut r = rng(seed);
    let (params, targets) = loop {
        let vis = uniform::<T>(&mut r, &[3, 4], 1.0);
        let txt = uniform::<T>(&mut r, &[3, 4], 1.0);
        let w0 = uniform::<T>(&mut r, &[4, 3], 1.0);
        let b0 = uniform::<T>(&mut r, &[3], 0.2);
        let w1 = uniform::<T>(&mut r, &[3, 2], 1.0);
        let b1 = uniform::<T>(&mut r, &[2], 0.2);
        let mut t = Tape::new();
        let v: Vec<Var> = [&vis, &txt, &w0, &b0].iter().map(|p| t.leaf_ref(*p, false)).collect();
        let prod = t.mul(v[0], v[1])?;
        let h = layers::dense(&mut t, prod, Affine { weight: v[2], bias: v[3] })?;
        let margin = t.value(h).data().iter().map(|x| x.to_f64().unwrap().abs()).fold(f64::INFINITY, f64::min);
        if margin > 0.05 {
            let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..2)).collect();
            break (vec![("visual", vis), ("text", txt), ("dense0.w", w0), ("dense0.b", b0), ("dense1.w", w1), ("dense1.b", b1)], targets);
        }
    };
    gradient_check(&params, |t, v| {
        let prod = t.mul(v[0], v[1])?;
        let h = layers::dense(t, prod, Affine { weight: v[2], bias: v[3] })?;
        let h = t.relu(h)?;
        let logits = layers::dense(t, h, Affine { weight: v[4], bias: v[5] })?;
        let lp = t.log_softmax(logits)?;
        t.nll_loss(lp, &targets)
    }, tol)
}
