use std::borrow::Cow;
use std::collections::BTreeMap;

use super::element::Element;
use super::error::AutodiffError;
use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps the spatial extent at stride 1 (odd kernels).
    Same,
    /// No padding.
    Valid,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    Train { eps: f64 },
    Infer { mean: Vec<T>, var: Vec<T>, eps: f64 },
}

/// The primitive catalog the networks are built from.
#[derive(Clone, Debug)]
pub enum Primitive<T> {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Relu,
    Conv2d { stride: usize, padding: Padding },
    MaxPool2d { window: usize, stride: usize },
    GlobalMaxPool2d,
    Conv1d { padding: Padding },
    MaxPool1d { window: usize },
    GlobalMaxPool1d,
    EmbeddingLookup { ids: Vec<usize>, ids_shape: Vec<usize> },
    BatchNorm(BatchNormMode<T>),
    LogSoftmax,
    NllLoss { targets: Vec<usize> },
    Mean,
    L2Norm,
    L2NormSquared,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    BiasAdd { x: Var, bias: Var, axis: usize },
    Mul(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: Conv2dGeom },
    Conv1d { x: Var, w: Var, geom: Conv1dGeom },
    /// Any max pooling: output element `o` was copied from input element `argmax[o]`.
    MaxPool { x: Var, argmax: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LogSoftmax(Var),
    Nll { x: Var, targets: Vec<usize> },
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
    L2Norm(Var),
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of a scalar with respect to every grad-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Leaves may borrow their tensors (parameters) for the lifetime `'a`; every
/// derived value is owned by the tape. Nodes are appended in evaluation
/// order, so the node list is already topologically sorted.
pub struct Tape<'a, T: Element = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Element> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, axis: usize, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Dimension {
        op,
        axis,
        detail: detail.into(),
    }
}

/// Sums in f64 and rounds once, keeping scalar losses stable under f32.
fn wide_sum<T: Element>(values: impl Iterator<Item = T>) -> T {
    T::from_f64_lossy(values.map(|v| v.to_f64().unwrap_or(f64::NAN)).sum())
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<'a, T: Element> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    /// Records a borrowed leaf (typically a model parameter).
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), requires_grad, Op::Leaf)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
    ) -> Result<Var, AutodiffError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::Numeric { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(Cow::Owned(Tensor::from_parts(shape, data)), requires_grad, op))
    }

    /// Generic entry point over the primitive catalog.
    pub fn apply(&mut self, kind: Primitive<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Contract(format!(
                    "primitive expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            Primitive::Conv2d { stride, padding } => {
                arity(2).and_then(|_| self.conv2d(inputs[0], inputs[1], stride, padding))
            }
            Primitive::MaxPool2d { window, stride } => {
                arity(1).and_then(|_| self.maxpool2d(inputs[0], window, stride))
            }
            Primitive::GlobalMaxPool2d => arity(1).and_then(|_| self.global_maxpool2d(inputs[0])),
            Primitive::Conv1d { padding } => {
                arity(2).and_then(|_| self.conv1d(inputs[0], inputs[1], padding))
            }
            Primitive::MaxPool1d { window } => arity(1).and_then(|_| self.maxpool1d(inputs[0], window)),
            Primitive::GlobalMaxPool1d => arity(1).and_then(|_| self.global_maxpool1d(inputs[0])),
            Primitive::EmbeddingLookup { ids, ids_shape } => {
                arity(1).and_then(|_| self.embedding(inputs[0], &ids, &ids_shape))
            }
            Primitive::BatchNorm(mode) => {
                arity(3)?;
                match mode {
                    BatchNormMode::Train { eps } => self
                        .batchnorm_train(inputs[0], inputs[1], inputs[2], eps)
                        .map(|(v, _)| v),
                    BatchNormMode::Infer { mean, var, eps } => {
                        self.batchnorm_infer(inputs[0], inputs[1], inputs[2], &mean, &var, eps)
                    }
                }
            }
            Primitive::LogSoftmax => arity(1).and_then(|_| self.log_softmax(inputs[0])),
            Primitive::NllLoss { targets } => arity(1).and_then(|_| self.nll_loss(inputs[0], &targets)),
            Primitive::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            Primitive::L2Norm => arity(1).and_then(|_| self.l2_norm(inputs[0])),
            Primitive::L2NormSquared => arity(1).and_then(|_| self.sum_squares(inputs[0])),
        }
    }

    /// [M, K] · [K, N] → [M, N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err("matmul", 0, format!("expects rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(dim_err("matmul", 1, format!("inner extents differ: {sa:?} · {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.record("matmul", &[a, b], vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("add", &[a, b], shape, data, Op::Add(a, b))
    }

    /// Adds a rank-1 `bias` broadcast along `axis` of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("bias_add", axis, format!("axis out of range for {shape:?}")));
        }
        let bshape = self.shape(bias);
        if bshape.len() != 1 || bshape[0] != shape[axis] {
            return Err(dim_err(
                "bias_add",
                axis,
                format!("bias {bshape:?} does not match extent {}", shape[axis]),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let channels = shape[axis];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[(i / inner) % channels])
            .collect();
        self.record("bias_add", &[x, bias], shape, data, Op::BiasAdd { x, bias, axis })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("mul", &[a, b], shape, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, AutodiffError> {
        let data = self.value(x).data().iter().map(|v| *v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record("scale", &[x], shape, data, Op::Scale(x, factor))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::Contract("concat of zero inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", axis, format!("axis out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() {
                return Err(dim_err("concat", 0, format!("rank mismatch {s:?} vs {base:?}")));
            }
            for (ax, (a, b)) in s.iter().zip(&base).enumerate() {
                if ax != axis && a != b {
                    return Err(dim_err("concat", ax, format!("{s:?} vs {base:?}")));
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.record(
            "concat",
            inputs,
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let data = self.value(x).data().iter().map(|v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.record("relu", &[x], shape, data, Op::Relu(x))
    }

    /// `x`: [N, C, H, W]; `w`: [O, C, kh, kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 {
            return Err(dim_err("conv2d", 0, format!("input must be [N,C,H,W], got {sx:?}")));
        }
        if sw.len() != 4 {
            return Err(dim_err("conv2d", 0, format!("kernel must be [O,C,kh,kw], got {sw:?}")));
        }
        if sw[1] != sx[1] {
            return Err(dim_err("conv2d", 1, format!("kernel expects {} channels, input has {}", sw[1], sx[1])));
        }
        if stride == 0 {
            return Err(AutodiffError::Contract("conv2d stride must be positive".into()));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
                    return Err(dim_err("conv2d", 2, "same padding needs odd kernel extents"));
                }
                (sw[2] - 1) / 2
            }
        };
        if sw[2] != sw[3] && padding == Padding::Same {
            return Err(dim_err("conv2d", 3, "same padding needs a square kernel"));
        }
        for (axis, k) in [(2, sw[2]), (3, sw[3])] {
            if sx[axis] + 2 * pad < k {
                return Err(dim_err("conv2d", axis, format!("extent {} smaller than kernel {k}", sx[axis])));
            }
        }
        let geom = Conv2dGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            out_w: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), sx[0], sw[0], &geom);
        self.record(
            "conv2d",
            &[x, w],
            vec![sx[0], sw[0], geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, w, geom },
        )
    }

    /// `x`: [N, C, H, W] → [N, C, ⌊(H−window)/stride⌋+1, ...].
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("maxpool2d", 0, format!("input must be [N,C,H,W], got {s:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(AutodiffError::Contract("maxpool2d window and stride must be positive".into()));
        }
        for axis in [2, 3] {
            if s[axis] < window {
                return Err(dim_err("maxpool2d", axis, format!("extent {} below window {window}", s[axis])));
            }
        }
        let (vals, argmax, oh, ow) = kernels::maxpool2d(self.value(x).data(), s[0] * s[1], s[2], s[3], window, stride);
        self.record("maxpool2d", &[x], vec![s[0], s[1], oh, ow], vals, Op::MaxPool { x, argmax })
    }

    /// [N, C, H, W] → [N, C].
    pub fn global_maxpool2d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("global_maxpool2d", 0, format!("input must be [N,C,H,W], got {s:?}")));
        }
        let (vals, argmax) = kernels::global_max_planes(self.value(x).data(), s[2] * s[3]);
        self.record("global_maxpool2d", &[x], vec![s[0], s[1]], vals, Op::MaxPool { x, argmax })
    }

    /// `x`: [N, T, D]; `w`: [F, K, D] → [N, T', F].
    pub fn conv1d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 {
            return Err(dim_err("conv1d", 0, format!("input must be [N,T,D], got {sx:?}")));
        }
        if sw.len() != 3 {
            return Err(dim_err("conv1d", 0, format!("kernel must be [F,K,D], got {sw:?}")));
        }
        if sw[2] != sx[2] {
            return Err(dim_err("conv1d", 2, format!("kernel expects depth {}, input has {}", sw[2], sx[2])));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same if sw[1] % 2 == 1 => (sw[1] - 1) / 2,
            Padding::Same => return Err(dim_err("conv1d", 1, "same padding needs an odd window")),
        };
        if sx[1] + 2 * pad < sw[1] {
            return Err(dim_err("conv1d", 1, format!("sequence length {} below window {}", sx[1], sw[1])));
        }
        let geom = Conv1dGeom {
            steps: sx[1],
            dim: sx[2],
            window: sw[1],
            pad,
            filters: sw[0],
            out_steps: sx[1] + 2 * pad - sw[1] + 1,
        };
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), sx[0], &geom);
        self.record(
            "conv1d",
            &[x, w],
            vec![sx[0], geom.out_steps, geom.filters],
            out,
            Op::Conv1d { x, w, geom },
        )
    }

    /// [N, T, F] → [N, ⌊T/window⌋, F].
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("maxpool1d", 0, format!("input must be [N,T,F], got {s:?}")));
        }
        if window == 0 || s[1] < window {
            return Err(dim_err("maxpool1d", 1, format!("length {} below window {window}", s[1])));
        }
        let (vals, argmax, steps) = kernels::maxpool_time(self.value(x).data(), s[0], s[1], s[2], window);
        self.record("maxpool1d", &[x], vec![s[0], steps, s[2]], vals, Op::MaxPool { x, argmax })
    }

    /// [N, T, F] → [N, F].
    pub fn global_maxpool1d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("global_maxpool1d", 0, format!("input must be [N,T,F], got {s:?}")));
        }
        let (vals, argmax, _) = kernels::maxpool_time(self.value(x).data(), s[0], s[1], s[2], s[1]);
        self.record("global_maxpool1d", &[x], vec![s[0], s[2]], vals, Op::MaxPool { x, argmax })
    }

    /// Gathers rows of `table` [V, D]; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var, AutodiffError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(dim_err("embedding", 0, format!("table must be [V,D], got {st:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err("embedding", 0, "ids do not fill ids_shape"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(dim_err("embedding", 0, format!("id {bad} outside vocabulary of {}", st[0])));
        }
        let dim = st[1];
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        self.record(
            "embedding",
            &[table],
            shape,
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), AutodiffError> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err("batchnorm", 0, format!("input must be [N,C,...], got {s:?}")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [s[1]] {
                return Err(dim_err(
                    "batchnorm",
                    1,
                    format!("affine parameter {:?} does not match {} channels", self.shape(p), s[1]),
                ));
            }
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var, AutodiffError> {
        let (_, c, inner) = self.bn_check(x, gamma, beta)?;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for (i, v) in xs.iter().enumerate() {
            let ch = (i / inner) % c;
            let h = (*v - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = g[ch] * h + b[ch];
        }
        let shape = self.shape(x).to_vec();
        self.record(
            "batchnorm",
            &[x, gamma, beta],
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Normalizes channel axis 1 with the batch's own statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>), AutodiffError> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        if n < 2 {
            return Err(AutodiffError::DegenerateStatistics(
                "train-mode batch normalization needs at least 2 samples".into(),
            ));
        }
        let xs = self.value(x).data();
        let count = (n * inner) as f64;
        let mut sums = vec![0.0f64; c];
        for (i, v) in xs.iter().enumerate() {
            sums[(i / inner) % c] += v.to_f64().unwrap_or(f64::NAN);
        }
        let mean64: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let mut sq = vec![0.0f64; c];
        for (i, v) in xs.iter().enumerate() {
            let ch = (i / inner) % c;
            let d = v.to_f64().unwrap_or(f64::NAN) - mean64[ch];
            sq[ch] += d * d;
        }
        let mean: Vec<T> = mean64.iter().map(|m| T::from_f64_lossy(*m)).collect();
        let var: Vec<T> = sq.iter().map(|s| T::from_f64_lossy(s / count)).collect();
        let eps = T::from_f64_lossy(eps);
        let inv_std = var.iter().map(|s| T::one() / (*s + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Normalizes channel axis 1 with fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err("batchnorm", 1, "running statistics do not match channel count"));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_std = var.iter().map(|s| T::one() / (*s + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    /// Log-softmax over the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let classes = *shape.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(classes) {
            let m = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
            let lse = wide_sum(row.iter().map(|v| (*v - m).exp())).ln() + m;
            out.extend(row.iter().map(|v| *v - lse));
        }
        self.record("log_softmax", &[x], shape, out, Op::LogSoftmax(x))
    }

    /// Mean negative log-likelihood of `targets` under log-probabilities [N, C].
    pub fn nll_loss(&mut self, x: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("nll_loss", 0, format!("expects [N,C], got {s:?}")));
        }
        if targets.len() != s[0] {
            return Err(dim_err("nll_loss", 0, format!("{} targets for {} rows", targets.len(), s[0])));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(dim_err("nll_loss", 1, format!("target {bad} outside {} classes", s[1])));
        }
        let d = self.value(x).data();
        let total = wide_sum(targets.iter().enumerate().map(|(i, &t)| -d[i * s[1] + t]));
        let loss = total / T::from_usize(s[0]).unwrap();
        self.record(
            "nll_loss",
            &[x],
            vec![1],
            vec![loss],
            Op::Nll {
                x,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let m = wide_sum(v.data().iter().copied()) / T::from_usize(v.numel()).unwrap();
        self.record("mean", &[x], vec![1], vec![m], Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = wide_sum(self.value(x).data().iter().copied());
        self.record("sum", &[x], vec![1], vec![s], Op::Sum(x))
    }

    /// Squared L2 norm: Σ x².
    pub fn sum_squares(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = wide_sum(self.value(x).data().iter().map(|v| *v * *v));
        self.record("sum_squares", &[x], vec![1], vec![s], Op::SumSquares(x))
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = wide_sum(self.value(x).data().iter().map(|v| *v * *v));
        self.record("l2_norm", &[x], vec![1], vec![s.sqrt()], Op::L2Norm(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(dim_err(op, 0, format!("rank mismatch {sa:?} vs {sb:?}")));
        }
        match sa.iter().zip(sb).position(|(x, y)| x != y) {
            Some(axis) => Err(dim_err(op, axis, format!("{sa:?} vs {sb:?}"))),
            None => Ok(()),
        }
    }

    /// Reverse pass from a scalar. Every grad-requiring leaf appears in the
    /// result; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut accumulate = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(existing) => add_into(existing, &delta),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), self.value(*b).data(), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
                    accumulate(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
                    accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(*a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(*b, g.to_vec());
                }
            }
            Op::BiasAdd { x, bias, axis } => {
                if needs(*x) {
                    accumulate(*x, g.to_vec());
                }
                if needs(*bias) {
                    let shape = self.shape(*x);
                    let inner: usize = shape[axis + 1..].iter().product();
                    let channels = shape[*axis];
                    let mut db = vec![T::zero(); channels];
                    for (i, v) in g.iter().enumerate() {
                        let c = (i / inner) % channels;
                        db[c] = db[c] + *v;
                    }
                    accumulate(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    accumulate(*a, g.iter().zip(bv).map(|(d, y)| *d * *y).collect());
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    accumulate(*b, g.iter().zip(av).map(|(d, x)| *d * *x).collect());
                }
            }
            Op::Scale(x, f) => accumulate(*x, g.iter().map(|d| *d * *f).collect()),
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if needs(*v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        accumulate(*v, d);
                    }
                    offset += chunk;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > T::zero() { *d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Conv2d { x, w, geom } => {
                let batch = self.shape(*x)[0];
                let out_channels = self.shape(*w)[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    batch,
                    out_channels,
                    geom,
                    needs(*x),
                    needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(*x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(*w, dw);
                }
            }
            Op::Conv1d { x, w, geom } => {
                let batch = self.shape(*x)[0];
                let (dx, dw) = kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    batch,
                    geom,
                    needs(*x),
                    needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(*x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(*w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i] = dx[i] + g[o];
                }
                accumulate(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let dim = st[1];
                let mut dt = vec![T::zero(); st[0] * dim];
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * dim..(id + 1) * dim], &g[row * dim..(row + 1) * dim]);
                }
                accumulate(*table, dt);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let count = T::from_usize(shape[0] * inner).unwrap();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, d) in g.iter().enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] = dgamma[ch] + *d * xhat[i];
                    dbeta[ch] = dbeta[ch] + *d;
                }
                if needs(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, d)| {
                            let ch = (i / inner) % c;
                            let dxhat = *d * gv[ch];
                            if *train {
                                // dx = (γ/σ)/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                                gv[ch] * inv_std[ch] / count
                                    * (count * *d - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                dxhat * inv_std[ch]
                            }
                        })
                        .collect();
                    accumulate(*x, dx);
                }
                if needs(*gamma) {
                    accumulate(*gamma, dgamma);
                }
                if needs(*beta) {
                    accumulate(*beta, dbeta);
                }
            }
            Op::LogSoftmax(x) => {
                let classes = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(classes).zip(out.data().chunks(classes)) {
                    let total: T = grow.iter().copied().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(d, y)| *d - y.exp() * total));
                }
                accumulate(*x, dx);
            }
            Op::Nll { x, targets } => {
                let s = self.shape(*x);
                let mut dx = vec![T::zero(); s[0] * s[1]];
                let scale = -g[0] / T::from_usize(s[0]).unwrap();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * s[1] + t] = scale;
                }
                accumulate(*x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Sum(x) => accumulate(*x, vec![g[0]; self.value(*x).numel()]),
            Op::SumSquares(x) => {
                let two = T::one() + T::one();
                accumulate(*x, self.value(*x).data().iter().map(|v| two * *v * g[0]).collect());
            }
            Op::L2Norm(x) => {
                let norm = out.item();
                let dx = if norm > T::zero() {
                    self.value(*x).data().iter().map(|v| *v / norm * g[0]).collect()
                } else {
                    vec![T::zero(); self.value(*x).numel()]
                };
                accumulate(*x, dx);
            }
        }
    }
}
