//! Convolution and pooling kernels shared by the tape's forward and backward
//! passes. Per-sample work is spread with [`crate::par`]; cross-sample
//! reductions (weight gradients) are summed in sample order.

use super::element::Element;
use crate::par;

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeom {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Element>(x: &[T], g: &Conv2dGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x`: [N, C, H, W], `w`: [O, C, kh, kw] → [N, O, out_h, out_w].
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    batch: usize,
    out_channels: usize,
    g: &Conv2dGeom,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |n, out_n| {
        let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut col);
        let k = g.col_rows();
        let cols = g.col_cols();
        T::gemm(
            out_channels,
            k,
            cols,
            T::one(),
            w,
            (k as isize, 1),
            &col,
            (cols as isize, 1),
            T::zero(),
            out_n,
            (cols as isize, 1),
        );
    });
    out
}

/// Returns (dx, dw). Either may be skipped.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    out_channels: usize,
    g: &Conv2dGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let k = g.col_rows();
    let cols = g.col_cols();
    let out_len = out_channels * cols;
    let per_sample = |n: usize| -> (Option<Vec<T>>, Option<Vec<T>>) {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        let mut col = vec![T::zero(); k * cols];
        let dw = want_dw.then(|| {
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut col);
            let mut dw = vec![T::zero(); out_channels * k];
            // dW[O, K] = dY[O, cols] · col[K, cols]ᵀ
            T::gemm(
                out_channels,
                cols,
                k,
                T::one(),
                dy_n,
                (cols as isize, 1),
                &col,
                (1, cols as isize),
                T::zero(),
                &mut dw,
                (k as isize, 1),
            );
            dw
        });
        let dx = want_dx.then(|| {
            // dcol[K, cols] = Wᵀ[K, O] · dY[O, cols]
            T::gemm(
                k,
                out_channels,
                cols,
                T::one(),
                w,
                (1, k as isize),
                dy_n,
                (cols as isize, 1),
                T::zero(),
                &mut col,
                (cols as isize, 1),
            );
            let mut dx = vec![T::zero(); in_len];
            col2im(&col, g, &mut dx);
            dx
        });
        (dx, dw)
    };

    const CHUNK: usize = 8;
    let mut dx_all = want_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw_all = want_dw.then(|| vec![T::zero(); out_channels * k]);
    for start in (0..batch).step_by(CHUNK) {
        let len = CHUNK.min(batch - start);
        let parts = par::map_range(len, |i| per_sample(start + i));
        for (i, (dx, dw)) in parts.into_iter().enumerate() {
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all[(start + i) * in_len..(start + i + 1) * in_len].copy_from_slice(&dx);
            }
            if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                for (a, d) in all.iter_mut().zip(dw) {
                    *a = *a + d;
                }
            }
        }
    }
    (dx_all, dw_all)
}

/// Geometry of a 1-D convolution over a [T, D] sequence with [F, K, D] filters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub steps: usize,
    pub dim: usize,
    pub window: usize,
    pub pad: usize,
    pub filters: usize,
    pub out_steps: usize,
}

impl Conv1dGeom {
    fn padded_steps(&self) -> usize {
        self.steps + 2 * self.pad
    }
}

fn padded_sequence<'s, T: Element>(x: &'s [T], g: &Conv1dGeom) -> std::borrow::Cow<'s, [T]> {
    if g.pad == 0 {
        return std::borrow::Cow::Borrowed(x);
    }
    let mut buf = vec![T::zero(); g.padded_steps() * g.dim];
    buf[g.pad * g.dim..(g.pad + g.steps) * g.dim].copy_from_slice(x);
    std::borrow::Cow::Owned(buf)
}

/// `x`: [N, T, D], `w`: [F, K, D] → [N, T', F].
pub(crate) fn conv1d_forward<T: Element>(x: &[T], w: &[T], batch: usize, g: &Conv1dGeom) -> Vec<T> {
    let in_len = g.steps * g.dim;
    let out_len = g.out_steps * g.filters;
    let kd = g.window * g.dim;
    let mut out = vec![T::zero(); batch * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |n, out_n| {
        let xs = padded_sequence(&x[n * in_len..(n + 1) * in_len], g);
        // Sliding windows are overlapping rows of the sequence: row stride D.
        T::gemm(
            g.out_steps,
            kd,
            g.filters,
            T::one(),
            &xs,
            (g.dim as isize, 1),
            w,
            (1, kd as isize),
            T::zero(),
            out_n,
            (g.filters as isize, 1),
        );
    });
    out
}

pub(crate) fn conv1d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    g: &Conv1dGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.steps * g.dim;
    let out_len = g.out_steps * g.filters;
    let kd = g.window * g.dim;
    let per_sample = |n: usize| -> (Option<Vec<T>>, Option<Vec<T>>) {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        let dw = want_dw.then(|| {
            let xs = padded_sequence(&x[n * in_len..(n + 1) * in_len], g);
            let mut dw = vec![T::zero(); g.filters * kd];
            T::gemm(
                g.filters,
                g.out_steps,
                kd,
                T::one(),
                dy_n,
                (1, g.filters as isize),
                &xs,
                (g.dim as isize, 1),
                T::zero(),
                &mut dw,
                (kd as isize, 1),
            );
            dw
        });
        let dx = want_dx.then(|| {
            let mut dwin = vec![T::zero(); g.out_steps * kd];
            T::gemm(
                g.out_steps,
                g.filters,
                kd,
                T::one(),
                dy_n,
                (g.filters as isize, 1),
                w,
                (kd as isize, 1),
                T::zero(),
                &mut dwin,
                (kd as isize, 1),
            );
            let mut dpad = vec![T::zero(); g.padded_steps() * g.dim];
            for t in 0..g.out_steps {
                let dst = &mut dpad[t * g.dim..t * g.dim + kd];
                for (d, s) in dst.iter_mut().zip(&dwin[t * kd..(t + 1) * kd]) {
                    *d = *d + *s;
                }
            }
            dpad[g.pad * g.dim..(g.pad + g.steps) * g.dim].to_vec()
        });
        (dx, dw)
    };

    const CHUNK: usize = 8;
    let mut dx_all = want_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw_all = want_dw.then(|| vec![T::zero(); g.filters * kd]);
    for start in (0..batch).step_by(CHUNK) {
        let len = CHUNK.min(batch - start);
        let parts = par::map_range(len, |i| per_sample(start + i));
        for (i, (dx, dw)) in parts.into_iter().enumerate() {
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all[(start + i) * in_len..(start + i + 1) * in_len].copy_from_slice(&dx);
            }
            if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                for (a, d) in all.iter_mut().zip(dw) {
                    *a = *a + d;
                }
            }
        }
    }
    (dx_all, dw_all)
}

/// 2-D max pooling over [N, C, H, W]. Returns values and the flat input index
/// of each selected element; ties resolve to the lowest index.
pub(crate) fn maxpool2d<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut vals = vec![T::zero(); planes * oh * ow];
    let mut idx = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                vals[o] = x[best];
                idx[o] = best;
            }
        }
    }
    (vals, idx, oh, ow)
}

/// Max over contiguous planes of `len` elements.
pub(crate) fn global_max_planes<T: Element>(x: &[T], len: usize) -> (Vec<T>, Vec<usize>) {
    x.chunks(len)
        .enumerate()
        .map(|(p, plane)| {
            let mut best = 0;
            for (i, v) in plane.iter().enumerate() {
                if *v > plane[best] {
                    best = i;
                }
            }
            (plane[best], p * len + best)
        })
        .unzip()
}

/// Max pooling along the time axis of [N, T, F] with window == stride.
/// `window == steps` pools globally.
pub(crate) fn maxpool_time<T: Element>(
    x: &[T],
    batch: usize,
    steps: usize,
    features: usize,
    window: usize,
) -> (Vec<T>, Vec<usize>, usize) {
    let out_steps = steps / window;
    let mut vals = vec![T::zero(); batch * out_steps * features];
    let mut idx = vec![0usize; batch * out_steps * features];
    for n in 0..batch {
        for o in 0..out_steps {
            for f in 0..features {
                let mut best = (n * steps + o * window) * features + f;
                for k in 1..window {
                    let i = (n * steps + o * window + k) * features + f;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let out = (n * out_steps + o) * features + f;
                vals[out] = x[best];
                idx[out] = best;
            }
        }
    }
    (vals, idx, out_steps)
}
