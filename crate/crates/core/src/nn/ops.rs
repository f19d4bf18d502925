//! Batched primitive kernels. Every kernel processes samples independently
//! in eval mode, so a sample's output does not depend on its batch-mates.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox·stride + j − pad` lies
/// inside `0..w`.
fn valid_range(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(j).div_ceil(g.stride);
    let hi = if g.w + g.pad > j {
        ((g.w + g.pad - j - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Writes the patch matrix of one sample into `col`, whose rows are `ld`
/// apart; the sample occupies the first `ho·wo` entries of each row.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T], ld: usize) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ld..row * ld + cols];
                let (lo, hi) = valid_range(g, j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (v, &sv) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = sv;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], ld: usize, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ld..row * ld + cols];
                let (lo, hi) = valid_range(g, j);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + j - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Samples per GEMM: enough columns to keep the kernel busy without
/// letting the patch matrix outgrow the cache.
fn samples_per_gemm(g: &ConvGeom, n: usize) -> usize {
    (GEMM_COLUMNS / g.col_cols().max(1)).clamp(1, n.max(1))
}

const GEMM_COLUMNS: usize = 512;

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let per = samples_per_gemm(g, n);
    let mut out = Tensor::zeros(vec![n, g.cout, g.ho, g.wo]);
    let mut col = vec![T::zero(); rows * cols * per];
    let mut prod = vec![T::zero(); g.cout * cols * per];
    let out_per = g.cout * cols;
    for first in (0..n).step_by(per) {
        let count = per.min(n - first);
        let ld = count * cols;
        for k in 0..count {
            im2col(g, x.sample(first + k), &mut col[k * cols..], ld);
        }
        T::gemm(
            g.cout,
            rows,
            ld,
            T::one(),
            weight.data(),
            (rows as isize, 1),
            &col,
            (ld as isize, 1),
            T::zero(),
            &mut prod,
            ld as isize,
        );
        let od = out.data_mut();
        for k in 0..count {
            let os = &mut od[(first + k) * out_per..(first + k + 1) * out_per];
            for (co, dst) in os.chunks_mut(cols).enumerate() {
                let b = bias.data()[co];
                let src = &prod[co * ld + k * cols..co * ld + (k + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let per = samples_per_gemm(g, n);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = vec![T::zero(); g.cout];
    let mut col = vec![T::zero(); rows * cols * per];
    let mut dcol = vec![T::zero(); rows * cols * per];
    let mut dyc = vec![T::zero(); g.cout * cols * per];
    let x_per = g.cin * g.h * g.w;
    for first in (0..n).step_by(per) {
        let count = per.min(n - first);
        let ld = count * cols;
        for k in 0..count {
            im2col(g, x.sample(first + k), &mut col[k * cols..], ld);
            for (co, src) in dy.sample(first + k).chunks(cols).enumerate() {
                db[co] = db[co] + lane_sum(src);
                dyc[co * ld + k * cols..co * ld + (k + 1) * cols].copy_from_slice(src);
            }
        }
        // dW += dY · colᵀ
        T::gemm(
            g.cout,
            ld,
            rows,
            T::one(),
            &dyc,
            (ld as isize, 1),
            &col,
            (1, ld as isize),
            T::one(),
            dw.data_mut(),
            rows as isize,
        );
        // dcol = Wᵀ · dY
        T::gemm(
            rows,
            g.cout,
            ld,
            T::one(),
            weight.data(),
            (1, rows as isize),
            &dyc,
            (ld as isize, 1),
            T::zero(),
            &mut dcol,
            ld as isize,
        );
        let dxd = dx.data_mut();
        for k in 0..count {
            let dxs = &mut dxd[(first + k) * x_per..(first + k + 1) * x_per];
            col2im_add(g, &dcol[k * cols..], ld, dxs);
        }
    }
    (dx, dw, Tensor::new(vec![g.cout], db).expect("channels"))
}

/// `(channels, elements per channel per sample)` for a batched tensor with
/// channels on axis 1.
fn channel_layout<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let spatial = x.shape()[2..].iter().product::<usize>();
    (n, c, spatial)
}

#[derive(Clone, Debug)]
pub(crate) struct BnTrainCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics forward. Returns output, cache, and the batch mean and
/// unbiased variance per channel for the running-statistics update.
pub(crate) fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, BnTrainCache<T>, Vec<T>, Vec<T>) {
    let (n, c, sp) = channel_layout(x);
    let count = n * sp;
    let inv_count = T::from_f64(1.0 / count as f64);
    let eps = T::from_f64(super::BN_EPS);
    let xd = x.data();
    let plane = |s: usize, ch: usize| (s * c + ch) * sp;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let sum = (0..n).map(|s| lane_sum(&xd[plane(s, ch)..plane(s, ch) + sp])).fold(T::zero(), |a, b| a + b);
        let m = sum * inv_count;
        let sq = (0..n)
            .map(|s| lane_sum_map(&xd[plane(s, ch)..plane(s, ch) + sp], |v| (v - m) * (v - m)))
            .fold(T::zero(), |a, b| a + b);
        mean[ch] = m;
        var[ch] = sq * inv_count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let r = plane(s, ch)..plane(s, ch) + sp;
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for ((h, yv), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xd[r]) {
                *h = (v - m) * is;
                *yv = ga * *h + be;
            }
        }
    }
    let unbiased = if count > 1 {
        let f = T::from_f64(count as f64 / (count - 1) as f64);
        var.iter().map(|&v| v * f).collect()
    } else {
        var
    };
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), y).expect("same shape"),
        BnTrainCache {
            xhat: Tensor::new(shape, xhat).expect("same shape"),
            inv_std,
        },
        mean,
        unbiased,
    )
}

/// Sum with eight independent accumulators so the loop vectorizes.
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    lane_sum_map(xs, |v| v)
}

fn lane_sum_map<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + f(v);
        }
    }
    let mut total = acc.iter().fold(T::zero(), |a, &b| a + b);
    for &v in rest {
        total = total + f(v);
    }
    total
}

pub(crate) fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Tensor<T> {
    let (_, c, sp) = channel_layout(x);
    let eps = T::from_f64(super::BN_EPS);
    let coef: Vec<(T, T)> = (0..c)
        .map(|ch| {
            let scale = gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt();
            (scale, beta.data()[ch] - running_mean.data()[ch] * scale)
        })
        .collect();
    let mut y = x.clone();
    for (k, chunk) in y.data_mut().chunks_mut(sp).enumerate() {
        let (scale, shift) = coef[k % c];
        for v in chunk {
            *v = *v * scale + shift;
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    cache: &BnTrainCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, sp) = channel_layout(dy);
    let count = T::from_f64((n * sp) as f64);
    let xh = cache.xhat.data();
    let dyd = dy.data();
    let plane = |s: usize, ch: usize| (s * c + ch) * sp;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dyd.len()];
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for s in 0..n {
            let r = plane(s, ch)..plane(s, ch) + sp;
            sb = sb + lane_sum(&dyd[r.clone()]);
            sg = sg + lane_dot(&dyd[r.clone()], &xh[r]);
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
        let f = gamma.data()[ch] * cache.inv_std[ch] / count;
        for s in 0..n {
            let r = plane(s, ch)..plane(s, ch) + sp;
            for ((d, &g), &h) in dx[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&xh[r]) {
                *d = f * (count * g - sb - h * sg);
            }
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).expect("same shape"),
        Tensor::new(vec![c], dgamma).expect("channels"),
        Tensor::new(vec![c], dbeta).expect("channels"),
    )
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        total = total + x * y;
    }
    total
}

pub(crate) fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, sp) = channel_layout(x);
    let inv = T::from_f64(1.0 / sp as f64);
    Tensor::from_fn(vec![n, c], |i| {
        x.data()[i * sp..(i + 1) * sp].iter().copied().sum::<T>() * inv
    })
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let sp: usize = input_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / sp as f64);
    Tensor::from_fn(input_shape.to_vec(), |k| dy.data()[k / sp] * inv)
}

pub(crate) fn fc_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = bias.len();
    let w = weight.data();
    Tensor::from_fn(vec![n, fout], |k| {
        let (s, o) = (k / fout, k % fout);
        let xs = &x.data()[s * fin..(s + 1) * fin];
        let row = &w[o * fin..(o + 1) * fin];
        bias.data()[o] + row.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>()
    })
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn fc_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = dy.shape()[1];
    let mut dw = Tensor::zeros(vec![fout, fin]);
    let mut db = Tensor::zeros(vec![fout]);
    let mut dx = Tensor::zeros(vec![n, fin]);
    let w = weight.data();
    for s in 0..n {
        let xs = &x.data()[s * fin..(s + 1) * fin];
        let dys = &dy.data()[s * fout..(s + 1) * fout];
        for o in 0..fout {
            let g = dys[o];
            db.data_mut()[o] = db.data()[o] + g;
            let dwr = &mut dw.data_mut()[o * fin..(o + 1) * fin];
            for (d, &xv) in dwr.iter_mut().zip(xs) {
                *d = *d + g * xv;
            }
            let dxs = &mut dx.data_mut()[s * fin..(s + 1) * fin];
            for (d, &wv) in dxs.iter_mut().zip(&w[o * fin..(o + 1) * fin]) {
                *d = *d + g * wv;
            }
        }
    }
    (dx, dw, db)
}
