//! Dense row-major tensors and the deterministic kernels everything else
//! is built on.
//!
//! Every reduction over an inner dimension accumulates in ascending index
//! order starting from zero, one separately rounded multiply and add per
//! term. That makes `matmul(concat_rows(w, a), x)` bit-identical to the two
//! constituent products, and keeps results independent of thread count.

use std::cell::Cell;
use std::thread;

use crate::error::{dim_err, Error, Result};
use crate::scalar::{convert, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return dim_err("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix; a vector is treated as a single row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| convert(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self::from_fn(c, r, |i, j| self.at(j, i))
    }

    /// Copy of the column range `[start, start + width)` of every row.
    pub fn cols_range(&self, start: usize, width: usize) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.rows() * width);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self {
            shape: vec![self.rows(), width],
            data,
        }
    }

    /// Keep the first `width` columns of every row, compacting in place.
    pub fn truncate_cols(&mut self, width: usize) {
        let (r, c) = (self.rows(), self.cols());
        debug_assert!(width <= c);
        if width == c {
            return;
        }
        for i in 1..r {
            self.data.copy_within(i * c..i * c + width, i * width);
        }
        self.data.truncate(r * width);
        self.shape = vec![r, width];
    }

    /// Copy of the row range `[start, start + count)`.
    pub fn rows_range(&self, start: usize, count: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn bits_eq(&self, other: &Self) -> bool
    where
        T: Copy,
    {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Kernel execution policy.
///
/// The accumulation order is fixed (inner index ascending); the only
/// freedom is whether output rows/columns may be spread over threads,
/// which never changes a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatmulPolicy {
    pub row_parallel: bool,
    pub max_threads: usize,
}

impl Default for MatmulPolicy {
    fn default() -> Self {
        Self::serial()
    }
}

impl MatmulPolicy {
    pub const fn serial() -> Self {
        Self {
            row_parallel: false,
            max_threads: 1,
        }
    }

    pub fn parallel(threads: usize) -> Self {
        Self {
            row_parallel: threads > 1,
            max_threads: threads.max(1),
        }
    }

    /// Thread cap from `ZF_THREADS`, falling back to `default`.
    pub fn from_env(default: usize) -> Self {
        let n = std::env::var("ZF_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(default);
        Self::parallel(n)
    }

    fn threads_for(&self, units: usize) -> usize {
        if self.row_parallel {
            self.max_threads.min(units).max(1)
        } else {
            1
        }
    }
}

/// Counters for kernel invocations on the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub linear_calls: u64,
    pub linear_macs: u64,
    pub aux_calls: u64,
}

thread_local! {
    static STATS: Cell<KernelStats> = const { Cell::new(KernelStats { linear_calls: 0, linear_macs: 0, aux_calls: 0 }) };
}

pub mod stats {
    use super::{KernelStats, STATS};

    pub fn reset() {
        STATS.with(|s| s.set(KernelStats::default()));
    }

    pub fn snapshot() -> KernelStats {
        STATS.with(Cell::get)
    }

    use std::cell::Cell;

    pub(crate) fn record_linear(macs: u64) {
        STATS.with(|s| {
            let mut v = s.get();
            v.linear_calls += 1;
            v.linear_macs += macs;
            s.set(v);
        });
    }

    /// Adapter-specific elementwise op (merge, expand, add, append).
    pub(crate) fn record_aux() {
        STATS.with(|s| {
            let mut v = s.get();
            v.aux_calls += 1;
            s.set(v);
        });
    }
}

fn check_matrix<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return dim_err(format!("{name} must be a matrix, got shape {:?}", t.shape()));
    }
    Ok(())
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, policy: MatmulPolicy) -> Result<Tensor<T>> {
    check_matrix(a, "a")?;
    check_matrix(b, "b")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return dim_err(format!("matmul inner dimensions differ: {m}×{k} · {k2}×{n}"));
    }
    let mut out = vec![T::zero(); m * n];
    let row_kernel = |i: usize, crow: &mut [T]| {
        let arow = a.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    };
    let threads = policy.threads_for(m);
    if threads <= 1 || n == 0 {
        for (i, crow) in out.chunks_mut(n.max(1)).enumerate().take(m) {
            row_kernel(i, crow);
        }
    } else {
        let per = m.div_ceil(threads);
        thread::scope(|s| {
            for (t, chunk) in out.chunks_mut(per * n).enumerate() {
                let row_kernel = &row_kernel;
                s.spawn(move || {
                    for (off, crow) in chunk.chunks_mut(n).enumerate() {
                        row_kernel(t * per + off, crow);
                    }
                });
            }
        });
    }
    Tensor::matrix(m, n, out)
}

/// Projection kernel: `y = x[:, col0 .. col0 + in] · wᵀ` for `w: out×in`.
///
/// Each output element is the ascending-index dot product of an input row
/// slice with a weight row.
pub fn linear_from<T: Scalar>(x: &Tensor<T>, col0: usize, w: &Tensor<T>, policy: MatmulPolicy) -> Result<Tensor<T>> {
    check_matrix(w, "weight")?;
    let (l, xc) = (x.rows(), x.cols());
    let (n_out, n_in) = (w.rows(), w.cols());
    if col0 + n_in > xc {
        return dim_err(format!(
            "projection reads columns {col0}..{} of a {xc}-wide input",
            col0 + n_in
        ));
    }
    stats::record_linear((l * n_out * n_in) as u64);
    let mut out = vec![T::zero(); l * n_out];
    let wd = w.data();
    let kernel = |xs: &[T], ys: &mut [T], j0: usize| {
        let mut j = 0;
        let n = ys.len();
        while j + 4 <= n {
            let r0 = &wd[(j0 + j) * n_in..(j0 + j + 1) * n_in];
            let r1 = &wd[(j0 + j + 1) * n_in..(j0 + j + 2) * n_in];
            let r2 = &wd[(j0 + j + 2) * n_in..(j0 + j + 3) * n_in];
            let r3 = &wd[(j0 + j + 3) * n_in..(j0 + j + 4) * n_in];
            let (mut a0, mut a1, mut a2, mut a3) = (T::zero(), T::zero(), T::zero(), T::zero());
            for k in 0..n_in {
                let xv = xs[k];
                a0 += xv * r0[k];
                a1 += xv * r1[k];
                a2 += xv * r2[k];
                a3 += xv * r3[k];
            }
            ys[j] = a0;
            ys[j + 1] = a1;
            ys[j + 2] = a2;
            ys[j + 3] = a3;
            j += 4;
        }
        while j < n {
            let r = &wd[(j0 + j) * n_in..(j0 + j + 1) * n_in];
            let mut acc = T::zero();
            for k in 0..n_in {
                acc += xs[k] * r[k];
            }
            ys[j] = acc;
            j += 1;
        }
    };
    let threads = policy.threads_for(n_out / 64);
    for i in 0..l {
        let xs = &x.row(i)[col0..col0 + n_in];
        let ys = &mut out[i * n_out..(i + 1) * n_out];
        if threads <= 1 {
            kernel(xs, ys, 0);
        } else {
            let per = n_out.div_ceil(threads);
            thread::scope(|s| {
                for (t, chunk) in ys.chunks_mut(per).enumerate() {
                    let kernel = &kernel;
                    s.spawn(move || kernel(xs, chunk, t * per));
                }
            });
        }
    }
    Tensor::matrix(l, n_out, out)
}

/// `y = x · wᵀ`; the input width must equal the weight's input width.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, policy: MatmulPolicy) -> Result<Tensor<T>> {
    if x.cols() != w.cols() {
        return dim_err(format!("projection expects {}-wide input, got {}", w.cols(), x.cols()));
    }
    linear_from(x, 0, w, policy)
}

/// Stack `a` below `w`: `[w; a]`, shape `(d_o + r) × d_i`.
pub fn concat_rows<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(w, "w")?;
    check_matrix(a, "a")?;
    if w.cols() != a.cols() {
        return dim_err(format!("concat_rows column mismatch: {} vs {}", w.cols(), a.cols()));
    }
    let mut data = Vec::with_capacity(w.len() + a.len());
    data.extend_from_slice(w.data());
    data.extend_from_slice(a.data());
    Tensor::matrix(w.rows() + a.rows(), w.cols(), data)
}

/// Place `b` beside `w`: `[w b]`, shape `d_o × (d_i + r)`.
pub fn concat_cols<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(w, "w")?;
    check_matrix(b, "b")?;
    if w.rows() != b.rows() {
        return dim_err(format!("concat_cols row mismatch: {} vs {}", w.rows(), b.rows()));
    }
    let mut data = Vec::with_capacity(w.len() + b.len());
    for i in 0..w.rows() {
        data.extend_from_slice(w.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::matrix(w.rows(), w.cols() + b.cols(), data)
}

/// Vertical stack of two matrices with equal widths.
pub fn vstack<T: Scalar>(top: &Tensor<T>, bottom: &Tensor<T>) -> Result<Tensor<T>> {
    concat_rows(top, bottom)
}

/// Elementwise sum of equal-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return dim_err(format!("add shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `h[:, ..y.cols()] += y` row by row.
pub fn add_into_prefix<T: Scalar>(h: &mut Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if h.rows() != y.rows() || y.cols() > h.cols() {
        return dim_err(format!("residual add of {:?} into {:?}", y.shape(), h.shape()));
    }
    let w = y.cols();
    for i in 0..h.rows() {
        for (hv, &yv) in h.row_mut(i)[..w].iter_mut().zip(y.row(i)) {
            *hv += yv;
        }
    }
    Ok(())
}

/// Root-mean-square normalisation of one vector.
pub fn rms_norm<T: Scalar>(x: &[T], weight: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != weight.len() {
        return dim_err(format!("rms_norm length mismatch: {} vs {}", x.len(), weight.len()));
    }
    if eps <= T::zero() {
        return Err(Error::Config("rms_norm eps must be positive".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    rms_norm_into(x, weight, eps, x.len(), &mut out);
    Ok(out)
}

/// Normalise by the RMS of the first `stat_width` entries, scaling every
/// entry (including any beyond `stat_width`). Returns the inverse RMS.
#[inline]
pub(crate) fn rms_norm_into<T: Scalar>(x: &[T], weight: &[T], eps: T, stat_width: usize, out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in &x[..stat_width] {
        ss += v * v;
    }
    let mean = ss / T::lit(stat_width as f64);
    let inv = T::one() / (mean + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = w * (v * inv);
    }
    inv
}

/// Row-wise RMS norm of a matrix whose statistic covers the first
/// `stat_width` columns. Returns the normalised matrix and per-row inverse RMS.
pub fn rms_norm_rows<T: Scalar>(x: &Tensor<T>, weight: &[T], eps: T, stat_width: usize) -> Result<(Tensor<T>, Vec<T>)> {
    if x.cols() != weight.len() || stat_width == 0 || stat_width > x.cols() {
        return dim_err(format!(
            "rms_norm_rows: input width {} weight {} statistic width {stat_width}",
            x.cols(),
            weight.len()
        ));
    }
    let mut out = Tensor::zeros(&[x.rows(), x.cols()]);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        inv.push(rms_norm_into(x.row(i), weight, eps, stat_width, out.row_mut(i)));
    }
    Ok((out, inv))
}

/// Inverse frequencies `theta^(-2i/freq_dim)` for `pairs` rotation pairs.
pub fn rope_inv_freq(pairs: usize, theta: f64, freq_dim: usize) -> Vec<f64> {
    (0..pairs)
        .map(|i| theta.powf(-2.0 * i as f64 / freq_dim as f64))
        .collect()
}

/// Rotate adjacent pairs `(2i, 2i+1)` of `v` by `sign · pos · inv_freq[i]`.
#[inline]
pub(crate) fn rope_rotate<T: Scalar>(v: &mut [T], pos: usize, inv_freq: &[f64], sign: f64) {
    for (i, pair) in v.chunks_exact_mut(2).enumerate() {
        let ang = sign * pos as f64 * inv_freq[i];
        let (s, c) = ang.sin_cos();
        let (s, c) = (T::lit(s), T::lit(c));
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Rotary position embedding over an `L × head_dim` matrix: row `l` is
/// rotated for `positions[l]`, pair `i` by angle `pos · theta^(-2i/head_dim)`.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
    let hd = x.cols();
    if !hd.is_multiple_of(2) {
        return Err(Error::Config(format!("rope needs an even head_dim, got {hd}")));
    }
    if positions.len() != x.rows() {
        return dim_err(format!("rope: {} positions for {} rows", positions.len(), x.rows()));
    }
    let inv = rope_inv_freq(hd / 2, theta, hd);
    let mut out = x.clone();
    for (l, &p) in positions.iter().enumerate() {
        rope_rotate(out.row_mut(l), p, &inv, 1.0);
    }
    Ok(out)
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> Result<()> {
    let mut m = T::neg_infinity();
    for &v in row.iter() {
        if v.is_nan() {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        m = m.max(v);
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in silu input".into()));
    }
    let data = x.data().iter().map(|&v| silu(v)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_f64(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a.at(i, kk) as f64 * b.at(kk, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::<f32>::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let out = matmul(&Tensor::eye(2), &m, MatmulPolicy::serial()).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f32>::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[vec![5.], vec![6.]]).unwrap();
        let c = matmul(&a, &b, MatmulPolicy::serial()).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_vs_fp64_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_mat(&mut rng, 7, 5);
        let b = rand_mat(&mut rng, 5, 3);
        let c = matmul(&a, &b, MatmulPolicy::serial()).unwrap();
        let oracle = naive_f64(&a, &b);
        for (x, y) in c.data().iter().zip(&oracle) {
            let rel = (*x as f64 - y).abs() / y.abs().max(1e-12);
            assert!(rel <= 1e-6 || (*x as f64 - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &a, MatmulPolicy::serial()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linear_matches_matmul_transpose_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 3, 13);
        let w = rand_mat(&mut rng, 9, 13);
        let a = linear(&x, &w, MatmulPolicy::serial()).unwrap();
        let b = matmul(&x, &w.transpose(), MatmulPolicy::serial()).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn parallel_policy_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 6, 40);
        let w = rand_mat(&mut rng, 300, 40);
        let s = linear(&x, &w, MatmulPolicy::serial()).unwrap();
        let p = linear(&x, &w, MatmulPolicy::parallel(3)).unwrap();
        assert!(s.bits_eq(&p));
        let wt = w.transpose();
        let s = matmul(&x, &wt, MatmulPolicy::serial()).unwrap();
        let p = matmul(&x, &wt, MatmulPolicy::parallel(4)).unwrap();
        assert!(s.bits_eq(&p));
    }

    #[test]
    fn concat_rows_cases() {
        let w = Tensor::<f32>::zeros(&[2, 3]);
        let a = Tensor::from_fn(1, 3, |_, _| 1.0f32);
        let f = concat_rows(&w, &a).unwrap();
        assert_eq!(f.shape(), &[3, 3]);
        assert_eq!(f.row(2), &[1.0, 1.0, 1.0]);
        assert_eq!(f.row(0), &[0.0, 0.0, 0.0]);

        let empty = Tensor::<f32>::zeros(&[0, 3]);
        assert_eq!(concat_rows(&w, &empty).unwrap(), w);

        let bad = Tensor::<f32>::zeros(&[1, 4]);
        assert!(concat_rows(&w, &bad).is_err());
    }

    #[test]
    fn concat_rows_product_splits_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_mat(&mut rng, 6, 10);
        let a = rand_mat(&mut rng, 2, 10);
        let x = rand_mat(&mut rng, 10, 4);
        let p = MatmulPolicy::serial();
        let fused = matmul(&concat_rows(&w, &a).unwrap(), &x, p).unwrap();
        let sep = vstack(&matmul(&w, &x, p).unwrap(), &matmul(&a, &x, p).unwrap()).unwrap();
        assert!(fused.bits_eq(&sep));
    }

    #[test]
    fn concat_cols_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MatmulPolicy::serial();
        let w = rand_mat(&mut rng, 4, 6);
        let x = rand_mat(&mut rng, 6, 1);
        let dx = rand_mat(&mut rng, 2, 1);
        let stacked = vstack(&x, &dx).unwrap();

        let zero_b = Tensor::<f32>::zeros(&[4, 2]);
        let f = matmul(&concat_cols(&w, &zero_b).unwrap(), &stacked, p).unwrap();
        assert!(f.bits_eq(&matmul(&w, &x, p).unwrap()));

        let b = rand_mat(&mut rng, 4, 2);
        let fb = concat_cols(&w, &b).unwrap();
        let fused = matmul(&fb, &stacked, p).unwrap();
        let two = add(&matmul(&w, &x, p).unwrap(), &matmul(&b, &dx, p).unwrap()).unwrap();
        for (u, v) in fused.data().iter().zip(two.data()) {
            assert!(((u - v) / v.abs().max(1e-6)).abs() <= 1e-6, "{u} vs {v}");
        }

        let zero_dx = vstack(&x, &Tensor::zeros(&[2, 1])).unwrap();
        let fz = matmul(&fb, &zero_dx, p).unwrap();
        assert!(fz.bits_eq(&matmul(&w, &x, p).unwrap()));

        assert!(concat_cols(&w, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn rms_norm_cases() {
        let ones = vec![1.0f64; 4];
        let out = rms_norm(&ones, &ones, 1e-12).unwrap();
        for v in out {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let z = rms_norm(&[1.0f32, 2.0, 3.0], &[0.0; 3], 1e-6).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        assert!(rms_norm(&[1.0f32], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn rms_norm_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = rms_norm(&x, &[1.0; 32], 1e-6).unwrap();
        let rms = (out.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 32.0).sqrt();
        assert!((rms - 1.0).abs() <= 1e-5, "rms {rms}");
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = Tensor::<f32>::from_fn(1, 8, |_, j| j as f32 + 0.5);
        let y = rope_apply(&x, &[0], 10000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_single_pair_hand_trig() {
        let x = Tensor::<f64>::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let y = rope_apply(&x, &[1], 10000.0).unwrap();
        let (s, c) = 1.0f64.sin_cos();
        assert!((y.at(0, 0) - (0.3 * c + 0.7 * s)).abs() < 1e-12);
        assert!((y.at(0, 1) - (0.3 * s - 0.7 * c)).abs() < 1e-12);
    }

    #[test]
    fn rope_odd_head_dim_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(rope_apply(&x, &[0], 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_and_silu_cases() {
        let s = softmax_rows(&Tensor::<f32>::zeros(&[1, 2])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        assert_eq!(silu(0.0f32), 0.0);
        let nan = Tensor::<f32>::from_rows(&[vec![f32::NAN, 1.0]]).unwrap();
        assert!(matches!(softmax_rows(&nan), Err(Error::Numeric(_))));
        assert!(silu_tensor(&nan).is_err());
    }

    #[test]
    fn softmax_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::from_fn(8, 8, |_, _| rng.random_range(-10.0..10.0));
        let s = softmax_rows(&x).unwrap();
        for i in 0..8 {
            let sum: f64 = s.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn truncate_cols_compacts() {
        let mut t = Tensor::<f32>::from_fn(3, 4, |i, j| (i * 10 + j) as f32);
        t.truncate_cols(2);
        assert_eq!(t.data(), &[0., 1., 10., 11., 20., 21.]);
    }

    proptest! {
        #[test]
        fn rope_preserves_pair_norms(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            pos in 0usize..4096,
        ) {
            let x = Tensor::matrix(1, 8, vals).unwrap();
            let y = rope_apply(&x, &[pos], 10000.0).unwrap();
            for p in 0..4 {
                let a = x.at(0, 2 * p).hypot(x.at(0, 2 * p + 1));
                let b = y.at(0, 2 * p).hypot(y.at(0, 2 * p + 1));
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn matmul_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(&mut rng, 4, 6);
            let b = rand_mat(&mut rng, 6, 5);
            let p = MatmulPolicy::serial();
            prop_assert!(matmul(&a, &b, p).unwrap().bits_eq(&matmul(&a, &b, p).unwrap()));
        }
    }
}
