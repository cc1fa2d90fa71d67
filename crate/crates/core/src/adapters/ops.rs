//! Adapter operations on row-major activations (`L × width`).

use super::{ExpandPolicy, MergePolicy};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{add, linear, linear_from, stats, MatmulPolicy, Tensor};

/// Unfused LoRA: `z = W x + B (A x)` as four separate kernels.
pub fn lora_layer_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    policy: MatmulPolicy,
) -> Result<Tensor<T>> {
    Ok(lora_parts(x, w, a, b, policy)?.0)
}

/// Returns `(z, A x)`.
pub(crate) fn lora_parts<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    policy: MatmulPolicy,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let y = linear_from(x, 0, w, policy)?;
    let dy = linear_from(x, 0, a, policy)?;
    let dz = linear(&dy, b, policy)?;
    stats::record_aux();
    Ok((add(&y, &dz)?, dy))
}

/// Partially fused LoRA: one kernel over `[W; A]`, then `B` on the tail.
pub fn pf_lora_layer_forward<T: Scalar>(
    x: &Tensor<T>,
    fused: &Tensor<T>,
    b: &Tensor<T>,
    policy: MatmulPolicy,
) -> Result<Tensor<T>> {
    Ok(pf_lora_parts(x, fused, b, policy)?.0)
}

pub(crate) fn pf_lora_parts<T: Scalar>(
    x: &Tensor<T>,
    fused: &Tensor<T>,
    b: &Tensor<T>,
    policy: MatmulPolicy,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d_o = b.rows();
    if fused.rows() < d_o || fused.rows() - d_o != b.cols() {
        return dim_err(format!(
            "pf_lora: fused rows {} do not split into {d_o} + {}",
            fused.rows(),
            b.cols()
        ));
    }
    let mut f = linear_from(x, 0, fused, policy)?;
    let dy = f.cols_range(d_o, b.cols());
    let dz = linear_from(&f, d_o, b, policy)?;
    f.truncate_cols(d_o);
    stats::record_aux();
    for i in 0..f.rows() {
        for (v, &e) in f.row_mut(i).iter_mut().zip(dz.row(i)) {
            *v += e;
        }
    }
    Ok((f, dy))
}

/// `out[i] = y[i] + dy[i mod 2r]`, requiring `len(y) % len(dy) == 0`.
pub fn ffa_merge<T: Scalar>(y: &[T], dy: &[T]) -> Result<Vec<T>> {
    if dy.is_empty() || !y.len().is_multiple_of(dy.len()) {
        return dim_err(format!(
            "ffa merge: output width {} is not a multiple of {}",
            y.len(),
            dy.len()
        ));
    }
    let n = dy.len();
    Ok(y.iter().enumerate().map(|(i, &v)| v + dy[i % n]).collect())
}

/// Chunk mean: `m[j] = mean_c x[c·r + j]` over the `len(x)/r` chunks.
fn chunk_mean_into<T: Scalar>(x: &[T], r: usize, out: &mut [T]) {
    let chunks = x.len() / r;
    out.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..chunks {
        for (o, &v) in out.iter_mut().zip(&x[c * r..(c + 1) * r]) {
            *o += v;
        }
    }
    let n = T::lit(chunks as f64);
    out.iter_mut().for_each(|v| *v /= n);
}

/// `[x; chunk mean of x]`, requiring `len(x) % r == 0`.
pub fn fba_expand<T: Scalar>(x: &[T], r: usize) -> Result<Vec<T>> {
    if r == 0 || !x.len().is_multiple_of(r) {
        return dim_err(format!("fba expand: width {} is not a multiple of r = {r}", x.len()));
    }
    let mut out = x.to_vec();
    out.resize(x.len() + r, T::zero());
    let (head, tail) = out.split_at_mut(x.len());
    chunk_mean_into(head, r, tail);
    Ok(out)
}

/// Widen the embedding to `d + r`.
pub fn zflora_expand<T: Scalar>(x: &[T], r: usize, policy: ExpandPolicy) -> Result<Vec<T>> {
    match policy {
        ExpandPolicy::ZeroPad => {
            let mut out = x.to_vec();
            out.resize(x.len() + r, T::zero());
            Ok(out)
        }
        ExpandPolicy::SplitAverage => fba_expand(x, r),
    }
}

/// Narrow the final hidden state from `d + r` back to `d`.
pub fn zflora_merge<T: Scalar>(h: &[T], d: usize, policy: MergePolicy) -> Result<Vec<T>> {
    if h.len() < d {
        return dim_err(format!("zflora merge: hidden width {} below d = {d}", h.len()));
    }
    let (base, ext) = h.split_at(d);
    match policy {
        MergePolicy::Truncate => Ok(base.to_vec()),
        MergePolicy::RepeatAdd => ffa_merge(base, ext),
    }
}

/// Row-wise [`fba_expand`] of the first `width` columns.
pub(crate) fn fba_expand_rows<T: Scalar>(x: &Tensor<T>, width: usize, r: usize) -> Result<Tensor<T>> {
    stats::record_aux();
    let mut data = Vec::with_capacity(x.rows() * (width + r));
    for i in 0..x.rows() {
        data.extend(fba_expand(&x.row(i)[..width], r)?);
    }
    Tensor::matrix(x.rows(), width + r, data)
}

pub(crate) fn zflora_expand_rows<T: Scalar>(x: &Tensor<T>, r: usize, policy: ExpandPolicy) -> Result<Tensor<T>> {
    stats::record_aux();
    let mut data = Vec::with_capacity(x.rows() * (x.cols() + r));
    for i in 0..x.rows() {
        data.extend(zflora_expand(x.row(i), r, policy)?);
    }
    Tensor::matrix(x.rows(), x.cols() + r, data)
}

pub(crate) fn zflora_merge_rows<T: Scalar>(h: &Tensor<T>, d: usize, policy: MergePolicy) -> Result<Tensor<T>> {
    stats::record_aux();
    let mut data = Vec::with_capacity(h.rows() * d);
    for i in 0..h.rows() {
        data.extend(zflora_merge(h.row(i), d, policy)?);
    }
    Tensor::matrix(h.rows(), d, data)
}

/// In place: `f[:, ..d_o] += tile(f[:, d_o..])`, then drop the tail.
pub(crate) fn ffa_merge_rows<T: Scalar>(f: &mut Tensor<T>, d_o: usize) -> Result<()> {
    stats::record_aux();
    let n = f.cols() - d_o;
    if n == 0 || !d_o.is_multiple_of(n) {
        return dim_err(format!("ffa merge: output width {d_o} is not a multiple of {n}"));
    }
    for i in 0..f.rows() {
        let row = f.row_mut(i);
        let (y, dy) = row.split_at_mut(d_o);
        for (j, v) in y.iter_mut().enumerate() {
            *v += dy[j % n];
        }
    }
    f.truncate_cols(d_o);
    Ok(())
}
