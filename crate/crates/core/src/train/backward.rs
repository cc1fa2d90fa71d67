//! Reverse-mode gradients for adapter parameters through the fused graph.
//! Base weights are treated as constants.

use crate::adapters::{
    AdapterWeights, FusedModel, FusedProjection, LayerRecord, ModelRecord, ProjAdapter, ProjRecord, Role, Variant,
};
use crate::error::{Error, Result};
use crate::model::{gather_into, HeadGeometry, Proj};
use crate::scalar::Scalar;
use crate::tensor::{matmul, rope_inv_freq, rope_rotate, sigmoid, silu, MatmulPolicy, Tensor};

fn missing(what: &str) -> Error {
    Error::State(format!("missing saved activation: {what}"))
}

/// `g[a, b] += Σ_t dz[t, z0 + a] · x[t, x0 + b]` for `g: rows × cols`.
fn acc_outer<T: Scalar>(g: &mut Tensor<T>, dz: &Tensor<T>, z0: usize, x: &Tensor<T>, x0: usize) {
    let (rows, cols) = (g.rows(), g.cols());
    for t in 0..dz.rows() {
        let zr = &dz.row(t)[z0..z0 + rows];
        let xr = &x.row(t)[x0..x0 + cols];
        for (a, &zv) in zr.iter().enumerate() {
            if zv == T::zero() {
                continue;
            }
            for (gv, &xv) in g.row_mut(a).iter_mut().zip(xr) {
                *gv += zv * xv;
            }
        }
    }
}

/// `dx[:, ..y.cols()] += y`.
fn add_prefix<T: Scalar>(dx: &mut Tensor<T>, y: &Tensor<T>) {
    let w = y.cols();
    for t in 0..dx.rows() {
        for (a, &b) in dx.row_mut(t)[..w].iter_mut().zip(y.row(t)) {
            *a += b;
        }
    }
}

fn hcat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(&[a.rows(), a.cols() + b.cols()]);
    for t in 0..a.rows() {
        let row = out.row_mut(t);
        row[..a.cols()].copy_from_slice(a.row(t));
        row[a.cols()..].copy_from_slice(b.row(t));
    }
    out
}

/// Backward through one projection. `dz` has the projection's output
/// width; the returned input gradient has the width of `x`.
fn proj_backward<T: Scalar>(
    fp: &FusedProjection<T>,
    variant: Variant,
    rec: &ProjRecord<T>,
    x: &Tensor<T>,
    dz: &Tensor<T>,
    grad: &mut ProjAdapter<T>,
    policy: MatmulPolicy,
) -> Result<Tensor<T>> {
    let at = fp.attach;
    let (d_o, d_i) = (fp.d_out, fp.d_in);
    let mut dx = Tensor::zeros(&[x.rows(), x.cols()]);
    let g_a = |g: &mut ProjAdapter<T>| g.a.take().ok_or_else(|| missing("A gradient slot"));
    let g_b = |g: &mut ProjAdapter<T>| g.b.take().ok_or_else(|| missing("B gradient slot"));
    match at.role {
        Role::Plain if at.paired => {
            let (a, b) = (fp.lora_a.as_ref().unwrap(), fp.lora_b.as_ref().unwrap());
            let dy = rec.dy.as_ref().ok_or_else(|| missing("lora A·x"))?;
            add_prefix(&mut dx, &matmul(dz, &fp.weight, policy)?);
            let ddy = matmul(dz, b, policy)?;
            let mut gb = g_b(grad)?;
            acc_outer(&mut gb, dz, 0, dy, 0);
            grad.b = Some(gb);
            let mut ga = g_a(grad)?;
            acc_outer(&mut ga, &ddy, 0, x, 0);
            grad.a = Some(ga);
            add_prefix(&mut dx, &matmul(&ddy, a, policy)?);
        }
        Role::ForwardFused if at.paired => {
            let b = fp.lora_b.as_ref().unwrap();
            let dy = rec.dy.as_ref().ok_or_else(|| missing("pf-lora A·x"))?;
            let ddy = matmul(dz, b, policy)?;
            let mut gb = g_b(grad)?;
            acc_outer(&mut gb, dz, 0, dy, 0);
            grad.b = Some(gb);
            let mut ga = g_a(grad)?;
            acc_outer(&mut ga, &ddy, 0, x, 0);
            grad.a = Some(ga);
            add_prefix(&mut dx, &matmul(&hcat(dz, &ddy), &fp.weight, policy)?);
        }
        Role::ForwardFused if variant == Variant::Ffa => {
            let n = at.forward_rows;
            let mut ddy = Tensor::zeros(&[dz.rows(), n]);
            for t in 0..dz.rows() {
                for (i, &v) in dz.row(t).iter().enumerate() {
                    ddy.row_mut(t)[i % n] += v;
                }
            }
            let mut ga = g_a(grad)?;
            acc_outer(&mut ga, &ddy, 0, x, 0);
            grad.a = Some(ga);
            add_prefix(&mut dx, &matmul(&hcat(dz, &ddy), &fp.weight, policy)?);
        }
        Role::ForwardFused => {
            let mut ga = g_a(grad)?;
            acc_outer(&mut ga, dz, d_o, x, 0);
            grad.a = Some(ga);
            add_prefix(&mut dx, &matmul(dz, &fp.weight, policy)?);
        }
        Role::BackwardFused if variant == Variant::Fba => {
            let xe = rec.expanded.as_ref().ok_or_else(|| missing("fba expanded input"))?;
            let r = at.backward_cols;
            let mut gb = g_b(grad)?;
            acc_outer(&mut gb, dz, 0, xe, d_i);
            grad.b = Some(gb);
            let dxe = matmul(dz, &fp.weight, policy)?;
            let chunks = T::lit((d_i / r) as f64);
            for t in 0..dx.rows() {
                let src = dxe.row(t);
                for (j, v) in dx.row_mut(t)[..d_i].iter_mut().enumerate() {
                    *v += src[j] + src[d_i + j % r] / chunks;
                }
            }
        }
        Role::BackwardFused => {
            let mut gb = g_b(grad)?;
            acc_outer(&mut gb, dz, 0, x, d_i);
            grad.b = Some(gb);
            add_prefix(&mut dx, &matmul(dz, &fp.weight, policy)?);
        }
        Role::ForwardBackwardFused => {
            let mut gb = g_b(grad)?;
            acc_outer(&mut gb, dz, 0, x, d_i);
            grad.b = Some(gb);
            let mut ga = g_a(grad)?;
            acc_outer(&mut ga, dz, d_o, x, 0);
            grad.a = Some(ga);
            add_prefix(&mut dx, &matmul(dz, &fp.weight, policy)?);
        }
        Role::Plain => add_prefix(&mut dx, &matmul(dz, &fp.weight, policy)?),
    }
    Ok(dx)
}

/// RMSNorm backward with the statistic over the first `s` columns.
/// Gradients of the scales at columns `≥ s` are added into `dw_ext`.
fn rms_backward<T: Scalar>(x: &Tensor<T>, w: &[T], inv: &[T], s: usize, dy: &Tensor<T>, dw_ext: &mut [T]) -> Tensor<T> {
    let mut dx = Tensor::zeros(&[x.rows(), x.cols()]);
    let sw = T::lit(s as f64);
    for t in 0..x.rows() {
        let (xr, gr, iv) = (x.row(t), dy.row(t), inv[t]);
        let mut dot = T::zero();
        for k in 0..xr.len() {
            dot += gr[k] * w[k] * xr[k];
        }
        let coef = dot * iv * iv * iv / sw;
        let out = dx.row_mut(t);
        for k in 0..xr.len() {
            out[k] = gr[k] * w[k] * iv;
            if k < s {
                out[k] -= xr[k] * coef;
            }
        }
        for (k, g) in dw_ext.iter_mut().enumerate() {
            *g += gr[s + k] * xr[s + k] * iv;
        }
    }
    dx
}

fn scatter_head<T: Copy>(geo: &HeadGeometry, heads: usize, h: usize, v: &[T], row: &mut [T]) {
    let hd = geo.head_dim;
    row[h * hd..(h + 1) * hd].copy_from_slice(&v[..hd]);
    if geo.ext_per_head > 0 {
        let e = geo.ext_per_head;
        let base = heads * hd;
        row[base + h * e..base + (h + 1) * e].copy_from_slice(&v[hd..hd + e]);
    }
}

/// Attention backward for a record that started at position 0.
fn attention_backward<T: Scalar>(
    rec: &LayerRecord<T>,
    geo: HeadGeometry,
    theta: f64,
    dctx: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if rec.pos0 != 0 {
        return Err(Error::State(
            "backward needs a forward pass that started at position 0".into(),
        ));
    }
    let l = dctx.rows();
    let (nh, nkv) = (geo.n_heads, geo.n_kv_heads);
    let hw = geo.head_width();
    let kvw = geo.kv_width();
    if rec.attn.probs.len() != l * nh || rec.attn.q_rot.len() != l * nh * hw {
        return Err(missing("attention probabilities"));
    }
    let inv_freq = rope_inv_freq(hw / 2, theta, geo.head_dim);
    let scale = T::lit(1.0 / (geo.head_dim as f64).sqrt());
    let group = nh / nkv;
    let mut dk_rot = vec![T::zero(); l * kvw];
    let mut dv = vec![T::zero(); l * kvw];
    let mut dq = Tensor::zeros(&[l, rec.q.cols()]);
    let mut dout = vec![T::zero(); hw];
    let mut dqr = vec![T::zero(); hw];
    for t in 0..l {
        for h in 0..nh {
            let j = h / group;
            let idx = t * nh + h;
            let probs = &rec.attn.probs[idx];
            let qr = &rec.attn.q_rot[idx * hw..(idx + 1) * hw];
            gather_into(&geo, dctx.row(t), nh, h, &mut dout);
            let mut dp = Vec::with_capacity(probs.len());
            let mut tot = T::zero();
            for (s, &p) in probs.iter().enumerate() {
                let val = &rec.v_cache[s * kvw + j * hw..s * kvw + (j + 1) * hw];
                let mut acc = T::zero();
                for (a, b) in dout.iter().zip(val) {
                    acc += *a * *b;
                }
                dp.push(acc);
                tot += p * acc;
            }
            dqr.iter_mut().for_each(|v| *v = T::zero());
            for (s, &p) in probs.iter().enumerate() {
                let ds = p * (dp[s] - tot) * scale;
                let off = s * kvw + j * hw;
                let key = &rec.k_cache[off..off + hw];
                for c in 0..hw {
                    dqr[c] += ds * key[c];
                    dk_rot[off + c] += ds * qr[c];
                    dv[off + c] += p * dout[c];
                }
            }
            rope_rotate(&mut dqr, t, &inv_freq, -1.0);
            scatter_head(&geo, nh, h, &dqr, dq.row_mut(t));
        }
    }
    let mut dk = Tensor::zeros(&[l, rec.k.cols()]);
    let mut dvt = Tensor::zeros(&[l, rec.v.cols()]);
    for s in 0..l {
        for j in 0..nkv {
            let off = s * kvw + j * hw;
            let kr = &mut dk_rot[off..off + hw];
            rope_rotate(kr, s, &inv_freq, -1.0);
            scatter_head(&geo, nkv, j, kr, dk.row_mut(s));
            scatter_head(&geo, nkv, j, &dv[off..off + hw], dvt.row_mut(s));
        }
    }
    Ok((dq, dk, dvt))
}

fn layer_backward<T: Scalar>(
    model: &FusedModel<T>,
    i: usize,
    rec: &LayerRecord<T>,
    dout: &Tensor<T>,
    grads: &mut AdapterWeights<T>,
    policy: MatmulPolicy,
) -> Result<Tensor<T>> {
    let cfg = &model.model;
    let (d, f, r) = (cfg.d_model, cfg.d_ffn, model.adapter.rank);
    let variant = model.variant();
    let layer = &model.layers[i];
    let out_width = |p: Proj, base: usize| {
        let at = layer.proj(p).attach;
        if matches!(at.role, Role::ForwardFused | Role::ForwardBackwardFused) && !at.paired && variant != Variant::Ffa {
            base + at.forward_rows
        } else {
            base
        }
    };
    let gl = &mut grads.layers[i];
    let bwd = |p: Proj, x: &Tensor<T>, dz: &Tensor<T>, g: &mut ProjAdapter<T>| {
        proj_backward(layer.proj(p), variant, &rec.proj[p.index()], x, dz, g, policy)
    };

    // FFN
    let ddown = dout.cols_range(0, out_width(Proj::Down, d));
    let dact = bwd(Proj::Down, &rec.act, &ddown, &mut gl.proj[Proj::Down.index()])?;
    let gated = if variant == Variant::ZfloraUniform {
        rec.g.cols().min(rec.u.cols())
    } else {
        f
    };
    let mut dg = Tensor::zeros(&[rec.g.rows(), rec.g.cols()]);
    let mut du = Tensor::zeros(&[rec.u.rows(), rec.u.cols()]);
    for t in 0..dact.rows() {
        let (gr, ur, ar) = (rec.g.row(t), rec.u.row(t), dact.row(t));
        for j in 0..gated {
            let sg = sigmoid(gr[j]);
            let ds = sg * (T::one() + gr[j] * (T::one() - sg));
            dg.row_mut(t)[j] = ar[j] * ur[j] * ds;
            du.row_mut(t)[j] = ar[j] * silu(gr[j]);
        }
        for k in 0..ar.len() - gated {
            dg.row_mut(t)[f + k] += ar[gated + k];
        }
    }
    let mut dn2 = bwd(Proj::Gate, &rec.n2, &dg, &mut gl.proj[Proj::Gate.index()])?;
    let dn2u = bwd(Proj::Up, &rec.n2, &du, &mut gl.proj[Proj::Up.index()])?;
    add_prefix(&mut dn2, &dn2u);
    let mut dh2 = rms_backward(&rec.h_mid, &layer.ffn_norm, &rec.inv2, d, &dn2, &mut gl.ffn_norm_ext);
    add_prefix(&mut dh2, dout);

    // attention
    let d_o = dh2.cols_range(0, out_width(Proj::O, d));
    let do_in = bwd(Proj::O, &rec.o_in, &d_o, &mut gl.proj[Proj::O.index()])?;
    let geo = model.geometry();
    let (mut dq, dk, dv) = attention_backward(rec, geo, cfg.rope_theta, &do_in)?;
    if do_in.cols() > geo.q_width() {
        // query adapter output routed to the output projection
        for t in 0..dq.rows() {
            let src = &do_in.row(t)[d..d + r];
            for (a, &b) in dq.row_mut(t)[d..d + r].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let mut dn1 = bwd(Proj::Q, &rec.n1, &dq, &mut gl.proj[Proj::Q.index()])?;
    add_prefix(&mut dn1, &bwd(Proj::K, &rec.n1, &dk, &mut gl.proj[Proj::K.index()])?);
    add_prefix(&mut dn1, &bwd(Proj::V, &rec.n1, &dv, &mut gl.proj[Proj::V.index()])?);
    let mut dh = rms_backward(&rec.h_in, &layer.attn_norm, &rec.inv1, d, &dn1, &mut gl.attn_norm_ext);
    add_prefix(&mut dh, &dh2);
    Ok(dh)
}

/// Gradients of a scalar loss with respect to every adapter parameter,
/// given the loss gradient on the logits.
pub fn adapter_backward<T: Scalar>(
    model: &FusedModel<T>,
    rec: &ModelRecord<T>,
    dlogits: &Tensor<T>,
    policy: MatmulPolicy,
) -> Result<AdapterWeights<T>> {
    let cfg = &model.model;
    let d = cfg.d_model;
    if rec.layers.len() != cfg.n_layers {
        return Err(missing("per-block records"));
    }
    if dlogits.shape() != [rec.tokens.len(), cfg.vocab_size] {
        return Err(Error::Dimension(format!("logit gradient shape {:?}", dlogits.shape())));
    }
    let mut grads = AdapterWeights::<T>::zeros(cfg, &model.adapter);
    let dn = matmul(dlogits, &model.lm_head, policy)?;
    let dm = rms_backward(&rec.merged, &model.final_norm, &rec.inv_final, d, &dn, &mut []);
    let r = model.adapter.stream_ext();
    let mut dh = if r > 0 {
        let mut out = Tensor::zeros(&[dm.rows(), d + r]);
        let repeat = model.adapter.zflora_merge == crate::adapters::MergePolicy::RepeatAdd;
        for t in 0..dm.rows() {
            let row = out.row_mut(t);
            row[..d].copy_from_slice(dm.row(t));
            if repeat {
                for (i, &g) in dm.row(t).iter().enumerate() {
                    row[d + i % r] += g;
                }
            }
        }
        out
    } else {
        dm
    };
    for i in (0..cfg.n_layers).rev() {
        dh = layer_backward(model, i, &rec.layers[i], &dh, &mut grads, policy)?;
    }
    Ok(grads)
}
