//! Reference forward pass in fp64 that never builds a fused matrix.
//!
//! Each variant is written out as its explicit per-token algebra on the
//! separate `W`, `A` and `B` tensors, with attention recomputed over the
//! whole prefix instead of using a cache. It shares no kernels with the
//! fused path, so agreement between the two is meaningful.

use serde::Serialize;

use crate::adapters::{AdapterWeights, ExpandPolicy, MergePolicy, Variant};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, ModelConfig, Proj};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn mv(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn axpy(y: &mut [f64], x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += b;
    }
}

fn tile_add(y: &mut [f64], t: &[f64]) {
    let n = t.len();
    for (i, v) in y.iter_mut().enumerate() {
        *v += t[i % n];
    }
}

fn chunk_mean(x: &[f64], r: usize) -> Vec<f64> {
    let chunks = x.len() / r;
    (0..r)
        .map(|j| (0..chunks).map(|c| x[c * r + j]).sum::<f64>() / chunks as f64)
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// RMS over `base.len()` entries; returns normalised base and extension.
fn norm(base: &[f64], ext: &[f64], w: &[f64], w_ext: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let ms = base.iter().map(|v| v * v).sum::<f64>() / base.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    (
        base.iter().zip(w).map(|(v, g)| v * inv * g).collect(),
        ext.iter().zip(w_ext).map(|(v, g)| v * inv * g).collect(),
    )
}

fn rotate(v: &mut [f64], pos: usize, theta: f64, freq_dim: usize) {
    for i in 0..v.len() / 2 {
        let ang = pos as f64 * theta.powf(-2.0 * i as f64 / freq_dim as f64);
        let (s, c) = ang.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

struct Proj64 {
    w: Mat,
    a: Option<Mat>,
    b: Option<Mat>,
}

impl Proj64 {
    fn base(&self, x: &[f64]) -> Vec<f64> {
        mv(&self.w, x)
    }

    fn a(&self, x: &[f64]) -> Vec<f64> {
        self.a.as_ref().map_or_else(Vec::new, |a| mv(a, x))
    }

    fn b(&self, x: &[f64]) -> Vec<f64> {
        match &self.b {
            Some(b) if !x.is_empty() => mv(b, x),
            _ => vec![0.0; self.w.len()],
        }
    }
}

struct Layer64 {
    p: Vec<Proj64>,
    attn_norm: Vec<f64>,
    ffn_norm: Vec<f64>,
    attn_ext: Vec<f64>,
    ffn_ext: Vec<f64>,
}

/// Per-token hidden state: base part and extension part.
#[derive(Clone)]
struct State {
    b: Vec<f64>,
    e: Vec<f64>,
}

/// Oracle logits, one row per input token.
pub fn oracle_logits<T: Scalar>(
    base: &BaseWeights<T>,
    adapters: &AdapterWeights<T>,
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let cfg = &base.config;
    if &adapters.model != cfg {
        return Err(Error::Config(
            "adapter weights were built for a different model config".into(),
        ));
    }
    base.check()?;
    adapters.config.validate(cfg)?;
    adapters.check()?;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    let ac = &adapters.config;
    let r = ac.rank;
    let v64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let layers: Vec<Layer64> = base
        .layers
        .iter()
        .zip(&adapters.layers)
        .map(|(bl, al)| Layer64 {
            p: Proj::ALL
                .iter()
                .map(|&p| {
                    let pa = &al.proj[p.index()];
                    Proj64 {
                        w: to_mat(bl.proj(p)),
                        a: pa.a.as_ref().map(to_mat),
                        b: pa.b.as_ref().map(to_mat),
                    }
                })
                .collect(),
            attn_norm: v64(&bl.attn_norm),
            ffn_norm: v64(&bl.ffn_norm),
            attn_ext: v64(&al.attn_norm_ext),
            ffn_ext: v64(&al.ffn_norm_ext),
        })
        .collect();
    let embed = to_mat(&base.embed);
    let lm = to_mat(&base.lm_head);
    let final_norm = v64(&base.final_norm);

    let zflora = ac.variant.is_zflora();
    let mut states: Vec<State> = tokens
        .iter()
        .map(|&t| {
            let x = embed[t].clone();
            let e = match (zflora, ac.zflora_expand) {
                (false, _) => Vec::new(),
                (true, ExpandPolicy::ZeroPad) => vec![0.0; r],
                (true, ExpandPolicy::SplitAverage) => chunk_mean(&x, r),
            };
            State { b: x, e }
        })
        .collect();
    for layer in &layers {
        states = oracle_block(cfg, ac.variant, r, ac.head_ext(cfg), layer, &states);
    }
    Ok(states
        .iter()
        .map(|s| {
            let mut h = s.b.clone();
            if zflora && ac.zflora_merge == MergePolicy::RepeatAdd {
                tile_add(&mut h, &s.e);
            }
            let (n, _) = norm(&h, &[], &final_norm, &[], cfg.rms_eps);
            mv(&lm, &n)
        })
        .collect())
}

fn oracle_block(cfg: &ModelConfig, v: Variant, r: usize, e: usize, l: &Layer64, xs: &[State]) -> Vec<State> {
    let p = |q: Proj| &l.p[q.index()];
    let (d, hd, nh, nkv) = (cfg.d_model, cfg.head_dim, cfg.n_heads, cfg.n_kv_heads);
    let eps = cfg.rms_eps;

    // Adapted projection of a normalised input `(xb, xe)`; returns the base
    // output plus whatever forward-adapter output leaves the projection.
    let project = |q: Proj, xb: &[f64], xe: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pr = p(q);
        let mut y = pr.base(xb);
        match v {
            Variant::None => (y, Vec::new()),
            Variant::Lora | Variant::PfLora => {
                if pr.a.is_some() {
                    axpy(&mut y, &pr.b(&pr.a(xb)));
                }
                (y, Vec::new())
            }
            Variant::Ffa => {
                if pr.a.is_some() {
                    tile_add(&mut y, &pr.a(xb));
                }
                (y, Vec::new())
            }
            Variant::Fba => {
                if pr.b.is_some() {
                    axpy(&mut y, &pr.b(&chunk_mean(xb, r)));
                }
                (y, Vec::new())
            }
            Variant::FfbaQgAdd | Variant::ZfloraMinimal | Variant::ZfloraUniform => {
                if pr.b.is_some() {
                    axpy(&mut y, &pr.b(xe));
                }
                (y, pr.a(xb))
            }
        }
    };

    let n_tok = xs.len();
    let mut mids = Vec::with_capacity(n_tok);
    let mut qs = Vec::with_capacity(n_tok);
    let mut ks = Vec::with_capacity(n_tok);
    let mut vs = Vec::with_capacity(n_tok);
    let head = |base: &[f64], ext: &[f64], h: usize| -> Vec<f64> {
        let mut out = base[h * hd..(h + 1) * hd].to_vec();
        if e > 0 && !ext.is_empty() {
            out.extend_from_slice(&ext[h * e..(h + 1) * e]);
        } else {
            out.extend(std::iter::repeat_n(0.0, e));
        }
        out
    };
    let mut dqs = Vec::with_capacity(n_tok);
    for (pos, x) in xs.iter().enumerate() {
        let (nb, ne) = norm(&x.b, &x.e, &l.attn_norm, &l.attn_ext, eps);
        let (q, dq) = project(Proj::Q, &nb, &ne);
        let (k, dk) = project(Proj::K, &nb, &ne);
        let (vv, dv) = project(Proj::V, &nb, &ne);
        let mut qh: Vec<Vec<f64>> = (0..nh).map(|h| head(&q, if e > 0 { &dq } else { &[] }, h)).collect();
        let mut kh: Vec<Vec<f64>> = (0..nkv).map(|h| head(&k, if e > 0 { &dk } else { &[] }, h)).collect();
        let vh: Vec<Vec<f64>> = (0..nkv).map(|h| head(&vv, if e > 0 { &dv } else { &[] }, h)).collect();
        qh.iter_mut()
            .chain(kh.iter_mut())
            .for_each(|t| rotate(t, pos, cfg.rope_theta, hd));
        qs.push(qh);
        ks.push(kh);
        vs.push(vh);
        dqs.push(dq);
    }
    let group = nh / nkv;
    let scale = 1.0 / (hd as f64).sqrt();
    for (pos, x) in xs.iter().enumerate() {
        let mut ctx_b = vec![0.0; d];
        let mut ctx_e = vec![0.0; nh * e];
        for h in 0..nh {
            let j = h / group;
            let scores: Vec<f64> = (0..=pos)
                .map(|s| qs[pos][h].iter().zip(&ks[s][j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (s, w) in ex.iter().enumerate() {
                let val = &vs[s][j];
                for t in 0..hd {
                    ctx_b[h * hd + t] += w / z * val[t];
                }
                for t in 0..e {
                    ctx_e[h * e + t] += w / z * val[hd + t];
                }
            }
        }
        // The FFBA wiring feeds the query adapter's output straight to the
        // output projection's backward adapter.
        let o_ext: &[f64] = match v {
            Variant::FfbaQgAdd => &dqs[pos],
            _ => &ctx_e,
        };
        let (o, d_o) = project(Proj::O, &ctx_b, o_ext);
        let mut s = x.clone();
        axpy(&mut s.b, &o);
        if !d_o.is_empty() && v.is_zflora() {
            axpy(&mut s.e, &d_o);
        }
        mids.push(s);
    }
    mids.into_iter()
        .map(|mut s| {
            let (nb, ne) = norm(&s.b, &s.e, &l.ffn_norm, &l.ffn_ext, eps);
            let (g, dg) = project(Proj::Gate, &nb, &ne);
            let (u, du) = project(Proj::Up, &nb, &ne);
            let act: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
            let act_e: Vec<f64> = match v {
                Variant::ZfloraUniform if !dg.is_empty() => dg.iter().zip(&du).map(|(a, b)| silu(*a) * b).collect(),
                Variant::FfbaQgAdd => dg.clone(),
                _ => Vec::new(),
            };
            let (dn, d_dn) = project(Proj::Down, &act, &act_e);
            axpy(&mut s.b, &dn);
            if !d_dn.is_empty() && v.is_zflora() {
                axpy(&mut s.e, &d_dn);
            }
            s
        })
        .collect()
}

/// Element with the largest error relative to its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Worst {
    pub token: usize,
    pub index: usize,
    pub got: f64,
    pub want: f64,
}

/// Agreement between two logit matrices under `|got − want| ≤ atol + rtol·|want|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivReport {
    pub tokens: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_abs_err: f64,
    /// Max abs error divided by the reference's max abs logit.
    pub max_rel_err: f64,
    /// Largest `|got − want| / (atol + rtol·|want|)`; at most 1 when passing.
    pub max_tol_ratio: f64,
    pub violations: usize,
    pub argmax_agree: usize,
    pub worst: Option<Worst>,
    pub pass: bool,
}

pub fn compare_logits<T: Scalar>(got: &Tensor<T>, want: &[Vec<f64>], rtol: f64, atol: f64) -> Result<EquivReport> {
    if got.rows() != want.len() || want.iter().any(|w| w.len() != got.cols()) {
        return Err(Error::Dimension(format!(
            "logit shapes differ: {:?} vs {}×{}",
            got.shape(),
            want.len(),
            want.first().map_or(0, Vec::len)
        )));
    }
    let argmax = |row: &mut dyn Iterator<Item = f64>| {
        row.enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, v)| if v > best.1 { (i, v) } else { best },
            )
            .0
    };
    let (mut max_abs, mut scale, mut ratio) = (0.0f64, 0.0f64, 0.0f64);
    let mut violations = 0;
    let mut worst = None;
    let mut agree = 0;
    for (t, w) in want.iter().enumerate() {
        for (i, (a, &b)) in got.row(t).iter().zip(w).enumerate() {
            let a = a.as_f64();
            let diff = (a - b).abs();
            let q = if diff.is_nan() {
                f64::INFINITY
            } else {
                diff / (atol + rtol * b.abs())
            };
            if q > 1.0 {
                violations += 1;
            }
            if q > ratio || worst.is_none() {
                ratio = ratio.max(q);
                worst = Some(Worst {
                    token: t,
                    index: i,
                    got: a,
                    want: b,
                });
            }
            max_abs = if diff.is_nan() {
                f64::INFINITY
            } else {
                max_abs.max(diff)
            };
            scale = scale.max(b.abs());
        }
        if argmax(&mut got.row(t).iter().map(|v| v.as_f64())) == argmax(&mut w.iter().copied()) {
            agree += 1;
        }
    }
    Ok(EquivReport {
        tokens: want.len(),
        rtol,
        atol,
        max_abs_err: max_abs,
        max_rel_err: if scale > 0.0 { max_abs / scale } else { max_abs },
        max_tol_ratio: ratio,
        violations,
        argmax_agree: agree,
        worst,
        pass: violations == 0,
    })
}

/// Error unless the fused logits match the oracle elementwise.
pub fn assert_equiv<T: Scalar>(got: &Tensor<T>, want: &[Vec<f64>], rtol: f64, atol: f64) -> Result<EquivReport> {
    let rep = compare_logits(got, want, rtol, atol)?;
    if rep.pass {
        Ok(rep)
    } else {
        let w = rep.worst.as_ref().expect("non-empty comparison");
        Err(Error::Numeric(format!(
            "{} logits outside tolerance; worst at token {} index {}: {} vs {}",
            rep.violations, w.token, w.index, w.got, w.want
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{build_fused_model, init_adapters, AdapterConfig, InitScheme, Placement};
    use crate::model::gen_model;
    use crate::tensor::MatmulPolicy;

    #[test]
    fn fused_matches_oracle_for_every_variant() {
        let m = ModelConfig::preset("tiny").unwrap();
        let base = gen_model(&m, 11).unwrap();
        let toks = [5, 17, 33, 2, 60, 8, 8];
        for v in Variant::ALL {
            for pl in [Placement::All, Placement::MhaOnly, Placement::FfnOnly] {
                let c = AdapterConfig::new(v, 8)
                    .with_seed(9)
                    .with_init(InitScheme::BothRandom)
                    .with_placement(pl);
                let ad = init_adapters(&m, &c).unwrap();
                let fused = build_fused_model(&base, &ad).unwrap();
                let got = fused.logits(&toks, MatmulPolicy::serial()).unwrap();
                let want = oracle_logits(&base, &ad, &toks).unwrap();
                let rep = assert_equiv(&got, &want, 1e-4, 1e-6).unwrap();
                assert_eq!(rep.argmax_agree, toks.len(), "{v} {pl:?}");
            }
        }
    }

    #[test]
    fn oracle_sees_the_adapter() {
        let m = ModelConfig::preset("tiny").unwrap();
        let base = gen_model(&m, 11).unwrap();
        let c = AdapterConfig::new(Variant::ZfloraMinimal, 8).with_init(InitScheme::BothRandom);
        let ad = init_adapters(&m, &c).unwrap();
        let none = init_adapters(&m, &AdapterConfig::new(Variant::None, 8)).unwrap();
        let a = oracle_logits(&base, &ad, &[1, 2, 3]).unwrap();
        let b = oracle_logits(&base, &none, &[1, 2, 3]).unwrap();
        let diff = a
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn merge_policies_differ_in_the_oracle() {
        let m = ModelConfig::preset("tiny").unwrap();
        let base = gen_model(&m, 3).unwrap();
        let mut c = AdapterConfig::new(Variant::ZfloraMinimal, 8).with_init(InitScheme::BothRandom);
        c.zflora_merge = MergePolicy::RepeatAdd;
        c.zflora_expand = ExpandPolicy::SplitAverage;
        let ad = init_adapters(&m, &c).unwrap();
        let fused = build_fused_model(&base, &ad).unwrap();
        let toks = [4, 9, 1];
        let got = fused.logits(&toks, MatmulPolicy::serial()).unwrap();
        assert_equiv(&got, &oracle_logits(&base, &ad, &toks).unwrap(), 1e-4, 1e-6).unwrap();
    }

    #[test]
    fn mismatch_is_reported() {
        let t = Tensor::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let rep = compare_logits(&t, &[vec![1.0, 2.5]], 1e-4, 1e-6).unwrap();
        assert_eq!(rep.max_abs_err, 0.5);
        assert_eq!(rep.violations, 1);
        assert_eq!(rep.worst.as_ref().map(|w| w.index), Some(1));
        assert!(assert_equiv(&t, &[vec![1.0, 2.5]], 1e-3, 0.0).is_err());
        assert!(assert_equiv(&t, &[vec![1.0, 2.0002]], 1e-3, 0.0).is_ok());
        assert!(compare_logits(&t, &[vec![1.0]], 1e-4, 1e-6).is_err());
    }
}
