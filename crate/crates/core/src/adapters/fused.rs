use super::ops::{fba_expand_rows, ffa_merge_rows, lora_parts, pf_lora_parts, zflora_expand_rows, zflora_merge_rows};
use super::{attach_for, AdapterConfig, AdapterWeights, Attach, Role, Variant};
use crate::error::{dim_err, Error, Result};
use crate::model::{
    attention, embed_tokens, AttnRecord, BaseWeights, HeadGeometry, KVCache, LayerCache, ModelConfig, Proj,
};
use crate::scalar::Scalar;
use crate::tensor::{
    add_into_prefix, concat_cols, concat_rows, linear, linear_from, rms_norm_rows, silu, stats, vstack, MatmulPolicy,
    Tensor,
};

/// One projection after fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedProjection<T> {
    pub proj: Proj,
    pub attach: Attach,
    /// `W`, `[W; A]`, `[W B]` or `[[W B]; [A 0]]` depending on the role.
    pub weight: Tensor<T>,
    /// Separate `A` (unfused LoRA only).
    pub lora_a: Option<Tensor<T>>,
    /// Separate `B` (LoRA and partially fused LoRA).
    pub lora_b: Option<Tensor<T>>,
    pub d_out: usize,
    pub d_in: usize,
}

/// Intermediates a projection keeps for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ProjRecord<T> {
    /// Low-rank activation `A x` (LoRA, pf-LoRA, FFA).
    pub dy: Option<Tensor<T>>,
    /// Expanded input `[x; chunk mean]` (FBA).
    pub expanded: Option<Tensor<T>>,
}

impl<T: Scalar> FusedProjection<T> {
    /// Apply to the row-major input `x`. The output width is `d_out` plus
    /// any forward-adapter rows that leave the projection unmerged.
    pub fn apply(
        &self,
        x: &Tensor<T>,
        variant: Variant,
        policy: MatmulPolicy,
        rec: Option<&mut ProjRecord<T>>,
    ) -> Result<Tensor<T>> {
        let at = self.attach;
        match at.role {
            Role::Plain if at.paired => {
                let (a, b) = (self.lora_a.as_ref(), self.lora_b.as_ref());
                let (z, dy) = lora_parts(x, &self.weight, a.expect("lora A"), b.expect("lora B"), policy)?;
                if let Some(r) = rec {
                    r.dy = Some(dy);
                }
                Ok(z)
            }
            Role::ForwardFused if at.paired => {
                let (z, dy) = pf_lora_parts(x, &self.weight, self.lora_b.as_ref().expect("lora B"), policy)?;
                if let Some(r) = rec {
                    r.dy = Some(dy);
                }
                Ok(z)
            }
            Role::ForwardFused if variant == Variant::Ffa => {
                let mut f = linear_from(x, 0, &self.weight, policy)?;
                if let Some(r) = rec {
                    r.dy = Some(f.cols_range(self.d_out, at.forward_rows));
                }
                ffa_merge_rows(&mut f, self.d_out)?;
                Ok(f)
            }
            Role::BackwardFused if variant == Variant::Fba => {
                let xe = fba_expand_rows(x, self.d_in, at.backward_cols)?;
                let z = linear(&xe, &self.weight, policy)?;
                if let Some(r) = rec {
                    r.expanded = Some(xe);
                }
                Ok(z)
            }
            _ => linear_from(x, 0, &self.weight, policy),
        }
    }

    pub fn param_count(&self) -> u64 {
        let side = |t: &Option<Tensor<T>>| t.as_ref().map_or(0, |t| t.len() as u64);
        self.weight.len() as u64 + side(&self.lora_a) + side(&self.lora_b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLayer<T> {
    pub projs: Vec<FusedProjection<T>>,
    /// Base scales followed by the extension scales.
    pub attn_norm: Vec<T>,
    pub ffn_norm: Vec<T>,
}

impl<T> FusedLayer<T> {
    pub fn proj(&self, p: Proj) -> &FusedProjection<T> {
        &self.projs[p.index()]
    }
}

/// Saved activations of one block.
#[derive(Clone, Debug)]
pub struct LayerRecord<T> {
    pub pos0: usize,
    pub h_in: Tensor<T>,
    pub n1: Tensor<T>,
    pub inv1: Vec<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub attn: AttnRecord<T>,
    /// Cached rotated keys and values for positions `0..pos0 + L`.
    pub k_cache: Vec<T>,
    pub v_cache: Vec<T>,
    pub o_in: Tensor<T>,
    pub h_mid: Tensor<T>,
    pub n2: Tensor<T>,
    pub inv2: Vec<T>,
    pub g: Tensor<T>,
    pub u: Tensor<T>,
    pub act: Tensor<T>,
    pub proj: Vec<ProjRecord<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelRecord<T> {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerRecord<T>>,
    /// Hidden state after the merge, `L × d`.
    pub merged: Tensor<T>,
    pub inv_final: Vec<T>,
    pub n_final: Tensor<T>,
}

/// Base weights with the adapters folded in according to the variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel<T> {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<FusedLayer<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Tensor<T>,
}

pub fn build_fused_model<T: Scalar>(base: &BaseWeights<T>, adapters: &AdapterWeights<T>) -> Result<FusedModel<T>> {
    base.check()?;
    let cfg = &base.config;
    if &adapters.model != cfg {
        return Err(Error::Config(
            "adapter weights were built for a different model config".into(),
        ));
    }
    adapters.config.validate(cfg)?;
    adapters.check()?;
    let ac = &adapters.config;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, bl) in base.layers.iter().enumerate() {
        let mut projs = Vec::with_capacity(Proj::ALL.len());
        for p in Proj::ALL {
            let at = attach_for(cfg, ac, l, p);
            let w = bl.proj(p);
            let pa = adapters.proj(l, p);
            let (d_out, d_in) = cfg.proj_dims(p);
            let a = || {
                pa.a.as_ref()
                    .ok_or_else(|| Error::Graph(format!("layer {l} {}: missing A", p.name())))
            };
            let b = || {
                pa.b.as_ref()
                    .ok_or_else(|| Error::Graph(format!("layer {l} {}: missing B", p.name())))
            };
            let (weight, lora_a, lora_b) = match at.role {
                Role::Plain if at.paired => (w.clone(), Some(a()?.clone()), Some(b()?.clone())),
                Role::Plain => (w.clone(), None, None),
                Role::ForwardFused => {
                    let lb = if at.paired { Some(b()?.clone()) } else { None };
                    (concat_rows(w, a()?)?, None, lb)
                }
                Role::BackwardFused => (concat_cols(w, b()?)?, None, None),
                Role::ForwardBackwardFused => {
                    let a = a()?;
                    let top = concat_cols(w, b()?)?;
                    let bottom = concat_cols(a, &Tensor::zeros(&[a.rows(), at.backward_cols]))?;
                    (vstack(&top, &bottom)?, None, None)
                }
            };
            projs.push(FusedProjection {
                proj: p,
                attach: at,
                weight,
                lora_a,
                lora_b,
                d_out,
                d_in,
            });
        }
        let al = &adapters.layers[l];
        layers.push(FusedLayer {
            projs,
            attn_norm: bl.attn_norm.iter().chain(&al.attn_norm_ext).copied().collect(),
            ffn_norm: bl.ffn_norm.iter().chain(&al.ffn_norm_ext).copied().collect(),
        });
    }
    Ok(FusedModel {
        model: cfg.clone(),
        adapter: ac.clone(),
        embed: base.embed.clone(),
        layers,
        final_norm: base.final_norm.clone(),
        lm_head: base.lm_head.clone(),
    })
}

impl<T: Scalar> FusedModel<T> {
    pub fn variant(&self) -> Variant {
        self.adapter.variant
    }

    pub fn geometry(&self) -> HeadGeometry {
        HeadGeometry {
            ext_per_head: self.adapter.head_ext(&self.model),
            ..HeadGeometry::base(&self.model)
        }
    }

    /// Residual stream width (`d`, or `d + r` for zFLoRA).
    pub fn stream_width(&self) -> usize {
        self.model.d_model + self.adapter.stream_ext()
    }

    pub fn new_cache(&self, max_len: usize) -> KVCache<T> {
        KVCache::new(self.model.n_layers, self.geometry().kv_width(), max_len)
    }

    pub fn param_count(&self) -> u64 {
        let layers: u64 = self
            .layers
            .iter()
            .map(|l| {
                l.projs.iter().map(FusedProjection::param_count).sum::<u64>()
                    + (l.attn_norm.len() + l.ffn_norm.len()) as u64
            })
            .sum();
        (self.embed.len() + self.lm_head.len() + self.final_norm.len()) as u64 + layers
    }

    /// One block over `h: L × stream_width`, extending `cache` at `pos0`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        i: usize,
        h: &Tensor<T>,
        cache: &mut LayerCache<T>,
        max_len: usize,
        pos0: usize,
        policy: MatmulPolicy,
        record: bool,
    ) -> Result<(Tensor<T>, Option<LayerRecord<T>>)> {
        let cfg = &self.model;
        let d = cfg.d_model;
        let f = cfg.d_ffn;
        let r = self.adapter.rank;
        let eps = T::lit(cfg.rms_eps);
        let variant = self.variant();
        let layer = self
            .layers
            .get(i)
            .ok_or_else(|| Error::Graph(format!("no block {i}")))?;
        if h.cols() != self.stream_width() {
            return Err(Error::Graph(format!(
                "block {i} expects a {}-wide stream, got {}",
                self.stream_width(),
                h.cols()
            )));
        }
        let mut recs: Vec<ProjRecord<T>> = vec![ProjRecord::default(); Proj::ALL.len()];
        let mut apply = |p: Proj, x: &Tensor<T>| {
            let rec = if record { Some(&mut recs[p.index()]) } else { None };
            layer.proj(p).apply(x, variant, policy, rec)
        };

        let (n1, inv1) = rms_norm_rows(h, &layer.attn_norm, eps, d)?;
        let q = apply(Proj::Q, &n1)?;
        let k = apply(Proj::K, &n1)?;
        let v = apply(Proj::V, &n1)?;
        let geo = self.geometry();
        let mut attn_rec = record.then(AttnRecord::default);
        let ctx = attention(&q, &k, &v, geo, cache, max_len, pos0, cfg.rope_theta, attn_rec.as_mut())?;
        let o_in = if variant == Variant::FfbaQgAdd && layer.proj(Proj::O).attach.has_backward() {
            stats::record_aux();
            concat_cols(&ctx, &q.cols_range(d, r))?
        } else {
            ctx
        };
        let o = apply(Proj::O, &o_in)?;
        let mut h2 = h.clone();
        add_into_prefix(&mut h2, &o)?;

        let (n2, inv2) = rms_norm_rows(&h2, &layer.ffn_norm, eps, d)?;
        let g = apply(Proj::Gate, &n2)?;
        let u = apply(Proj::Up, &n2)?;
        // The uniform construction gates its extension dims like base dims.
        let gated = if variant == Variant::ZfloraUniform {
            g.cols().min(u.cols())
        } else {
            f
        };
        let carry = if variant == Variant::FfbaQgAdd && layer.proj(Proj::Down).attach.has_backward() {
            r
        } else {
            0
        };
        if carry > 0 {
            stats::record_aux();
        }
        let mut act = Tensor::zeros(&[h.rows(), gated + carry]);
        for row in 0..h.rows() {
            let (gr, ur) = (g.row(row), u.row(row));
            let out = act.row_mut(row);
            for j in 0..gated {
                out[j] = silu(gr[j]) * ur[j];
            }
            out[gated..].copy_from_slice(&gr[f..f + carry]);
        }
        let down = apply(Proj::Down, &act)?;
        let mut out = h2.clone();
        add_into_prefix(&mut out, &down)?;

        let rec = record.then(|| {
            let kvw = geo.kv_width();
            let upto = (pos0 + h.rows()) * kvw;
            LayerRecord {
                pos0,
                h_in: h.clone(),
                n1,
                inv1,
                q,
                k,
                v,
                attn: attn_rec.unwrap_or_default(),
                k_cache: cache.k[..upto].to_vec(),
                v_cache: cache.v[..upto].to_vec(),
                o_in,
                h_mid: h2,
                n2,
                inv2,
                g,
                u,
                act,
                proj: recs,
            }
        });
        Ok((out, rec))
    }

    fn run(
        &self,
        tokens: &[usize],
        cache: &mut KVCache<T>,
        policy: MatmulPolicy,
        record: bool,
    ) -> Result<(Tensor<T>, Option<ModelRecord<T>>)> {
        let cfg = &self.model;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if cache.kv_width() != self.geometry().kv_width() || cache.n_layers() != cfg.n_layers {
            return dim_err("cache geometry does not match the fused model");
        }
        cache.ensure_room(tokens.len())?;
        let pos0 = cache.len();
        let max_len = cache.max_len();
        let e = embed_tokens(tokens, &self.embed)?;
        let mut h = if self.variant().is_zflora() {
            zflora_expand_rows(&e, self.adapter.rank, self.adapter.zflora_expand)?
        } else {
            e
        };
        let mut layer_recs = Vec::new();
        for i in 0..cfg.n_layers {
            let (next, rec) = self.layer_forward(i, &h, cache.layer_mut(i), max_len, pos0, policy, record)?;
            h = next;
            layer_recs.extend(rec);
        }
        cache.advance(tokens.len())?;
        let merged = if self.variant().is_zflora() {
            zflora_merge_rows(&h, cfg.d_model, self.adapter.zflora_merge)?
        } else {
            h
        };
        let (n_final, inv_final) = rms_norm_rows(&merged, &self.final_norm, T::lit(cfg.rms_eps), cfg.d_model)?;
        let logits = linear_from(&n_final, 0, &self.lm_head, policy)?;
        let rec = record.then(|| ModelRecord {
            tokens: tokens.to_vec(),
            layers: layer_recs,
            merged,
            inv_final,
            n_final,
        });
        Ok((logits, rec))
    }

    /// Logits for `tokens` appended at the cache's current position.
    pub fn forward(&self, tokens: &[usize], cache: &mut KVCache<T>, policy: MatmulPolicy) -> Result<Tensor<T>> {
        Ok(self.run(tokens, cache, policy, false)?.0)
    }

    /// Full-sequence forward from an empty cache.
    pub fn logits(&self, tokens: &[usize], policy: MatmulPolicy) -> Result<Tensor<T>> {
        let mut cache = self.new_cache(tokens.len());
        self.forward(tokens, &mut cache, policy)
    }

    /// Full-sequence forward that keeps every intermediate for backprop.
    pub fn forward_recorded(&self, tokens: &[usize], policy: MatmulPolicy) -> Result<(Tensor<T>, ModelRecord<T>)> {
        let mut cache = self.new_cache(tokens.len());
        let (logits, rec) = self.run(tokens, &mut cache, policy, true)?;
        Ok((logits, rec.expect("recorded")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapters, InitScheme};
    use crate::model::{base_model_forward, gen_model};

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn none_variant_is_bit_identical() {
        let base = gen_model(&tiny(), 1).unwrap();
        let ad = init_adapters(&tiny(), &AdapterConfig::new(Variant::None, 8)).unwrap();
        let fused = build_fused_model(&base, &ad).unwrap();
        for (fl, bl) in fused.layers.iter().zip(&base.layers) {
            for p in Proj::ALL {
                assert!(fl.proj(p).weight.bits_eq(bl.proj(p)));
            }
        }
        let toks = [1, 5, 9, 2];
        let p = MatmulPolicy::serial();
        let mut c = KVCache::for_model(&tiny(), 4);
        let want = base_model_forward(&toks, &base, &mut c, p).unwrap();
        assert!(fused.logits(&toks, p).unwrap().bits_eq(&want));
    }

    #[test]
    fn every_variant_is_identity_at_default_init() {
        let base = gen_model(&tiny(), 2).unwrap();
        let toks = [3, 1, 4, 1, 5, 9];
        let p = MatmulPolicy::serial();
        let mut c = KVCache::for_model(&tiny(), 6);
        let want = base_model_forward(&toks, &base, &mut c, p).unwrap();
        for v in Variant::ALL {
            let ad = init_adapters(&tiny(), &AdapterConfig::new(v, 8).with_seed(4)).unwrap();
            let fused = build_fused_model(&base, &ad).unwrap();
            let got = fused.logits(&toks, p).unwrap();
            let diff = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(diff <= 1e-6, "{v}: {diff}");
        }
    }

    #[test]
    fn fused_shapes_follow_roles() {
        let m = tiny();
        let base = gen_model(&m, 0).unwrap();
        let ad = init_adapters(&m, &AdapterConfig::new(Variant::ZfloraUniform, 8)).unwrap();
        let fused = build_fused_model(&base, &ad).unwrap();
        let l = &fused.layers[0];
        assert_eq!(l.proj(Proj::Q).weight.shape(), &[72, 72]);
        assert_eq!(l.proj(Proj::K).weight.shape(), &[36, 72]);
        assert_eq!(l.proj(Proj::Down).weight.shape(), &[72, 264]);
        assert_eq!(fused.geometry().head_width(), 18);
        assert_eq!(l.attn_norm.len(), 72);
    }

    #[test]
    fn decode_matches_prefill_for_fused_variants() {
        let m = tiny();
        let base = gen_model(&m, 5).unwrap();
        let toks = [7, 3, 9, 11, 2];
        let p = MatmulPolicy::serial();
        for v in Variant::ALL {
            let c = AdapterConfig::new(v, 8).with_seed(1).with_init(InitScheme::BothRandom);
            let fused = build_fused_model(&base, &init_adapters(&m, &c).unwrap()).unwrap();
            let full = fused.logits(&toks, p).unwrap();
            let mut cache = fused.new_cache(8);
            fused.forward(&toks[..3], &mut cache, p).unwrap();
            for (i, &t) in toks[3..].iter().enumerate() {
                let step = fused.forward(&[t], &mut cache, p).unwrap();
                let want = full.row(3 + i);
                for (a, b) in step.row(0).iter().zip(want) {
                    assert!((a - b).abs() <= 1e-5, "{v}");
                }
            }
        }
    }

    #[test]
    fn mismatched_adapter_model_is_rejected() {
        let base = gen_model(&tiny(), 0).unwrap();
        let mut other = tiny();
        other.n_layers = 3;
        let ad = init_adapters(&other, &AdapterConfig::new(Variant::Lora, 4)).unwrap();
        assert!(matches!(build_fused_model(&base, &ad), Err(Error::Config(_))));
    }
}
