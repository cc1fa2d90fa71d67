//! LLaMA-style decoder: pre-norm blocks of grouped-query attention with
//! RoPE and a SwiGLU feed-forward network, an untied LM head, and a
//! per-layer key/value cache for incremental decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    add_into_prefix, linear_from, rms_norm_rows, rope_inv_freq, rope_rotate, silu, softmax_in_place, MatmulPolicy,
    Tensor,
};

/// Standard deviation of every generated weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 4] = ["tiny", "1B", "3B", "8B"];

    pub fn preset(name: &str) -> Result<Self> {
        let llama = |n_layers, d_model, n_heads, head_dim, d_ffn| ModelConfig {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads: 8,
            head_dim,
            d_ffn,
            vocab_size: 128_256,
            rope_theta: 500_000.0,
            rms_eps: 1e-5,
        };
        let cfg = match name {
            "tiny" => ModelConfig {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                n_kv_heads: 2,
                head_dim: 16,
                d_ffn: 256,
                vocab_size: 64,
                rope_theta: 10_000.0,
                rms_eps: 1e-5,
            },
            "1B" => llama(16, 2048, 32, 64, 8192),
            "3B" => llama(28, 3072, 24, 128, 8192),
            "8B" => llama(32, 4096, 32, 128, 14336),
            other => return config_err(format!("unknown preset {other:?}; expected one of {:?}", Self::PRESETS)),
        };
        Ok(cfg)
    }

    /// Nominal model size used when quoting adapter size as a percentage.
    pub fn nominal_size(name: &str) -> Option<f64> {
        match name {
            "1B" => Some(1e9),
            "3B" => Some(3e9),
            "8B" => Some(8e9),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return config_err(format!("{name} must be at least 1"));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return config_err(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return config_err(format!(
                "n_heads·head_dim = {} differs from d_model = {}",
                self.n_heads * self.head_dim,
                self.d_model
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return config_err(format!("head_dim must be even for RoPE, got {}", self.head_dim));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_theta > 0.0) {
            return config_err("rms_eps and rope_theta must be positive");
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// `(d_out, d_in)` of a projection.
    pub fn proj_dims(&self, p: Proj) -> (usize, usize) {
        let (d, f, kv) = (self.d_model, self.d_ffn, self.kv_dim());
        match p {
            Proj::Q | Proj::O => (d, d),
            Proj::K | Proj::V => (kv, d),
            Proj::Gate | Proj::Up => (f, d),
            Proj::Down => (d, f),
        }
    }

    /// Closed-form count of base-model parameters.
    pub fn base_param_count(&self) -> u64 {
        let per_layer: u64 = Proj::ALL
            .iter()
            .map(|&p| {
                let (o, i) = self.proj_dims(p);
                (o * i) as u64
            })
            .sum::<u64>()
            + 2 * self.d_model as u64;
        let v = self.vocab_size as u64;
        let d = self.d_model as u64;
        2 * v * d + d + self.n_layers as u64 * per_layer
    }
}

/// The seven linear projections of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proj {
    #[serde(rename = "wq")]
    Q,
    #[serde(rename = "wk")]
    K,
    #[serde(rename = "wv")]
    V,
    #[serde(rename = "wo")]
    O,
    #[serde(rename = "w_gate")]
    Gate,
    #[serde(rename = "w_up")]
    Up,
    #[serde(rename = "w_down")]
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Gate => "w_gate",
            Proj::Up => "w_up",
            Proj::Down => "w_down",
        }
    }

    pub fn in_attention(self) -> bool {
        matches!(self, Proj::Q | Proj::K | Proj::V | Proj::O)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub attn_norm: Vec<T>,
    pub ffn_norm: Vec<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn proj(&self, p: Proj) -> &Tensor<T> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
            Proj::Gate => &self.w_gate,
            Proj::Up => &self.w_up,
            Proj::Down => &self.w_down,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Tensor<T> {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
            Proj::Gate => &mut self.w_gate,
            Proj::Up => &mut self.w_up,
            Proj::Down => &mut self.w_down,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let z = |p: Proj| {
            let (o, i) = cfg.proj_dims(p);
            Tensor::zeros(&[o, i])
        };
        Self {
            wq: z(Proj::Q),
            wk: z(Proj::K),
            wv: z(Proj::V),
            wo: z(Proj::O),
            w_gate: z(Proj::Gate),
            w_up: z(Proj::Up),
            w_down: z(Proj::Down),
            attn_norm: vec![T::one(); cfg.d_model],
            ffn_norm: vec![T::one(); cfg.d_model],
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect();
        LayerWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
            attn_norm: c(&self.attn_norm),
            ffn_norm: c(&self.ffn_norm),
        }
    }

    /// Check every shape against the config.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for p in Proj::ALL {
            let (o, i) = cfg.proj_dims(p);
            if self.proj(p).shape() != [o, i] {
                return dim_err(format!(
                    "{} has shape {:?}, expected [{o}, {i}]",
                    p.name(),
                    self.proj(p).shape()
                ));
            }
        }
        if self.attn_norm.len() != cfg.d_model || self.ffn_norm.len() != cfg.d_model {
            return dim_err("norm weight length differs from d_model");
        }
        Ok(())
    }
}

/// Full base-model weight set.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Tensor<T>,
}

impl<T: Scalar> BaseWeights<T> {
    pub fn cast<U: Scalar>(&self) -> BaseWeights<U> {
        BaseWeights {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            final_norm: self.final_norm.iter().map(|&x| U::lit(x.as_f64())).collect(),
            lm_head: self.lm_head.cast(),
        }
    }

    pub fn param_count(&self) -> u64 {
        let layer: usize = self
            .layers
            .iter()
            .map(|l| Proj::ALL.iter().map(|&p| l.proj(p).len()).sum::<usize>() + l.attn_norm.len() + l.ffn_norm.len())
            .sum();
        (self.embed.len() + self.lm_head.len() + self.final_norm.len() + layer) as u64
    }

    pub fn check(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return dim_err(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                cfg.n_layers
            ));
        }
        for l in &self.layers {
            l.check(cfg)?;
        }
        if self.embed.shape() != [cfg.vocab_size, cfg.d_model] || self.lm_head.shape() != [cfg.vocab_size, cfg.d_model]
        {
            return dim_err("embedding / lm_head shape differs from [vocab, d_model]");
        }
        if self.final_norm.len() != cfg.d_model {
            return dim_err("final norm length differs from d_model");
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// One block's weights drawn from `rng` in the fixed order q, k, v, o,
/// gate, up, down; norm scales are ones.
pub fn gen_layer(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> LayerWeights<f32> {
    let mut layer = LayerWeights::zeros(cfg);
    for p in Proj::ALL {
        let (o, i) = cfg.proj_dims(p);
        *layer.proj_mut(p) = normal_matrix(rng, o, i, INIT_STD);
    }
    layer
}

/// Deterministic base weights: every matrix `N(0, 0.02²)` from `seed`.
pub fn gen_model(cfg: &ModelConfig, seed: u64) -> Result<BaseWeights<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = normal_matrix(&mut rng, cfg.vocab_size, cfg.d_model, INIT_STD);
    let layers = (0..cfg.n_layers).map(|_| gen_layer(cfg, &mut rng)).collect();
    let lm_head = normal_matrix(&mut rng, cfg.vocab_size, cfg.d_model, INIT_STD);
    Ok(BaseWeights {
        config: cfg.clone(),
        embed,
        layers,
        final_norm: vec![1.0; cfg.d_model],
        lm_head,
    })
}

/// Keys (post-RoPE) and values of one layer, `max_len × kv_width` each.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct KVCache<T> {
    max_len: usize,
    len: usize,
    kv_width: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(n_layers: usize, kv_width: usize, max_len: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerCache {
                k: vec![T::zero(); max_len * kv_width],
                v: vec![T::zero(); max_len * kv_width],
            })
            .collect();
        Self {
            max_len,
            len: 0,
            kv_width,
            layers,
        }
    }

    pub fn for_model(cfg: &ModelConfig, max_len: usize) -> Self {
        Self::new(cfg.n_layers, cfg.kv_dim(), max_len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn kv_width(&self) -> usize {
        self.kv_width
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn reset(&mut self) {
        self.len = 0;
    }

    pub fn ensure_room(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.max_len {
            return Err(Error::Capacity {
                len: self.len,
                max_len: self.max_len,
                requested: extra,
            });
        }
        Ok(())
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerCache<T> {
        &mut self.layers[i]
    }

    pub fn layer(&self, i: usize) -> &LayerCache<T> {
        &self.layers[i]
    }

    /// Commit `n` freshly written positions.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        self.ensure_room(n)?;
        self.len += n;
        Ok(())
    }
}

/// Head layout of one attention block.
///
/// A head vector is the `head_dim` slice of the base projection output
/// followed by `ext_per_head` entries taken from the extension columns
/// (which start after all base heads). With `ext_per_head == 0` this is
/// the ordinary layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGeometry {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ext_per_head: usize,
}

impl HeadGeometry {
    pub fn base(cfg: &ModelConfig) -> Self {
        Self {
            n_heads: cfg.n_heads,
            n_kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim,
            ext_per_head: 0,
        }
    }

    pub fn head_width(&self) -> usize {
        self.head_dim + self.ext_per_head
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_width()
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_width()
    }

    pub(crate) fn scatter<E: Copy>(&self, v: &[E], h: usize, row: &mut [E]) {
        let hd = self.head_dim;
        row[h * hd..(h + 1) * hd].copy_from_slice(&v[..hd]);
        if self.ext_per_head > 0 {
            let e = self.ext_per_head;
            let base = self.n_heads * hd;
            row[base + h * e..base + (h + 1) * e].copy_from_slice(&v[hd..]);
        }
    }
}

/// Saved attention activations for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct AttnRecord<T> {
    /// Rotated query head vectors, `[l][h][head_width]` flattened.
    pub q_rot: Vec<T>,
    /// Attention probabilities per `(l, h)`, length `pos0 + l + 1`.
    pub probs: Vec<Vec<T>>,
}

/// Causal grouped-query attention. Appends the rotated keys and values of
/// the `L` new rows at positions `pos0..pos0+L` of `cache`, then attends
/// each row over positions `0..=pos0+l`. Returns the context matrix
/// `L × n_heads·head_width` in the same base-then-extension column layout.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    geo: HeadGeometry,
    cache: &mut LayerCache<T>,
    max_len: usize,
    pos0: usize,
    rope_theta: f64,
    mut record: Option<&mut AttnRecord<T>>,
) -> Result<Tensor<T>> {
    let l = q.rows();
    let hw = geo.head_width();
    let kvw = geo.kv_width();
    if k.rows() != l || v.rows() != l {
        return dim_err("q/k/v row counts differ");
    }
    if q.cols() < geo.q_width() || k.cols() < kvw || v.cols() < kvw {
        return Err(Error::Graph(format!(
            "attention input widths q={} k={} v={} too narrow for head width {hw}",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    if pos0 + l > max_len || cache.k.len() < max_len * kvw {
        return Err(Error::Capacity {
            len: pos0,
            max_len,
            requested: l,
        });
    }
    let inv_freq = rope_inv_freq(hw / 2, rope_theta, geo.head_dim);
    let mut tmp = vec![T::zero(); hw];
    for r in 0..l {
        let p = pos0 + r;
        for j in 0..geo.n_kv_heads {
            gather_into(&geo, k.row(r), geo.n_kv_heads, j, &mut tmp);
            rope_rotate(&mut tmp, p, &inv_freq, 1.0);
            cache.k[p * kvw + j * hw..p * kvw + (j + 1) * hw].copy_from_slice(&tmp);
            gather_into(&geo, v.row(r), geo.n_kv_heads, j, &mut tmp);
            cache.v[p * kvw + j * hw..p * kvw + (j + 1) * hw].copy_from_slice(&tmp);
        }
    }

    let scale = T::lit(1.0 / (geo.head_dim as f64).sqrt());
    let group = geo.n_heads / geo.n_kv_heads;
    let mut ctx = Tensor::zeros(&[l, geo.q_width()]);
    let mut out = vec![T::zero(); hw];
    if let Some(rec) = record.as_deref_mut() {
        rec.q_rot.clear();
        rec.probs.clear();
    }
    for r in 0..l {
        let p = pos0 + r;
        for h in 0..geo.n_heads {
            let j = h / group;
            gather_into(&geo, q.row(r), geo.n_heads, h, &mut tmp);
            rope_rotate(&mut tmp, p, &inv_freq, 1.0);
            let mut scores = Vec::with_capacity(p + 1);
            for s in 0..=p {
                let key = &cache.k[s * kvw + j * hw..s * kvw + (j + 1) * hw];
                let mut acc = T::zero();
                for (&a, &b) in tmp.iter().zip(key) {
                    acc += a * b;
                }
                scores.push(acc * scale);
            }
            softmax_in_place(&mut scores)?;
            out.iter_mut().for_each(|o| *o = T::zero());
            for (s, &w) in scores.iter().enumerate() {
                let val = &cache.v[s * kvw + j * hw..s * kvw + (j + 1) * hw];
                for (o, &x) in out.iter_mut().zip(val) {
                    *o += w * x;
                }
            }
            geo.scatter(&out, h, ctx.row_mut(r));
            if let Some(rec) = record.as_deref_mut() {
                rec.q_rot.extend_from_slice(&tmp);
                rec.probs.push(scores);
            }
        }
    }
    Ok(ctx)
}

/// Head `h` of `row` in the given geometry (`heads` heads in the row).
pub(crate) fn gather_into<T: Copy>(geo: &HeadGeometry, row: &[T], heads: usize, h: usize, out: &mut [T]) {
    let hd = geo.head_dim;
    out[..hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
    if geo.ext_per_head > 0 {
        let e = geo.ext_per_head;
        let base = heads * hd;
        out[hd..hd + e].copy_from_slice(&row[base + h * e..base + (h + 1) * e]);
    }
}

/// One base transformer block over `h: L × d_model`, extending `cache`
/// (positions `pos0..pos0+L`).
pub fn base_layer_forward<T: Scalar>(
    h: &Tensor<T>,
    layer: &LayerWeights<T>,
    cfg: &ModelConfig,
    cache: &mut LayerCache<T>,
    max_len: usize,
    pos0: usize,
    policy: MatmulPolicy,
) -> Result<Tensor<T>> {
    if h.cols() != cfg.d_model {
        return dim_err(format!(
            "hidden width {} differs from d_model {}",
            h.cols(),
            cfg.d_model
        ));
    }
    let eps = T::lit(cfg.rms_eps);
    let d = cfg.d_model;
    let (n1, _) = rms_norm_rows(h, &layer.attn_norm, eps, d)?;
    let q = linear_from(&n1, 0, &layer.wq, policy)?;
    let k = linear_from(&n1, 0, &layer.wk, policy)?;
    let v = linear_from(&n1, 0, &layer.wv, policy)?;
    let ctx = attention(
        &q,
        &k,
        &v,
        HeadGeometry::base(cfg),
        cache,
        max_len,
        pos0,
        cfg.rope_theta,
        None,
    )?;
    let o = linear_from(&ctx, 0, &layer.wo, policy)?;
    let mut out = h.clone();
    add_into_prefix(&mut out, &o)?;
    let (n2, _) = rms_norm_rows(&out, &layer.ffn_norm, eps, d)?;
    let g = linear_from(&n2, 0, &layer.w_gate, policy)?;
    let u = linear_from(&n2, 0, &layer.w_up, policy)?;
    let mut act = g;
    for (a, &b) in act.data_mut().iter_mut().zip(u.data()) {
        *a = silu(*a) * b;
    }
    let down = linear_from(&act, 0, &layer.w_down, policy)?;
    add_into_prefix(&mut out, &down)?;
    Ok(out)
}

pub fn embed_tokens<T: Scalar>(tokens: &[usize], embed: &Tensor<T>) -> Result<Tensor<T>> {
    let vocab = embed.rows();
    let d = embed.cols();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t >= vocab {
            return Err(Error::Input(format!("token id {t} out of range for vocab {vocab}")));
        }
        data.extend_from_slice(embed.row(t));
    }
    Tensor::matrix(tokens.len(), d, data)
}

/// Embed → blocks → final norm → LM head. Extends `cache` by `tokens.len()`.
pub fn base_model_forward<T: Scalar>(
    tokens: &[usize],
    weights: &BaseWeights<T>,
    cache: &mut KVCache<T>,
    policy: MatmulPolicy,
) -> Result<Tensor<T>> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if cache.kv_width() != cfg.kv_dim() || cache.n_layers() != cfg.n_layers {
        return dim_err("cache geometry does not match the model");
    }
    cache.ensure_room(tokens.len())?;
    let pos0 = cache.len();
    let max_len = cache.max_len();
    let mut h = embed_tokens(tokens, &weights.embed)?;
    for (i, layer) in weights.layers.iter().enumerate() {
        h = base_layer_forward(&h, layer, cfg, cache.layer_mut(i), max_len, pos0, policy)?;
    }
    cache.advance(tokens.len())?;
    let (n, _) = rms_norm_rows(&h, &weights.final_norm, T::lit(cfg.rms_eps), cfg.d_model)?;
    linear_from(&n, 0, &weights.lm_head, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn presets_are_valid() {
        for name in ModelConfig::PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("70B").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.head_dim = 15;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn gen_model_deterministic_and_seed_sensitive() {
        let a = gen_model(&tiny(), 1).unwrap();
        let b = gen_model(&tiny(), 1).unwrap();
        let c = gen_model(&tiny(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].wq, c.layers[0].wq);
        assert!(a.final_norm.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tiny_param_count_matches_closed_form() {
        // 2·V·d + d + n_layers·(2d² + 2·kv·d + 3·d·f + 2d) with V=64, d=64,
        // kv=32, f=256, 2 layers.
        let expected = 2 * 64 * 64 + 64 + 2 * (2 * 64 * 64 + 2 * 32 * 64 + 3 * 64 * 256 + 2 * 64);
        let w = gen_model(&tiny(), 0).unwrap();
        assert_eq!(w.param_count(), expected as u64);
        assert_eq!(tiny().base_param_count(), expected as u64);
    }

    #[test]
    fn zero_weights_are_residual_identity() {
        let cfg = tiny();
        let layer = LayerWeights::<f32>::zeros(&cfg);
        let h = Tensor::from_fn(3, cfg.d_model, |i, j| (i as f32 - j as f32) * 0.01);
        let mut cache = KVCache::for_model(&cfg, 8);
        let out = base_layer_forward(&h, &layer, &cfg, cache.layer_mut(0), 8, 0, MatmulPolicy::serial()).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn decode_after_prefill_matches_full_prefill() {
        let cfg = tiny();
        let w = gen_model(&cfg, 3).unwrap();
        let layer = &w.layers[0];
        let h = embed_tokens(&[1, 5, 9, 2, 7], &w.embed).unwrap();
        let p = MatmulPolicy::serial();

        let mut full = KVCache::for_model(&cfg, 8);
        let all = base_layer_forward(&h, layer, &cfg, full.layer_mut(0), 8, 0, p).unwrap();

        let mut inc = KVCache::for_model(&cfg, 8);
        base_layer_forward(&h.rows_range(0, 4), layer, &cfg, inc.layer_mut(0), 8, 0, p).unwrap();
        let last = base_layer_forward(&h.rows_range(4, 1), layer, &cfg, inc.layer_mut(0), 8, 4, p).unwrap();
        for (a, b) in last.row(0).iter().zip(all.row(4)) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn causal_perturbation_leaves_prefix_unchanged() {
        let cfg = tiny();
        let w = gen_model(&cfg, 4).unwrap();
        let p = MatmulPolicy::serial();
        let run = |toks: &[usize]| {
            let mut c = KVCache::for_model(&cfg, 8);
            base_model_forward(toks, &w, &mut c, p).unwrap()
        };
        let a = run(&[3, 1, 4, 1, 5]);
        let b = run(&[3, 1, 4, 9, 5]);
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn model_forward_shapes_and_errors() {
        let cfg = tiny();
        let w = gen_model(&cfg, 5).unwrap();
        let p = MatmulPolicy::serial();
        let mut c = KVCache::for_model(&cfg, 4);
        let logits = base_model_forward(&[1, 2, 3], &w, &mut c, p).unwrap();
        assert_eq!(logits.shape(), &[3, cfg.vocab_size]);
        assert_eq!(c.len(), 3);
        assert!(matches!(
            base_model_forward(&[1, 2], &w, &mut c, p),
            Err(Error::Capacity { .. })
        ));
        let mut c = KVCache::for_model(&cfg, 4);
        assert!(matches!(base_model_forward(&[64], &w, &mut c, p), Err(Error::Input(_))));

        let mut c2 = KVCache::for_model(&cfg, 4);
        let again = base_model_forward(&[1, 2, 3], &w, &mut c2, p).unwrap();
        assert!(logits.bits_eq(&again));
    }

    #[test]
    fn prefill_decode_factorization_matches_recompute() {
        let cfg = tiny();
        let w = gen_model(&cfg, 6).unwrap();
        let p = MatmulPolicy::serial();
        let toks = [4, 8, 15, 16, 23, 42];
        let mut c = KVCache::for_model(&cfg, 8);
        let full = base_model_forward(&toks, &w, &mut c, p).unwrap();
        let mut c = KVCache::for_model(&cfg, 8);
        base_model_forward(&toks[..3], &w, &mut c, p).unwrap();
        for (i, &t) in toks[3..].iter().enumerate() {
            let step = base_model_forward(&[t], &w, &mut c, p).unwrap();
            for (a, b) in step.row(0).iter().zip(full.row(3 + i)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
