//! FTC1 tensor container.
//!
//! Layout: 8-byte magic `FTC1\0\0\0\0`, a little-endian `u64` header length
//! `H`, `H` bytes of JSON, then the payload. The header maps each tensor
//! name to `{dtype, shape, offset, nbytes}` and carries a free-form `meta`
//! object. Offsets are relative to the payload start and 64-byte aligned;
//! the header is space-padded so the payload itself starts aligned.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adapters::{attach_for, AdapterConfig, AdapterWeights, FusedLayer, FusedModel, FusedProjection, Role};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, LayerWeights, ModelConfig, Proj};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FTC1\0\0\0\0";
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: Map<String, Value>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn pad_to(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} missing from container")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name == "meta" {
                return fmt_err("\"meta\" is reserved and cannot name a tensor");
            }
            offset = pad_to(offset);
            let nbytes = t.len() * 4;
            let e = Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: offset as u64,
                nbytes: nbytes as u64,
            };
            header.insert(name.clone(), serde_json::to_value(e)?);
            offset += nbytes;
        }
        header.insert("meta".into(), Value::Object(self.meta.clone()));
        let mut json = serde_json::to_vec(&Value::Object(header))?;
        let start = pad_to(16 + json.len());
        json.resize(start - 16, b' ');
        let mut out = Vec::with_capacity(start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.resize(pad_to(out.len()), 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return fmt_err("not an FTC1 file (bad magic)");
        }
        let h = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if h > bytes.len() - 16 {
            return fmt_err(format!("header length {h} exceeds file size {}", bytes.len()));
        }
        let header: Map<String, Value> = match serde_json::from_slice(&bytes[16..16 + h]) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return fmt_err("header is not a JSON object"),
            Err(e) => return fmt_err(format!("header JSON: {e}")),
        };
        let payload = &bytes[16 + h..];
        let mut out = Container::default();
        let mut spans = Vec::new();
        for (name, v) in header {
            if name == "meta" {
                match v {
                    Value::Object(m) => out.meta = m,
                    _ => return fmt_err("meta must be an object"),
                }
                continue;
            }
            let e: Entry = serde_json::from_value(v).map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
            if e.dtype != "f32" {
                return fmt_err(format!("{name}: unsupported dtype {:?}", e.dtype));
            }
            let count: usize = e.shape.iter().product();
            if e.nbytes != 4 * count as u64 {
                return fmt_err(format!(
                    "{name}: nbytes {} does not match shape {:?}",
                    e.nbytes, e.shape
                ));
            }
            if !e.offset.is_multiple_of(ALIGN as u64) {
                return fmt_err(format!("{name}: offset {} is not {ALIGN}-byte aligned", e.offset));
            }
            let (lo, hi) = (e.offset as usize, e.offset as usize + e.nbytes as usize);
            if hi > payload.len() {
                return fmt_err(format!(
                    "{name}: bytes {lo}..{hi} outside the {}-byte payload",
                    payload.len()
                ));
            }
            let data = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            spans.push((lo, hi, name.clone()));
            out.tensors.insert(name, Tensor::new(e.shape, data)?);
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return fmt_err(format!("tensors {} and {} overlap", w[0].2, w[1].2));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn meta_value<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("meta.{key} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("meta.{key}: {e}")))
    }

    /// Model config the payload tensors were generated for: `payload_model`
    /// when the header describes a larger model than it stores, else `model`.
    pub fn payload_model(&self) -> Result<ModelConfig> {
        if self.meta.contains_key("payload_model") {
            self.meta_value("payload_model")
        } else {
            self.meta_value("model")
        }
    }
}

fn layer_key(i: usize, name: &str) -> String {
    format!("layers.{i}.{name}")
}

fn take(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = c.get(name)?;
    if t.shape() != shape {
        return fmt_err(format!("{name}: shape {:?}, expected {shape:?}", t.shape()));
    }
    Ok(t.clone())
}

fn take_vec(c: &Container, name: &str, len: usize) -> Result<Vec<f32>> {
    Ok(take(c, name, &[len])?.into_data())
}

pub fn put_base(c: &mut Container, w: &BaseWeights<f32>, prefix: &str) {
    c.insert(format!("{prefix}embed"), w.embed.clone());
    c.insert(format!("{prefix}lm_head"), w.lm_head.clone());
    c.insert(format!("{prefix}final_norm"), Tensor::vector(w.final_norm.clone()));
    for (i, l) in w.layers.iter().enumerate() {
        for p in Proj::ALL {
            c.insert(format!("{prefix}{}", layer_key(i, p.name())), l.proj(p).clone());
        }
        c.insert(
            format!("{prefix}{}", layer_key(i, "attn_norm")),
            Tensor::vector(l.attn_norm.clone()),
        );
        c.insert(
            format!("{prefix}{}", layer_key(i, "ffn_norm")),
            Tensor::vector(l.ffn_norm.clone()),
        );
    }
}

pub fn base_to_container(w: &BaseWeights<f32>, header_model: Option<&ModelConfig>) -> Container {
    let mut c = Container::default();
    put_base(&mut c, w, "");
    c.meta.insert("kind".into(), "base".into());
    match header_model {
        Some(m) if m != &w.config => {
            c.meta
                .insert("model".into(), serde_json::to_value(m).expect("serializable"));
            c.meta.insert(
                "payload_model".into(),
                serde_json::to_value(&w.config).expect("serializable"),
            );
        }
        _ => {
            c.meta
                .insert("model".into(), serde_json::to_value(&w.config).expect("serializable"));
        }
    }
    c
}

pub fn base_from_container(c: &Container) -> Result<BaseWeights<f32>> {
    let cfg = c.payload_model()?;
    cfg.validate()?;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut l = LayerWeights::zeros(&cfg);
        for p in Proj::ALL {
            let (o, n) = cfg.proj_dims(p);
            *l.proj_mut(p) = take(c, &layer_key(i, p.name()), &[o, n])?;
        }
        l.attn_norm = take_vec(c, &layer_key(i, "attn_norm"), d)?;
        l.ffn_norm = take_vec(c, &layer_key(i, "ffn_norm"), d)?;
        layers.push(l);
    }
    Ok(BaseWeights {
        embed: take(c, "embed", &[v, d])?,
        lm_head: take(c, "lm_head", &[v, d])?,
        final_norm: take_vec(c, "final_norm", d)?,
        layers,
        config: cfg,
    })
}

pub fn put_adapters(c: &mut Container, w: &AdapterWeights<f32>, prefix: &str) {
    for (i, l) in w.layers.iter().enumerate() {
        for p in Proj::ALL {
            let pa = &l.proj[p.index()];
            if let Some(a) = &pa.a {
                c.insert(format!("{prefix}{}.a", layer_key(i, p.name())), a.clone());
            }
            if let Some(b) = &pa.b {
                c.insert(format!("{prefix}{}.b", layer_key(i, p.name())), b.clone());
            }
        }
        if !l.attn_norm_ext.is_empty() {
            c.insert(
                format!("{prefix}{}", layer_key(i, "attn_norm_ext")),
                Tensor::vector(l.attn_norm_ext.clone()),
            );
            c.insert(
                format!("{prefix}{}", layer_key(i, "ffn_norm_ext")),
                Tensor::vector(l.ffn_norm_ext.clone()),
            );
        }
    }
}

pub fn adapters_from_container(
    c: &Container,
    model: &ModelConfig,
    cfg: &AdapterConfig,
    prefix: &str,
) -> Result<AdapterWeights<f32>> {
    let mut w = AdapterWeights::<f32>::zeros(model, cfg);
    let ext = cfg.stream_ext();
    for (i, l) in w.layers.iter_mut().enumerate() {
        for p in Proj::ALL {
            let pa = &mut l.proj[p.index()];
            if let Some(a) = &mut pa.a {
                *a = take(c, &format!("{prefix}{}.a", layer_key(i, p.name())), a.shape())?;
            }
            if let Some(b) = &mut pa.b {
                *b = take(c, &format!("{prefix}{}.b", layer_key(i, p.name())), b.shape())?;
            }
        }
        if ext > 0 {
            l.attn_norm_ext = take_vec(c, &format!("{prefix}{}", layer_key(i, "attn_norm_ext")), ext)?;
            l.ffn_norm_ext = take_vec(c, &format!("{prefix}{}", layer_key(i, "ffn_norm_ext")), ext)?;
        }
    }
    Ok(w)
}

pub fn put_fused(c: &mut Container, m: &FusedModel<f32>) {
    c.insert("embed", m.embed.clone());
    c.insert("lm_head", m.lm_head.clone());
    c.insert("final_norm", Tensor::vector(m.final_norm.clone()));
    for (i, l) in m.layers.iter().enumerate() {
        for fp in &l.projs {
            let key = layer_key(i, fp.proj.name());
            if let Some(a) = &fp.lora_a {
                c.insert(format!("{key}.lora_a"), a.clone());
            }
            if let Some(b) = &fp.lora_b {
                c.insert(format!("{key}.lora_b"), b.clone());
            }
            c.insert(key, fp.weight.clone());
        }
        c.insert(layer_key(i, "attn_norm"), Tensor::vector(l.attn_norm.clone()));
        c.insert(layer_key(i, "ffn_norm"), Tensor::vector(l.ffn_norm.clone()));
    }
}

/// Rebuild a fused model from stored fused tensors (no re-fusion).
pub fn fused_from_container(c: &Container, model: &ModelConfig, cfg: &AdapterConfig) -> Result<FusedModel<f32>> {
    cfg.validate(model)?;
    let (d, v) = (model.d_model, model.vocab_size);
    let width = d + cfg.stream_ext();
    let mut layers = Vec::with_capacity(model.n_layers);
    for i in 0..model.n_layers {
        let mut projs = Vec::with_capacity(Proj::ALL.len());
        for p in Proj::ALL {
            let at = attach_for(model, cfg, i, p);
            let (d_out, d_in) = model.proj_dims(p);
            let shape = match at.role {
                Role::Plain => [d_out, d_in],
                Role::ForwardFused => [d_out + at.forward_rows, d_in],
                Role::BackwardFused => [d_out, d_in + at.backward_cols],
                Role::ForwardBackwardFused => [d_out + at.forward_rows, d_in + at.backward_cols],
            };
            let key = layer_key(i, p.name());
            let lora_a = if at.role == Role::Plain && at.paired {
                Some(take(c, &format!("{key}.lora_a"), &[at.forward_rows, d_in])?)
            } else {
                None
            };
            let lora_b = if at.paired {
                Some(take(c, &format!("{key}.lora_b"), &[d_out, at.backward_cols])?)
            } else {
                None
            };
            projs.push(FusedProjection {
                proj: p,
                attach: at,
                weight: take(c, &key, &shape)?,
                lora_a,
                lora_b,
                d_out,
                d_in,
            });
        }
        layers.push(FusedLayer {
            projs,
            attn_norm: take_vec(c, &layer_key(i, "attn_norm"), width)?,
            ffn_norm: take_vec(c, &layer_key(i, "ffn_norm"), width)?,
        });
    }
    Ok(FusedModel {
        model: model.clone(),
        adapter: cfg.clone(),
        embed: take(c, "embed", &[v, d])?,
        lm_head: take(c, "lm_head", &[v, d])?,
        final_norm: take_vec(c, "final_norm", d)?,
        layers,
    })
}

/// First element where two tensor sets differ, as `(name, flat index)`.
pub fn first_difference(a: &Container, b: &Container) -> Option<(String, Option<usize>)> {
    for (name, t) in &a.tensors {
        match b.tensors.get(name) {
            None => return Some((name.clone(), None)),
            Some(u) if u.shape() != t.shape() => return Some((name.clone(), None)),
            Some(u) => {
                if let Some(k) = t
                    .data()
                    .iter()
                    .zip(u.data())
                    .position(|(x, y)| x.to_bits() != y.to_bits())
                {
                    return Some((name.clone(), Some(k)));
                }
            }
        }
    }
    b.tensors
        .keys()
        .find(|k| !a.tensors.contains_key(*k))
        .map(|k| (k.clone(), None))
}
