use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{attach_for, AdapterConfig, InitScheme, Variant};
use crate::error::{dim_err, Result};
use crate::model::{ModelConfig, Proj, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjAdapter<T> {
    /// Forward adapter, `forward_rows × d_in`.
    pub a: Option<Tensor<T>>,
    /// Backward adapter, `d_out × backward_cols`.
    pub b: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters<T> {
    pub proj: Vec<ProjAdapter<T>>,
    /// RMSNorm scales on the extension dims (empty unless zFLoRA).
    pub attn_norm_ext: Vec<T>,
    pub ffn_norm_ext: Vec<T>,
}

/// All trainable adapter parameters of a model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T> {
    pub model: ModelConfig,
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapters<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    A(Proj),
    B(Proj),
    AttnNormExt,
    FfnNormExt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ParamKind::A(p) => write!(f, "layers.{}.{}.a", self.layer, p.name()),
            ParamKind::B(p) => write!(f, "layers.{}.{}.b", self.layer, p.name()),
            ParamKind::AttnNormExt => write!(f, "layers.{}.attn_norm_ext", self.layer),
            ParamKind::FfnNormExt => write!(f, "layers.{}.ffn_norm_ext", self.layer),
        }
    }
}

impl<T: Scalar> AdapterWeights<T> {
    /// Zero-valued weights with the shapes implied by the config.
    pub fn zeros(model: &ModelConfig, config: &AdapterConfig) -> Self {
        let ext = config.stream_ext();
        let layers = (0..model.n_layers)
            .map(|l| LayerAdapters {
                proj: Proj::ALL
                    .iter()
                    .map(|&p| {
                        let at = attach_for(model, config, l, p);
                        let (d_o, d_i) = model.proj_dims(p);
                        ProjAdapter {
                            a: at.has_forward().then(|| Tensor::zeros(&[at.forward_rows, d_i])),
                            b: at.has_backward().then(|| Tensor::zeros(&[d_o, at.backward_cols])),
                        }
                    })
                    .collect(),
                attn_norm_ext: vec![T::zero(); ext],
                ffn_norm_ext: vec![T::zero(); ext],
            })
            .collect();
        Self {
            model: model.clone(),
            config: config.clone(),
            layers,
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdapterWeights<U> {
        AdapterWeights {
            model: self.model.clone(),
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    proj: l
                        .proj
                        .iter()
                        .map(|p| ProjAdapter {
                            a: p.a.as_ref().map(Tensor::cast),
                            b: p.b.as_ref().map(Tensor::cast),
                        })
                        .collect(),
                    attn_norm_ext: l.attn_norm_ext.iter().map(|&v| crate::scalar::convert(v)).collect(),
                    ffn_norm_ext: l.ffn_norm_ext.iter().map(|&v| crate::scalar::convert(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn proj(&self, layer: usize, p: Proj) -> &ProjAdapter<T> {
        &self.layers[layer].proj[p.index()]
    }

    pub fn proj_mut(&mut self, layer: usize, p: Proj) -> &mut ProjAdapter<T> {
        &mut self.layers[layer].proj[p.index()]
    }

    /// Visit every trainable tensor in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(ParamId, &[T])) {
        for (layer, l) in self.layers.iter().enumerate() {
            for p in Proj::ALL {
                let pa = &l.proj[p.index()];
                if let Some(a) = &pa.a {
                    f(
                        ParamId {
                            layer,
                            kind: ParamKind::A(p),
                        },
                        a.data(),
                    );
                }
                if let Some(b) = &pa.b {
                    f(
                        ParamId {
                            layer,
                            kind: ParamKind::B(p),
                        },
                        b.data(),
                    );
                }
            }
            if !l.attn_norm_ext.is_empty() {
                f(
                    ParamId {
                        layer,
                        kind: ParamKind::AttnNormExt,
                    },
                    &l.attn_norm_ext,
                );
                f(
                    ParamId {
                        layer,
                        kind: ParamKind::FfnNormExt,
                    },
                    &l.ffn_norm_ext,
                );
            }
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(ParamId, &mut [T])) {
        for (layer, l) in self.layers.iter_mut().enumerate() {
            for p in Proj::ALL {
                let pa = &mut l.proj[p.index()];
                if let Some(a) = &mut pa.a {
                    f(
                        ParamId {
                            layer,
                            kind: ParamKind::A(p),
                        },
                        a.data_mut(),
                    );
                }
                if let Some(b) = &mut pa.b {
                    f(
                        ParamId {
                            layer,
                            kind: ParamKind::B(p),
                        },
                        b.data_mut(),
                    );
                }
            }
            if !l.attn_norm_ext.is_empty() {
                f(
                    ParamId {
                        layer,
                        kind: ParamKind::AttnNormExt,
                    },
                    &mut l.attn_norm_ext,
                );
                f(
                    ParamId {
                        layer,
                        kind: ParamKind::FfnNormExt,
                    },
                    &mut l.ffn_norm_ext,
                );
            }
        }
    }

    /// Mutable access to one tensor by id.
    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        let l = self.layers.get_mut(id.layer)?;
        match id.kind {
            ParamKind::A(p) => l.proj[p.index()].a.as_mut().map(|t| t.data_mut()),
            ParamKind::B(p) => l.proj[p.index()].b.as_mut().map(|t| t.data_mut()),
            ParamKind::AttnNormExt => Some(&mut l.attn_norm_ext[..]).filter(|s| !s.is_empty()),
            ParamKind::FfnNormExt => Some(&mut l.ffn_norm_ext[..]).filter(|s| !s.is_empty()),
        }
    }

    /// `A` and `B` entries only; extension norm scales are counted apart.
    pub fn adapter_param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(|id, s| {
            if matches!(id.kind, ParamKind::A(_) | ParamKind::B(_)) {
                n += s.len() as u64;
            }
        });
        n
    }

    pub fn trainable_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(|_, s| n += s.len() as u64);
        n
    }

    /// Flatten all trainable entries in visit order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(|_, s| out.extend_from_slice(s));
        out
    }

    pub fn check(&self) -> Result<()> {
        let reference = Self::zeros(&self.model, &self.config);
        if reference.layers.len() != self.layers.len() {
            return dim_err("adapter layer count does not match the model");
        }
        for (l, (a, b)) in self.layers.iter().zip(&reference.layers).enumerate() {
            for p in Proj::ALL {
                let (x, y) = (&a.proj[p.index()], &b.proj[p.index()]);
                let shape = |t: &Option<Tensor<T>>| t.as_ref().map(|t| t.shape().to_vec());
                if shape(&x.a) != shape(&y.a) || shape(&x.b) != shape(&y.b) {
                    return dim_err(format!(
                        "layer {l} {}: adapter shapes do not match the config",
                        p.name()
                    ));
                }
            }
            if a.attn_norm_ext.len() != b.attn_norm_ext.len() || a.ffn_norm_ext.len() != b.ffn_norm_ext.len() {
                return dim_err(format!("layer {l}: extension norm length mismatch"));
            }
        }
        Ok(())
    }
}

/// Seeded adapter initialisation.
///
/// Forward adapters draw from `N(0, 1/r)`; backward adapters start at zero
/// unless `init = both_random`, where they draw from `N(0, INIT_STD²)`.
/// Under the default scheme a forward adapter whose output would otherwise
/// reach the residual stream or the attention scores unguarded (FFA, and
/// the uniform key extension) starts at zero so the adapted model equals
/// the base model at step 0. Extension norm scales start at one.
pub fn init_adapters(model: &ModelConfig, config: &AdapterConfig) -> Result<AdapterWeights<f32>> {
    config.validate(model)?;
    let mut w = AdapterWeights::<f32>::zeros(model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = config.rank.max(1) as f64;
    let fwd = Normal::new(0.0, (1.0 / r).sqrt()).expect("valid std");
    let bwd = Normal::new(0.0, INIT_STD).expect("valid std");
    let random_b = config.init == InitScheme::BothRandom;
    for layer in w.layers.iter_mut() {
        for p in Proj::ALL {
            let pa = &mut layer.proj[p.index()];
            let guard_a = !random_b
                && match config.variant {
                    Variant::Ffa => true,
                    Variant::ZfloraUniform => p == Proj::K,
                    _ => false,
                };
            if let Some(a) = &mut pa.a {
                if !guard_a {
                    a.data_mut().iter_mut().for_each(|v| *v = fwd.sample(&mut rng) as f32);
                }
            }
            if let Some(b) = &mut pa.b {
                if random_b {
                    b.data_mut().iter_mut().for_each(|v| *v = bwd.sample(&mut rng) as f32);
                }
            }
        }
        layer.attn_norm_ext.iter_mut().for_each(|v| *v = 1.0);
        layer.ffn_norm_ext.iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(w)
}
