//! Adapter variants and their attachment maps.
//!
//! Every variant is described per projection by an [`Attach`]: how many
//! forward-adapter rows (`A`, reading the projection input) and
//! backward-adapter columns (`B`, writing the projection output) it carries,
//! and how the fused weight matrix is laid out. Whether `B` consumes `A`'s
//! output inside the same projection (LoRA style) or the two are connected
//! through the layer graph (fused variants) is recorded in `paired`.

mod fused;
mod init;
pub mod ops;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{ModelConfig, Proj};

pub use fused::{build_fused_model, FusedLayer, FusedModel, FusedProjection, LayerRecord, ModelRecord, ProjRecord};
pub use init::{init_adapters, AdapterWeights, LayerAdapters, ParamId, ParamKind, ProjAdapter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    Lora,
    PfLora,
    Ffa,
    Fba,
    FfbaQgAdd,
    ZfloraMinimal,
    ZfloraUniform,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::None,
        Variant::Lora,
        Variant::PfLora,
        Variant::Ffa,
        Variant::Fba,
        Variant::FfbaQgAdd,
        Variant::ZfloraMinimal,
        Variant::ZfloraUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Lora => "lora",
            Variant::PfLora => "pf_lora",
            Variant::Ffa => "ffa",
            Variant::Fba => "fba",
            Variant::FfbaQgAdd => "ffba_qg_add",
            Variant::ZfloraMinimal => "zflora_minimal",
            Variant::ZfloraUniform => "zflora_uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .map_or_else(|| config_err(format!("unknown variant {s:?}")), Ok)
    }

    /// Variants that carry a `d + r` residual stream between an expand
    /// before the first block and a merge before the LM head.
    pub fn is_zflora(self) -> bool {
        matches!(self, Variant::ZfloraMinimal | Variant::ZfloraUniform)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    All,
    MhaOnly,
    FfnOnly,
}

impl Placement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Placement::All),
            "mha_only" => Ok(Placement::MhaOnly),
            "ffn_only" => Ok(Placement::FfnOnly),
            _ => config_err(format!("unknown placement {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    ForwardRandomBackwardZero,
    BothRandom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    #[default]
    Truncate,
    RepeatAdd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandPolicy {
    #[default]
    ZeroPad,
    SplitAverage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub variant: Variant,
    pub rank: usize,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub zflora_merge: MergePolicy,
    #[serde(default)]
    pub zflora_expand: ExpandPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Under truncate merge, leave the final block's down-projection
    /// forward adapter out (its output never reaches the LM head).
    #[serde(default)]
    pub drop_dead_adapter: bool,
}

impl AdapterConfig {
    pub fn new(variant: Variant, rank: usize) -> Self {
        Self {
            variant,
            rank,
            placement: Placement::All,
            init: InitScheme::default(),
            zflora_merge: MergePolicy::default(),
            zflora_expand: ExpandPolicy::default(),
            seed: 0,
            drop_dead_adapter: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    /// Width of the residual-stream extension (`r` for zFLoRA, else 0).
    pub fn stream_ext(&self) -> usize {
        if self.variant.is_zflora() {
            self.rank
        } else {
            0
        }
    }

    /// Extra entries per attention head under the uniform construction.
    pub fn head_ext(&self, model: &ModelConfig) -> usize {
        if self.variant == Variant::ZfloraUniform && self.placement != Placement::FfnOnly {
            self.rank / model.n_heads
        } else {
            0
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        let v = self.variant;
        if v == Variant::None {
            return Ok(());
        }
        let r = self.rank;
        if r == 0 {
            return config_err(format!("{v}: rank must be at least 1"));
        }
        for layer in 0..model.n_layers {
            for p in Proj::ALL {
                let a = attach_for(model, self, layer, p);
                let (d_o, d_i) = model.proj_dims(p);
                if v == Variant::Ffa && a.forward_rows > 0 && d_o % (2 * r) != 0 {
                    return config_err(format!(
                        "ffa: {} output width {d_o} is not a multiple of 2r = {}",
                        p.name(),
                        2 * r
                    ));
                }
                if v == Variant::Fba && a.backward_cols > 0 && d_i % r != 0 {
                    return config_err(format!(
                        "fba: {} input width {d_i} is not a multiple of r = {r}",
                        p.name()
                    ));
                }
            }
        }
        if v.is_zflora() {
            let d = model.d_model;
            if self.zflora_expand == ExpandPolicy::SplitAverage && !d.is_multiple_of(r) {
                return config_err(format!("{v}: split_average expand needs d = {d} divisible by r = {r}"));
            }
            if self.zflora_merge == MergePolicy::RepeatAdd && !d.is_multiple_of(r) {
                return config_err(format!("{v}: repeat_add merge needs d = {d} divisible by r = {r}"));
            }
        }
        if v == Variant::ZfloraUniform && self.placement != Placement::FfnOnly {
            let h = model.n_heads;
            if !r.is_multiple_of(h) || !(r / h).is_multiple_of(2) {
                return config_err(format!(
                    "zflora_uniform: r = {r} must split into an even number of extra dims per head ({h} heads)"
                ));
            }
        }
        Ok(())
    }
}

/// Layout of a projection's fused weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// `W` alone.
    Plain,
    /// `[W; A]`, shape `(d_o + r) × d_i`.
    ForwardFused,
    /// `[W B]`, shape `d_o × (d_i + r)`.
    BackwardFused,
    /// `[[W B]; [A 0]]`, shape `(d_o + r_o) × (d_i + r)`.
    ForwardBackwardFused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attach {
    pub role: Role,
    /// Rows of the forward adapter `A` (0 when absent).
    pub forward_rows: usize,
    /// Columns of the backward adapter `B` (0 when absent).
    pub backward_cols: usize,
    /// `B` consumes `A`'s output within the projection.
    pub paired: bool,
}

impl Attach {
    pub const PLAIN: Attach = Attach {
        role: Role::Plain,
        forward_rows: 0,
        backward_cols: 0,
        paired: false,
    };

    fn forward(rows: usize) -> Self {
        Attach {
            role: Role::ForwardFused,
            forward_rows: rows,
            backward_cols: 0,
            paired: false,
        }
    }

    fn backward(cols: usize) -> Self {
        Attach {
            role: Role::BackwardFused,
            forward_rows: 0,
            backward_cols: cols,
            paired: false,
        }
    }

    pub fn has_forward(&self) -> bool {
        self.forward_rows > 0
    }

    pub fn has_backward(&self) -> bool {
        self.backward_cols > 0
    }

    pub fn param_count(&self, d_out: usize, d_in: usize) -> u64 {
        (self.forward_rows * d_in + d_out * self.backward_cols) as u64
    }
}

fn placement_covers(cfg: &AdapterConfig, p: Proj) -> bool {
    match (cfg.placement, cfg.variant) {
        (Placement::All, _) => true,
        // The zFLoRA MHA-only ablation keeps the QKV backward adapters and
        // the down-projection forward adapter that feeds them.
        (Placement::MhaOnly, Variant::ZfloraMinimal) => matches!(p, Proj::Q | Proj::K | Proj::V | Proj::Down),
        (Placement::FfnOnly, Variant::ZfloraMinimal) => matches!(p, Proj::O | Proj::Gate | Proj::Up),
        (Placement::MhaOnly, _) => p.in_attention(),
        (Placement::FfnOnly, _) => !p.in_attention(),
    }
}

/// Attachment of projection `p` in block `layer`.
pub fn attach_for(model: &ModelConfig, cfg: &AdapterConfig, layer: usize, p: Proj) -> Attach {
    let r = cfg.rank;
    if cfg.variant == Variant::None || r == 0 || !placement_covers(cfg, p) {
        return Attach::PLAIN;
    }
    let dead_down = cfg.drop_dead_adapter
        && cfg.zflora_merge == MergePolicy::Truncate
        && layer + 1 == model.n_layers
        && p == Proj::Down;
    match cfg.variant {
        Variant::None => Attach::PLAIN,
        Variant::Lora => Attach {
            role: Role::Plain,
            forward_rows: r,
            backward_cols: r,
            paired: true,
        },
        Variant::PfLora => Attach {
            role: Role::ForwardFused,
            forward_rows: r,
            backward_cols: r,
            paired: true,
        },
        Variant::Ffa => Attach::forward(2 * r),
        Variant::Fba => Attach::backward(r),
        Variant::FfbaQgAdd => match p {
            Proj::Q | Proj::Gate => Attach::forward(r),
            Proj::O | Proj::Down => Attach::backward(r),
            _ => Attach::PLAIN,
        },
        Variant::ZfloraMinimal => match p {
            Proj::O => Attach::forward(r),
            Proj::Down if dead_down => Attach::PLAIN,
            Proj::Down => Attach::forward(r),
            _ => Attach::backward(r),
        },
        Variant::ZfloraUniform => {
            let rows = match p {
                Proj::K | Proj::V => model.n_kv_heads * r / model.n_heads,
                _ => r,
            };
            if dead_down {
                Attach::backward(r)
            } else {
                Attach {
                    role: Role::ForwardBackwardFused,
                    forward_rows: rows,
                    backward_cols: r,
                    paired: false,
                }
            }
        }
    }
}

/// Serializable per-block attachment map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentMap {
    pub variant: Variant,
    pub rank: usize,
    pub placement: Placement,
    pub layers: Vec<BTreeMap<Proj, Attach>>,
}

impl AttachmentMap {
    pub fn build(model: &ModelConfig, cfg: &AdapterConfig) -> Self {
        let layers = (0..model.n_layers)
            .map(|l| Proj::ALL.iter().map(|&p| (p, attach_for(model, cfg, l, p))).collect())
            .collect();
        Self {
            variant: cfg.variant,
            rank: cfg.rank,
            placement: cfg.placement,
            layers,
        }
    }
}

/// Exact count of adapter-only parameters (`A` and `B` entries).
pub fn count_adapter_params(model: &ModelConfig, cfg: &AdapterConfig) -> u64 {
    if cfg.rank == 0 {
        return 0;
    }
    (0..model.n_layers)
        .map(|l| {
            Proj::ALL
                .iter()
                .map(|&p| {
                    let (o, i) = model.proj_dims(p);
                    attach_for(model, cfg, l, p).param_count(o, i)
                })
                .sum::<u64>()
        })
        .sum()
}

/// Extra RMSNorm scales on the `r` extension dims (two norms per block).
pub fn count_ext_norm_params(model: &ModelConfig, cfg: &AdapterConfig) -> u64 {
    (2 * model.n_layers * cfg.stream_ext()) as u64
}

/// LoRA rank whose parameter count is closest to `target` (ties to the
/// smaller rank).
pub fn matched_lora_rank(model: &ModelConfig, target: u64, placement: Placement) -> usize {
    let count = |r| count_adapter_params(model, &AdapterConfig::new(Variant::Lora, r).with_placement(placement));
    let mut best = 1;
    for r in 1..=model.d_model {
        if count(r).abs_diff(target) < count(best).abs_diff(target) {
            best = r;
        }
        if count(r) > target {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(n: &str) -> ModelConfig {
        ModelConfig::preset(n).unwrap()
    }

    #[test]
    fn lora_preset_counts() {
        let c = AdapterConfig::new(Variant::Lora, 32);
        assert_eq!(count_adapter_params(&preset("1B"), &c), 22_544_384);
        assert_eq!(count_adapter_params(&preset("3B"), &c), 48_627_712);
        assert_eq!(count_adapter_params(&preset("8B"), &c), 83_886_080);
    }

    #[test]
    fn zflora_preset_counts() {
        let c = AdapterConfig::new(Variant::ZfloraMinimal, 32);
        assert_eq!(count_adapter_params(&preset("1B"), &c), 15_204_352);
        assert_eq!(count_adapter_params(&preset("3B"), &c), 29_360_128);
        assert_eq!(count_adapter_params(&preset("8B"), &c), 54_525_952);
    }

    #[test]
    fn zflora_count_matches_closed_form() {
        for name in ["tiny", "1B", "3B", "8B"] {
            let m = preset(name);
            let r = 32u64;
            let (d, f, kv) = (m.d_model as u64, m.d_ffn as u64, m.kv_dim() as u64);
            let per_layer = r * (d + 2 * kv) + r * d + 2 * r * f + r * f;
            let c = AdapterConfig::new(Variant::ZfloraMinimal, 32);
            assert_eq!(count_adapter_params(&m, &c), per_layer * m.n_layers as u64, "{name}");
        }
    }

    #[test]
    fn lora_tiny_forward_count() {
        let m = preset("tiny");
        let r = 4;
        let sum_in: usize = Proj::ALL.iter().map(|&p| m.proj_dims(p).1).sum();
        let a_rows: usize = Proj::ALL
            .iter()
            .map(|&p| {
                let a = attach_for(&m, &AdapterConfig::new(Variant::Lora, r), 0, p);
                a.forward_rows * m.proj_dims(p).1
            })
            .sum();
        assert_eq!(a_rows, r * sum_in);
    }

    #[test]
    fn rank_zero_counts_nothing() {
        for v in Variant::ALL {
            assert_eq!(count_adapter_params(&preset("1B"), &AdapterConfig::new(v, 0)), 0);
        }
    }

    #[test]
    fn placements_partition_the_all_count() {
        let m = preset("1B");
        for v in Variant::ALL {
            let all = count_adapter_params(&m, &AdapterConfig::new(v, 32));
            let mha = count_adapter_params(&m, &AdapterConfig::new(v, 32).with_placement(Placement::MhaOnly));
            let ffn = count_adapter_params(&m, &AdapterConfig::new(v, 32).with_placement(Placement::FfnOnly));
            assert_eq!(mha + ffn, all, "{v}");
        }
    }

    #[test]
    fn counts_strictly_increase_with_rank() {
        let m = preset("tiny");
        for v in Variant::ALL.into_iter().skip(1) {
            for pl in [Placement::All, Placement::MhaOnly, Placement::FfnOnly] {
                let mut prev = 0;
                for r in 1..=16 {
                    let c = count_adapter_params(&m, &AdapterConfig::new(v, r).with_placement(pl));
                    assert!(c > prev, "{v} {pl:?} r={r}");
                    prev = c;
                }
            }
        }
    }

    #[test]
    fn zflora_minimal_attachment_map() {
        let m = preset("tiny");
        let c = AdapterConfig::new(Variant::ZfloraMinimal, 8);
        let map = AttachmentMap::build(&m, &c);
        let l0 = &map.layers[0];
        for p in [Proj::Q, Proj::K, Proj::V, Proj::Gate, Proj::Up] {
            assert_eq!(l0[&p].role, Role::BackwardFused);
        }
        assert_eq!(l0[&Proj::O].role, Role::ForwardFused);
        assert_eq!(l0[&Proj::Down].role, Role::ForwardFused);
        let json = serde_json::to_string(&map).unwrap();
        assert!(json.contains("\"wq\":{\"role\":\"backward_fused\""));
        let back: AttachmentMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn dead_adapter_option_drops_last_down() {
        let m = preset("tiny");
        let mut c = AdapterConfig::new(Variant::ZfloraMinimal, 8);
        let full = count_adapter_params(&m, &c);
        c.drop_dead_adapter = true;
        assert_eq!(attach_for(&m, &c, 1, Proj::Down), Attach::PLAIN);
        assert_eq!(attach_for(&m, &c, 0, Proj::Down).role, Role::ForwardFused);
        assert_eq!(count_adapter_params(&m, &c), full - 8 * 256);
    }

    #[test]
    fn divisibility_rules() {
        let m = preset("tiny");
        assert!(AdapterConfig::new(Variant::Ffa, 8).validate(&m).is_ok());
        // kv width 32 is not a multiple of 2·12
        assert!(AdapterConfig::new(Variant::Ffa, 12).validate(&m).is_err());
        assert!(AdapterConfig::new(Variant::Fba, 8).validate(&m).is_ok());
        assert!(AdapterConfig::new(Variant::Fba, 7).validate(&m).is_err());
        assert!(AdapterConfig::new(Variant::Lora, 100).validate(&m).is_ok());
        assert!(AdapterConfig::new(Variant::Lora, 0).validate(&m).is_err());
        assert!(AdapterConfig::new(Variant::ZfloraUniform, 8).validate(&m).is_ok());
        assert!(AdapterConfig::new(Variant::ZfloraUniform, 4).validate(&m).is_err());
        let mut c = AdapterConfig::new(Variant::ZfloraMinimal, 6);
        assert!(c.validate(&m).is_ok());
        c.zflora_merge = MergePolicy::RepeatAdd;
        assert!(c.validate(&m).is_err());
    }

    #[test]
    fn matched_rank_for_tiny_zflora_r8() {
        let m = preset("tiny");
        let z = count_adapter_params(&m, &AdapterConfig::new(Variant::ZfloraMinimal, 8));
        assert_eq!(z, 2 * 7680);
        assert_eq!(matched_lora_rank(&m, z, Placement::All), 5);
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: AdapterConfig = serde_json::from_str(r#"{"variant":"zflora_minimal","rank":8}"#).unwrap();
        assert_eq!(ok.zflora_merge, MergePolicy::Truncate);
        assert!(serde_json::from_str::<AdapterConfig>(r#"{"variant":"lora","rank":8,"alpha":16}"#).is_err());
    }
}
