//! Latency harnesses: single-block decode simulation and model-level
//! TTFT/TPOT, plus a closed-form multiply-add ledger.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach_for, build_fused_model, init_adapters, AdapterConfig, FusedModel, Role, Variant};
use crate::error::{config_err, Error, Result};
use crate::model::{gen_layer, BaseWeights, ModelConfig, Proj};
use crate::tensor::{MatmulPolicy, Tensor};

/// Nearest-rank percentile: the `⌈p·n/100⌉`-th smallest sample.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("percentile of an empty sample set".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return config_err(format!("percentile {p} outside (0, 100]"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(nearest_rank(&sorted, p))
}

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
    /// Mean of the samples at or below the 95th percentile.
    pub trimmed_mean: f64,
}

impl Stats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("statistics of an empty sample set".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let p95 = nearest_rank(&s, 95.0);
        let kept: Vec<f64> = s.iter().copied().filter(|&v| v <= p95).collect();
        Ok(Self {
            n: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            median: nearest_rank(&s, 50.0),
            p95,
            p99: nearest_rank(&s, 99.0),
            min: s[0],
            max: s[s.len() - 1],
            trimmed_mean: kept.iter().sum::<f64>() / kept.len() as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: Variant,
    pub d: usize,
    pub d_ffn: usize,
    pub r: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub phase: Phase,
    pub warmup: usize,
    /// Per-request wall time in microseconds, warmup excluded.
    pub samples_us: Vec<f64>,
    /// `None` when no samples exist (single-token generation has no TPOT).
    pub stats: Option<Stats>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "variant,d,r,prompt_len,phase,sample_us";

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for v in &self.samples_us {
            s.push_str(&format!(
                "{},{},{},{},{},{v:.3}\n",
                self.variant,
                self.d,
                self.r,
                self.prompt_len,
                self.phase.name()
            ));
        }
        s
    }

    pub fn trimmed_mean(&self) -> f64 {
        self.stats.as_ref().map_or(f64::NAN, |s| s.trimmed_mean)
    }
}

pub fn reports_csv(reports: &[BenchReport]) -> String {
    let mut s = format!("{}\n", BenchReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    s
}

/// Error unless the monotonic clock resolves at least one microsecond.
pub fn check_timer_resolution() -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    if best > Duration::from_micros(1) {
        return Err(Error::Environment(format!(
            "timer resolution {best:?} is coarser than 1µs"
        )));
    }
    Ok(best)
}

/// One linear-kernel invocation in the ledger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpEntry {
    pub name: String,
    pub macs: u64,
    /// MACs the base model spends in this op (0 for adapter-only kernels).
    pub base_macs: u64,
}

/// Per-token linear-kernel ledger of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub ops: Vec<OpEntry>,
    /// Non-matmul adapter operations (adds, merges, expands, concats).
    pub aux_calls: u64,
}

impl LayerFlops {
    pub fn macs(&self) -> u64 {
        self.ops.iter().map(|o| o.macs).sum()
    }

    pub fn base_macs(&self) -> u64 {
        self.ops.iter().map(|o| o.base_macs).sum()
    }

    pub fn adapter_macs(&self) -> u64 {
        self.macs() - self.base_macs()
    }

    pub fn linear_calls(&self) -> u64 {
        self.ops.len() as u64
    }

    /// Total over base MACs.
    pub fn ratio(&self) -> f64 {
        self.macs() as f64 / self.base_macs() as f64
    }
}

/// Exact multiply-add count per token of block `layer`, itemised by kernel.
pub fn flop_count(model: &ModelConfig, adapter: &AdapterConfig, layer: usize) -> LayerFlops {
    let mut ops = Vec::new();
    let mut aux = 0;
    let v = adapter.variant;
    for p in Proj::ALL {
        let at = attach_for(model, adapter, layer, p);
        let (o, i) = model.proj_dims(p);
        let (rf, rb) = (at.forward_rows as u64, at.backward_cols as u64);
        let (o, i) = (o as u64, i as u64);
        let base = o * i;
        let name = p.name();
        let mut push = |suffix: &str, macs: u64, base_macs: u64| {
            ops.push(OpEntry {
                name: format!("{name}{suffix}"),
                macs,
                base_macs,
            })
        };
        match at.role {
            Role::Plain if at.paired => {
                push("", base, base);
                push(".a", rf * i, 0);
                push(".b", o * rb, 0);
                aux += 1;
            }
            Role::Plain => push("", base, base),
            Role::ForwardFused => {
                push("", (o + rf) * i, base);
                if at.paired {
                    push(".b", o * rb, 0);
                    aux += 1;
                } else if v == Variant::Ffa {
                    aux += 1;
                }
            }
            Role::BackwardFused => {
                push("", o * (i + rb), base);
                if v == Variant::Fba {
                    aux += 1;
                }
            }
            Role::ForwardBackwardFused => push("", (o + rf) * (i + rb), base),
        }
    }
    if v == Variant::FfbaQgAdd {
        aux += attach_for(model, adapter, layer, Proj::O).has_backward() as u64;
        aux += attach_for(model, adapter, layer, Proj::Down).has_backward() as u64;
    }
    LayerFlops { ops, aux_calls: aux }
}

/// Shape of the simulated block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub d: usize,
    pub d_ffn: usize,
    pub r: usize,
}

impl LayerShape {
    /// One-block model with 64-wide heads and four query heads per KV head.
    pub fn model_config(&self) -> Result<ModelConfig> {
        if !self.d.is_multiple_of(64) {
            return config_err(format!("bench shape: d = {} must be a multiple of 64", self.d));
        }
        let n_heads = self.d / 64;
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: self.d,
            n_heads,
            n_kv_heads: if n_heads.is_multiple_of(4) {
                n_heads / 4
            } else {
                n_heads
            },
            head_dim: 64,
            d_ffn: self.d_ffn,
            vocab_size: 8,
            rope_theta: 5e5,
            rms_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBenchConfig {
    pub tokens_per_request: usize,
    pub requests: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for LayerBenchConfig {
    fn default() -> Self {
        Self {
            tokens_per_request: 100,
            requests: 100,
            warmup: 5,
            seed: 0,
        }
    }
}

impl LayerBenchConfig {
    fn validate(&self) -> Result<()> {
        if self.warmup < 5 {
            return config_err("at least 5 warmup requests are required");
        }
        if self.tokens_per_request == 0 || self.requests == 0 {
            return config_err("tokens per request and requests must be positive");
        }
        Ok(())
    }
}

/// A one-block model fused for each benchmarked variant, sharing one base.
pub struct LayerBench {
    pub shape: LayerShape,
    pub models: Vec<FusedModel<f32>>,
    input: Tensor<f32>,
}

impl LayerBench {
    pub fn new(shape: LayerShape, variants: &[Variant], seed: u64) -> Result<Self> {
        let cfg = shape.model_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = gen_layer(&cfg, &mut rng);
        let base = BaseWeights {
            embed: Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
            lm_head: Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
            final_norm: vec![1.0; cfg.d_model],
            layers: vec![layer],
            config: cfg.clone(),
        };
        let mut models = Vec::with_capacity(variants.len());
        for &v in variants {
            let ac = AdapterConfig::new(v, if v == Variant::None { 0 } else { shape.r }).with_seed(seed);
            models.push(build_fused_model(&base, &init_adapters(&cfg, &ac)?)?);
        }
        let width = cfg.d_model + shape.r;
        let input = Tensor::from_fn(1, width, |_, _| rng.random_range(-1.0..1.0));
        Ok(Self { shape, models, input })
    }

    /// One request: `tokens` single-token block forwards against a fresh cache.
    fn request(&self, idx: usize, tokens: usize, policy: MatmulPolicy) -> Result<Duration> {
        let m = &self.models[idx];
        let mut cache = m.new_cache(tokens);
        let x = self.input.cols_range(0, m.stream_width());
        let t0 = Instant::now();
        for pos in 0..tokens {
            let (out, _) = m.layer_forward(0, &x, cache.layer_mut(0), tokens, pos, policy, false)?;
            std::hint::black_box(&out);
        }
        Ok(t0.elapsed())
    }

    /// Interleaved measurement: within each request round every variant runs
    /// once, in a rotating order, so slow drifts affect all of them alike.
    pub fn run(&self, cfg: &LayerBenchConfig, policy: MatmulPolicy) -> Result<Vec<BenchReport>> {
        cfg.validate()?;
        check_timer_resolution()?;
        let n = self.models.len();
        let mut samples = vec![Vec::with_capacity(cfg.requests); n];
        for round in 0..cfg.warmup + cfg.requests {
            for k in 0..n {
                let idx = (round + k) % n;
                let t = self.request(idx, cfg.tokens_per_request, policy)?;
                if round >= cfg.warmup {
                    samples[idx].push(t.as_secs_f64() * 1e6);
                }
            }
        }
        self.models
            .iter()
            .zip(samples)
            .map(|(m, s)| {
                Ok(BenchReport {
                    variant: m.variant(),
                    d: self.shape.d,
                    d_ffn: self.shape.d_ffn,
                    r: m.adapter.rank,
                    prompt_len: 0,
                    gen_len: cfg.tokens_per_request,
                    phase: Phase::Decode,
                    warmup: cfg.warmup,
                    stats: Some(Stats::from_samples(&s)?),
                    samples_us: s,
                })
            })
            .collect()
    }
}

/// Time one block's single-token decode for `variant`.
pub fn bench_single_layer(
    variant: Variant,
    shape: LayerShape,
    cfg: &LayerBenchConfig,
    policy: MatmulPolicy,
) -> Result<BenchReport> {
    Ok(LayerBench::new(shape, &[variant], cfg.seed)?
        .run(cfg, policy)?
        .remove(0))
}

/// Relative trimmed-mean overhead of `report` over `base`.
pub fn overhead(report: &BenchReport, base: &BenchReport) -> f64 {
    report.trimmed_mean() / base.trimmed_mean() - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPair {
    /// Prompt prefill through the first generated token, µs.
    pub ttft_us: f64,
    /// Mean per subsequent token, µs; `None` for single-token generation.
    pub tpot_us: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBenchConfig {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub requests: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ModelBenchConfig {
    fn default() -> Self {
        Self {
            prompt_len: 512,
            gen_len: 128,
            requests: 100,
            warmup: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBench {
    pub pairs: Vec<LatencyPair>,
    pub ttft: BenchReport,
    pub tpot: BenchReport,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Greedy generation from random prompts, batch size 1.
pub fn bench_model(model: &FusedModel<f32>, cfg: &ModelBenchConfig, policy: MatmulPolicy) -> Result<ModelBench> {
    if cfg.prompt_len == 0 || cfg.gen_len == 0 || cfg.requests == 0 {
        return config_err("prompt length, generation length and requests must be positive");
    }
    if cfg.warmup < 5 {
        return config_err("at least 5 warmup requests are required");
    }
    check_timer_resolution()?;
    let max_len = cfg.prompt_len + cfg.gen_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.requests);
    let vocab = model.model.vocab_size;
    for i in 0..cfg.warmup + cfg.requests {
        let prompt: Vec<usize> = (0..cfg.prompt_len).map(|_| rng.random_range(0..vocab)).collect();
        // the cache holds the prompt and every generated token but the last
        let mut cache = model.new_cache(max_len - 1);
        let t0 = Instant::now();
        let logits = model.forward(&prompt, &mut cache, policy)?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        let ttft = t0.elapsed();
        let t1 = Instant::now();
        for _ in 1..cfg.gen_len {
            let l = model.forward(&[next], &mut cache, policy)?;
            next = argmax(l.row(0));
        }
        let decode = t1.elapsed();
        if i >= cfg.warmup {
            pairs.push(LatencyPair {
                ttft_us: ttft.as_secs_f64() * 1e6,
                tpot_us: (cfg.gen_len > 1).then(|| decode.as_secs_f64() * 1e6 / (cfg.gen_len - 1) as f64),
            });
        }
    }
    let report = |phase: Phase, samples: Vec<f64>| -> Result<BenchReport> {
        Ok(BenchReport {
            variant: model.variant(),
            d: model.model.d_model,
            d_ffn: model.model.d_ffn,
            r: model.adapter.rank,
            prompt_len: cfg.prompt_len,
            gen_len: cfg.gen_len,
            phase,
            warmup: cfg.warmup,
            stats: if samples.is_empty() {
                None
            } else {
                Some(Stats::from_samples(&samples)?)
            },
            samples_us: samples,
        })
    };
    Ok(ModelBench {
        ttft: report(Phase::Prefill, pairs.iter().map(|p| p.ttft_us).collect())?,
        tpot: report(Phase::Decode, pairs.iter().filter_map(|p| p.tpot_us).collect())?,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_model;
    use crate::tensor::stats;

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&[7.5], 1.0).unwrap(), 7.5);
        assert_eq!(percentile(&[7.5], 99.0).unwrap(), 7.5);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn stats_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..57).map(|_| rng.random_range(0.0..10.0f64).powi(3)).collect();
        let s = Stats::from_samples(&v).unwrap();
        assert!(s.trimmed_mean <= s.mean);
        assert!(s.min <= s.median && s.median <= s.p95 && s.p95 <= s.p99 && s.p99 <= s.max);
    }

    #[test]
    fn one_b_ledger() {
        let m = ModelConfig::preset("1B").unwrap();
        let lora = flop_count(&m, &AdapterConfig::new(Variant::Lora, 32), 0);
        assert_eq!(lora.adapter_macs(), 1_409_024);
        assert_eq!(lora.adapter_macs() * 16, 22_544_384);
        let z = flop_count(&m, &AdapterConfig::new(Variant::ZfloraMinimal, 32), 0);
        let (r, d, f, kv) = (32u64, 2048u64, 8192u64, 512u64);
        assert_eq!(z.adapter_macs(), r * (d + 2 * kv) + r * d + 2 * r * f + r * f);
        assert_eq!(z.linear_calls(), 7);
        let base = flop_count(&m, &AdapterConfig::new(Variant::None, 0), 0);
        assert_eq!(base.macs(), z.base_macs());
        assert_eq!(flop_count(&m, &AdapterConfig::new(Variant::Lora, 0), 0), base);
    }

    #[test]
    fn ledger_matches_kernel_counters() {
        let m = ModelConfig::preset("tiny").unwrap();
        let base = gen_model(&m, 0).unwrap();
        for v in Variant::ALL {
            let ac = AdapterConfig::new(v, 8);
            let fused = build_fused_model(&base, &init_adapters(&m, &ac).unwrap()).unwrap();
            let mut cache = fused.new_cache(1);
            let x = Tensor::from_fn(1, fused.stream_width(), |_, j| j as f32 * 0.01);
            stats::reset();
            fused
                .layer_forward(0, &x, cache.layer_mut(0), 1, 0, MatmulPolicy::serial(), false)
                .unwrap();
            let got = stats::snapshot();
            let want = flop_count(&m, &ac, 0);
            assert_eq!(got.linear_calls, want.linear_calls(), "{v}");
            assert_eq!(got.linear_macs, want.macs(), "{v}");
            assert_eq!(got.aux_calls, want.aux_calls, "{v}");
        }
    }

    #[test]
    fn single_layer_counts_samples_after_warmup() {
        let shape = LayerShape {
            d: 128,
            d_ffn: 256,
            r: 8,
        };
        let cfg = LayerBenchConfig {
            tokens_per_request: 3,
            requests: 7,
            warmup: 5,
            seed: 1,
        };
        let rep = bench_single_layer(Variant::ZfloraMinimal, shape.clone(), &cfg, MatmulPolicy::serial()).unwrap();
        assert_eq!(rep.samples_us.len(), 7);
        let bad = LayerBenchConfig { warmup: 4, ..cfg };
        assert!(bench_single_layer(Variant::None, shape, &bad, MatmulPolicy::serial()).is_err());
    }

    #[test]
    fn model_bench_single_token_has_no_tpot() {
        let m = ModelConfig::preset("tiny").unwrap();
        let base = gen_model(&m, 0).unwrap();
        let fused = build_fused_model(
            &base,
            &init_adapters(&m, &AdapterConfig::new(Variant::None, 0)).unwrap(),
        )
        .unwrap();
        let cfg = ModelBenchConfig {
            prompt_len: 8,
            gen_len: 1,
            requests: 3,
            warmup: 5,
            seed: 0,
        };
        let out = bench_model(&fused, &cfg, MatmulPolicy::serial()).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert!(out.tpot.samples_us.is_empty() && out.tpot.stats.is_none());
        assert!(out.pairs.iter().all(|p| p.ttft_us > 0.0));
        let csv = reports_csv(std::slice::from_ref(&out.ttft));
        assert!(csv.starts_with("variant,d,r,prompt_len,phase,sample_us\nnone,64,0,8,prefill,"));
    }
}
