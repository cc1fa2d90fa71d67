use fuselab::adapters::{build_fused_model, init_adapters, AdapterConfig, Variant};
use fuselab::bench::{
    bench_model as run_model_bench, flop_count, overhead, reports_csv, BenchReport, LayerBench, LayerShape,
};
use fuselab::config::BenchLayerSpec;
use fuselab::model::gen_model;
use serde_json::json;

use crate::common::*;
use crate::{BenchLayerArgs, BenchModelArgs};

fn parse_variants(names: &Option<Vec<String>>, fallback: Vec<Variant>) -> CliResult<Vec<Variant>> {
    let vs = match names {
        Some(ns) => ns
            .iter()
            .map(|n| Variant::parse(n.trim()))
            .collect::<fuselab::Result<Vec<_>>>()?,
        None => fallback,
    };
    if vs.is_empty() {
        return usage("--variants must name at least one variant");
    }
    Ok(vs)
}

fn stats_json(r: &BenchReport) -> serde_json::Value {
    json!({ "variant": r.variant, "phase": r.phase, "stats": r.stats })
}

pub fn bench_layer(a: BenchLayerArgs) -> CliResult<()> {
    let mut rc = load_config(a.config.as_deref())?;
    let mut spec = rc.bench_layer.clone().unwrap_or_else(|| BenchLayerSpec {
        shape: LayerShape {
            d: 2048,
            d_ffn: 8192,
            r: 32,
        },
        run: Default::default(),
        variants: vec![Variant::None, Variant::Lora, Variant::PfLora, Variant::ZfloraMinimal],
        runs: 1,
    });
    if let Some(d) = a.d {
        spec.shape.d = d;
    }
    if let Some(f) = a.d_ffn {
        spec.shape.d_ffn = f;
    }
    if let Some(r) = a.rank {
        spec.shape.r = r;
    }
    spec.variants = parse_variants(&a.variants, spec.variants)?;
    if let Some(n) = a.tokens {
        spec.run.tokens_per_request = n;
    }
    if let Some(n) = a.requests {
        spec.run.requests = n;
    }
    if let Some(n) = a.warmup {
        spec.run.warmup = n;
    }
    if let Some(n) = a.runs {
        spec.runs = n;
    }
    if let Some(s) = a.seed.or(rc.seed) {
        spec.run.seed = s;
    }
    if spec.runs == 0 {
        return usage("--runs must be at least 1");
    }
    let model = spec.shape.model_config()?;
    for &v in &spec.variants {
        AdapterConfig::new(v, spec.shape.r).validate(&model)?;
    }
    let pol = policy();
    rc.command = Some("bench-layer".into());
    rc.bench_layer = Some(spec.clone());
    rc.out = Some(a.out.display().to_string());
    ensure_dir(&a.out)?;
    record_config(&rc, &a.out.join("run_config.json"))?;

    let bench = LayerBench::new(spec.shape.clone(), &spec.variants, spec.run.seed)?;
    let mut all = Vec::new();
    let mut runs = Vec::new();
    println!("run,variant,trimmed_mean_us,median_us,p95_us,overhead_pct,flop_ratio");
    for run in 0..spec.runs {
        let reports = bench.run(&spec.run, pol)?;
        let base = reports.iter().find(|r| r.variant == Variant::None);
        let mut rows = Vec::new();
        for r in &reports {
            let ac = AdapterConfig::new(r.variant, r.r);
            let ratio = flop_count(&model, &ac, 0).ratio();
            let ovh = base.map(|b| 100.0 * overhead(r, b));
            let s = r.stats.as_ref().expect("layer bench always has samples");
            println!(
                "{run},{},{:.1},{:.1},{:.1},{},{ratio:.4}",
                r.variant,
                s.trimmed_mean,
                s.median,
                s.p95,
                ovh.map_or("".into(), |o| format!("{o:.2}"))
            );
            rows.push(json!({
                "variant": r.variant,
                "stats": s,
                "overhead_pct": ovh,
                "flop_ratio": ratio,
            }));
        }
        runs.push(rows);
        all.extend(reports);
    }
    std::fs::write(a.out.join("bench_layer.csv"), reports_csv(&all))?;
    write_json(
        &a.out.join("bench_layer.json"),
        &json!({ "shape": spec.shape, "run": spec.run, "threads": pol.max_threads, "runs": runs }),
    )?;
    Ok(())
}

pub fn bench_model(a: BenchModelArgs) -> CliResult<()> {
    let mut rc = load_config(a.model.config.as_deref())?;
    let (spec, model) = model_spec(&a.model, &rc, Some("tiny"))?;
    let variants = parse_variants(
        &a.variants,
        vec![Variant::None, Variant::Lora, Variant::PfLora, Variant::ZfloraMinimal],
    )?;
    // each variant holds its own fused copy of the weights
    ensure_fits(&model, 4 * (variants.len() as u64 + 1))?;
    let rank = a.rank.or(rc.adapter.as_ref().map(|c| c.rank)).unwrap_or(8);
    if rank == 0 {
        return usage("--rank must be at least 1");
    }
    let mut bc = rc.bench_model.clone().unwrap_or_default();
    if let Some(n) = a.prompt_len {
        bc.prompt_len = n;
    }
    if let Some(n) = a.gen_len {
        bc.gen_len = n;
    }
    if let Some(n) = a.requests {
        bc.requests = n;
    }
    if let Some(n) = a.warmup {
        bc.warmup = n;
    }
    if let Some(s) = a.seed.or(rc.seed) {
        bc.seed = s;
    }
    let configs: Vec<AdapterConfig> = variants
        .iter()
        .map(|&v| AdapterConfig::new(v, if v == Variant::None { 0 } else { rank }).with_seed(bc.seed))
        .collect();
    for c in &configs {
        c.validate(&model)?;
    }
    let pol = policy();
    rc.command = Some("bench-model".into());
    rc.model = Some(spec);
    rc.bench_model = Some(bc.clone());
    rc.out = Some(a.out.display().to_string());
    ensure_dir(&a.out)?;
    record_config(&rc, &a.out.join("run_config.json"))?;

    let base = gen_model(&model, bc.seed)?;
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    println!("variant,ttft_trimmed_mean_us,tpot_trimmed_mean_us");
    for c in &configs {
        let fused = build_fused_model(&base, &init_adapters(&model, c)?)?;
        let mb = run_model_bench(&fused, &bc, pol)?;
        println!(
            "{},{:.1},{:.1}",
            c.variant,
            mb.ttft.trimmed_mean(),
            mb.tpot.trimmed_mean()
        );
        summary.push(json!({ "ttft": stats_json(&mb.ttft), "tpot": stats_json(&mb.tpot) }));
        reports.push(mb.ttft);
        reports.push(mb.tpot);
    }
    std::fs::write(a.out.join("bench_model.csv"), reports_csv(&reports))?;
    write_json(
        &a.out.join("bench_model.json"),
        &json!({ "config": bc, "rank": rank, "threads": pol.max_threads, "variants": summary }),
    )?;
    Ok(())
}
