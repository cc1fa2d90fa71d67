use std::path::PathBuf;

use fuselab::adapters::{
    build_fused_model, count_adapter_params, count_ext_norm_params, init_adapters, matched_lora_rank, AttachmentMap,
    Variant,
};
use fuselab::config::{CheckSpec, ModelSpec, RunConfig};
use fuselab::container::{
    adapters_from_container, base_from_container, base_to_container, first_difference, fused_from_container,
    put_adapters, put_fused, Container,
};
use fuselab::model::{gen_model as gen_base, ModelConfig};
use fuselab::oracle::{compare_logits, oracle_logits, EquivReport};
use fuselab::train::ToyTask;
use serde::Serialize;
use serde_json::{json, Value};

use crate::common::*;
use crate::{CheckEquivArgs, CountParamsArgs, FuseArgs, GenModelArgs};

pub fn gen_model(a: GenModelArgs) -> CliResult<()> {
    let mut rc = load_config(a.model.config.as_deref())?;
    let (spec, header) = model_spec(&a.model, &rc, None)?;
    let seed = a.seed.or(rc.seed).unwrap_or(0);
    let payload_spec = match (&a.payload_preset, &rc.payload_model) {
        (Some(p), _) => Some(ModelSpec::preset(p)),
        (None, Some(m)) => Some(m.clone()),
        (None, None) if header.base_param_count() * 4 > MAX_PAYLOAD_BYTES => {
            eprintln!("note: header model is too large to materialise; storing tiny payload tensors");
            Some(ModelSpec::preset("tiny"))
        }
        (None, None) => None,
    };
    let payload = match &payload_spec {
        Some(s) => s.resolve()?,
        None => header.clone(),
    };
    ensure_fits(&payload, 4)?;
    let base = gen_base(&payload, seed)?;
    base_to_container(&base, Some(&header)).save(&a.out)?;

    rc.command = Some("gen-model".into());
    rc.model = Some(spec);
    rc.payload_model = payload_spec.filter(|_| payload != header);
    rc.seed = Some(seed);
    rc.out = Some(a.out.display().to_string());
    record_config(&rc, &sidecar(&a.out))?;
    println!(
        "wrote {}: {} layers, d_model {}, {} stored parameters",
        a.out.display(),
        header.n_layers,
        header.d_model,
        group_digits(base.param_count())
    );
    Ok(())
}

pub fn fuse(a: FuseArgs) -> CliResult<()> {
    let mut rc = load_config(a.config.as_deref())?;
    let cfg = adapter_config(&a.adapter, &rc, None)?;
    let bytes = std::fs::read(&a.base)?;
    let bc = Container::from_bytes(&bytes)?;
    let header: ModelConfig = bc.meta_value("model")?;
    let payload = bc.payload_model()?;
    cfg.validate(&header)?;
    cfg.validate(&payload)?;
    let base = base_from_container(&bc)?;
    let adapters = init_adapters(&payload, &cfg)?;
    let fused = build_fused_model(&base, &adapters)?;

    let mut out = Container::default();
    put_fused(&mut out, &fused);
    put_adapters(&mut out, &adapters, "adapter.");
    let base_path = std::fs::canonicalize(&a.base)?.display().to_string();
    let adapter_params = count_adapter_params(&header, &cfg);
    let ext_params = count_ext_norm_params(&header, &cfg);
    let m = &mut out.meta;
    m.insert("kind".into(), "fused".into());
    m.insert("model".into(), json!(header));
    if payload != header {
        m.insert("payload_model".into(), json!(payload));
    }
    m.insert("adapter".into(), json!(cfg));
    m.insert("attachment_map".into(), json!(AttachmentMap::build(&header, &cfg)));
    m.insert("adapter_param_count".into(), json!(adapter_params));
    m.insert("ext_norm_param_count".into(), json!(ext_params));
    m.insert(
        "base".into(),
        json!({ "path": base_path, "sha256": sha256_hex(&bytes) }),
    );
    out.save(&a.out)?;

    rc.command = Some("fuse".into());
    rc.adapter = Some(cfg.clone());
    rc.inputs.insert("base".into(), base_path);
    rc.out = Some(a.out.display().to_string());
    record_config(&rc, &sidecar(&a.out))?;
    println!(
        "wrote {}: {} rank {}, {} adapter parameters",
        a.out.display(),
        cfg.variant,
        cfg.rank,
        group_digits(adapter_params)
    );
    Ok(())
}

#[derive(Serialize)]
struct Mismatch {
    tensor: String,
    index: Option<usize>,
    stored: Option<f32>,
    rebuilt: Option<f32>,
}

#[derive(Serialize)]
struct EquivSummary {
    pass: bool,
    fused: String,
    base: String,
    base_sha256_matches: bool,
    weights_match: bool,
    first_mismatch: Option<Mismatch>,
    max_abs_err: f64,
    max_tol_ratio: f64,
    prompts: Vec<EquivReport>,
}

pub fn check_equiv(a: CheckEquivArgs) -> CliResult<()> {
    if a.prompts == 0 {
        return usage("--prompts must be at least 1");
    }
    if a.prompt_len == 0 {
        return usage("--prompt-len must be at least 1");
    }
    if !(a.rtol >= 0.0 && a.atol >= 0.0) {
        return usage("--rtol and --atol must be non-negative");
    }
    let fc = Container::load(&a.fused)?;
    let payload = fc.payload_model()?;
    let cfg = fc.meta_value("adapter")?;
    let recorded: Value = fc.meta_value("base")?;
    let base_path = match &a.base {
        Some(p) => p.clone(),
        None => PathBuf::from(recorded["path"].as_str().unwrap_or_default()),
    };
    let bytes = std::fs::read(&base_path)?;
    let sha_ok = recorded["sha256"].as_str() == Some(sha256_hex(&bytes).as_str());
    let base = base_from_container(&Container::from_bytes(&bytes)?)?;
    let adapters = adapters_from_container(&fc, &payload, &cfg, "adapter.")?;
    let stored = fused_from_container(&fc, &payload, &cfg)?;
    let rebuilt = build_fused_model(&base, &adapters)?;

    let (mut sc, mut rbc) = (Container::default(), Container::default());
    put_fused(&mut sc, &stored);
    put_fused(&mut rbc, &rebuilt);
    let first_mismatch = first_difference(&sc, &rbc).map(|(tensor, index)| {
        let at = |c: &Container| index.and_then(|i| c.tensors.get(&tensor).map(|t| t.data()[i]));
        Mismatch {
            stored: at(&sc),
            rebuilt: at(&rbc),
            tensor,
            index,
        }
    });

    let prompts = ToyTask::copy(payload.vocab_size, a.prompt_len, a.prompts, a.seed).dataset()?;
    let pol = policy();
    let mut reports = Vec::with_capacity(prompts.len());
    for ex in &prompts {
        let got = stored.logits(&ex.tokens, pol)?;
        let want = oracle_logits(&base, &adapters, &ex.tokens)?;
        reports.push(compare_logits(&got, &want, a.rtol, a.atol)?);
    }
    let weights_match = first_mismatch.is_none();
    let summary = EquivSummary {
        pass: sha_ok && weights_match && reports.iter().all(|r| r.pass),
        fused: a.fused.display().to_string(),
        base: base_path.display().to_string(),
        base_sha256_matches: sha_ok,
        weights_match,
        first_mismatch,
        max_abs_err: reports.iter().map(|r| r.max_abs_err).fold(0.0, f64::max),
        max_tol_ratio: reports.iter().map(|r| r.max_tol_ratio).fold(0.0, f64::max),
        prompts: reports,
    };

    let rc = RunConfig {
        command: Some("check-equiv".into()),
        adapter: Some(cfg),
        inputs: [
            ("fused".to_string(), summary.fused.clone()),
            ("base".to_string(), summary.base.clone()),
        ]
        .into(),
        check: Some(CheckSpec {
            prompts: a.prompts,
            prompt_len: a.prompt_len,
            rtol: a.rtol,
            atol: a.atol,
        }),
        seed: Some(a.seed),
        out: a.out.as_ref().map(|p| p.display().to_string()),
        ..Default::default()
    };
    match &a.out {
        Some(p) => {
            write_json(p, &summary)?;
            record_config(&rc, &sidecar(p))?;
        }
        None => eprintln!("resolved config:\n{}", rc.to_json()),
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(fuselab::Error::from)?
    );

    if summary.pass {
        return Ok(());
    }
    let why = if !sha_ok {
        format!("base checkpoint {} does not match the recorded sha256", summary.base)
    } else if let Some(m) = &summary.first_mismatch {
        match m.index {
            Some(i) => format!(
                "fused tensor {} differs from the re-fused weights at element {i}",
                m.tensor
            ),
            None => format!("fused tensor {} is missing or has the wrong shape", m.tensor),
        }
    } else {
        format!("logits exceed tolerance (max ratio {:.3})", summary.max_tol_ratio)
    };
    Err(CliError::Verify(why))
}

pub fn count_params(a: CountParamsArgs) -> CliResult<()> {
    let rc = load_config(a.model.config.as_deref())?;
    let (spec, model) = model_spec(&a.model, &rc, None)?;
    let cfg = adapter_config(&a.adapter, &rc, None)?;
    cfg.validate(&model)?;
    let adapter = count_adapter_params(&model, &cfg);
    let ext = count_ext_norm_params(&model, &cfg);
    let base = model.base_param_count();
    let (denom, of) = match preset_name(&spec).and_then(|p| ModelConfig::nominal_size(p).map(|n| (n, p))) {
        Some((n, p)) => (n, p.to_string()),
        None => (base as f64, "base".to_string()),
    };
    let percent = 100.0 * adapter as f64 / denom;
    let matched = (cfg.variant != Variant::Lora && cfg.variant != Variant::None)
        .then(|| matched_lora_rank(&model, adapter, cfg.placement));

    let rc = RunConfig {
        command: Some("count-params".into()),
        model: Some(spec),
        adapter: Some(cfg.clone()),
        ..Default::default()
    };
    eprintln!("resolved config:\n{}", rc.to_json());
    if a.json {
        let v = json!({
            "variant": cfg.variant,
            "rank": cfg.rank,
            "placement": cfg.placement,
            "adapter_params": adapter,
            "ext_norm_params": ext,
            "base_params": base,
            "percent": percent,
            "percent_of": of,
            "matched_lora_rank": matched,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(fuselab::Error::from)?);
        return Ok(());
    }
    let placement = json!(cfg.placement);
    println!(
        "variant {} rank {} placement {}",
        cfg.variant,
        cfg.rank,
        placement.as_str().unwrap_or_default()
    );
    println!("adapter params {} ({percent:.2}% of {of})", group_digits(adapter));
    println!("ext norm params {}", group_digits(ext));
    println!("base params {}", group_digits(base));
    if let Some(r) = matched {
        println!("largest lora rank within this budget {r}");
    }
    Ok(())
}
