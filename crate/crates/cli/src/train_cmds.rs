use fuselab::adapters::{init_adapters, InitScheme};
use fuselab::container::{put_adapters, Container};
use fuselab::model::gen_model;
use fuselab::train::{
    frozen_head_floor, grad_check as run_grad_check, train_adapters, GradCheckConfig, Optimizer, ToyTask, TrainConfig,
};
use serde_json::json;

use crate::common::*;
use crate::{GradCheckArgs, TrainToyArgs};

pub fn grad_check(a: GradCheckArgs) -> CliResult<()> {
    let mut rc = load_config(a.model.config.as_deref())?;
    let (spec, model) = model_spec(&a.model, &rc, Some("tiny"))?;
    ensure_fits(&model, 8)?;
    let mut cfg = adapter_config(&a.adapter, &rc, Some(8))?;
    // With B = 0 most gradients vanish identically, which checks nothing.
    if a.adapter.init.is_none() && rc.adapter.is_none() {
        cfg.init = InitScheme::BothRandom;
    }
    cfg.validate(&model)?;
    let seed = cfg.seed;
    let mut gc = rc.grad_check.clone().unwrap_or(GradCheckConfig {
        seed,
        ..Default::default()
    });
    if let Some(n) = a.coords {
        gc.coords = n;
    }
    if let Some(e) = a.eps {
        gc.eps = e;
    }
    if let Some(t) = a.tol {
        gc.tol = t;
    }
    if gc.coords == 0 || !(gc.eps > 0.0) {
        return usage("--coords and --eps must be positive");
    }
    let base = gen_model(&model, seed)?.cast::<f64>();
    let adapters = init_adapters(&model, &cfg)?.cast::<f64>();
    let ex = ToyTask::copy(model.vocab_size, a.seq_len, 1, seed).dataset()?.remove(0);
    let report = run_grad_check(&base, &adapters, &ex, &gc)?;

    rc.command = Some("grad-check".into());
    rc.model = Some(spec);
    rc.adapter = Some(cfg.clone());
    rc.grad_check = Some(gc.clone());
    rc.out = a.out.as_ref().map(|p| p.display().to_string());
    match &a.out {
        Some(p) => {
            write_json(p, &report)?;
            record_config(&rc, &sidecar(p))?;
        }
        None => eprintln!("resolved config:\n{}", rc.to_json()),
    }
    println!(
        "variant {} coords {} max_rel_err {:.3e} tol {:.1e} {}",
        cfg.variant,
        report.coords.len(),
        report.max_rel_err,
        report.tol,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "{} gradient relative error {:.3e} exceeds {:.1e}",
            cfg.variant, report.max_rel_err, report.tol
        )))
    }
}

pub fn train_toy(a: TrainToyArgs) -> CliResult<()> {
    let mut rc = load_config(a.model.config.as_deref())?;
    let (spec, model) = model_spec(&a.model, &rc, Some("tiny"))?;
    ensure_fits(&model, 16)?;
    let cfg = adapter_config(&a.adapter, &rc, Some(8))?;
    cfg.validate(&model)?;
    let seed = a.adapter.seed.or(rc.seed).unwrap_or(0);

    let mut task = rc
        .task
        .clone()
        .unwrap_or_else(|| ToyTask::copy(model.vocab_size.min(64), 16, 512, seed));
    if let Some(k) = &a.task {
        task.kind = parse_enum("task", k)?;
    }
    if let Some(v) = a.vocab {
        task.vocab_size = v;
    }
    if let Some(n) = a.seq_len {
        task.seq_len = n;
    }
    if let Some(n) = a.dataset {
        task.dataset_size = n;
    }
    task.validate()?;

    let mut tc = rc.train.clone().unwrap_or_else(|| TrainConfig {
        seed,
        ..TrainConfig::adam(500, 1e-3)
    });
    if let Some(n) = a.steps {
        tc.steps = n;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    match a.optimizer.as_deref() {
        None => {}
        Some("adam") => tc.optimizer = Optimizer::default(),
        Some("sgd") => tc.optimizer = Optimizer::Sgd,
        Some(other) => return usage(format!("--optimizer: expected adam or sgd, got {other:?}")),
    }
    if let Some(b) = a.batch {
        tc.batch_size = b;
    }
    if let Some(c) = a.clip {
        tc.grad_clip = c;
    }
    tc.validate()?;

    rc.command = Some("train-toy".into());
    rc.model = Some(spec);
    rc.adapter = Some(cfg.clone());
    rc.task = Some(task.clone());
    rc.train = Some(tc.clone());
    rc.seed = Some(seed);
    rc.out = Some(a.out.display().to_string());
    ensure_dir(&a.out)?;
    record_config(&rc, &a.out.join("run_config.json"))?;

    let base = gen_model(&model, seed)?;
    let result = train_adapters(&base, &cfg, &task, &tc)?;
    let floor = frozen_head_floor(&base, task.vocab_size, 100);

    std::fs::write(a.out.join("loss.csv"), result.curve_csv())?;
    let mut ck = Container::default();
    put_adapters(&mut ck, &result.adapters, "");
    ck.meta.insert("kind".into(), "adapters".into());
    ck.meta.insert("model".into(), json!(model));
    ck.meta.insert("adapter".into(), json!(cfg));
    ck.save(a.out.join("adapters.ftc"))?;
    let summary = json!({
        "variant": cfg.variant,
        "rank": cfg.rank,
        "trainable_params": result.adapters.trainable_count(),
        "steps": tc.steps,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "trailing_mean_loss": result.trailing_mean(10),
        "frozen_head_floor": floor,
        "target_loss": a.target_loss,
    });
    write_json(&a.out.join("summary.json"), &summary)?;

    println!(
        "variant {} steps {} initial_loss {:.4} final_loss {:.4} frozen_head_floor {:.4}",
        cfg.variant, tc.steps, result.initial_loss, result.final_loss, floor
    );
    match a.target_loss {
        Some(t) if !(result.final_loss < t) => Err(CliError::Verify(format!(
            "final loss {:.4} did not reach {t}",
            result.final_loss
        ))),
        _ => Ok(()),
    }
}
