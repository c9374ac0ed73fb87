use std::fs;
use std::path::Path;
use std::time::Instant;

use deepmlf::analysis::{
    ablation_grid, budget_matches, gate_trace, info_flow_probe, measured_scores, memory_budget, Axis, Stream,
    PROBE_OUTPUTS,
};
use deepmlf::av_encoder::{init_av, AvModel};
use deepmlf::data::{generate_synthetic, SyntheticSpec};
use deepmlf::training::{self, evaluate, make_checkpoint, model_grad_check, EpochLog};
use deepmlf::{AvInit, Checkpoint, DeepMlf, DmlfError, Result, RunConfig, Sample};
use dmlf_tensor::Rng;
use serde_json::{json, Value};

use crate::io::{self, RunDir, SeedOverride, Splits};

pub fn gen_data(spec_path: &Path, out_dir: &Path, seed: SeedOverride) -> Result<()> {
    let text = fs::read_to_string(spec_path)?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| DmlfError::Config(format!("invalid generator spec: {e}")))?;
    spec.seed = seed.apply(spec.seed);
    let data = generate_synthetic(&spec)?;
    data.write(out_dir)?;
    RunDir::create(out_dir)?.write_json("spec.json", &spec)?;
    log::info!(
        "wrote {} train / {} val / {} test records to {}",
        data.train.records.len(),
        data.val.records.len(),
        data.test.records.len(),
        out_dir.display()
    );
    Ok(())
}

/// Runs `train` while streaming every epoch to `run.jsonl`.
fn logged_epochs(dir: &mut RunDir) -> (impl FnMut(&EpochLog) + '_, impl FnOnce() -> Option<DmlfError>) {
    let failure = std::rc::Rc::new(std::cell::RefCell::new(None));
    let sink = failure.clone();
    let on_epoch = move |log: &EpochLog| {
        if sink.borrow().is_none() {
            if let Err(e) = dir.event("epoch", log) {
                *sink.borrow_mut() = Some(e);
            }
        }
    };
    (on_epoch, move || failure.borrow_mut().take())
}

fn outcome_json(o: &training::TrainOutcome) -> Value {
    json!({
        "epochs": o.epochs.len(),
        "best_epoch": o.best_epoch,
        "best_val_loss": o.best_val_loss,
        "stopped_early": o.stopped_early,
        "steps": o.steps,
    })
}

pub fn pretrain_av(config: &Path, data: &Path, out: &Path, seed: SeedOverride) -> Result<()> {
    let run = io::load_config(config, seed)?;
    let splits = io::load_splits(data, &run.model)?;
    let mut dir = RunDir::create(out)?;
    dir.write_config(&run)?;
    log::info!("pretraining the AV model on {} samples", splits.train.samples.len());
    let (model, outcome) = {
        let (mut on_epoch, failure) = logged_epochs(&mut dir);
        let r = training::pretrain_av(&splits.train.samples, &splits.val.samples, &run, &mut on_epoch)?;
        if let Some(e) = failure() {
            return Err(e);
        }
        r
    };
    dir.event("done", &outcome_json(&outcome))?;
    let path = dir.file("av.ckpt");
    make_checkpoint(&run, &model.store, Some(outcome.optimizer.clone())).save(&path)?;
    if let Some(test) = &splits.test {
        let ev = evaluate(&model, &test.samples, &run)?;
        log::info!("test MAE {:.4}", ev.metrics.mae);
        dir.event("test", &ev.metrics)?;
        dir.write_json("metrics.json", &json!({ "test": ev.metrics }))?;
    }
    log::info!("AV snapshot written to {}", path.display());
    Ok(())
}

/// Trains one full model into `dir`; returns the summary written to `summary.json`.
fn train_into(run: &RunConfig, splits: &Splits, snapshot: Option<&Path>, dir: &mut RunDir) -> Result<Value> {
    let mut model = DeepMlf::new(&run.model, run.seed)?;
    let snap = match snapshot {
        Some(p) if run.av_init != AvInit::RandomTune => Some(Checkpoint::load(p)?.params),
        Some(_) => {
            log::warn!("random_tune ignores the AV snapshot");
            None
        }
        None => None,
    };
    init_av(&mut model.store, run.av_init, snap.as_ref())?;
    dir.write_config(run)?;

    let t0 = Instant::now();
    let outcome = {
        let (mut on_epoch, failure) = logged_epochs(dir);
        let r = training::train(&mut model, &splits.train.samples, &splits.val.samples, run, &mut on_epoch)?;
        if let Some(e) = failure() {
            return Err(e);
        }
        r
    };
    dir.event("done", &outcome_json(&outcome))?;
    make_checkpoint(run, &model.store, Some(outcome.optimizer.clone())).save(&dir.file("model.ckpt"))?;

    let mut summary = outcome_json(&outcome);
    summary["seconds"] = json!(t0.elapsed().as_secs_f64());
    summary["val"] = json!(outcome.epochs[outcome.best_epoch].val_metrics);
    if let Some(test) = &splits.test {
        let ev = evaluate(&model, &test.samples, run)?;
        log::info!("test MAE {:.4}, corr {:?}", ev.metrics.mae, ev.metrics.corr);
        dir.event("test", &ev.metrics)?;
        summary["test"] = json!(ev.metrics);
    }
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

pub fn train(
    config: &Path,
    data: &Path,
    av_init: Option<AvInit>,
    snapshot: Option<&Path>,
    out: &Path,
    seed: SeedOverride,
) -> Result<()> {
    let mut run = io::load_config(config, seed)?;
    if let Some(mode) = av_init {
        run.av_init = mode;
    }
    let splits = io::load_splits(data, &run.model)?;
    let mut dir = RunDir::create(out)?;
    log::info!(
        "training on {} samples, validating on {}, av_init {:?}",
        splits.train.samples.len(),
        splits.val.samples.len(),
        run.av_init
    );
    train_into(&run, &splits, snapshot, &mut dir)?;
    log::info!("checkpoint written to {}", dir.file("model.ckpt").display());
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str, out: Option<&Path>, seed: SeedOverride) -> Result<()> {
    let (ck, run) = io::load_checkpoint(checkpoint, seed)?;
    let ds = io::load_split(data, split, &run.model)?;
    let av_only = ck.params.tensor("lm.tok_emb").is_err();
    let ev = if av_only {
        let model = AvModel {
            config: run.model.clone(),
            store: ck.params,
        };
        evaluate(&model, &ds.samples, &run)?
    } else {
        evaluate(&io::full_model(ck, &run, checkpoint)?, &ds.samples, &run)?
    };
    let report = json!({
        "checkpoint": checkpoint.display().to_string(),
        "model": if av_only { "av" } else { "full" },
        "split": split,
        "loss": ev.loss,
        "metrics": ev.metrics,
    });
    if let Some(dir) = out {
        let dir = RunDir::create(dir)?;
        dir.write_config(&run)?;
        dir.write_json("metrics.json", &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct Sections {
    pub probe: bool,
    pub gates: bool,
    pub budget: bool,
}

fn analysis_sample(data: Option<&Path>, run: &RunConfig) -> Result<Sample> {
    match data {
        Some(dir) => {
            let split = if dir.join("test.jsonl").is_file() { "test" } else { "train" };
            io::load_split(dir, split, &run.model)?
                .samples
                .into_iter()
                .next()
                .ok_or_else(|| DmlfError::Data(format!("{} has an empty {split} split", dir.display())))
        }
        None => Ok(io::synthetic_samples(&run.model, 1, run.seed).remove(0)),
    }
}

pub fn analyze(
    target: &Path,
    which: Sections,
    data: Option<&Path>,
    as_json: bool,
    out: Option<&Path>,
    seed: SeedOverride,
) -> Result<()> {
    let (model, run) = if io::is_checkpoint(target)? {
        let (ck, run) = io::load_checkpoint(target, seed)?;
        (io::full_model(ck, &run, target)?, run)
    } else {
        let run = io::load_config(target, seed)?;
        (DeepMlf::new(&run.model, run.seed)?, run)
    };
    io::dump_config(out, &run)?;
    let sample = analysis_sample(data, &run)?;
    let mut report = serde_json::Map::new();

    if which.gates {
        let trace = gate_trace(&model)?;
        if !as_json {
            println!("gates ({:?})", run.model.mlm.gating);
            println!("  {:>5}  {:>8}  {:>8}", "layer", "attn", "ffw");
            for g in &trace {
                println!("  {:>5}  {:>8.4}  {:>8.4}", g.layer, g.attn, g.ffw);
            }
        }
        report.insert("gates".into(), json!(trace));
    }

    if which.budget {
        let budget = memory_budget(&run.model, sample.tokens.len())?;
        let scores = measured_scores(&model, &sample)?;
        let matches = budget_matches(&budget, &scores, run.model.mlm.n_layers);
        if !as_json {
            println!(
                "attention budget per head (L_t {}, L_av {}, n_f {})",
                budget.l_t, budget.l_av, budget.n_f
            );
            println!("  {:>5}  {:>8}  {:>8}  {:>12}", "layer", "gca", "csa", "interleaved");
            for r in &budget.rows {
                println!("  {:>5}  {:>8}  {:>8}  {:>12}", r.layer, r.gca, r.csa, r.flamingo_style);
            }
            println!("  measured score shapes match: {}", if matches { "yes" } else { "no" });
        }
        report.insert("budget".into(), json!({ "report": budget, "measured_match": matches }));
    }

    if which.probe {
        let mut rng = Rng::new(run.seed).fork("probe");
        let mut probes = Vec::new();
        if !as_json {
            println!("information flow (sample {})", sample.id);
            let header: Vec<String> = PROBE_OUTPUTS.iter().map(|o| format!("{o:>9}")).collect();
            println!("  {:>8}  {}  {:>9}", "perturb", header.join(" "), "isolated");
        }
        for stream in [Stream::Text, Stream::Av, Stream::Fusion] {
            let p = info_flow_probe(&model, &sample, stream, &mut rng)?;
            if !as_json {
                let cells: Vec<String> = PROBE_OUTPUTS
                    .iter()
                    .map(|o| format!("{:>9}", if p.changed(o) { "changed" } else { "-" }))
                    .collect();
                let name = serde_json::to_value(stream)?;
                println!(
                    "  {:>8}  {}  {:>9}",
                    name.as_str().unwrap_or("?"),
                    cells.join(" "),
                    if p.isolation_holds() { "yes" } else { "NO" }
                );
            }
            probes.push(json!({ "report": p, "isolation_holds": p.isolation_holds(), "pattern_holds": p.pattern_holds() }));
        }
        report.insert("probe".into(), Value::Array(probes));
    }

    let report = Value::Object(report);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    if let Some(dir) = out {
        RunDir::create(dir)?.write_json("analysis.json", &report)?;
    }
    Ok(())
}

pub fn grad_check(
    config: &Path,
    per_tensor: Option<usize>,
    n_samples: usize,
    eps: f32,
    tol: f64,
    out: Option<&Path>,
    seed: SeedOverride,
) -> Result<()> {
    let run = io::load_config(config, seed)?;
    io::dump_config(out, &run)?;
    let model = DeepMlf::new(&run.model, run.seed)?;
    let samples = io::synthetic_samples(&run.model, n_samples, run.seed);
    let t0 = Instant::now();
    let check = model_grad_check(&model, &samples, run.loss, eps, tol, per_tensor, run.seed)?;
    let report = &check.report;
    let (worst, worst_err) = check.worst().unwrap_or(("-", 0.0));
    log::info!(
        "grad-check: {} tensors, {} coordinates each, eps {eps}, max rel error {:.3e} ({worst}), {:.1?}",
        check.names.len(),
        per_tensor.map_or("all".to_string(), |k| format!("up to {k}")),
        report.max_rel_error,
        t0.elapsed()
    );
    for v in &check.vanishing {
        log::info!(
            "  {}: zero analytic gradient, numeric max {:.2e} (noise floor {:.2e})",
            v.name,
            v.numeric_max,
            check.noise_floor
        );
    }
    if let Some(dir) = out {
        let per: Vec<Value> = report
            .per_param
            .iter()
            .map(|p| json!({ "name": check.names[p.index], "rel_error": p.rel_error, "max_abs_diff": p.max_abs_diff }))
            .collect();
        RunDir::create(dir)?.write_json(
            "grad_check.json",
            &json!({
                "eps": eps,
                "tol": tol,
                "max_rel_error": report.max_rel_error,
                "passed": check.passed(),
                "per_tensor": per,
                "noise_floor": check.noise_floor,
                "vanishing": check.vanishing.iter().map(|v| json!({ "name": v.name, "analytic_max": v.analytic_max, "numeric_max": v.numeric_max })).collect::<Vec<_>>(),
            }),
        )?;
    }
    if let Some(v) = check.vanishing.iter().find(|v| v.numeric_max > check.noise_floor) {
        return Err(DmlfError::Numeric(format!(
            "gradient check failed: {} has a zero analytic gradient but numeric max {:.3e}",
            v.name, v.numeric_max
        )));
    }
    if !report.passed {
        return Err(DmlfError::Numeric(format!(
            "gradient check failed: {worst} has relative error {worst_err:.3e} >= {tol}"
        )));
    }
    log::info!("PASS");
    Ok(())
}

pub fn grid(
    config: &Path,
    axes: &[String],
    data: Option<&Path>,
    snapshot: Option<&Path>,
    out: &Path,
    seed: SeedOverride,
) -> Result<()> {
    let base = io::load_config(config, seed)?;
    let axes: Vec<Axis> = axes.iter().map(|a| Axis::parse(a)).collect::<Result<_>>()?;
    let runs = ablation_grid(&base, &axes)?;
    let root = RunDir::create(out)?;
    root.write_config(&base)?;
    let splits = data.map(|d| io::load_splits(d, &base.model)).transpose()?;

    let mut manifest = Vec::with_capacity(runs.len());
    for r in &runs {
        let mut dir = RunDir::create(&root.file(&r.id))?;
        let mut entry = json!({ "id": r.id, "labels": r.labels });
        match &splits {
            Some(splits) => {
                log::info!("[{}] {}", r.id, r.labels.join(" "));
                let summary = train_into(&r.config, splits, snapshot, &mut dir)?;
                entry["summary"] = summary;
            }
            None => dir.write_config(&r.config)?,
        }
        manifest.push(entry);
    }
    root.write_json("manifest.json", &manifest)?;

    println!("{:<32} {:>10} {:>10}", "run", "val_mae", "test_mae");
    for m in &manifest {
        let cell = |split: &str| {
            m.pointer(&format!("/summary/{split}/mae"))
                .and_then(Value::as_f64)
                .map_or("-".to_string(), |v| format!("{v:.4}"))
        };
        println!("{:<32} {:>10} {:>10}", m["id"].as_str().unwrap_or("?"), cell("val"), cell("test"));
    }
    log::info!("{} grid runs under {}", runs.len(), out.display());
    Ok(())
}
