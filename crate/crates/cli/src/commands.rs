//! The seven subcommands. Every command is deterministic under a fixed
//! seed/config; wall-clock numbers appear only in the timing report.

use std::fs;
use std::path::{Path, PathBuf};

use molex_core::backbone::{evaluate_plain, pretrain};
use molex_core::checkpoint;
use molex_core::ensemble::{
    certify_single, molex_vs_sequential, unroll, CertificateReport, Colinearity, LinearStack,
};
use molex_core::error::{Error, Result};
use molex_core::molex::SelectionStats;
use molex_core::numerics::RngState;
use molex_core::training::task::Split;
use molex_core::training::{
    evaluate, evaluate_noisy, finetune, param_count, timing_report, variant_name,
    zero_shot_transfer, FinetuneModel,
};
use molex_core::Mat;
use serde_json::json;

use crate::config::RunConfig;
use crate::heatmap;
use crate::probe::{self, ProbeConfig};

pub struct CommandCtx {
    pub cfg: RunConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub extras: Vec<String>,
    /// From MOLEX_THREADS: 0 (or 1) = sequential reference mode.
    pub threads: usize,
}

impl CommandCtx {
    fn parallel(&self) -> bool {
        self.threads >= 2
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Io(format!("serialize {name}: {e}")))?;
        self.write(name, &(text + "\n"))
    }

    fn extra_flag(&self, flag: &str) -> Option<&str> {
        self.extras
            .iter()
            .position(|a| a == flag)
            .and_then(|i| self.extras.get(i + 1))
            .map(|s| s.as_str())
    }

    /// Positional extras (not belonging to any --flag).
    fn positionals(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut skip = false;
        for a in &self.extras {
            if skip {
                skip = false;
                continue;
            }
            if a.starts_with("--") {
                skip = true;
                continue;
            }
            out.push(a.as_str());
        }
        out
    }
}

/// The frozen backbone: loaded from `train.pretrain_ckpt` when set,
/// otherwise pretrained in-process (deterministic given the seed).
fn obtain_pretrained(ctx: &CommandCtx) -> Result<molex_core::backbone::BackboneModel> {
    if !ctx.cfg.train_pretrain_ckpt.is_empty() {
        let loaded = checkpoint::load(Path::new(&ctx.cfg.train_pretrain_ckpt))?;
        if !loaded.backbone.frozen {
            return Err(Error::Protocol("pretrain checkpoint is not frozen".into()));
        }
        return Ok(loaded.backbone);
    }
    let backbone_cfg = ctx.cfg.backbone_config()?;
    let base = ctx.cfg.base_task();
    let seed = ctx.seed.unwrap_or(ctx.cfg.train_pretrain_seed);
    pretrain(&backbone_cfg, &base, &ctx.cfg.pretrain_config(), seed)
}

pub fn cmd_pretrain(ctx: &CommandCtx) -> Result<()> {
    let backbone_cfg = ctx.cfg.backbone_config()?;
    let base = ctx.cfg.base_task();
    let seed = ctx.seed.unwrap_or(ctx.cfg.train_pretrain_seed);
    let model = pretrain(&backbone_cfg, &base, &ctx.cfg.pretrain_config(), seed)?;
    let train_acc = evaluate_plain(&model, &base, Split::Train)?;
    let test_acc = evaluate_plain(&model, &base, Split::Test)?;
    let ckpt_dir = ctx.out.join("checkpoint");
    checkpoint::save(&ckpt_dir, &FinetuneModel { backbone: model.clone(), molex: None })?;
    let report = json!({
        "seed": seed,
        "base_task": base.name,
        "steps": ctx.cfg.train_pretrain_steps,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "frozen_hash": format!("{:#018x}", model.frozen_hash()),
        "param_total": molex_core::backbone::param_count(&model, false),
        "checkpoint": ckpt_dir.display().to_string(),
    });
    ctx.write_json("pretrain.json", &report)?;
    println!(
        "pretrained {} layers (dim {}) for {} steps: base accuracy {:.3} (train) / {:.3} (test)",
        backbone_cfg.layers, backbone_cfg.dim, ctx.cfg.train_pretrain_steps, train_acc, test_acc
    );
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(())
}

pub fn cmd_finetune(ctx: &CommandCtx) -> Result<()> {
    let pretrained = obtain_pretrained(ctx)?;
    let task = ctx.cfg.downstream_task()?;
    let gate = ctx.cfg.gate_config(ctx.parallel())?;
    let variant = variant_name(&gate).to_string();
    let train_cfg = ctx.cfg.train_config();
    let base_seed = ctx.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..ctx.cfg.train_seeds as u64).map(|i| base_seed + i).collect();

    let mut outcome = finetune(&pretrained, gate, &task, &train_cfg, &seeds)?;

    for (i, csv) in outcome.selection_csvs.iter().enumerate() {
        if let Some(csv) = csv {
            let name = format!("selection_{variant}_seed{}.csv", seeds[i]);
            let path = ctx.write(&name, csv)?;
            outcome.metrics.runs[i].selection_csv_path = Some(path.display().to_string());
        }
    }
    for (i, model) in outcome.best_models.iter().enumerate() {
        if let Some(model) = model {
            checkpoint::save(&ctx.out.join(format!("model_{variant}_seed{}", seeds[i])), model)?;
        }
    }
    if let Some(target) = ctx.cfg.transfer_task()? {
        let accs: Vec<Option<f64>> = outcome
            .best_models
            .iter()
            .map(|m| m.as_ref().map(|m| zero_shot_transfer(m, &target)).transpose())
            .collect::<Result<_>>()?;
        let values: Vec<f64> = accs.iter().filter_map(|a| *a).collect();
        let summary = molex_core::training::summarize(&values);
        let report = json!({
            "variant": variant,
            "source_task": task.name,
            "target_task": target.name,
            "per_seed": accs,
            "summary": summary,
        });
        ctx.write_json(&format!("transfer_{variant}.json"), &report)?;
    }
    let path = ctx.write_json(&format!("metrics_{variant}.json"), &outcome.metrics)?;
    let m = &outcome.metrics;
    println!(
        "{variant} on {}: best-val {:.3} +- {:.3}, clean {:.3} +- {:.3}, noisy {:.3} +- {:.3} ({} seeds)",
        m.task,
        m.summary_best_val.mean,
        m.summary_best_val.std,
        m.summary_clean.mean,
        m.summary_clean.std,
        m.summary_noisy.mean,
        m.summary_noisy.std,
        m.summary_clean.n,
    );
    println!("metrics: {}", path.display());
    Ok(())
}

pub fn cmd_eval(ctx: &CommandCtx) -> Result<()> {
    if ctx.cfg.train_eval_ckpt.is_empty() {
        return Err(Error::Config("cmd eval requires the key train.eval_ckpt".into()));
    }
    let mut model = checkpoint::load(Path::new(&ctx.cfg.train_eval_ckpt))?;
    if let Some(m) = &mut model.molex {
        m.cfg.parallel_experts = ctx.parallel();
    }
    let task = ctx.cfg.downstream_task()?;
    let mut stats = SelectionStats::new(model.backbone.layers.len());
    let clean = if model.molex.is_some() {
        evaluate(&model, &task, Split::Test, Some(&mut stats))?
    } else {
        evaluate(&model, &task, Split::Test, None)?
    };
    let noisy = evaluate_noisy(
        &model,
        &task,
        Split::Test,
        ctx.cfg.train_noise_sigma,
        ctx.cfg.train_eval_seed,
    )?;
    let mut selection_path = None;
    if model.molex.is_some() {
        let csv = molex_core::molex::export_selection_stats(&stats)?;
        selection_path = Some(ctx.write("selection_eval.csv", &csv)?.display().to_string());
    }
    let transfer = match ctx.cfg.transfer_task()? {
        Some(target) => Some(zero_shot_transfer(&model, &target)?),
        None => None,
    };
    let report = json!({
        "checkpoint": ctx.cfg.train_eval_ckpt,
        "task": task.name,
        "clean_acc": clean,
        "noisy_acc": noisy,
        "noise_sigma": ctx.cfg.train_noise_sigma,
        "transfer_acc": transfer,
        "selection_csv_path": selection_path,
    });
    let path = ctx.write_json("eval.json", &report)?;
    println!("clean {clean:.3}, noisy {noisy:.3}");
    println!("report: {}", path.display());
    Ok(())
}

fn parse_stack_file(text: &str) -> Result<LinearStack> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input("empty stack file".into()))?;
    let mut parts = header.split_whitespace();
    let mut next_num = |what: &str| -> Result<f64> {
        parts
            .next()
            .ok_or_else(|| Error::Input(format!("stack header missing {what}")))?
            .parse()
            .map_err(|_| Error::Input(format!("stack header: bad {what}")))
    };
    let layers = next_num("layer count")? as usize;
    let dim = next_num("dimension")? as usize;
    let alpha = next_num("alpha")?;
    let routes_line = lines.next().ok_or_else(|| Error::Input("missing route line".into()))?;
    let routes: Vec<usize> = routes_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Input(format!("bad route {t:?}"))))
        .collect::<Result<_>>()?;
    let rest: Vec<&str> = lines.collect();
    let mut weights = Vec::with_capacity(layers);
    let mut cursor = 0usize;
    for _ in 0..layers {
        // each matrix block: header line + `rows` data lines
        let header = rest
            .get(cursor)
            .ok_or_else(|| Error::Input("truncated stack file".into()))?;
        let rows: usize = header
            .split_whitespace()
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Input("bad matrix header in stack file".into()))?;
        let block = rest[cursor..cursor + rows + 1].join("\n");
        weights.push(Mat::from_text(&block)?);
        cursor += rows + 1;
    }
    let stack = LinearStack { weights, routes, alpha };
    stack.validate()?;
    if stack.dim() != dim {
        return Err(Error::Input("stack dimension does not match matrices".into()));
    }
    Ok(stack)
}

fn stack_from_ckpt(path: &str) -> Result<LinearStack> {
    let model = checkpoint::load(Path::new(path))?;
    let mut weights = Vec::new();
    for (t, layer) in model.backbone.layers.iter().enumerate() {
        match layer {
            molex_core::backbone::LayerWeights::Linear { w } => {
                // fold the adapter in; the certified model is the effective one
                let w_eff = match model.backbone.adapter_for(t) {
                    Some(molex_core::backbone::LayerAdapters::Linear { w: ad }) => {
                        w.add(&ad.delta()?)?
                    }
                    _ => w.clone(),
                };
                weights.push(w_eff);
            }
            molex_core::backbone::LayerWeights::Mlp { .. } => {
                return Err(Error::Unsupported("certification requires linear blocks".into()));
            }
        }
    }
    let alpha = model.molex.as_ref().map(|m| m.alpha_at(0)).unwrap_or(1.0);
    let layers = weights.len();
    let routes = match &model.molex {
        // a frozen schedule stands in for the input-dependent gate; the
        // certificates require fixed routes
        Some(_) => {
            let mut rng = RngState::new(0xCE57);
            (0..layers).map(|_| rng.next_range(layers)).collect()
        }
        None => (0..layers).collect(),
    };
    Ok(LinearStack { weights, routes, alpha })
}

pub fn cmd_certify(ctx: &CommandCtx) -> Result<()> {
    let seed = ctx.seed.unwrap_or(0);
    let stack = if let Some(path) = ctx.extra_flag("--stack") {
        parse_stack_file(&fs::read_to_string(path).map_err(|e| Error::Io(format!("{path}: {e}")))?)?
    } else if let Some(path) = ctx.extra_flag("--ckpt") {
        stack_from_ckpt(path)?
    } else {
        if ctx.cfg.backbone_block != "linear" {
            return Err(Error::Unsupported("certification requires linear blocks".into()));
        }
        let mut rng = RngState::new(seed ^ 0x57AC);
        let mut stack = LinearStack::random(
            ctx.cfg.backbone_layers,
            ctx.cfg.backbone_dim,
            ctx.cfg.molex_alpha,
            &mut rng,
        );
        // near-identity scaling keeps random instances classifiable
        for w in &mut stack.weights {
            let scaled = w.scale(0.15);
            *w = scaled;
            for i in 0..w.rows() {
                w.set(i, i, w.at(i, i) + 0.35);
            }
        }
        stack
    };

    let dim = stack.dim();
    let x: Vec<f64> = match ctx.extra_flag("--x") {
        Some(spec) => spec
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Input(format!("bad --x entry {t:?}"))))
            .collect::<Result<_>>()?,
        None => {
            let mut rng = RngState::new(seed ^ 0x1177);
            let mut x: Vec<f64> = (0..dim).map(|_| 0.25 * rng.next_gaussian()).collect();
            x[0] += 2.0;
            x
        }
    };
    if x.len() != dim {
        return Err(Error::Input(format!("--x has {} entries, stack dimension is {dim}", x.len())));
    }
    let y = match ctx.extra_flag("--y") {
        Some(t) => t.parse().map_err(|_| Error::Input(format!("bad --y {t:?}")))?,
        None => {
            // certify the ensemble's own prediction
            let terms = unroll(&stack)?;
            let m = molex_core::ensemble::ensemble_matrix(&terms)?;
            let fx: Vec<f64> = (0..dim)
                .map(|r| (0..dim).map(|c| m.at(r, c) * x[c]).sum())
                .collect();
            molex_core::backbone::argmax_row(&fx)
        }
    };

    let cmp = molex_vs_sequential(&stack, &x, y)?;
    let terms = unroll(&stack)?;
    let models: Vec<Mat> = terms.iter().map(|t| t.composed.transpose()).collect();
    let coeffs: Vec<f64> = terms.iter().map(|t| t.coefficient).collect();
    let ens = molex_core::ensemble::certify_ensemble(&models, &coeffs, &x, y, cmp.eps_sequential)?;
    let report = CertificateReport::from_ensemble(&ens);

    let verdict = if cmp.strict {
        "strictly more robust than the bare layer composition"
    } else if ens.assumptions.noncolinear == Colinearity::Inconclusive {
        "assumption inconclusive"
    } else if !ens.assumptions.hold() {
        "theorem not applicable (assumptions unmet)"
    } else {
        "no strict gap"
    };
    let payload = json!({
        "certificate": report,
        "comparison": cmp,
        "verdict": verdict,
    });
    let path = ctx.write_json("certificate.json", &payload)?;
    println!("eps* (mixed ensemble)    = {:.9}", cmp.eps_molex);
    println!("eps* (layer composition) = {:.9}", cmp.eps_sequential);
    println!("eps* (unmixed model)     = {:.9}", cmp.eps_baseline);
    println!("verdict: {verdict}");
    println!("report: {}", path.display());
    // worked single-model detail for the predicted class
    let single = certify_single(&stack.baseline_matrix()?.transpose(), &x, y, cmp.eps_sequential)?;
    if !single.valid {
        println!("note: the unmixed model misclassifies this input (no certificate)");
    }
    Ok(())
}

pub fn cmd_probe(ctx: &CommandCtx) -> Result<()> {
    let model = if !ctx.cfg.train_eval_ckpt.is_empty() {
        checkpoint::load(Path::new(&ctx.cfg.train_eval_ckpt))?
    } else {
        FinetuneModel { backbone: obtain_pretrained(ctx)?, molex: None }
    };
    let probe_cfg = ProbeConfig {
        samples: ctx.cfg.probe_samples,
        epochs: ctx.cfg.probe_epochs,
        lr: ctx.cfg.probe_lr,
        batch_size: ctx.cfg.probe_batch_size,
        seed: ctx.seed.unwrap_or(ctx.cfg.probe_seed),
    };
    let pair_task = ctx.cfg.task_name.starts_with("pairs");
    let report = probe::run_probe(&model, pair_task, &probe_cfg)?;
    for warning in &report.skipped {
        eprintln!("warning: {warning}");
    }
    let path = ctx.write_json("probe.json", &report)?;
    print!("{}", probe::render_table(&report));
    println!("report: {}", path.display());
    Ok(())
}

pub fn cmd_heatmap(ctx: &CommandCtx) -> Result<()> {
    let positionals = ctx.positionals();
    let input = positionals
        .first()
        .ok_or_else(|| Error::Config("cmd heatmap requires a selection CSV path".into()))?;
    let text = fs::read_to_string(input).map_err(|e| Error::Input(format!("{input}: {e}")))?;
    let map = heatmap::normalize_csv(&text)?;
    let csv = heatmap::to_csv(&map);
    let path = ctx.write("heatmap.csv", &csv)?;
    print!("{}", heatmap::render_text(&map));
    println!("normalized: {}", path.display());
    Ok(())
}

pub fn cmd_timing(ctx: &CommandCtx) -> Result<()> {
    let gate = ctx
        .cfg
        .gate_config(false)?
        .ok_or_else(|| Error::Config("cmd timing requires molex.enabled=true".into()))?;
    // Wall-clock depends only on shapes, so an untrained frozen model is the
    // default; pass train.pretrain_ckpt to time a real checkpoint.
    let pretrained = if ctx.cfg.train_pretrain_ckpt.is_empty() {
        let backbone_cfg = ctx.cfg.backbone_config()?;
        let mut rng = RngState::new(ctx.seed.unwrap_or(0));
        let mut model = molex_core::backbone::BackboneModel::init(&backbone_cfg, &mut rng)?;
        model.frozen = true;
        model
    } else {
        obtain_pretrained(ctx)?
    };
    let task = ctx.cfg.downstream_task()?;
    let mut backbone = pretrained;
    let mut rng = RngState::new(ctx.seed.unwrap_or(0) ^ 0x71E);
    backbone.attach_adapters(
        ctx.cfg.lora_rank,
        ctx.cfg.lora_alpha,
        ctx.cfg.lora_init_std,
        task.classes,
        &mut rng,
    );
    let molex = molex_core::molex::MolexState::init(
        gate,
        backbone.layers.len(),
        backbone.config.dim,
        &mut rng,
    )?;
    let model = FinetuneModel { backbone, molex: Some(molex) };
    let report = timing_report(&model, &task, ctx.cfg.train_timing_samples)?;
    let path = ctx.write_json("timing.json", &report)?;
    println!(
        "per-sample: baseline {:.6}s, mixed sequential {:.6}s ({:.2}x), mixed parallel {:.6}s ({:.2}x)",
        report.baseline_sec_per_sample,
        report.molex_sequential_sec_per_sample,
        report.sequential_ratio,
        report.molex_parallel_sec_per_sample,
        report.parallel_ratio,
    );
    println!(
        "trainable parameters: baseline {}, mixed {} (overhead {})",
        report.param_trainable_baseline, report.param_trainable_molex, report.trainable_overhead
    );
    let baseline = FinetuneModel { backbone: model.backbone.clone(), molex: None };
    debug_assert_eq!(param_count(&baseline, false) + model.molex.as_ref().unwrap().param_count(),
        param_count(&model, false));
    println!("report: {}", path.display());
    Ok(())
}
