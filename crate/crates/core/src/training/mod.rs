//! Fine-tuning: adapters + router + mixing weight + head train while the
//! backbone stays frozen. Also the evaluation protocols (clean accuracy,
//! input-noise robustness, zero-shot transfer) and the inference timing
//! report.

pub mod optim;
pub mod task;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, embedding_backward, forward_residual_traced, head_backward, head_logits,
    residual_backward, softmax_ce, BackboneModel, GradStore,
};
use crate::error::{Error, Result};
use crate::molex::{
    export_selection_stats, load_balance_loss, molex_backward, molex_forward_traced, AggScope,
    AlphaMode, Decision, ForcedRouting, GateConfig, LoadBalanceGrad, MolexState, MolexTrace,
    SelectionStats,
};
use crate::numerics::RngState;
use crate::training::optim::{GroupSetting, Optimizer, Schedule};
use crate::training::task::{Sample, Split, TaskSpec};
use crate::Mat;

// ---------------------------------------------------------------------------
// Assembled fine-tunable model
// ---------------------------------------------------------------------------

/// Frozen backbone plus (optionally) the layer-mixing state.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneModel {
    pub backbone: BackboneModel,
    pub molex: Option<MolexState>,
}

fn is_trainable_name(name: &str) -> bool {
    name.contains(".lora.")
        || name.starts_with("head.")
        || name.starts_with("router.")
        || name == "alpha"
}

fn is_gate_name(name: &str) -> bool {
    name.starts_with("router.") || name == "alpha"
}

impl FinetuneModel {
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = self.backbone.named_params();
        if let Some(m) = &self.molex {
            out.extend(m.named_params());
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = self.backbone.named_params_mut();
        if let Some(m) = &mut self.molex {
            out.extend(m.named_params_mut());
        }
        out
    }

    pub fn get_param(&self, name: &str) -> Option<&Mat> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn set_param(&mut self, name: &str, value: Mat) -> Result<()> {
        for (n, p) in self.named_params_mut() {
            if n == name {
                if p.shape() != value.shape() {
                    return Err(Error::shape(
                        "set_param",
                        format!("{n}: {:?} vs {:?}", p.shape(), value.shape()),
                    ));
                }
                *p = value;
                return Ok(());
            }
        }
        Err(Error::Input(format!("unknown parameter {name:?}")))
    }

    /// During fine-tuning only adapters, router, mixing weight, and head move.
    pub fn is_trainable(&self, name: &str) -> bool {
        is_trainable_name(name)
    }
}

/// Scalar parameter count of the assembly; with `trainable_only` the frozen
/// backbone tensors are excluded while router and mixing weight count as
/// trainable overhead whenever mixing is enabled.
pub fn param_count(model: &FinetuneModel, trainable_only: bool) -> usize {
    backbone::param_count(&model.backbone, trainable_only)
        + model.molex.as_ref().map_or(0, |m| m.param_count())
}

/// The gate overhead of a shared linear router: T*D + T + 1.
pub fn expected_gate_overhead(num_layers: usize, dim: usize) -> usize {
    num_layers * dim + num_layers + 1
}

// ---------------------------------------------------------------------------
// Batch forward/backward
// ---------------------------------------------------------------------------

/// Captured routing of one batch, replayable to freeze the discrete choices.
#[derive(Debug, Clone)]
pub enum BatchRouting {
    PerSequence(Vec<ForcedRouting>),
    Stacked(ForcedRouting),
}

fn stack_tokens(samples: &[Sample]) -> Vec<usize> {
    samples.iter().flat_map(|s| s.tokens.iter().copied()).collect()
}

fn pool_trace(trace: &MolexTrace, probs_rows: &mut Vec<Vec<f64>>, selections: &mut Vec<usize>) {
    for layer in &trace.layers {
        for n in 0..layer.probs.rows() {
            probs_rows.push(layer.probs.row(n).to_vec());
        }
        match &layer.decision {
            Decision::Whole(picks) => selections.extend(picks.iter().map(|&(e, _)| e)),
            Decision::PerRow(rows) => selections.extend(rows.iter().flatten().map(|&(e, _)| e)),
        }
    }
}

fn pooled_probs_matrix(rows: &[Vec<f64>]) -> Option<Mat> {
    let first = rows.first()?;
    let mut m = Mat::zeros(rows.len(), first.len());
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    Some(m)
}

fn extract_rows(m: &Mat, start: usize, count: usize) -> Mat {
    let mut out = Mat::zeros(count, m.cols());
    for r in 0..count {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

/// Mean cross-entropy over the batch plus the load-balancing term.
/// `forced` (when given) replays captured routing decisions, which freezes
/// the discrete choices across finite-difference perturbations.
pub fn batch_loss(
    model: &FinetuneModel,
    samples: &[Sample],
    forced: Option<&BatchRouting>,
) -> Result<f64> {
    let inv_b = 1.0 / samples.len() as f64;
    let mut ce = 0.0;
    let mut probs_rows: Vec<Vec<f64>> = Vec::new();
    let mut selections: Vec<usize> = Vec::new();
    match &model.molex {
        None => {
            for s in samples {
                let z0 = model.backbone.embed(&s.tokens)?;
                let (z_t, _) = forward_residual_traced(&model.backbone, z0)?;
                let (logits, _) = head_logits(&model.backbone.head, &z_t)?;
                ce += softmax_ce(&logits, s.label)?.0;
            }
        }
        Some(molex) => {
            if molex.cfg.agg_scope == AggScope::Batch && samples.len() > 1 {
                let forced_r = match forced {
                    Some(BatchRouting::Stacked(f)) => Some(f),
                    Some(BatchRouting::PerSequence(_)) => {
                        return Err(Error::Config("forced routing scope mismatch".into()))
                    }
                    None => None,
                };
                let tokens = stack_tokens(samples);
                let z0 = model.backbone.embed(&tokens)?;
                let (z_t, trace) =
                    molex_forward_traced(&model.backbone, molex, z0, None, forced_r)?;
                let n = samples[0].tokens.len();
                for (b, s) in samples.iter().enumerate() {
                    let seq_rows = extract_rows(&z_t, b * n, n);
                    let (logits, _) = head_logits(&model.backbone.head, &seq_rows)?;
                    ce += softmax_ce(&logits, s.label)?.0;
                }
                pool_trace(&trace, &mut probs_rows, &mut selections);
            } else {
                for (i, s) in samples.iter().enumerate() {
                    let forced_r = match forced {
                        Some(BatchRouting::PerSequence(fs)) => Some(&fs[i]),
                        Some(BatchRouting::Stacked(_)) => {
                            return Err(Error::Config("forced routing scope mismatch".into()))
                        }
                        None => None,
                    };
                    let z0 = model.backbone.embed(&s.tokens)?;
                    let (z_t, trace) =
                        molex_forward_traced(&model.backbone, molex, z0, None, forced_r)?;
                    let (logits, _) = head_logits(&model.backbone.head, &z_t)?;
                    ce += softmax_ce(&logits, s.label)?.0;
                    pool_trace(&trace, &mut probs_rows, &mut selections);
                }
            }
        }
    }
    let mut loss = ce * inv_b;
    if let Some(molex) = &model.molex {
        if let Some(probs) = pooled_probs_matrix(&probs_rows) {
            loss += load_balance_loss(&probs, &selections, molex.cfg.load_balance_coeff);
        }
    }
    Ok(loss)
}

/// Loss, gradients, and the captured routing of one batch. Parameter
/// gradients cover adapters, head, router, and mixing weight (plus the
/// embedding, which the optimizer ignores when frozen).
pub fn batch_grads(
    model: &FinetuneModel,
    samples: &[Sample],
) -> Result<(f64, GradStore, BatchRouting)> {
    let inv_b = 1.0 / samples.len() as f64;
    let mut grads = GradStore::new();
    let mut ce = 0.0;

    let Some(molex) = &model.molex else {
        for s in samples {
            let z0 = model.backbone.embed(&s.tokens)?;
            let (z_t, trace) = forward_residual_traced(&model.backbone, z0)?;
            let (logits, head_cache) = head_logits(&model.backbone.head, &z_t)?;
            let (loss, dlogits) = softmax_ce(&logits, s.label)?;
            ce += loss;
            let g_zt = head_backward(
                &model.backbone.head,
                &head_cache,
                &dlogits.scale(inv_b),
                z_t.rows(),
                &mut grads,
            )?;
            residual_backward(&model.backbone, &trace, g_zt, &mut grads, false)?;
        }
        return Ok((ce * inv_b, grads, BatchRouting::PerSequence(Vec::new())));
    };

    let mut probs_rows: Vec<Vec<f64>> = Vec::new();
    let mut selections: Vec<usize> = Vec::new();
    let stacked = molex.cfg.agg_scope == AggScope::Batch && samples.len() > 1;

    if stacked {
        let tokens = stack_tokens(samples);
        let z0 = model.backbone.embed(&tokens)?;
        let (z_t, trace) = molex_forward_traced(&model.backbone, molex, z0, None, None)?;
        pool_trace(&trace, &mut probs_rows, &mut selections);
        let lb = LoadBalanceGrad::from_batch(
            &selections,
            model.backbone.layers.len(),
            probs_rows.len(),
            molex.cfg.load_balance_coeff,
        );
        let lb_loss = pooled_probs_matrix(&probs_rows)
            .map(|p| load_balance_loss(&p, &selections, molex.cfg.load_balance_coeff))
            .unwrap_or(0.0);
        let n = samples[0].tokens.len();
        let mut g_zt = Mat::zeros(z_t.rows(), z_t.cols());
        for (b, s) in samples.iter().enumerate() {
            let seq_rows = extract_rows(&z_t, b * n, n);
            let (logits, head_cache) = head_logits(&model.backbone.head, &seq_rows)?;
            let (loss, dlogits) = softmax_ce(&logits, s.label)?;
            ce += loss;
            let g_seq = head_backward(
                &model.backbone.head,
                &head_cache,
                &dlogits.scale(inv_b),
                n,
                &mut grads,
            )?;
            for r in 0..n {
                for c in 0..g_zt.cols() {
                    g_zt.set(b * n + r, c, g_seq.at(r, c));
                }
            }
        }
        let dz0 = molex_backward(&model.backbone, molex, &trace, g_zt, &mut grads, lb.as_ref())?;
        embedding_backward(&tokens, &dz0, model.backbone.config.vocab, &mut grads)?;
        return Ok((ce * inv_b + lb_loss, grads, BatchRouting::Stacked(trace.forced_routing())));
    }

    // Per-sequence decisions: forward everything first so the balancing
    // constants cover the whole batch, then run the backward sweeps.
    let mut passes: Vec<(MolexTrace, Mat)> = Vec::with_capacity(samples.len());
    for s in samples {
        let z0 = model.backbone.embed(&s.tokens)?;
        let (z_t, trace) = molex_forward_traced(&model.backbone, molex, z0, None, None)?;
        pool_trace(&trace, &mut probs_rows, &mut selections);
        passes.push((trace, z_t));
    }
    let lb = LoadBalanceGrad::from_batch(
        &selections,
        model.backbone.layers.len(),
        probs_rows.len(),
        molex.cfg.load_balance_coeff,
    );
    let lb_loss = pooled_probs_matrix(&probs_rows)
        .map(|p| load_balance_loss(&p, &selections, molex.cfg.load_balance_coeff))
        .unwrap_or(0.0);
    let mut forced = Vec::with_capacity(samples.len());
    for ((trace, z_t), s) in passes.iter().zip(samples) {
        let (logits, head_cache) = head_logits(&model.backbone.head, z_t)?;
        let (loss, dlogits) = softmax_ce(&logits, s.label)?;
        ce += loss;
        let g_zt = head_backward(
            &model.backbone.head,
            &head_cache,
            &dlogits.scale(inv_b),
            z_t.rows(),
            &mut grads,
        )?;
        let dz0 = molex_backward(&model.backbone, molex, trace, g_zt, &mut grads, lb.as_ref())?;
        embedding_backward(&s.tokens, &dz0, model.backbone.config.vocab, &mut grads)?;
        forced.push(trace.forced_routing());
    }
    Ok((ce * inv_b + lb_loss, grads, BatchRouting::PerSequence(forced)))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn features(
    model: &FinetuneModel,
    tokens: &[usize],
    noise: Option<(f64, &mut RngState)>,
    stats: Option<&mut SelectionStats>,
) -> Result<Mat> {
    let mut z0 = model.backbone.embed(tokens)?;
    if let Some((sigma, rng)) = noise {
        if sigma > 0.0 {
            for v in z0.data_mut() {
                *v += sigma * rng.next_gaussian();
            }
        }
    }
    match &model.molex {
        None => Ok(forward_residual_traced(&model.backbone, z0)?.0),
        Some(molex) => Ok(molex_forward_traced(&model.backbone, molex, z0, stats, None)?.0),
    }
}

pub fn predict(
    model: &FinetuneModel,
    tokens: &[usize],
    stats: Option<&mut SelectionStats>,
) -> Result<usize> {
    let z_t = features(model, tokens, None, stats)?;
    let (logits, _) = head_logits(&model.backbone.head, &z_t)?;
    Ok(backbone::argmax_row(logits.row(0)))
}

/// Accuracy on a split; records selections when `stats` is given.
pub fn evaluate(
    model: &FinetuneModel,
    task: &TaskSpec,
    split: Split,
    mut stats: Option<&mut SelectionStats>,
) -> Result<f64> {
    let n = task.split_size(split);
    let mut correct = 0usize;
    for i in 0..n {
        let s = task.sample(split, i);
        if predict(model, &s.tokens, stats.as_deref_mut())? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy with i.i.d. Gaussian noise of scale `sigma` added to the token
/// embeddings at evaluation time. Deterministic given `eval_seed`; noise
/// streams derive per sample index, so results do not depend on evaluation
/// order. `sigma = 0` equals the clean accuracy exactly.
pub fn evaluate_noisy(
    model: &FinetuneModel,
    task: &TaskSpec,
    split: Split,
    sigma: f64,
    eval_seed: u64,
) -> Result<f64> {
    if sigma < 0.0 {
        return Err(Error::Config("noise sigma must be >= 0".into()));
    }
    let n = task.split_size(split);
    let root = RngState::new(eval_seed);
    let mut correct = 0usize;
    for i in 0..n {
        let s = task.sample(split, i);
        let mut rng = root.derive(i as u64);
        let noise = if sigma > 0.0 { Some((sigma, &mut rng)) } else { None };
        let z_t = features(model, &s.tokens, noise, None)?;
        let (logits, _) = head_logits(&model.backbone.head, &z_t)?;
        if backbone::argmax_row(logits.row(0)) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Evaluate a model fine-tuned on task A directly on task B (no training).
/// Both sides must be binary; reports the better of the direct and the
/// label-flipped accuracy.
pub fn zero_shot_transfer(model: &FinetuneModel, task_b: &TaskSpec) -> Result<f64> {
    let head_classes = model.backbone.head.w.rows();
    if head_classes != 2 || task_b.classes != 2 {
        return Err(Error::Protocol(format!(
            "zero-shot transfer needs two classes on both sides (head {head_classes}, task {})",
            task_b.classes
        )));
    }
    let n = task_b.split_size(Split::Test);
    let mut direct = 0usize;
    for i in 0..n {
        let s = task_b.sample(Split::Test, i);
        if predict(model, &s.tokens, None)? == s.label {
            direct += 1;
        }
    }
    let acc = direct as f64 / n as f64;
    Ok(acc.max(1.0 - acc))
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Gate parameter group (router + mixing weight).
    pub gate_lr: f64,
    pub gate_weight_decay: f64,
    pub warmup_ratio: f64,
    pub noise_sigma: f64,
    pub eval_seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            lr: 5e-3,
            weight_decay: 0.01,
            gate_lr: 0.1,
            gate_weight_decay: 0.01,
            warmup_ratio: 0.06,
            noise_sigma: 0.6,
            eval_seed: 9999,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub task: String,
    pub variant: String,
    pub epoch_metrics: Vec<f64>,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub clean_acc: Option<f64>,
    pub noisy_acc: Option<f64>,
    pub selection_csv_path: Option<String>,
    pub frozen_hash: String,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> MetricsSummary {
    let n = values.len();
    if n == 0 {
        return MetricsSummary { n: 0, mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MetricsSummary { n, mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub task: String,
    pub variant: String,
    pub runs: Vec<RunRecord>,
    pub summary_best_val: MetricsSummary,
    pub summary_clean: MetricsSummary,
    pub summary_noisy: MetricsSummary,
    /// Wall-clock data lives apart so determinism checks can ignore it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

/// What `finetune` produces: serializable metrics plus, per seed, the
/// best-epoch model and its selection telemetry for downstream protocols.
pub struct FinetuneOutcome {
    pub metrics: Metrics,
    pub best_models: Vec<Option<FinetuneModel>>,
    pub selection_csvs: Vec<Option<String>>,
}

pub fn variant_name(gate_cfg: &Option<GateConfig>) -> &'static str {
    if gate_cfg.is_some() {
        "molex"
    } else {
        "baseline"
    }
}

/// Fine-tune one variant over several seeds. Per-seed divergence is recorded
/// as a failed run; the sweep continues. The reported metric per run is the
/// best epoch's validation accuracy; clean/noisy accuracies come from the
/// best-epoch snapshot.
pub fn finetune(
    pretrained: &BackboneModel,
    gate_cfg: Option<GateConfig>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<FinetuneOutcome> {
    task.validate()?;
    if !pretrained.frozen {
        return Err(Error::Protocol("finetune requires a frozen pretrained backbone".into()));
    }
    let variant = variant_name(&gate_cfg);
    let mut runs = Vec::with_capacity(seeds.len());
    let mut best_models = Vec::with_capacity(seeds.len());
    let mut selection_csvs = Vec::with_capacity(seeds.len());

    for &seed in seeds {
        match finetune_single(pretrained, gate_cfg.clone(), task, cfg, seed) {
            Ok((record, model, csv)) => {
                runs.push(record);
                best_models.push(Some(model));
                selection_csvs.push(csv);
            }
            Err(Error::Training { step, detail }) => {
                runs.push(RunRecord {
                    seed,
                    task: task.name.clone(),
                    variant: variant.into(),
                    epoch_metrics: Vec::new(),
                    best_metric: None,
                    best_epoch: None,
                    clean_acc: None,
                    noisy_acc: None,
                    selection_csv_path: None,
                    frozen_hash: format!("{:#018x}", pretrained.frozen_hash()),
                    failed: Some(format!("training error at step {step}: {detail}")),
                });
                best_models.push(None);
                selection_csvs.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Vec<f64> {
        runs.iter().filter_map(f).collect()
    };
    let metrics = Metrics {
        task: task.name.clone(),
        variant: variant.into(),
        summary_best_val: summarize(&collect(&|r| r.best_metric)),
        summary_clean: summarize(&collect(&|r| r.clean_acc)),
        summary_noisy: summarize(&collect(&|r| r.noisy_acc)),
        runs,
        timing: None,
    };
    Ok(FinetuneOutcome { metrics, best_models, selection_csvs })
}

fn finetune_single(
    pretrained: &BackboneModel,
    gate_cfg: Option<GateConfig>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RunRecord, FinetuneModel, Option<String>)> {
    let hash_before = pretrained.frozen_hash();
    let root = RngState::new(seed);
    let mut backbone_model = pretrained.clone();
    backbone_model.attach_adapters(
        cfg.lora_rank,
        cfg.lora_alpha,
        cfg.lora_init_std,
        task.classes,
        &mut root.derive(10),
    );
    let molex = match gate_cfg {
        Some(gc) => Some(MolexState::init(
            gc,
            backbone_model.layers.len(),
            backbone_model.config.dim,
            &mut root.derive(11),
        )?),
        None => None,
    };
    let learned_alpha = molex
        .as_ref()
        .map(|m| matches!(m.cfg.alpha_mode, AlphaMode::Learned(_)))
        .unwrap_or(false);
    let mut model = FinetuneModel { backbone: backbone_model, molex };

    let steps_per_epoch = task.train_size.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = Schedule::new(total_steps, cfg.warmup_ratio, cfg.lr);
    let mut opt = Optimizer::new(Default::default());
    let mut batch_rng = root.derive(12);

    let mut epoch_metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, FinetuneModel)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        for _ in 0..steps_per_epoch {
            step += 1;
            let indices: Vec<usize> =
                (0..cfg.batch_size).map(|_| batch_rng.next_range(task.train_size)).collect();
            let batch = task.batch(Split::Train, &indices);
            let (loss, grads, _) = batch_grads(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training { step, detail: format!("diverged (loss {loss})") });
            }
            if !grads.is_finite() {
                return Err(Error::Training { step, detail: "non-finite gradient".into() });
            }
            let shape = schedule.shape_at(step);
            let lr = cfg.lr * shape;
            let gate_lr = cfg.gate_lr * shape;
            let mut updates = Vec::new();
            for (name, p) in model.named_params_mut() {
                if !is_trainable_name(&name) {
                    continue;
                }
                if name == "alpha" && !learned_alpha {
                    continue;
                }
                let Some(g) = grads.get(&name) else { continue };
                let setting = if is_gate_name(&name) {
                    GroupSetting { lr: gate_lr, weight_decay: cfg.gate_weight_decay }
                } else {
                    GroupSetting { lr, weight_decay: cfg.weight_decay }
                };
                updates.push((name.clone(), p, g, setting));
            }
            opt.apply(updates)?;
        }
        let val = evaluate(&model, task, Split::Val, None)?;
        epoch_metrics.push(val);
        if best.as_ref().map_or(true, |(b, _, _)| val > *b) {
            best = Some((val, epoch, model.clone()));
        }
    }

    let (best_val, best_epoch, best_model) = best.expect("at least one epoch");
    let mut stats = SelectionStats::new(best_model.backbone.layers.len());
    let clean_acc = if best_model.molex.is_some() {
        evaluate(&best_model, task, Split::Test, Some(&mut stats))?
    } else {
        evaluate(&best_model, task, Split::Test, None)?
    };
    let noisy_acc =
        evaluate_noisy(&best_model, task, Split::Test, cfg.noise_sigma, cfg.eval_seed)?;
    let selection_csv = if best_model.molex.is_some() {
        Some(export_selection_stats(&stats)?)
    } else {
        None
    };

    let hash_after = best_model.backbone.frozen_hash();
    if hash_before != hash_after {
        return Err(Error::Protocol(format!(
            "frozen weights changed: {hash_before:#x} -> {hash_after:#x}"
        )));
    }

    let record = RunRecord {
        seed,
        task: task.name.clone(),
        variant: if best_model.molex.is_some() { "molex" } else { "baseline" }.into(),
        epoch_metrics,
        best_metric: Some(best_val),
        best_epoch: Some(best_epoch),
        clean_acc: Some(clean_acc),
        noisy_acc: Some(noisy_acc),
        selection_csv_path: None,
        frozen_hash: format!("{:#018x}", hash_after),
        failed: None,
    };
    Ok((record, best_model, selection_csv))
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub samples: usize,
    pub baseline_sec_per_sample: f64,
    pub molex_sequential_sec_per_sample: f64,
    pub molex_parallel_sec_per_sample: f64,
    pub sequential_ratio: f64,
    pub parallel_ratio: f64,
    pub param_total_baseline: usize,
    pub param_total_molex: usize,
    pub param_trainable_baseline: usize,
    pub param_trainable_molex: usize,
    pub trainable_overhead: usize,
}

/// Wall-clock per-sample inference for the plain forward, the mixed forward,
/// and the mixed forward with paired-expert threading; parameter counts and
/// the gate overhead ride along.
pub fn timing_report(
    model: &FinetuneModel,
    task: &TaskSpec,
    samples: usize,
) -> Result<TimingReport> {
    if model.molex.is_none() {
        return Err(Error::Config("timing_report needs the mixing state".into()));
    }
    let baseline = FinetuneModel { backbone: model.backbone.clone(), molex: None };
    let mut sequential = model.clone();
    if let Some(m) = &mut sequential.molex {
        m.cfg.parallel_experts = false;
    }
    let mut parallel = model.clone();
    if let Some(m) = &mut parallel.molex {
        m.cfg.parallel_experts = true;
    }

    let inputs: Vec<Sample> = (0..samples.max(1))
        .map(|i| task.sample(Split::Test, i % task.split_size(Split::Test)))
        .collect();
    let time_model = |m: &FinetuneModel| -> Result<f64> {
        for s in inputs.iter().take(20) {
            predict(m, &s.tokens, None)?;
        }
        let start = Instant::now();
        let mut sink = 0usize;
        for s in &inputs {
            sink = sink.wrapping_add(predict(m, &s.tokens, None)?);
        }
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(sink);
        Ok(elapsed / inputs.len() as f64)
    };

    let base_t = time_model(&baseline)?;
    let seq_t = time_model(&sequential)?;
    let par_t = time_model(&parallel)?;
    let trainable_baseline = param_count(&baseline, true);
    let trainable_molex = param_count(model, true);
    Ok(TimingReport {
        samples: inputs.len(),
        baseline_sec_per_sample: base_t,
        molex_sequential_sec_per_sample: seq_t,
        molex_parallel_sec_per_sample: par_t,
        sequential_ratio: seq_t / base_t,
        parallel_ratio: par_t / base_t,
        param_total_baseline: param_count(&baseline, false),
        param_total_molex: param_count(model, false),
        param_trainable_baseline: trainable_baseline,
        param_trainable_molex: trainable_molex,
        trainable_overhead: trainable_molex - trainable_baseline,
    })
}
