//! Run configuration: INI-style sections of `key = value` pairs, with a JSON
//! alternative, `--set section.key=value` overrides, and a canonical
//! serialization that parses back to the same configuration.
//!
//! Unknown sections or keys are rejected with the offending line; every key
//! has a documented default (see `help_text`).

use molex_core::backbone::{BackboneConfig, BlockKind, PretrainConfig};
use molex_core::error::{Error, Result};
use molex_core::molex::{AggScope, AlphaMode, BatchAgg, GateConfig, GateKind, GradMode};
use molex_core::numerics::ActivationKind;
use molex_core::training::task::{Grouping, TaskKind, TaskSpec};
use molex_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [backbone]
    pub backbone_layers: usize,
    pub backbone_dim: usize,
    pub backbone_block: String,
    pub backbone_hidden: usize,
    pub backbone_activation: String,
    pub backbone_classes: usize,
    pub backbone_head_hidden: usize,
    pub backbone_seq_len: usize,
    pub backbone_vocab: usize,
    // [lora]
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_std: f64,
    // [molex]
    pub molex_enabled: bool,
    pub molex_gate: String,
    pub molex_proj_dim: usize,
    pub molex_temperature: f64,
    pub molex_sigmoid: bool,
    pub molex_shared: bool,
    pub molex_agg: String,
    pub molex_scope: String,
    pub molex_k: usize,
    pub molex_alpha_mode: String,
    pub molex_alpha: f64,
    pub molex_load_balance: f64,
    pub molex_grad_mode: String,
    // [train]
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_gate_lr: f64,
    pub train_gate_weight_decay: f64,
    pub train_warmup_ratio: f64,
    pub train_noise_sigma: f64,
    pub train_seeds: usize,
    pub train_eval_seed: u64,
    pub train_pretrain_steps: usize,
    pub train_pretrain_batch: usize,
    pub train_pretrain_lr: f64,
    pub train_pretrain_seed: u64,
    pub train_pretrain_ckpt: String,
    pub train_eval_ckpt: String,
    pub train_timing_samples: usize,
    // [task]
    pub task_name: String,
    pub task_classes: usize,
    pub task_seed: u64,
    pub task_train_size: usize,
    pub task_val_size: usize,
    pub task_test_size: usize,
    pub task_majority_bias: f64,
    pub task_motif_count: usize,
    pub task_transfer_target: String,
    // [probe]
    pub probe_samples: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch_size: usize,
    pub probe_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone_layers: 4,
            backbone_dim: 32,
            backbone_block: "mlp".into(),
            backbone_hidden: 64,
            backbone_activation: "gelu".into(),
            backbone_classes: 4,
            backbone_head_hidden: 32,
            backbone_seq_len: 16,
            backbone_vocab: 64,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_init_std: 0.02,
            molex_enabled: true,
            molex_gate: "linear".into(),
            molex_proj_dim: 16,
            molex_temperature: 1.0,
            molex_sigmoid: false,
            molex_shared: true,
            molex_agg: "mode".into(),
            molex_scope: "sequence".into(),
            molex_k: 1,
            molex_alpha_mode: "fixed".into(),
            molex_alpha: 0.95,
            molex_load_balance: 0.001,
            molex_grad_mode: "onehot".into(),
            train_epochs: 16,
            train_batch_size: 16,
            train_lr: 0.005,
            train_weight_decay: 0.01,
            train_gate_lr: 0.1,
            train_gate_weight_decay: 0.01,
            train_warmup_ratio: 0.06,
            train_noise_sigma: 0.6,
            train_seeds: 5,
            train_eval_seed: 9999,
            train_pretrain_steps: 2000,
            train_pretrain_batch: 16,
            train_pretrain_lr: 0.003,
            train_pretrain_seed: 0,
            train_pretrain_ckpt: String::new(),
            train_eval_ckpt: String::new(),
            train_timing_samples: 1000,
            task_name: "pairs".into(),
            task_classes: 4,
            task_seed: 123,
            task_train_size: 512,
            task_val_size: 128,
            task_test_size: 256,
            task_majority_bias: 0.55,
            task_motif_count: 8,
            task_transfer_target: String::new(),
            probe_samples: 240,
            probe_epochs: 25,
            probe_lr: 0.01,
            probe_batch_size: 32,
            probe_seed: 7,
        }
    }
}

/// (section, key, doc) for every configuration entry, in canonical order.
const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("backbone", "layers", "number of residual layers T"),
    ("backbone", "dim", "model width D"),
    ("backbone", "block", "block kind: linear | mlp"),
    ("backbone", "hidden", "mlp hidden width (mlp blocks only)"),
    ("backbone", "activation", "mlp nonlinearity: relu | gelu | sigmoid | identity"),
    ("backbone", "classes", "class count of the base (pretraining) task head"),
    ("backbone", "head_hidden", "task head hidden width (0 = linear head)"),
    ("backbone", "seq_len", "tokens per sequence N"),
    ("backbone", "vocab", "vocabulary size V"),
    ("lora", "rank", "low-rank adapter rank r"),
    ("lora", "alpha", "adapter scale numerator (effective scale = alpha / rank)"),
    ("lora", "init_std", "gaussian std for the adapter A matrices"),
    ("molex", "enabled", "mix layer experts (false = plain adapter baseline)"),
    ("molex", "gate", "router kind: linear | cosine"),
    ("molex", "proj_dim", "cosine gate projection width"),
    ("molex", "temperature", "cosine gate temperature"),
    ("molex", "sigmoid", "apply a sigmoid to gate scores before top-k"),
    ("molex", "shared", "one gate/mixing weight for all layers vs per-layer"),
    ("molex", "agg", "routing aggregation: mode | mean | per_token"),
    ("molex", "scope", "decision granularity during training: sequence | batch"),
    ("molex", "k", "experts selected per decision"),
    ("molex", "alpha_mode", "mixing weight: fixed | learned"),
    ("molex", "alpha", "mixing weight value (initial value when learned)"),
    ("molex", "load_balance", "load-balancing loss coefficient"),
    ("molex", "grad_mode", "router gradient path: onehot | prob_weighted"),
    ("train", "epochs", "fine-tuning epochs"),
    ("train", "batch_size", "fine-tuning batch size"),
    ("train", "lr", "peak learning rate for adapters + head"),
    ("train", "weight_decay", "decoupled weight decay for adapters + head"),
    ("train", "gate_lr", "peak learning rate for the gate group"),
    ("train", "gate_weight_decay", "decoupled weight decay for the gate group"),
    ("train", "warmup_ratio", "linear warmup fraction of total steps"),
    ("train", "noise_sigma", "gaussian noise scale for the robustness evaluation"),
    ("train", "seeds", "number of seeds in a sweep (starting from --seed)"),
    ("train", "eval_seed", "seed of the noise stream used at evaluation"),
    ("train", "pretrain_steps", "base-task training steps"),
    ("train", "pretrain_batch", "base-task batch size"),
    ("train", "pretrain_lr", "base-task peak learning rate"),
    ("train", "pretrain_seed", "seed of the base-task training run"),
    ("train", "pretrain_ckpt", "checkpoint directory to load instead of pretraining"),
    ("train", "eval_ckpt", "checkpoint directory for eval/probe/certify"),
    ("train", "timing_samples", "samples per timing measurement"),
    ("task", "name", "downstream task: majority | pairs | pairs_shifted"),
    ("task", "classes", "downstream class count (majority task)"),
    ("task", "seed", "task generator seed"),
    ("task", "train_size", "training split size"),
    ("task", "val_size", "validation split size"),
    ("task", "test_size", "test split size"),
    ("task", "majority_bias", "token bias toward the label group (majority task)"),
    ("task", "motif_count", "motif library size (pair tasks)"),
    ("task", "transfer_target", "task evaluated zero-shot after fine-tuning (optional)"),
    ("probe", "samples", "probe dataset size per property"),
    ("probe", "epochs", "probe classifier training epochs"),
    ("probe", "lr", "probe classifier learning rate"),
    ("probe", "batch_size", "probe classifier batch size"),
    ("probe", "seed", "probe dataset/classifier seed"),
];

impl RunConfig {
    fn get(&self, section: &str, key: &str) -> Option<String> {
        macro_rules! v {
            ($field:expr) => {
                Some($field.to_string())
            };
        }
        match (section, key) {
            ("backbone", "layers") => v!(self.backbone_layers),
            ("backbone", "dim") => v!(self.backbone_dim),
            ("backbone", "block") => v!(self.backbone_block),
            ("backbone", "hidden") => v!(self.backbone_hidden),
            ("backbone", "activation") => v!(self.backbone_activation),
            ("backbone", "classes") => v!(self.backbone_classes),
            ("backbone", "head_hidden") => v!(self.backbone_head_hidden),
            ("backbone", "seq_len") => v!(self.backbone_seq_len),
            ("backbone", "vocab") => v!(self.backbone_vocab),
            ("lora", "rank") => v!(self.lora_rank),
            ("lora", "alpha") => v!(self.lora_alpha),
            ("lora", "init_std") => v!(self.lora_init_std),
            ("molex", "enabled") => v!(self.molex_enabled),
            ("molex", "gate") => v!(self.molex_gate),
            ("molex", "proj_dim") => v!(self.molex_proj_dim),
            ("molex", "temperature") => v!(self.molex_temperature),
            ("molex", "sigmoid") => v!(self.molex_sigmoid),
            ("molex", "shared") => v!(self.molex_shared),
            ("molex", "agg") => v!(self.molex_agg),
            ("molex", "scope") => v!(self.molex_scope),
            ("molex", "k") => v!(self.molex_k),
            ("molex", "alpha_mode") => v!(self.molex_alpha_mode),
            ("molex", "alpha") => v!(self.molex_alpha),
            ("molex", "load_balance") => v!(self.molex_load_balance),
            ("molex", "grad_mode") => v!(self.molex_grad_mode),
            ("train", "epochs") => v!(self.train_epochs),
            ("train", "batch_size") => v!(self.train_batch_size),
            ("train", "lr") => v!(self.train_lr),
            ("train", "weight_decay") => v!(self.train_weight_decay),
            ("train", "gate_lr") => v!(self.train_gate_lr),
            ("train", "gate_weight_decay") => v!(self.train_gate_weight_decay),
            ("train", "warmup_ratio") => v!(self.train_warmup_ratio),
            ("train", "noise_sigma") => v!(self.train_noise_sigma),
            ("train", "seeds") => v!(self.train_seeds),
            ("train", "eval_seed") => v!(self.train_eval_seed),
            ("train", "pretrain_steps") => v!(self.train_pretrain_steps),
            ("train", "pretrain_batch") => v!(self.train_pretrain_batch),
            ("train", "pretrain_lr") => v!(self.train_pretrain_lr),
            ("train", "pretrain_seed") => v!(self.train_pretrain_seed),
            ("train", "pretrain_ckpt") => v!(self.train_pretrain_ckpt),
            ("train", "eval_ckpt") => v!(self.train_eval_ckpt),
            ("train", "timing_samples") => v!(self.train_timing_samples),
            ("task", "name") => v!(self.task_name),
            ("task", "classes") => v!(self.task_classes),
            ("task", "seed") => v!(self.task_seed),
            ("task", "train_size") => v!(self.task_train_size),
            ("task", "val_size") => v!(self.task_val_size),
            ("task", "test_size") => v!(self.task_test_size),
            ("task", "majority_bias") => v!(self.task_majority_bias),
            ("task", "motif_count") => v!(self.task_motif_count),
            ("task", "transfer_target") => v!(self.task_transfer_target),
            ("probe", "samples") => v!(self.probe_samples),
            ("probe", "epochs") => v!(self.probe_epochs),
            ("probe", "lr") => v!(self.probe_lr),
            ("probe", "batch_size") => v!(self.probe_batch_size),
            ("probe", "seed") => v!(self.probe_seed),
            _ => None,
        }
    }

    /// Set one key from its string form; the single entry point used by the
    /// INI parser, the JSON loader, and `--set` overrides.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Config(format!("bad value {value:?} for {section}.{key}"))
            })
        }
        let value = value.trim();
        match (section, key) {
            ("backbone", "layers") => self.backbone_layers = parse(section, key, value)?,
            ("backbone", "dim") => self.backbone_dim = parse(section, key, value)?,
            ("backbone", "block") => self.backbone_block = value.into(),
            ("backbone", "hidden") => self.backbone_hidden = parse(section, key, value)?,
            ("backbone", "activation") => self.backbone_activation = value.into(),
            ("backbone", "classes") => self.backbone_classes = parse(section, key, value)?,
            ("backbone", "head_hidden") => self.backbone_head_hidden = parse(section, key, value)?,
            ("backbone", "seq_len") => self.backbone_seq_len = parse(section, key, value)?,
            ("backbone", "vocab") => self.backbone_vocab = parse(section, key, value)?,
            ("lora", "rank") => self.lora_rank = parse(section, key, value)?,
            ("lora", "alpha") => self.lora_alpha = parse(section, key, value)?,
            ("lora", "init_std") => self.lora_init_std = parse(section, key, value)?,
            ("molex", "enabled") => self.molex_enabled = parse(section, key, value)?,
            ("molex", "gate") => self.molex_gate = value.into(),
            ("molex", "proj_dim") => self.molex_proj_dim = parse(section, key, value)?,
            ("molex", "temperature") => self.molex_temperature = parse(section, key, value)?,
            ("molex", "sigmoid") => self.molex_sigmoid = parse(section, key, value)?,
            ("molex", "shared") => self.molex_shared = parse(section, key, value)?,
            ("molex", "agg") => self.molex_agg = value.into(),
            ("molex", "scope") => self.molex_scope = value.into(),
            ("molex", "k") => self.molex_k = parse(section, key, value)?,
            ("molex", "alpha_mode") => self.molex_alpha_mode = value.into(),
            ("molex", "alpha") => self.molex_alpha = parse(section, key, value)?,
            ("molex", "load_balance") => self.molex_load_balance = parse(section, key, value)?,
            ("molex", "grad_mode") => self.molex_grad_mode = value.into(),
            ("train", "epochs") => self.train_epochs = parse(section, key, value)?,
            ("train", "batch_size") => self.train_batch_size = parse(section, key, value)?,
            ("train", "lr") => self.train_lr = parse(section, key, value)?,
            ("train", "weight_decay") => self.train_weight_decay = parse(section, key, value)?,
            ("train", "gate_lr") => self.train_gate_lr = parse(section, key, value)?,
            ("train", "gate_weight_decay") => {
                self.train_gate_weight_decay = parse(section, key, value)?
            }
            ("train", "warmup_ratio") => self.train_warmup_ratio = parse(section, key, value)?,
            ("train", "noise_sigma") => self.train_noise_sigma = parse(section, key, value)?,
            ("train", "seeds") => self.train_seeds = parse(section, key, value)?,
            ("train", "eval_seed") => self.train_eval_seed = parse(section, key, value)?,
            ("train", "pretrain_steps") => self.train_pretrain_steps = parse(section, key, value)?,
            ("train", "pretrain_batch") => self.train_pretrain_batch = parse(section, key, value)?,
            ("train", "pretrain_lr") => self.train_pretrain_lr = parse(section, key, value)?,
            ("train", "pretrain_seed") => self.train_pretrain_seed = parse(section, key, value)?,
            ("train", "pretrain_ckpt") => self.train_pretrain_ckpt = value.into(),
            ("train", "eval_ckpt") => self.train_eval_ckpt = value.into(),
            ("train", "timing_samples") => self.train_timing_samples = parse(section, key, value)?,
            ("task", "name") => self.task_name = value.into(),
            ("task", "classes") => self.task_classes = parse(section, key, value)?,
            ("task", "seed") => self.task_seed = parse(section, key, value)?,
            ("task", "train_size") => self.task_train_size = parse(section, key, value)?,
            ("task", "val_size") => self.task_val_size = parse(section, key, value)?,
            ("task", "test_size") => self.task_test_size = parse(section, key, value)?,
            ("task", "majority_bias") => self.task_majority_bias = parse(section, key, value)?,
            ("task", "motif_count") => self.task_motif_count = parse(section, key, value)?,
            ("task", "transfer_target") => self.task_transfer_target = value.into(),
            ("probe", "samples") => self.probe_samples = parse(section, key, value)?,
            ("probe", "epochs") => self.probe_epochs = parse(section, key, value)?,
            ("probe", "lr") => self.probe_lr = parse(section, key, value)?,
            ("probe", "batch_size") => self.probe_batch_size = parse(section, key, value)?,
            ("probe", "seed") => self.probe_seed = parse(section, key, value)?,
            _ => return Err(Error::Config(format!("unknown key {section}.{key}"))),
        }
        Ok(())
    }

    pub fn parse_ini(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !KEY_DOCS.iter().any(|(s, _, _)| *s == name) {
                    return Err(Error::Config(format!(
                        "line {lineno}: unknown section [{name}]"
                    )));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected 'key = value', got {line:?}"))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {lineno}: key outside any section")));
            }
            cfg.set(&section, key.trim(), value)
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        Ok(cfg)
    }

    /// JSON alternative: `{"section": {"key": value, ...}, ...}`. Values may
    /// be strings, numbers, or booleans.
    pub fn parse_json(text: &str) -> Result<RunConfig> {
        let root: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad JSON config: {e}")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
        let mut cfg = RunConfig::default();
        for (section, entries) in obj {
            let entries = entries.as_object().ok_or_else(|| {
                Error::Config(format!("section {section:?} must be an object"))
            })?;
            for (key, value) in entries {
                let as_str = match value {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    serde_json::Value::Number(n) => n.to_string(),
                    other => {
                        return Err(Error::Config(format!(
                            "{section}.{key}: unsupported JSON value {other}"
                        )))
                    }
                };
                cfg.set(section, key, &as_str)?;
            }
        }
        Ok(cfg)
    }

    /// Canonical INI rendering: every key, in the documented order.
    /// `parse_ini(to_ini(c)) == c` for any valid configuration.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, _) in KEY_DOCS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.get(section, key).unwrap()));
        }
        out
    }

    pub fn apply_sets(&mut self, sets: &[(String, String)]) -> Result<()> {
        for (path, value) in sets {
            let (section, key) = path.split_once('.').ok_or_else(|| {
                Error::Config(format!("--set needs section.key=value, got {path:?}"))
            })?;
            self.set(section, key, value)?;
        }
        Ok(())
    }

    // -- conversions into the library's config types ------------------------

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let block = match self.backbone_block.as_str() {
            "linear" => BlockKind::Linear,
            "mlp" => BlockKind::Mlp {
                hidden: self.backbone_hidden,
                activation: ActivationKind::parse(&self.backbone_activation)?,
            },
            other => return Err(Error::Config(format!("backbone.block: unknown kind {other:?}"))),
        };
        let cfg = BackboneConfig {
            layers: self.backbone_layers,
            dim: self.backbone_dim,
            block,
            classes: self.backbone_classes,
            head_hidden: self.backbone_head_hidden,
            seq_len: self.backbone_seq_len,
            vocab: self.backbone_vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gate_config(&self, parallel_experts: bool) -> Result<Option<GateConfig>> {
        if !self.molex_enabled {
            return Ok(None);
        }
        let kind = match self.molex_gate.as_str() {
            "linear" => GateKind::Linear,
            "cosine" => GateKind::Cosine {
                proj_dim: self.molex_proj_dim,
                temperature: self.molex_temperature,
            },
            other => return Err(Error::Config(format!("molex.gate: unknown kind {other:?}"))),
        };
        let cfg = GateConfig {
            kind,
            sigmoid_scores: self.molex_sigmoid,
            shared: self.molex_shared,
            batch_agg: match self.molex_agg.as_str() {
                "mode" => BatchAgg::Mode,
                "mean" => BatchAgg::Mean,
                "per_token" => BatchAgg::PerToken,
                other => {
                    return Err(Error::Config(format!("molex.agg: unknown mode {other:?}")))
                }
            },
            agg_scope: match self.molex_scope.as_str() {
                "sequence" => AggScope::Sequence,
                "batch" => AggScope::Batch,
                other => {
                    return Err(Error::Config(format!("molex.scope: unknown scope {other:?}")))
                }
            },
            k: self.molex_k,
            alpha_mode: match self.molex_alpha_mode.as_str() {
                "fixed" => AlphaMode::Fixed(self.molex_alpha),
                "learned" => AlphaMode::Learned(self.molex_alpha),
                other => {
                    return Err(Error::Config(format!("molex.alpha_mode: unknown {other:?}")))
                }
            },
            load_balance_coeff: self.molex_load_balance,
            grad_mode: match self.molex_grad_mode.as_str() {
                "onehot" => GradMode::OneHot,
                "prob_weighted" => GradMode::ProbWeighted,
                other => {
                    return Err(Error::Config(format!("molex.grad_mode: unknown {other:?}")))
                }
            },
            parallel_experts,
        };
        cfg.validate(self.backbone_layers)?;
        Ok(Some(cfg))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            lr: self.train_lr,
            weight_decay: self.train_weight_decay,
            gate_lr: self.train_gate_lr,
            gate_weight_decay: self.train_gate_weight_decay,
            warmup_ratio: self.train_warmup_ratio,
            noise_sigma: self.train_noise_sigma,
            eval_seed: self.train_eval_seed,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            lora_init_std: self.lora_init_std,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.train_pretrain_steps,
            batch_size: self.train_pretrain_batch,
            lr: self.train_pretrain_lr,
            warmup_ratio: self.train_warmup_ratio,
        }
    }

    /// The base task the backbone is pretrained on: contiguous-block
    /// majority classification with the backbone's own class count.
    pub fn base_task(&self) -> TaskSpec {
        TaskSpec {
            name: "base".into(),
            seed: self.task_seed ^ 0xBA5E,
            kind: TaskKind::Majority { grouping: Grouping::Contiguous },
            classes: self.backbone_classes,
            vocab: self.backbone_vocab,
            seq_len: self.backbone_seq_len,
            train_size: self.task_train_size,
            val_size: self.task_val_size,
            test_size: self.task_test_size,
            majority_bias: self.task_majority_bias,
            motif_count: self.task_motif_count,
        }
    }

    fn task_by_name(&self, name: &str) -> Result<TaskSpec> {
        let (kind, classes) = match name {
            "majority" => (TaskKind::Majority { grouping: Grouping::Modulo }, self.task_classes),
            "pairs" => (TaskKind::PairPattern { shifted: false }, 2),
            "pairs_shifted" => (TaskKind::PairPattern { shifted: true }, 2),
            other => return Err(Error::Config(format!("task.name: unknown task {other:?}"))),
        };
        let spec = TaskSpec {
            name: name.into(),
            seed: self.task_seed,
            kind,
            classes,
            vocab: self.backbone_vocab,
            seq_len: self.backbone_seq_len,
            train_size: self.task_train_size,
            val_size: self.task_val_size,
            test_size: self.task_test_size,
            majority_bias: self.task_majority_bias,
            motif_count: self.task_motif_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn downstream_task(&self) -> Result<TaskSpec> {
        self.task_by_name(&self.task_name.clone())
    }

    pub fn transfer_task(&self) -> Result<Option<TaskSpec>> {
        if self.task_transfer_target.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.task_by_name(&self.task_transfer_target.clone())?))
    }
}

/// Key listing with defaults and one-line docs, embedded in `--help`.
pub fn help_text() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("configuration keys (defaults in parentheses):\n");
    let mut current = "";
    for (section, key, doc) in KEY_DOCS {
        if *section != current {
            out.push_str(&format!("\n  [{section}]\n"));
            current = section;
        }
        let default = defaults.get(section, key).unwrap();
        let default = if default.is_empty() { "<empty>".to_string() } else { default };
        out.push_str(&format!("    {key} = {default}\n        {doc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip_is_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.molex_alpha = 0.875;
        cfg.train_lr = 1.25e-3;
        cfg.task_name = "pairs".into();
        let ini = cfg.to_ini();
        let parsed = RunConfig::parse_ini(&ini).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(ini, parsed.to_ini());
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = RunConfig::parse_ini("[molex]\nnonsense = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("molex.nonsense"), "{msg}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        let err = RunConfig::parse_ini("[nope]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"));
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = RunConfig::parse_ini("[train]\nepochs = banana\n").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn json_input_matches_ini() {
        let json = r#"{"molex": {"enabled": false, "alpha": 0.9}, "task": {"name": "pairs"}}"#;
        let from_json = RunConfig::parse_json(json).unwrap();
        let from_ini =
            RunConfig::parse_ini("[molex]\nenabled = false\nalpha = 0.9\n[task]\nname = pairs\n")
                .unwrap();
        assert_eq!(from_json, from_ini);
    }

    #[test]
    fn sets_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_sets(&[("molex.enabled".into(), "false".into())]).unwrap();
        assert!(!cfg.molex_enabled);
        assert!(cfg.apply_sets(&[("molex.bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn help_documents_every_key() {
        let help = help_text();
        let ini = RunConfig::default().to_ini();
        for line in ini.lines() {
            if let Some((key, _)) = line.split_once('=') {
                assert!(help.contains(key.trim()), "help missing key {key}");
            }
        }
    }

    #[test]
    fn linear_block_forces_identity_activation() {
        let mut cfg = RunConfig::default();
        cfg.backbone_block = "linear".into();
        cfg.backbone_activation = "gelu".into(); // ignored for linear blocks
        let bc = cfg.backbone_config().unwrap();
        assert_eq!(bc.block.activation(), ActivationKind::Identity);
    }
}
