//! Checkpoint layout: a directory holding `manifest.cfg` (key=value lines)
//! and `params/<name>.mat`, one text matrix per named parameter. Parameter
//! names follow the `named_params` traversal (`layer.{t}.w1`,
//! `layer.{t}.lora.w1.a`, `router.linear.w`, `head.w`, ...).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneModel, BlockKind, Head, LayerAdapters, LayerWeights, LoraAdapter};
use crate::error::{Error, Result};
use crate::molex::{AggScope, AlphaMode, BatchAgg, GateConfig, GateKind, GradMode, MolexState, RouterParams};
use crate::numerics::ActivationKind;
use crate::training::FinetuneModel;
use crate::Mat;

pub fn save(dir: &Path, model: &FinetuneModel) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    fs::write(dir.join("manifest.cfg"), manifest_text(model))?;
    for (name, m) in model.named_params() {
        fs::write(params_dir.join(format!("{name}.mat")), m.to_text())?;
    }
    Ok(())
}

fn manifest_text(model: &FinetuneModel) -> String {
    let b = &model.backbone;
    let mut s = String::new();
    let cfg = &b.config;
    s.push_str(&format!("backbone.layers={}\n", cfg.layers));
    s.push_str(&format!("backbone.dim={}\n", cfg.dim));
    match cfg.block {
        BlockKind::Linear => {
            s.push_str("backbone.block=linear\n");
        }
        BlockKind::Mlp { hidden, activation } => {
            s.push_str("backbone.block=mlp\n");
            s.push_str(&format!("backbone.hidden={hidden}\n"));
            s.push_str(&format!("backbone.activation={}\n", activation.name()));
        }
    }
    s.push_str(&format!("backbone.classes={}\n", cfg.classes));
    s.push_str(&format!("backbone.head_hidden={}\n", cfg.head_hidden));
    s.push_str(&format!("backbone.seq_len={}\n", cfg.seq_len));
    s.push_str(&format!("backbone.vocab={}\n", cfg.vocab));
    s.push_str(&format!("backbone.frozen={}\n", b.frozen));
    s.push_str(&format!("head.classes={}\n", b.head.classes()));
    s.push_str(&format!("head.hidden={}\n", b.head.hidden()));
    match b.adapters.as_ref().and_then(|a| a.first()) {
        Some(first) => {
            let ad = match first {
                LayerAdapters::Linear { w } => w,
                LayerAdapters::Mlp { w1, .. } => w1,
            };
            s.push_str("lora.enabled=true\n");
            s.push_str(&format!("lora.rank={}\n", ad.rank));
            s.push_str(&format!("lora.scale={}\n", ad.scale));
        }
        None => s.push_str("lora.enabled=false\n"),
    }
    match &model.molex {
        None => s.push_str("molex.enabled=false\n"),
        Some(m) => {
            s.push_str("molex.enabled=true\n");
            let c = &m.cfg;
            match c.kind {
                GateKind::Linear => s.push_str("molex.gate=linear\n"),
                GateKind::Cosine { proj_dim, temperature } => {
                    s.push_str("molex.gate=cosine\n");
                    s.push_str(&format!("molex.proj_dim={proj_dim}\n"));
                    s.push_str(&format!("molex.temperature={temperature}\n"));
                }
            }
            s.push_str(&format!("molex.sigmoid={}\n", c.sigmoid_scores));
            s.push_str(&format!("molex.shared={}\n", c.shared));
            s.push_str(&format!(
                "molex.agg={}\n",
                match c.batch_agg {
                    BatchAgg::Mode => "mode",
                    BatchAgg::Mean => "mean",
                    BatchAgg::PerToken => "per_token",
                }
            ));
            s.push_str(&format!(
                "molex.scope={}\n",
                match c.agg_scope {
                    AggScope::Sequence => "sequence",
                    AggScope::Batch => "batch",
                }
            ));
            s.push_str(&format!("molex.k={}\n", c.k));
            match c.alpha_mode {
                AlphaMode::Fixed(a) => {
                    s.push_str("molex.alpha_mode=fixed\n");
                    s.push_str(&format!("molex.alpha={a}\n"));
                }
                AlphaMode::Learned(a) => {
                    s.push_str("molex.alpha_mode=learned\n");
                    s.push_str(&format!("molex.alpha={a}\n"));
                }
            }
            s.push_str(&format!("molex.load_balance={}\n", c.load_balance_coeff));
            s.push_str(&format!(
                "molex.grad_mode={}\n",
                match c.grad_mode {
                    GradMode::OneHot => "onehot",
                    GradMode::ProbWeighted => "prob_weighted",
                }
            ));
        }
    }
    s.push_str(&format!("frozen_hash={:#018x}\n", b.frozen_hash()));
    s
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("manifest line {}: missing '='", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest(map))
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Input(format!("manifest missing key {key:?}")))
    }

    fn parse_val<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Input(format!("manifest key {key:?} has a bad value")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Input(format!("manifest key {key:?}: bad bool {other:?}"))),
        }
    }
}

pub fn load(dir: &Path) -> Result<FinetuneModel> {
    let manifest_path = dir.join("manifest.cfg");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?;
    let man = Manifest::parse(&text)?;

    let block = match man.get("backbone.block")? {
        "linear" => BlockKind::Linear,
        "mlp" => BlockKind::Mlp {
            hidden: man.parse_val("backbone.hidden")?,
            activation: ActivationKind::parse(man.get("backbone.activation")?)?,
        },
        other => return Err(Error::Input(format!("unknown block kind {other:?}"))),
    };
    let config = BackboneConfig {
        layers: man.parse_val("backbone.layers")?,
        dim: man.parse_val("backbone.dim")?,
        block,
        classes: man.parse_val("backbone.classes")?,
        head_hidden: man.parse_val("backbone.head_hidden")?,
        seq_len: man.parse_val("backbone.seq_len")?,
        vocab: man.parse_val("backbone.vocab")?,
    };

    let read_mat = |name: &str| -> Result<Mat> {
        let path = dir.join("params").join(format!("{name}.mat"));
        let text =
            fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Mat::from_text(&text)
    };

    let embedding = read_mat("embedding")?;
    let mut layers = Vec::with_capacity(config.layers);
    for t in 0..config.layers {
        layers.push(match config.block {
            BlockKind::Linear => LayerWeights::Linear { w: read_mat(&format!("layer.{t}.w"))? },
            BlockKind::Mlp { .. } => LayerWeights::Mlp {
                w1: read_mat(&format!("layer.{t}.w1"))?,
                w2: read_mat(&format!("layer.{t}.w2"))?,
            },
        });
    }
    let adapters = if man.flag("lora.enabled")? {
        let rank: usize = man.parse_val("lora.rank")?;
        let scale: f64 = man.parse_val("lora.scale")?;
        let mut list = Vec::with_capacity(config.layers);
        for t in 0..config.layers {
            list.push(match config.block {
                BlockKind::Linear => LayerAdapters::Linear {
                    w: LoraAdapter {
                        a: read_mat(&format!("layer.{t}.lora.w.a"))?,
                        b: read_mat(&format!("layer.{t}.lora.w.b"))?,
                        rank,
                        scale,
                    },
                },
                BlockKind::Mlp { .. } => LayerAdapters::Mlp {
                    w1: LoraAdapter {
                        a: read_mat(&format!("layer.{t}.lora.w1.a"))?,
                        b: read_mat(&format!("layer.{t}.lora.w1.b"))?,
                        rank,
                        scale,
                    },
                    w2: LoraAdapter {
                        a: read_mat(&format!("layer.{t}.lora.w2.a"))?,
                        b: read_mat(&format!("layer.{t}.lora.w2.b"))?,
                        rank,
                        scale,
                    },
                },
            });
        }
        Some(list)
    } else {
        None
    };
    let head_hidden: usize = man.parse_val("head.hidden")?;
    let head = if head_hidden == 0 {
        Head {
            w1: None,
            b1: None,
            w: read_mat("head.w")?,
            b: read_mat("head.b")?,
            activation: ActivationKind::Identity,
        }
    } else {
        Head {
            w1: Some(read_mat("head.w1")?),
            b1: Some(read_mat("head.b1")?),
            w: read_mat("head.w")?,
            b: read_mat("head.b")?,
            activation: ActivationKind::Gelu,
        }
    };
    let backbone = BackboneModel {
        config,
        embedding,
        layers,
        adapters,
        head,
        frozen: man.flag("backbone.frozen")?,
    };

    let molex = if man.flag("molex.enabled")? {
        let kind = match man.get("molex.gate")? {
            "linear" => GateKind::Linear,
            "cosine" => GateKind::Cosine {
                proj_dim: man.parse_val("molex.proj_dim")?,
                temperature: man.parse_val("molex.temperature")?,
            },
            other => return Err(Error::Input(format!("unknown gate kind {other:?}"))),
        };
        let alpha0: f64 = man.parse_val("molex.alpha")?;
        let cfg = GateConfig {
            kind,
            sigmoid_scores: man.flag("molex.sigmoid")?,
            shared: man.flag("molex.shared")?,
            batch_agg: match man.get("molex.agg")? {
                "mode" => BatchAgg::Mode,
                "mean" => BatchAgg::Mean,
                "per_token" => BatchAgg::PerToken,
                other => return Err(Error::Input(format!("unknown aggregation {other:?}"))),
            },
            agg_scope: match man.get("molex.scope")? {
                "sequence" => AggScope::Sequence,
                "batch" => AggScope::Batch,
                other => return Err(Error::Input(format!("unknown scope {other:?}"))),
            },
            k: man.parse_val("molex.k")?,
            alpha_mode: match man.get("molex.alpha_mode")? {
                "fixed" => AlphaMode::Fixed(alpha0),
                "learned" => AlphaMode::Learned(alpha0),
                other => return Err(Error::Input(format!("unknown alpha mode {other:?}"))),
            },
            load_balance_coeff: man.parse_val("molex.load_balance")?,
            grad_mode: match man.get("molex.grad_mode")? {
                "onehot" => GradMode::OneHot,
                "prob_weighted" => GradMode::ProbWeighted,
                other => return Err(Error::Input(format!("unknown grad mode {other:?}"))),
            },
            parallel_experts: false,
        };
        let n_routers = if cfg.shared { 1 } else { backbone.layers.len() };
        let mut routers = Vec::with_capacity(n_routers);
        for i in 0..n_routers {
            let prefix = if cfg.shared { "router".to_string() } else { format!("router.{i}") };
            routers.push(match cfg.kind {
                GateKind::Linear => RouterParams::Linear {
                    w: read_mat(&format!("{prefix}.linear.w"))?,
                    b: read_mat(&format!("{prefix}.linear.b"))?,
                },
                GateKind::Cosine { temperature, .. } => RouterParams::Cosine {
                    p: read_mat(&format!("{prefix}.cosine.p"))?,
                    e: read_mat(&format!("{prefix}.cosine.e"))?,
                    temperature,
                },
            });
        }
        let alpha = read_mat("alpha")?;
        Some(MolexState { cfg, routers, alpha })
    } else {
        None
    };

    let model = FinetuneModel { backbone, molex };
    // integrity check against the stored frozen hash
    let stored = man.get("frozen_hash")?;
    let actual = format!("{:#018x}", model.backbone.frozen_hash());
    if stored != actual {
        return Err(Error::Input(format!(
            "frozen hash mismatch: manifest {stored}, params {actual}"
        )));
    }
    Ok(model)
}
