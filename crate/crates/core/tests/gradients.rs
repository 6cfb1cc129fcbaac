//! Finite-difference validation of every analytic gradient: full backbone
//! training (embedding, block weights, head), low-rank adapters, the router
//! in its probability-weighted mode (linear and cosine gates, all
//! aggregation granularities), the learned mixing weight, and the
//! load-balance-only path. Tolerance 1e-4 at h = 1e-5, several random
//! configurations each.

use molex_core::backbone::{
    embedding_backward, forward_residual_traced, head_backward, head_logits, residual_backward,
    softmax_ce, BackboneConfig, BackboneModel, BlockKind, GradStore,
};
use molex_core::molex::{
    AggScope, AlphaMode, BatchAgg, GateConfig, GateKind, GradMode, MolexState,
};
use molex_core::numerics::{finite_diff_check, ActivationKind, RngState};
use molex_core::training::task::Sample;
use molex_core::training::{batch_grads, batch_loss, FinetuneModel};
use molex_core::Mat;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn tiny_config(block: BlockKind) -> BackboneConfig {
    BackboneConfig { layers: 3, dim: 6, block, classes: 3, head_hidden: 8, seq_len: 5, vocab: 12 }
}

fn mlp_block() -> BlockKind {
    BlockKind::Mlp { hidden: 8, activation: ActivationKind::Gelu }
}

/// Random frozen backbone with non-trivial adapters and head.
fn random_finetunable(block: BlockKind, seed: u64, gate: Option<GateConfig>) -> FinetuneModel {
    let cfg = tiny_config(block);
    let mut rng = RngState::new(seed);
    let mut backbone = BackboneModel::init(&cfg, &mut rng).unwrap();
    backbone.frozen = true;
    backbone.attach_adapters(2, 4.0, 0.1, cfg.classes, &mut rng);
    // fresh adapters have B = 0 and a zero head: randomize them so every
    // gradient channel is exercised
    for (name, p) in backbone.named_params_mut() {
        if name.contains(".lora.") || name.starts_with("head.") {
            *p = Mat::random_gaussian(p.rows(), p.cols(), 0.3, &mut rng);
        }
    }
    let molex = gate.map(|g| {
        MolexState::init(g, cfg.layers, cfg.dim, &mut rng).unwrap()
    });
    FinetuneModel { backbone, molex }
}

fn random_batch(model: &FinetuneModel, seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = RngState::new(seed ^ 0xBA7C4);
    (0..n)
        .map(|_| Sample {
            tokens: (0..model.backbone.config.seq_len)
                .map(|_| rng.next_range(model.backbone.config.vocab))
                .collect(),
            label: rng.next_range(model.backbone.head.w.rows()),
        })
        .collect()
}

/// Check one named parameter of the assembly against central differences,
/// with the routing decisions frozen across the perturbations.
fn check_param(model: &FinetuneModel, batch: &[Sample], name: &str) -> f64 {
    let (_, grads, routing) = batch_grads(model, batch).unwrap();
    let param = model.get_param(name).unwrap().clone();
    let analytic = grads
        .get(name)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(param.rows(), param.cols()));
    let mut work = model.clone();
    finite_diff_check(
        |candidate: &Mat| {
            work.set_param(name, candidate.clone())?;
            batch_loss(&work, batch, Some(&routing))
        },
        &param,
        &analytic,
        H,
    )
    .unwrap()
}

fn check_all(model: &FinetuneModel, batch: &[Sample], filter: impl Fn(&str) -> bool) {
    let names: Vec<String> = model
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| filter(n))
        .collect();
    assert!(!names.is_empty(), "no parameters matched the filter");
    for name in names {
        let err = check_param(model, batch, &name);
        assert!(err < TOL, "{name}: max relative error {err}");
    }
}

#[test]
fn lora_gradients_mlp_blocks() {
    for seed in [1u64, 2, 3, 4, 5] {
        let model = random_finetunable(mlp_block(), seed, None);
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.contains(".lora.") || n.starts_with("head."));
    }
}

#[test]
fn lora_gradients_linear_blocks() {
    for seed in [11u64, 12, 13, 14, 15] {
        let model = random_finetunable(BlockKind::Linear, seed, None);
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.contains(".lora."));
    }
}

fn prob_weighted_gate(agg: BatchAgg) -> GateConfig {
    GateConfig {
        batch_agg: agg,
        grad_mode: GradMode::ProbWeighted,
        load_balance_coeff: 0.02,
        alpha_mode: AlphaMode::Fixed(0.9),
        ..GateConfig::default()
    }
}

/// The routing must actually mix (select a non-self expert somewhere) or the
/// probability channel would be trivially zero.
fn assert_mixes(model: &FinetuneModel, batch: &[Sample]) {
    let (_, _, routing) = batch_grads(model, batch).unwrap();
    let mixes = match routing {
        molex_core::training::BatchRouting::PerSequence(rs) => rs.iter().any(|f| {
            f.layers.iter().enumerate().any(|(t, l)| match l {
                molex_core::molex::ForcedLayer::Whole { experts, .. } => {
                    experts.iter().any(|&e| e != t)
                }
                molex_core::molex::ForcedLayer::PerRow { experts, .. } => {
                    experts.iter().any(|row| row.iter().any(|&e| e != t))
                }
            })
        }),
        molex_core::training::BatchRouting::Stacked(f) => {
            f.layers.iter().enumerate().any(|(t, l)| match l {
                molex_core::molex::ForcedLayer::Whole { experts, .. } => {
                    experts.iter().any(|&e| e != t)
                }
                molex_core::molex::ForcedLayer::PerRow { experts, .. } => {
                    experts.iter().any(|row| row.iter().any(|&e| e != t))
                }
            })
        }
    };
    assert!(mixes, "routing never mixed; gradient check would be vacuous");
}

#[test]
fn router_gradients_prob_weighted_mode_agg() {
    for seed in [21u64, 22, 23, 24, 25] {
        let model = random_finetunable(mlp_block(), seed, Some(prob_weighted_gate(BatchAgg::Mode)));
        let batch = random_batch(&model, seed, 2);
        assert_mixes(&model, &batch);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn router_gradients_prob_weighted_mean_agg() {
    for seed in [31u64, 32, 33, 34, 35] {
        let model = random_finetunable(mlp_block(), seed, Some(prob_weighted_gate(BatchAgg::Mean)));
        let batch = random_batch(&model, seed, 2);
        assert_mixes(&model, &batch);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn router_gradients_prob_weighted_per_token() {
    for seed in [41u64, 42, 43, 44, 45] {
        let model =
            random_finetunable(mlp_block(), seed, Some(prob_weighted_gate(BatchAgg::PerToken)));
        let batch = random_batch(&model, seed, 2);
        assert_mixes(&model, &batch);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn router_gradients_cosine_gate() {
    for seed in [51u64, 52, 53, 54, 55] {
        let gate = GateConfig {
            kind: GateKind::Cosine { proj_dim: 4, temperature: 0.7 },
            ..prob_weighted_gate(BatchAgg::Mean)
        };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        assert_mixes(&model, &batch);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn router_gradients_sigmoid_scores() {
    for seed in [61u64, 62, 63] {
        let gate = GateConfig { sigmoid_scores: true, ..prob_weighted_gate(BatchAgg::Mode) };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn router_gradients_top2() {
    for seed in [71u64, 72, 73] {
        let gate = GateConfig { k: 2, ..prob_weighted_gate(BatchAgg::Mean) };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn router_gradients_top2_per_token() {
    for seed in [81u64, 82, 83] {
        let gate = GateConfig { k: 2, ..prob_weighted_gate(BatchAgg::PerToken) };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn learned_alpha_gradient() {
    for seed in [91u64, 92, 93, 94, 95] {
        let gate = GateConfig {
            alpha_mode: AlphaMode::Learned(0.85),
            grad_mode: GradMode::ProbWeighted,
            load_balance_coeff: 0.02,
            ..GateConfig::default()
        };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        assert_mixes(&model, &batch);
        check_all(&model, &batch, |n| n == "alpha");
    }
}

#[test]
fn lora_gradients_through_mixed_layers() {
    for seed in [101u64, 102, 103] {
        let model = random_finetunable(mlp_block(), seed, Some(prob_weighted_gate(BatchAgg::Mean)));
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.contains(".lora.") || n.starts_with("head."));
    }
}

#[test]
fn onehot_router_gradient_is_load_balance_only() {
    for seed in [111u64, 112, 113] {
        let gate = GateConfig {
            grad_mode: GradMode::OneHot,
            load_balance_coeff: 0.05,
            ..GateConfig::default()
        };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn individual_gate_gradients() {
    for seed in [121u64, 122] {
        let gate = GateConfig { shared: false, ..prob_weighted_gate(BatchAgg::Mean) };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 2);
        check_all(&model, &batch, |n| n.starts_with("router."));
    }
}

#[test]
fn batch_scope_gradients() {
    for seed in [131u64, 132] {
        let gate = GateConfig {
            agg_scope: AggScope::Batch,
            ..prob_weighted_gate(BatchAgg::Mean)
        };
        let model = random_finetunable(mlp_block(), seed, Some(gate));
        let batch = random_batch(&model, seed, 3);
        check_all(&model, &batch, |n| {
            n.starts_with("router.") || n.contains(".lora.w1.a")
        });
    }
}

/// Full-model gradients for the pretraining path: every block weight, the
/// embedding table, and the head, through the plain residual forward.
#[test]
fn pretraining_gradients_full_model() {
    for seed in [141u64, 142, 143, 144, 145] {
        let cfg = tiny_config(mlp_block());
        let mut rng = RngState::new(seed);
        let model = BackboneModel::init(&cfg, &mut rng).unwrap();
        let mut head_model = model.clone();
        // randomize the zero head so cross-entropy gradients are generic
        for (name, p) in head_model.named_params_mut() {
            if name.starts_with("head.") {
                *p = Mat::random_gaussian(p.rows(), p.cols(), 0.3, &mut rng);
            }
        }
        let model = head_model;
        let mut batch_rng = RngState::new(seed ^ 0x5EED);
        let batch: Vec<Sample> = (0..2)
            .map(|_| Sample {
                tokens: (0..cfg.seq_len).map(|_| batch_rng.next_range(cfg.vocab)).collect(),
                label: batch_rng.next_range(cfg.classes),
            })
            .collect();

        let loss_of = |m: &BackboneModel| -> molex_core::Result<f64> {
            let mut total = 0.0;
            for s in &batch {
                let z0 = m.embed(&s.tokens)?;
                let (z_t, _) = forward_residual_traced(m, z0)?;
                let (logits, _) = head_logits(&m.head, &z_t)?;
                total += softmax_ce(&logits, s.label)?.0;
            }
            Ok(total / batch.len() as f64)
        };
        let grads_of = |m: &BackboneModel| -> GradStore {
            let mut grads = GradStore::new();
            let inv_b = 1.0 / batch.len() as f64;
            for s in &batch {
                let z0 = m.embed(&s.tokens).unwrap();
                let (z_t, trace) = forward_residual_traced(m, z0).unwrap();
                let (logits, pooled) = head_logits(&m.head, &z_t).unwrap();
                let (_, dlogits) = softmax_ce(&logits, s.label).unwrap();
                let g_zt = head_backward(
                    &m.head,
                    &pooled,
                    &dlogits.scale(inv_b),
                    z_t.rows(),
                    &mut grads,
                )
                .unwrap();
                let dz0 = residual_backward(m, &trace, g_zt, &mut grads, true).unwrap();
                embedding_backward(&s.tokens, &dz0, m.config.vocab, &mut grads).unwrap();
            }
            grads
        };

        let grads = grads_of(&model);
        for (name, param) in model.named_params() {
            let analytic = grads
                .get(&name)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(param.rows(), param.cols()));
            let mut work = model.clone();
            let err = finite_diff_check(
                |candidate: &Mat| {
                    for (n, p) in work.named_params_mut() {
                        if n == name {
                            *p = candidate.clone();
                        }
                    }
                    loss_of(&work)
                },
                param,
                &analytic,
                H,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} param {name}: relative error {err}");
        }
    }
}
