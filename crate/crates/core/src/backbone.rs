//! Residual backbone: a frozen pre-trained layer stack, optional low-rank
//! adapters on every block weight, and a task head.
//!
//! Blocks come in two kinds. `linear` blocks (`u(z) = z W^T`) exist for the
//! ensemble theory, which needs exact matrix compositions; `mlp` blocks
//! (`u(z) = act(z W1^T) W2^T`, no biases) are the training workhorse. Both
//! act row-wise on an NxD token matrix, and the caller adds the skip
//! connection.
//!
//! Gradients are hand-derived here and validated against central finite
//! differences in the test suites.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{activation, row_softmax, ActivationKind, RngState};
use crate::training::optim::{GroupSetting, Optimizer, Schedule};
use crate::training::task::{Split, TaskSpec};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Linear,
    Mlp { hidden: usize, activation: ActivationKind },
}

impl BlockKind {
    pub fn activation(&self) -> ActivationKind {
        match self {
            BlockKind::Linear => ActivationKind::Identity,
            BlockKind::Mlp { activation, .. } => *activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Number of residual layers T.
    pub layers: usize,
    /// Model width D.
    pub dim: usize,
    pub block: BlockKind,
    /// Class count of the base (pretraining) head.
    pub classes: usize,
    /// Hidden width of the task head (0 = linear head).
    pub head_hidden: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("backbone.layers must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config("backbone.dim must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("backbone.classes must be >= 2".into()));
        }
        if self.seq_len < 1 || self.vocab < 2 {
            return Err(Error::Config("backbone.seq_len/vocab too small".into()));
        }
        if let BlockKind::Mlp { hidden, .. } = self.block {
            if hidden < 1 {
                return Err(Error::Config("backbone.hidden must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Frozen weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Linear { w: Mat },
    Mlp { w1: Mat, w2: Mat },
}

/// Low-rank update for one weight: `W_eff = W + scale * B A`, rank(BA) <= r.
/// B starts at zero so a freshly attached adapter is a no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// r x in_dim
    pub a: Mat,
    /// out_dim x r
    pub b: Mat,
    pub rank: usize,
    /// lora_alpha / rank
    pub scale: f64,
}

impl LoraAdapter {
    pub fn init(
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        lora_alpha: f64,
        init_std: f64,
        rng: &mut RngState,
    ) -> Self {
        LoraAdapter {
            a: Mat::random_gaussian(rank, in_dim, init_std, rng),
            b: Mat::zeros(out_dim, rank),
            rank,
            scale: lora_alpha / rank as f64,
        }
    }

    pub fn delta(&self) -> Result<Mat> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerAdapters {
    Linear { w: LoraAdapter },
    Mlp { w1: LoraAdapter, w2: LoraAdapter },
}

/// Task head over the mean-pooled features: a dense layer with a
/// nonlinearity followed by the class projection (`hidden = 0` collapses to
/// a plain linear head). Pair tasks need the nonlinearity: equality of the
/// two halves is not linearly separable in pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// hidden x D (absent for a linear head)
    pub w1: Option<Mat>,
    /// 1 x hidden
    pub b1: Option<Mat>,
    /// C x hidden (or C x D when linear)
    pub w: Mat,
    /// 1 x C
    pub b: Mat,
    pub activation: ActivationKind,
}

impl Head {
    pub fn new(dim: usize, hidden: usize, classes: usize, rng: &mut RngState) -> Self {
        if hidden == 0 {
            Head {
                w1: None,
                b1: None,
                w: Mat::zeros(classes, dim),
                b: Mat::zeros(1, classes),
                activation: ActivationKind::Identity,
            }
        } else {
            Head {
                w1: Some(Mat::random_gaussian(hidden, dim, (1.0 / dim as f64).sqrt(), rng)),
                b1: Some(Mat::zeros(1, hidden)),
                w: Mat::zeros(classes, hidden),
                b: Mat::zeros(1, classes),
                activation: ActivationKind::Gelu,
            }
        }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.as_ref().map_or(0, |w1| w1.rows())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    /// V x D token table, frozen together with the layer weights.
    pub embedding: Mat,
    pub layers: Vec<LayerWeights>,
    pub adapters: Option<Vec<LayerAdapters>>,
    pub head: Head,
    pub frozen: bool,
}

/// Token features at one depth of the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub tokens: Mat,
    pub layer_index: usize,
}

impl BackboneModel {
    /// Random initialization (pre-training starts here).
    pub fn init(config: &BackboneConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        Ok(Self::init_unchecked(config, rng))
    }

    /// Same as [`BackboneModel::init`] without config validation; lets tests
    /// build degenerate stacks (e.g. zero layers).
    pub fn init_unchecked(config: &BackboneConfig, rng: &mut RngState) -> Self {
        let d = config.dim;
        let embedding = Mat::random_gaussian(config.vocab, d, 1.0, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(match config.block {
                BlockKind::Linear => LayerWeights::Linear {
                    w: Mat::random_gaussian(d, d, 1.0 / (d as f64).sqrt(), rng),
                },
                BlockKind::Mlp { hidden, .. } => LayerWeights::Mlp {
                    w1: Mat::random_gaussian(hidden, d, 1.0 / (d as f64).sqrt(), rng),
                    w2: Mat::random_gaussian(d, hidden, 1.0 / (hidden as f64).sqrt(), rng),
                },
            });
        }
        let head = Head::new(d, config.head_hidden, config.classes, rng);
        BackboneModel {
            config: config.clone(),
            embedding,
            layers,
            adapters: None,
            head,
            frozen: false,
        }
    }

    /// Attach fresh adapters (A gaussian, B zero) to every block weight and
    /// replace the head for a downstream task with `classes` outputs.
    pub fn attach_adapters(
        &mut self,
        rank: usize,
        lora_alpha: f64,
        init_std: f64,
        classes: usize,
        rng: &mut RngState,
    ) {
        let d = self.config.dim;
        let adapters = self
            .layers
            .iter()
            .map(|l| match l {
                LayerWeights::Linear { .. } => LayerAdapters::Linear {
                    w: LoraAdapter::init(d, d, rank, lora_alpha, init_std, rng),
                },
                LayerWeights::Mlp { w1, w2 } => LayerAdapters::Mlp {
                    w1: LoraAdapter::init(w1.rows(), d, rank, lora_alpha, init_std, rng),
                    w2: LoraAdapter::init(d, w2.cols(), rank, lora_alpha, init_std, rng),
                },
            })
            .collect();
        self.adapters = Some(adapters);
        self.head = Head::new(d, self.config.head_hidden, classes, rng);
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Mat> {
        let mut z = Mat::zeros(tokens.len(), self.config.dim);
        for (n, &tok) in tokens.iter().enumerate() {
            if tok >= self.config.vocab {
                return Err(Error::Input(format!(
                    "token {tok} out of vocabulary (V = {})",
                    self.config.vocab
                )));
            }
            z.row_mut(n).copy_from_slice(self.embedding.row(tok));
        }
        Ok(z)
    }

    pub fn adapter_for(&self, t: usize) -> Option<&LayerAdapters> {
        self.adapters.as_ref().map(|a| &a[t])
    }

    /// Every named parameter, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![("embedding".into(), &self.embedding)];
        for (t, l) in self.layers.iter().enumerate() {
            match l {
                LayerWeights::Linear { w } => out.push((format!("layer.{t}.w"), w)),
                LayerWeights::Mlp { w1, w2 } => {
                    out.push((format!("layer.{t}.w1"), w1));
                    out.push((format!("layer.{t}.w2"), w2));
                }
            }
        }
        if let Some(adapters) = &self.adapters {
            for (t, a) in adapters.iter().enumerate() {
                match a {
                    LayerAdapters::Linear { w } => {
                        out.push((format!("layer.{t}.lora.w.a"), &w.a));
                        out.push((format!("layer.{t}.lora.w.b"), &w.b));
                    }
                    LayerAdapters::Mlp { w1, w2 } => {
                        out.push((format!("layer.{t}.lora.w1.a"), &w1.a));
                        out.push((format!("layer.{t}.lora.w1.b"), &w1.b));
                        out.push((format!("layer.{t}.lora.w2.a"), &w2.a));
                        out.push((format!("layer.{t}.lora.w2.b"), &w2.b));
                    }
                }
            }
        }
        if let (Some(w1), Some(b1)) = (&self.head.w1, &self.head.b1) {
            out.push(("head.w1".into(), w1));
            out.push(("head.b1".into(), b1));
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![("embedding".into(), &mut self.embedding)];
        for (t, l) in self.layers.iter_mut().enumerate() {
            match l {
                LayerWeights::Linear { w } => out.push((format!("layer.{t}.w"), w)),
                LayerWeights::Mlp { w1, w2 } => {
                    out.push((format!("layer.{t}.w1"), w1));
                    out.push((format!("layer.{t}.w2"), w2));
                }
            }
        }
        if let Some(adapters) = &mut self.adapters {
            for (t, a) in adapters.iter_mut().enumerate() {
                match a {
                    LayerAdapters::Linear { w } => {
                        out.push((format!("layer.{t}.lora.w.a"), &mut w.a));
                        out.push((format!("layer.{t}.lora.w.b"), &mut w.b));
                    }
                    LayerAdapters::Mlp { w1, w2 } => {
                        out.push((format!("layer.{t}.lora.w1.a"), &mut w1.a));
                        out.push((format!("layer.{t}.lora.w1.b"), &mut w1.b));
                        out.push((format!("layer.{t}.lora.w2.a"), &mut w2.a));
                        out.push((format!("layer.{t}.lora.w2.b"), &mut w2.b));
                    }
                }
            }
        }
        if let (Some(w1), Some(b1)) = (&mut self.head.w1, &mut self.head.b1) {
            out.push(("head.w1".into(), w1));
            out.push(("head.b1".into(), b1));
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    /// Hash over the frozen tensors only (embedding + layer weights); the
    /// freeze contract asserts this is unchanged by any fine-tuning run.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        feed(self.embedding.bits_hash());
        for l in &self.layers {
            match l {
                LayerWeights::Linear { w } => feed(w.bits_hash()),
                LayerWeights::Mlp { w1, w2 } => {
                    feed(w1.bits_hash());
                    feed(w2.bits_hash());
                }
            }
        }
        h
    }
}

/// Count of scalar parameters on the backbone side.
/// `trainable_only` on a frozen model counts adapters + head.
pub fn param_count(model: &BackboneModel, trainable_only: bool) -> usize {
    let mut total = 0;
    for (name, m) in model.named_params() {
        let frozen_tensor = name == "embedding" || (name.starts_with("layer.") && !name.contains(".lora."));
        if trainable_only && model.frozen && frozen_tensor {
            continue;
        }
        total += m.len();
    }
    total
}

// ---------------------------------------------------------------------------
// Block forward/backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub z_in: Mat,
    /// mlp only: pre-activation and post-activation hidden states.
    pub h_pre: Option<Mat>,
    pub h_act: Option<Mat>,
    pub w1_eff: Mat,
    pub w2_eff: Option<Mat>,
}

fn effective(w: &Mat, adapter: Option<&LoraAdapter>) -> Result<Mat> {
    match adapter {
        None => Ok(w.clone()),
        Some(ad) => w.add(&ad.delta()?),
    }
}

/// Residual branch of one block; the caller adds the skip connection.
pub fn block_forward(
    weights: &LayerWeights,
    adapters: Option<&LayerAdapters>,
    z: &Mat,
    act_kind: ActivationKind,
) -> Result<(Mat, BlockCache)> {
    match weights {
        LayerWeights::Linear { w } => {
            let ad = match adapters {
                Some(LayerAdapters::Linear { w }) => Some(w),
                Some(_) => return Err(Error::shape("block_forward", "adapter kind mismatch")),
                None => None,
            };
            let w_eff = effective(w, ad)?;
            let u = z.matmul(&w_eff.transpose())?;
            Ok((u, BlockCache { z_in: z.clone(), h_pre: None, h_act: None, w1_eff: w_eff, w2_eff: None }))
        }
        LayerWeights::Mlp { w1, w2 } => {
            let (ad1, ad2) = match adapters {
                Some(LayerAdapters::Mlp { w1, w2 }) => (Some(w1), Some(w2)),
                Some(_) => return Err(Error::shape("block_forward", "adapter kind mismatch")),
                None => (None, None),
            };
            let w1_eff = effective(w1, ad1)?;
            let w2_eff = effective(w2, ad2)?;
            let h_pre = z.matmul(&w1_eff.transpose())?;
            let h_act = activation(&h_pre, act_kind);
            let u = h_act.matmul(&w2_eff.transpose())?;
            Ok((u, BlockCache {
                z_in: z.clone(),
                h_pre: Some(h_pre),
                h_act: Some(h_act),
                w1_eff,
                w2_eff: Some(w2_eff),
            }))
        }
    }
}

/// Residual branch only, on an [`Activation`]. Adapter weights enter as
/// `W + scale * B A`.
pub fn layer_forward(
    z: &Activation,
    weights: &LayerWeights,
    adapters: Option<&LayerAdapters>,
    act_kind: ActivationKind,
) -> Result<Activation> {
    let (u, _) = block_forward(weights, adapters, &z.tokens, act_kind)?;
    Ok(Activation { tokens: u, layer_index: z.layer_index })
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Mat>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn accumulate(&mut self, name: impl Into<String>, delta: &Mat, scale: f64) -> Result<()> {
        let name = name.into();
        match self.grads.get_mut(&name) {
            Some(g) => g.add_scaled(delta, scale),
            None => {
                self.grads.insert(name, delta.scale(scale));
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.grads.iter()
    }

    pub fn scale_all(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            *g = g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }
}

/// Backward through one block. `g` is dL/du for this branch; `scale` is the
/// chain weight of the branch (e.g. the mixing weight). Returns the scaled
/// dL/dz_in contribution and accumulates parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn block_backward(
    weights: &LayerWeights,
    adapters: Option<&LayerAdapters>,
    cache: &BlockCache,
    act_kind: ActivationKind,
    g: &Mat,
    scale: f64,
    layer_idx: usize,
    grads: &mut GradStore,
    train_backbone: bool,
) -> Result<Mat> {
    let gs = g.scale(scale);
    match weights {
        LayerWeights::Linear { .. } => {
            let dw_eff = gs.transpose().matmul(&cache.z_in)?;
            if train_backbone {
                grads.accumulate(format!("layer.{layer_idx}.w"), &dw_eff, 1.0)?;
            }
            if let Some(LayerAdapters::Linear { w: ad }) = adapters {
                let db = dw_eff.matmul(&ad.a.transpose())?;
                let da = ad.b.transpose().matmul(&dw_eff)?;
                grads.accumulate(format!("layer.{layer_idx}.lora.w.b"), &db, ad.scale)?;
                grads.accumulate(format!("layer.{layer_idx}.lora.w.a"), &da, ad.scale)?;
            }
            gs.matmul(&cache.w1_eff)
        }
        LayerWeights::Mlp { .. } => {
            let h_pre = cache.h_pre.as_ref().expect("mlp cache");
            let h_act = cache.h_act.as_ref().expect("mlp cache");
            let w2_eff = cache.w2_eff.as_ref().expect("mlp cache");
            let dw2_eff = gs.transpose().matmul(h_act)?;
            let dh_act = gs.matmul(w2_eff)?;
            let dh_pre = dh_act.hadamard(&h_pre.map(|x| act_kind.derivative_scalar(x)))?;
            let dw1_eff = dh_pre.transpose().matmul(&cache.z_in)?;
            if train_backbone {
                grads.accumulate(format!("layer.{layer_idx}.w1"), &dw1_eff, 1.0)?;
                grads.accumulate(format!("layer.{layer_idx}.w2"), &dw2_eff, 1.0)?;
            }
            if let Some(LayerAdapters::Mlp { w1: ad1, w2: ad2 }) = adapters {
                grads.accumulate(
                    format!("layer.{layer_idx}.lora.w1.b"),
                    &dw1_eff.matmul(&ad1.a.transpose())?,
                    ad1.scale,
                )?;
                grads.accumulate(
                    format!("layer.{layer_idx}.lora.w1.a"),
                    &ad1.b.transpose().matmul(&dw1_eff)?,
                    ad1.scale,
                )?;
                grads.accumulate(
                    format!("layer.{layer_idx}.lora.w2.b"),
                    &dw2_eff.matmul(&ad2.a.transpose())?,
                    ad2.scale,
                )?;
                grads.accumulate(
                    format!("layer.{layer_idx}.lora.w2.a"),
                    &ad2.b.transpose().matmul(&dw2_eff)?,
                    ad2.scale,
                )?;
            }
            dh_pre.matmul(&cache.w1_eff)
        }
    }
}

// ---------------------------------------------------------------------------
// Full residual forward/backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResidualTrace {
    /// z_0 .. z_T
    pub zs: Vec<Mat>,
    pub blocks: Vec<BlockCache>,
}

pub fn forward_residual_traced(model: &BackboneModel, z0: Mat) -> Result<(Mat, ResidualTrace)> {
    let act = model.config.block.activation();
    let mut zs = vec![z0];
    let mut blocks = Vec::with_capacity(model.layers.len());
    for (t, weights) in model.layers.iter().enumerate() {
        let z = zs.last().unwrap();
        let (u, cache) = block_forward(weights, model.adapter_for(t), z, act)?;
        zs.push(z.add(&u)?);
        blocks.push(cache);
    }
    let z_t = zs.last().unwrap().clone();
    Ok((z_t, ResidualTrace { zs, blocks }))
}

/// Embed the tokens, apply every residual layer, and return the final
/// features together with all intermediate activations (z_0 .. z_T).
pub fn forward_residual(
    model: &BackboneModel,
    tokens: &[usize],
) -> Result<(Mat, Vec<Activation>)> {
    let z0 = model.embed(tokens)?;
    let (z_t, trace) = forward_residual_traced(model, z0)?;
    let acts = trace
        .zs
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| Activation { tokens, layer_index: i })
        .collect();
    Ok((z_t, acts))
}

/// Backward through the plain residual stack. Returns dL/dz_0.
pub fn residual_backward(
    model: &BackboneModel,
    trace: &ResidualTrace,
    g_zt: Mat,
    grads: &mut GradStore,
    train_backbone: bool,
) -> Result<Mat> {
    let act = model.config.block.activation();
    let mut g = g_zt;
    for t in (0..model.layers.len()).rev() {
        let dz = block_backward(
            &model.layers[t],
            model.adapter_for(t),
            &trace.blocks[t],
            act,
            &g,
            1.0,
            t,
            grads,
            train_backbone,
        )?;
        g = g.add(&dz)?;
    }
    Ok(g)
}

/// Scatter dL/dz_0 rows back onto the (dense) embedding gradient.
pub fn embedding_backward(
    tokens: &[usize],
    dz0: &Mat,
    vocab: usize,
    grads: &mut GradStore,
) -> Result<()> {
    let mut d_emb = Mat::zeros(vocab, dz0.cols());
    for (n, &tok) in tokens.iter().enumerate() {
        for (e, &v) in d_emb.row_mut(tok).iter_mut().zip(dz0.row(n)) {
            *e += v;
        }
    }
    grads.accumulate("embedding", &d_emb, 1.0)
}

// ---------------------------------------------------------------------------
// Head and loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub pooled: Mat,
    pub h_pre: Option<Mat>,
    pub h_act: Option<Mat>,
}

/// Mean-pool the token features and apply the head.
pub fn head_logits(head: &Head, features: &Mat) -> Result<(Mat, HeadCache)> {
    let pooled = features.mean_rows();
    match (&head.w1, &head.b1) {
        (Some(w1), Some(b1)) => {
            let h_pre = pooled.matmul(&w1.transpose())?.add(b1)?;
            let h_act = activation(&h_pre, head.activation);
            let logits = h_act.matmul(&head.w.transpose())?.add(&head.b)?;
            Ok((logits, HeadCache { pooled, h_pre: Some(h_pre), h_act: Some(h_act) }))
        }
        _ => {
            let logits = pooled.matmul(&head.w.transpose())?.add(&head.b)?;
            Ok((logits, HeadCache { pooled, h_pre: None, h_act: None }))
        }
    }
}

/// Cross-entropy of a 1xC logit row against `label`. Returns (loss, dlogits).
pub fn softmax_ce(logits: &Mat, label: usize) -> Result<(f64, Mat)> {
    if label >= logits.cols() {
        return Err(Error::Input(format!("label {label} out of range")));
    }
    let p = row_softmax(logits)?;
    let py = p.at(0, label).max(1e-300);
    let loss = -py.ln();
    let mut dlogits = p;
    dlogits.set(0, label, dlogits.at(0, label) - 1.0);
    Ok((loss, dlogits))
}

/// Backward through head + mean pooling. Returns dL/dz_T.
pub fn head_backward(
    head: &Head,
    cache: &HeadCache,
    dlogits: &Mat,
    n_tokens: usize,
    grads: &mut GradStore,
) -> Result<Mat> {
    let dpooled = match (&head.w1, &cache.h_pre, &cache.h_act) {
        (Some(w1), Some(h_pre), Some(h_act)) => {
            grads.accumulate("head.w", &dlogits.transpose().matmul(h_act)?, 1.0)?;
            grads.accumulate("head.b", dlogits, 1.0)?;
            let dh_act = dlogits.matmul(&head.w)?;
            let dh_pre =
                dh_act.hadamard(&h_pre.map(|x| head.activation.derivative_scalar(x)))?;
            grads.accumulate("head.w1", &dh_pre.transpose().matmul(&cache.pooled)?, 1.0)?;
            grads.accumulate("head.b1", &dh_pre, 1.0)?;
            dh_pre.matmul(w1)?
        }
        _ => {
            grads.accumulate("head.w", &dlogits.transpose().matmul(&cache.pooled)?, 1.0)?;
            grads.accumulate("head.b", dlogits, 1.0)?;
            dlogits.matmul(&head.w)?
        }
    };
    let mut dz = Mat::zeros(n_tokens, dpooled.cols());
    let inv = 1.0 / n_tokens as f64;
    for n in 0..n_tokens {
        for c in 0..dpooled.cols() {
            dz.set(n, c, dpooled.at(0, c) * inv);
        }
    }
    Ok(dz)
}

pub fn predict(model: &BackboneModel, tokens: &[usize]) -> Result<usize> {
    let z0 = model.embed(tokens)?;
    let (z_t, _) = forward_residual_traced(model, z0)?;
    let (logits, _) = head_logits(&model.head, &z_t)?;
    Ok(argmax_row(logits.row(0)))
}

/// Argmax with ties broken by the lower index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, batch_size: 16, lr: 3e-3, warmup_ratio: 0.06 }
    }
}

/// Train the full model on the base task for a fixed step budget, then
/// freeze. Deterministic given the seed.
pub fn pretrain(
    config: &BackboneConfig,
    task: &TaskSpec,
    pt: &PretrainConfig,
    seed: u64,
) -> Result<BackboneModel> {
    task.validate()?;
    let root = RngState::new(seed);
    let mut init_rng = root.derive(1);
    let mut model = BackboneModel::init(config, &mut init_rng)?;
    let mut batch_rng = root.derive(2);
    let mut opt = Optimizer::new(Default::default());
    let schedule = Schedule::new(pt.steps, pt.warmup_ratio, pt.lr);

    for step in 1..=pt.steps {
        let indices: Vec<usize> =
            (0..pt.batch_size).map(|_| batch_rng.next_range(task.train_size)).collect();
        let batch = task.batch(Split::Train, &indices);
        let mut grads = GradStore::new();
        let mut loss_sum = 0.0;
        let inv_b = 1.0 / batch.len() as f64;
        for sample in &batch {
            let z0 = model.embed(&sample.tokens)?;
            let (z_t, trace) = forward_residual_traced(&model, z0)?;
            let (logits, head_cache) = head_logits(&model.head, &z_t)?;
            let (loss, dlogits) = softmax_ce(&logits, sample.label)?;
            loss_sum += loss;
            let g_zt = head_backward(
                &model.head,
                &head_cache,
                &dlogits.scale(inv_b),
                z_t.rows(),
                &mut grads,
            )?;
            let dz0 = residual_backward(&model, &trace, g_zt, &mut grads, true)?;
            embedding_backward(&sample.tokens, &dz0, model.config.vocab, &mut grads)?;
        }
        let loss = loss_sum * inv_b;
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("diverged (loss {loss})") });
        }
        let setting = GroupSetting { lr: schedule.lr_at(step), weight_decay: 0.0 };
        let updates: Vec<_> = model
            .named_params_mut()
            .into_iter()
            .filter_map(|(name, p)| grads.get(&name).map(|g| (name.clone(), p, g, setting)))
            .collect();
        opt.apply(updates)?;
    }
    model.frozen = true;
    Ok(model)
}

/// Classification accuracy of the plain (non-mixing) model on a task split.
pub fn evaluate_plain(model: &BackboneModel, task: &TaskSpec, split: Split) -> Result<f64> {
    let n = task.split_size(split);
    let mut correct = 0usize;
    for i in 0..n {
        let s = task.sample(split, i);
        if predict(model, &s.tokens)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}
