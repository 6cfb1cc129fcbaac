//! Layer mixing: at every depth t the model adds, next to its own block
//! u_t, the output of one gate-selected block u_{i_t}, combined as
//! `z + alpha * u_t(z) + (1 - alpha) * v_t(z)`.
//!
//! The gate scores every layer for the current activation, top-k masks the
//! scores, and softmax turns the survivors into mixing weights (exactly
//! one-hot for k = 1). Routing decisions are aggregated per sequence (mode or
//! mean over tokens), per whole training batch, or kept per token.
//!
//! Gradient flow to the router under one-hot selection is ambiguous: the
//! selected weight is exactly 1 and carries no gradient. `GradMode::OneHot`
//! trains the router only through the load-balancing loss;
//! `GradMode::ProbWeighted` multiplies the selected output by
//! `p / detach(p)` (p = aggregated probability of the chosen layer), which
//! preserves forward values exactly while carrying gradient. Both are
//! validated against finite differences with routing decisions frozen.

use crate::backbone::{argmax_row, block_backward, block_forward, BackboneModel, BlockCache, GradStore};
use crate::error::{Error, Result};
use crate::numerics::{row_softmax, ActivationKind, RngState};
use crate::Mat;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateKind {
    Linear,
    Cosine { proj_dim: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchAgg {
    Mode,
    Mean,
    PerToken,
}

/// Granularity of one routing decision during training when `batch_agg` is
/// Mode or Mean: per sequence (default; evaluation always uses this) or one
/// decision for the whole minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggScope {
    Sequence,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    Fixed(f64),
    Learned(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    OneHot,
    ProbWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub kind: GateKind,
    /// Apply a sigmoid to the scores before top-k.
    pub sigmoid_scores: bool,
    /// One gate (and one alpha) for all layers, vs per-layer gates.
    pub shared: bool,
    pub batch_agg: BatchAgg,
    pub agg_scope: AggScope,
    pub k: usize,
    pub alpha_mode: AlphaMode,
    pub load_balance_coeff: f64,
    pub grad_mode: GradMode,
    /// Evaluate the pair (u_t, u_{i_t}) on two threads. Combination order is
    /// fixed, so results are bitwise identical to the sequential path.
    pub parallel_experts: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            kind: GateKind::Linear,
            sigmoid_scores: false,
            shared: true,
            batch_agg: BatchAgg::Mode,
            agg_scope: AggScope::Sequence,
            k: 1,
            alpha_mode: AlphaMode::Fixed(0.95),
            load_balance_coeff: 0.01,
            grad_mode: GradMode::OneHot,
            parallel_experts: false,
        }
    }
}

impl GateConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.k < 1 || self.k > num_layers {
            return Err(Error::Config(format!(
                "molex.k must be in 1..={num_layers}, got {}",
                self.k
            )));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha {a} outside [0, 1]")));
            }
        }
        if self.load_balance_coeff < 0.0 {
            return Err(Error::Config("molex.load_balance must be >= 0".into()));
        }
        if let GateKind::Cosine { proj_dim, temperature } = self.kind {
            if proj_dim == 0 || temperature <= 0.0 {
                return Err(Error::Config("bad cosine gate parameters".into()));
            }
        }
        Ok(())
    }

    pub fn alpha_init(&self) -> f64 {
        match self.alpha_mode {
            AlphaMode::Fixed(a) | AlphaMode::Learned(a) => a,
        }
    }
}

// ---------------------------------------------------------------------------
// Router parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum RouterParams {
    /// scores = z W^T + b
    Linear { w: Mat, b: Mat },
    /// scores_j = cos(P z, e_j) / temperature
    Cosine { p: Mat, e: Mat, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolexState {
    pub cfg: GateConfig,
    /// One router if shared, else one per layer.
    pub routers: Vec<RouterParams>,
    /// Mixing weight(s): 1x1 if shared, 1xT otherwise.
    pub alpha: Mat,
}

impl MolexState {
    pub fn init(cfg: GateConfig, num_layers: usize, dim: usize, rng: &mut RngState) -> Result<Self> {
        cfg.validate(num_layers)?;
        let n_routers = if cfg.shared { 1 } else { num_layers };
        let mut routers = Vec::with_capacity(n_routers);
        for _ in 0..n_routers {
            routers.push(match cfg.kind {
                GateKind::Linear => RouterParams::Linear {
                    w: Mat::random_gaussian(num_layers, dim, 0.02, rng),
                    b: Mat::zeros(1, num_layers),
                },
                GateKind::Cosine { proj_dim, temperature } => RouterParams::Cosine {
                    p: Mat::random_gaussian(proj_dim, dim, 1.0 / (dim as f64).sqrt(), rng),
                    e: Mat::random_gaussian(num_layers, proj_dim, 1.0, rng),
                    temperature,
                },
            });
        }
        let n_alpha = if cfg.shared { 1 } else { num_layers };
        let mut alpha = Mat::zeros(1, n_alpha);
        for c in 0..n_alpha {
            alpha.set(0, c, cfg.alpha_init());
        }
        Ok(MolexState { cfg, routers, alpha })
    }

    pub fn router_for(&self, t: usize) -> &RouterParams {
        if self.cfg.shared {
            &self.routers[0]
        } else {
            &self.routers[t]
        }
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        if self.cfg.shared {
            self.alpha.at(0, 0)
        } else {
            self.alpha.at(0, t)
        }
    }

    fn router_name(&self, t: usize, field: &str) -> String {
        if self.cfg.shared {
            format!("router.{field}")
        } else {
            format!("router.{t}.{field}")
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, r) in self.routers.iter().enumerate() {
            let prefix = if self.cfg.shared { "router".to_string() } else { format!("router.{i}") };
            match r {
                RouterParams::Linear { w, b } => {
                    out.push((format!("{prefix}.linear.w"), w));
                    out.push((format!("{prefix}.linear.b"), b));
                }
                RouterParams::Cosine { p, e, .. } => {
                    out.push((format!("{prefix}.cosine.p"), p));
                    out.push((format!("{prefix}.cosine.e"), e));
                }
            }
        }
        out.push(("alpha".into(), &self.alpha));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let shared = self.cfg.shared;
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        for (i, r) in self.routers.iter_mut().enumerate() {
            let prefix = if shared { "router".to_string() } else { format!("router.{i}") };
            match r {
                RouterParams::Linear { w, b } => {
                    out.push((format!("{prefix}.linear.w"), w));
                    out.push((format!("{prefix}.linear.b"), b));
                }
                RouterParams::Cosine { p, e, .. } => {
                    out.push((format!("{prefix}.cosine.p"), p));
                    out.push((format!("{prefix}.cosine.e"), e));
                }
            }
        }
        out.push(("alpha".into(), &mut self.alpha));
        out
    }

    /// Router + mixing-weight parameter count. For the shared linear gate
    /// over T layers of width D this is T*D + T + 1.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Gate primitives
// ---------------------------------------------------------------------------

/// Per-token affinity scores, one row per token, one column per layer expert.
pub fn gate_scores(z: &Mat, router: &RouterParams, sigmoid_scores: bool) -> Result<Mat> {
    let mut scores = match router {
        RouterParams::Linear { w, b } => {
            let mut s = z.matmul(&w.transpose())?;
            for n in 0..s.rows() {
                for j in 0..s.cols() {
                    s.set(n, j, s.at(n, j) + b.at(0, j));
                }
            }
            s
        }
        RouterParams::Cosine { p, e, temperature } => {
            let proj = z.matmul(&p.transpose())?; // N x proj_dim
            let mut s = Mat::zeros(z.rows(), e.rows());
            for n in 0..proj.rows() {
                let a = proj.row(n);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                for j in 0..e.rows() {
                    let ej = e.row(j);
                    let ne = ej.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = if na == 0.0 || ne == 0.0 {
                        0.0
                    } else {
                        a.iter().zip(ej).map(|(x, y)| x * y).sum::<f64>() / (na * ne)
                    };
                    s.set(n, j, cos / temperature);
                }
            }
            s
        }
    };
    if sigmoid_scores {
        scores = scores.map(|v| ActivationKind::Sigmoid.apply_scalar(v));
    }
    Ok(scores)
}

/// Keep the k largest entries, replace the rest with -inf. Ties go to the
/// lower index.
pub fn topk(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("k = {k} outside 1..={}", scores.len())));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("topk requires finite scores".into()));
    }
    let kept = topk_indices(scores, k);
    let mut out = vec![f64::NEG_INFINITY; scores.len()];
    for &i in &kept {
        out[i] = scores[i];
    }
    Ok(out)
}

/// Indices of the k largest entries, in selection order (ties to lower index).
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax over a masked score vector; exactly one-hot when a single entry
/// survived the mask.
pub fn gate_weights(masked: &[f64]) -> Result<Vec<f64>> {
    let m = Mat::row_vector(masked);
    Ok(row_softmax(&m)?.row(0).to_vec())
}

/// Collapse per-token scores into a single selected expert (k = 1).
/// `Mode` majority-votes the per-token argmaxes; `Mean` takes the argmax of
/// the averaged per-token probability vectors. Ties go to the lower index.
pub fn aggregate_batch(per_token_scores: &Mat, agg: BatchAgg) -> Result<usize> {
    match agg {
        BatchAgg::Mode => {
            let mut votes = vec![0u64; per_token_scores.cols()];
            for n in 0..per_token_scores.rows() {
                votes[argmax_row(per_token_scores.row(n))] += 1;
            }
            Ok(argmax_u64(&votes))
        }
        BatchAgg::Mean => {
            let probs = row_softmax(per_token_scores)?;
            let pbar = probs.mean_rows();
            Ok(argmax_row(pbar.row(0)))
        }
        BatchAgg::PerToken => Err(Error::Config(
            "aggregate_batch is defined for mode/mean aggregation".into(),
        )),
    }
}

fn argmax_u64(v: &[u64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Selection telemetry
// ---------------------------------------------------------------------------

/// counts[t][j] = routing decisions at sequential layer t that selected
/// expert j; total[t] counts selections (k per decision).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionStats {
    counts: Vec<Vec<u64>>,
    total: Vec<u64>,
}

impl SelectionStats {
    pub fn new(num_layers: usize) -> Self {
        SelectionStats {
            counts: vec![vec![0; num_layers]; num_layers],
            total: vec![0; num_layers],
        }
    }

    pub fn record(&mut self, layer: usize, expert: usize) {
        self.counts[layer][expert] += 1;
        self.total[layer] += 1;
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total_routed(&self) -> &[u64] {
        &self.total
    }

    pub fn merge(&mut self, other: &SelectionStats) {
        for (t, row) in other.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                self.counts[t][j] += c;
            }
            self.total[t] += other.total[t];
        }
    }
}

/// Normalized selection frequencies as CSV: header
/// `layer,expert_0,...,expert_{T-1}`, one row per sequential layer,
/// fractions with six decimals. Requires at least one decision per layer.
pub fn export_selection_stats(stats: &SelectionStats) -> Result<String> {
    let t_layers = stats.counts.len();
    let mut out = String::from("layer");
    for j in 0..t_layers {
        out.push_str(&format!(",expert_{j}"));
    }
    out.push('\n');
    for t in 0..t_layers {
        if stats.total[t] == 0 {
            return Err(Error::Input(format!("layer {t} has no routed decisions")));
        }
        out.push_str(&t.to_string());
        for j in 0..t_layers {
            out.push_str(&format!(
                ",{:.6}",
                stats.counts[t][j] as f64 / stats.total[t] as f64
            ));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Switch-style balancing objective: coeff * E * sum_j f_j P_j, where f_j is
/// the fraction of routing decisions that picked expert j and P_j the mean
/// probability mass on j. Uniform routing over E experts gives coeff * 1;
/// full collapse onto one expert gives coeff * E.
pub fn load_balance_loss(per_token_probs: &Mat, selections: &[usize], coeff: f64) -> f64 {
    if coeff == 0.0 || selections.is_empty() {
        return 0.0;
    }
    let e = per_token_probs.cols();
    let mut f = vec![0.0; e];
    for &s in selections {
        f[s] += 1.0;
    }
    for v in f.iter_mut() {
        *v /= selections.len() as f64;
    }
    let pbar = per_token_probs.mean_rows();
    let mut acc = 0.0;
    for j in 0..e {
        acc += f[j] * pbar.at(0, j);
    }
    coeff * e as f64 * acc
}

// ---------------------------------------------------------------------------
// Routing decisions
// ---------------------------------------------------------------------------

/// Expert/weight pairs for one decision unit; k entries, selection order.
pub type Picks = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// One decision shared by every row of the token matrix.
    Whole(Picks),
    /// One decision per token row.
    PerRow(Vec<Picks>),
}

/// Routing decisions captured from a reference forward pass; re-applying
/// them freezes the discrete choices (and the probability denominators of
/// the one-hot gradient channel) across the perturbed evaluations of a
/// finite-difference check.
#[derive(Debug, Clone, Default)]
pub struct ForcedRouting {
    pub layers: Vec<ForcedLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForcedLayer {
    Whole {
        experts: Vec<usize>,
        /// Aggregated probabilities at capture time: denominator of the
        /// one-hot gradient channel.
        pbar0: Vec<f64>,
        /// Mixing weights at capture time; replayed verbatim when the router
        /// is not supposed to carry pathwise gradient.
        weights0: Vec<f64>,
    },
    PerRow {
        experts: Vec<Vec<usize>>,
        p0: Vec<Vec<f64>>,
        weights0: Vec<Vec<f64>>,
    },
}

impl ForcedRouting {
    /// Force a fixed expert schedule (one expert per layer, whole-matrix
    /// decisions, no probability denominators).
    pub fn from_schedule(schedule: &[usize]) -> Self {
        ForcedRouting {
            layers: schedule
                .iter()
                .map(|&e| ForcedLayer::Whole {
                    experts: vec![e],
                    pbar0: Vec::new(),
                    weights0: vec![1.0],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForcedScale {
    None,
    Whole(f64),
    PerRow(Vec<f64>),
}

/// Everything the backward pass needs about one mixed layer.
#[derive(Debug, Clone)]
pub struct MolexLayerCache {
    pub t: usize,
    /// Post-sigmoid scores (N x T) and their per-row softmax.
    pub scores: Mat,
    pub probs: Mat,
    /// Mean of the probability rows.
    pub pbar: Vec<f64>,
    pub decision: Decision,
    pub u_cache: BlockCache,
    pub u_out: Mat,
    /// Distinct experts evaluated this layer, excluding t (the own block's
    /// output is reused when the gate picks t).
    pub expert_caches: Vec<(usize, BlockCache)>,
    pub expert_outs: Vec<(usize, Mat)>,
    pub alpha: f64,
    /// Scale applied to v under forced routing (1.0 in a reference pass).
    pub forced_scale: ForcedScale,
}

impl MolexLayerCache {
    fn expert_out(&self, e: usize) -> &Mat {
        if e == self.t {
            &self.u_out
        } else {
            &self.expert_outs.iter().find(|(i, _)| *i == e).expect("expert cached").1
        }
    }

    fn expert_cache(&self, e: usize) -> &BlockCache {
        if e == self.t {
            &self.u_cache
        } else {
            &self.expert_caches.iter().find(|(i, _)| *i == e).expect("expert cached").1
        }
    }
}

#[derive(Debug, Clone)]
pub struct MolexTrace {
    pub zs: Vec<Mat>,
    pub layers: Vec<MolexLayerCache>,
}

impl MolexTrace {
    /// Freeze this trace's routing for finite-difference re-evaluation.
    pub fn forced_routing(&self) -> ForcedRouting {
        let layers = self
            .layers
            .iter()
            .map(|l| match &l.decision {
                Decision::Whole(picks) => ForcedLayer::Whole {
                    experts: picks.iter().map(|&(e, _)| e).collect(),
                    pbar0: l.pbar.clone(),
                    weights0: picks.iter().map(|&(_, w)| w).collect(),
                },
                Decision::PerRow(rows) => ForcedLayer::PerRow {
                    experts: rows.iter().map(|r| r.iter().map(|&(e, _)| e).collect()).collect(),
                    p0: (0..rows.len()).map(|n| l.probs.row(n).to_vec()).collect(),
                    weights0: rows
                        .iter()
                        .map(|r| r.iter().map(|&(_, w)| w).collect())
                        .collect(),
                },
            })
            .collect();
        ForcedRouting { layers }
    }

    /// First pick per layer (the whole route for k = 1 aggregated routing).
    pub fn route_path(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| match &l.decision {
                Decision::Whole(picks) => picks[0].0,
                Decision::PerRow(rows) => rows[0][0].0,
            })
            .collect()
    }
}

fn decide_whole(
    scores: &Mat,
    pbar: &[f64],
    cfg: &GateConfig,
    forced: Option<&[usize]>,
) -> Result<Picks> {
    let experts: Vec<usize> = if let Some(f) = forced {
        f.to_vec()
    } else if cfg.k == 1 {
        vec![match cfg.batch_agg {
            BatchAgg::Mode => aggregate_batch(scores, BatchAgg::Mode)?,
            BatchAgg::Mean | BatchAgg::PerToken => argmax_row(pbar),
        }]
    } else {
        match cfg.batch_agg {
            BatchAgg::Mode => {
                let mut votes = vec![0.0f64; scores.cols()];
                for n in 0..scores.rows() {
                    votes[argmax_row(scores.row(n))] += 1.0;
                }
                topk_indices(&votes, cfg.k)
            }
            BatchAgg::Mean | BatchAgg::PerToken => topk_indices(pbar, cfg.k),
        }
    };
    if experts.len() == 1 {
        return Ok(vec![(experts[0], 1.0)]);
    }
    // k >= 2: renormalized aggregated probabilities as mixing weights
    let mass: f64 = experts.iter().map(|&e| pbar[e]).sum();
    Ok(experts.iter().map(|&e| (e, pbar[e] / mass)).collect())
}

fn decide_per_row(
    scores: &Mat,
    cfg: &GateConfig,
    forced: Option<&[Vec<usize>]>,
) -> Result<Vec<Picks>> {
    let mut rows = Vec::with_capacity(scores.rows());
    for n in 0..scores.rows() {
        let row = scores.row(n);
        let experts: Vec<usize> = match forced {
            Some(f) => f[n].clone(),
            None => topk_indices(row, cfg.k),
        };
        if experts.len() == 1 {
            rows.push(vec![(experts[0], 1.0)]);
        } else {
            // renormalized softmax over the selected raw scores
            let mut masked = vec![f64::NEG_INFINITY; row.len()];
            for &e in &experts {
                masked[e] = row[e];
            }
            let w = gate_weights(&masked)?;
            rows.push(experts.iter().map(|&e| (e, w[e])).collect());
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Mixed forward
// ---------------------------------------------------------------------------

/// `z + alpha * u + (1 - alpha) * v`, elementwise left-to-right, so tests
/// can reproduce the combination bitwise.
pub fn combine(z: &Mat, u: &Mat, v: &Mat, alpha: f64) -> Mat {
    let one_minus = 1.0 - alpha;
    let mut out = z.clone();
    for i in 0..out.len() {
        out.data_mut()[i] = z.data()[i] + alpha * u.data()[i] + one_minus * v.data()[i];
    }
    out
}

/// Hands expert evaluations to a long-lived sibling thread so the pair
/// (u_t, u_{i_t}) runs concurrently without a per-layer spawn. The worker
/// computes the same `block_forward` with the same reduction order, so
/// results are bitwise identical to the sequential path.
pub struct ExpertWorker<'m> {
    job_tx: std::sync::mpsc::Sender<(usize, Mat)>,
    out_rx: std::sync::mpsc::Receiver<Result<(Mat, BlockCache)>>,
    _marker: std::marker::PhantomData<&'m ()>,
}

impl<'m> ExpertWorker<'m> {
    fn request(&self, expert: usize, z: Mat) {
        self.job_tx.send((expert, z)).expect("expert worker alive");
    }

    fn receive(&self) -> Result<(Mat, BlockCache)> {
        self.out_rx.recv().expect("expert worker alive")
    }
}

/// Run `body` with an expert worker bound to `model` on a scoped thread.
pub fn with_expert_worker<'m, R>(
    model: &'m BackboneModel,
    body: impl FnOnce(&ExpertWorker<'m>) -> R,
) -> R {
    let act = model.config.block.activation();
    let (job_tx, job_rx) = std::sync::mpsc::channel::<(usize, Mat)>();
    let (out_tx, out_rx) = std::sync::mpsc::channel();
    std::thread::scope(|s| {
        s.spawn(move || {
            while let Ok((e, z)) = job_rx.recv() {
                let result = block_forward(&model.layers[e], model.adapter_for(e), &z, act);
                if out_tx.send(result).is_err() {
                    break;
                }
            }
        });
        let worker = ExpertWorker { job_tx, out_rx, _marker: std::marker::PhantomData };
        body(&worker)
        // dropping the worker closes the job channel and ends the thread
    })
}

/// One mixed layer. Records every selection into `stats` when given; forced
/// routing (when present) overrides the gate's discrete choices.
pub fn molex_layer(
    model: &BackboneModel,
    molex: &MolexState,
    t: usize,
    z: &Mat,
    stats: Option<&mut SelectionStats>,
    forced: Option<&ForcedLayer>,
) -> Result<(Mat, MolexLayerCache)> {
    molex_layer_inner(model, molex, t, z, stats, forced, None)
}

fn molex_layer_inner(
    model: &BackboneModel,
    molex: &MolexState,
    t: usize,
    z: &Mat,
    stats: Option<&mut SelectionStats>,
    forced: Option<&ForcedLayer>,
    worker: Option<&ExpertWorker<'_>>,
) -> Result<(Mat, MolexLayerCache)> {
    let cfg = &molex.cfg;
    let act = model.config.block.activation();
    let scores = gate_scores(z, molex.router_for(t), cfg.sigmoid_scores)?;
    let probs = row_softmax(&scores)?;
    let pbar = probs.mean_rows().row(0).to_vec();
    let alpha = molex.alpha_at(t);

    let mut decision = match cfg.batch_agg {
        BatchAgg::PerToken => {
            let forced_rows = match forced {
                Some(ForcedLayer::PerRow { experts, .. }) => Some(experts.as_slice()),
                Some(ForcedLayer::Whole { .. }) => {
                    return Err(Error::Config("forced routing granularity mismatch".into()))
                }
                None => None,
            };
            Decision::PerRow(decide_per_row(&scores, cfg, forced_rows)?)
        }
        _ => {
            let forced_whole = match forced {
                Some(ForcedLayer::Whole { experts, .. }) => Some(experts.as_slice()),
                Some(ForcedLayer::PerRow { .. }) => {
                    return Err(Error::Config("forced routing granularity mismatch".into()))
                }
                None => None,
            };
            Decision::Whole(decide_whole(&scores, &pbar, cfg, forced_whole)?)
        }
    };

    // Under OneHot the k >= 2 mixing weights carry no pathwise gradient, so a
    // frozen-routing replay must reuse the captured weights verbatim.
    if cfg.grad_mode == GradMode::OneHot && cfg.k > 1 {
        match (forced, &mut decision) {
            (Some(ForcedLayer::Whole { weights0, .. }), Decision::Whole(picks))
                if weights0.len() == picks.len() =>
            {
                for (pick, &w0) in picks.iter_mut().zip(weights0.iter()) {
                    pick.1 = w0;
                }
            }
            (Some(ForcedLayer::PerRow { weights0, .. }), Decision::PerRow(rows))
                if weights0.len() == rows.len() =>
            {
                for (picks, w0s) in rows.iter_mut().zip(weights0.iter()) {
                    for (pick, &w0) in picks.iter_mut().zip(w0s.iter()) {
                        pick.1 = w0;
                    }
                }
            }
            _ => {}
        }
    }

    if let Some(stats) = stats {
        match &decision {
            Decision::Whole(picks) => picks.iter().for_each(|&(e, _)| stats.record(t, e)),
            Decision::PerRow(rows) => rows
                .iter()
                .flatten()
                .for_each(|&(e, _)| stats.record(t, e)),
        }
    }

    // Distinct experts (other than t) whose blocks must be evaluated.
    let mut needed: Vec<usize> = Vec::new();
    {
        let mut need = |e: usize| {
            if e != t && !needed.contains(&e) {
                needed.push(e);
            }
        };
        match &decision {
            Decision::Whole(picks) => picks.iter().for_each(|&(e, _)| need(e)),
            Decision::PerRow(rows) => rows.iter().flatten().for_each(|&(e, _)| need(e)),
        }
    }
    needed.sort_unstable();

    // Evaluate the own block and the needed experts. With a worker handle
    // and exactly one extra expert (the k = 1 case the efficiency contract
    // cares about) the pair runs concurrently; each side keeps its fixed
    // reduction order, so the result is bitwise identical to sequential.
    let ((u_out, u_cache), extra): ((Mat, BlockCache), Vec<(usize, Mat, BlockCache)>) =
        match (worker, needed.as_slice()) {
            (Some(worker), &[e]) => {
                worker.request(e, z.clone());
                let own = block_forward(&model.layers[t], model.adapter_for(t), z, act)?;
                let (v_out, v_cache) = worker.receive()?;
                (own, vec![(e, v_out, v_cache)])
            }
            _ => {
                let own = block_forward(&model.layers[t], model.adapter_for(t), z, act)?;
                let mut extra = Vec::with_capacity(needed.len());
                for &e in &needed {
                    let (out, cache) =
                        block_forward(&model.layers[e], model.adapter_for(e), z, act)?;
                    extra.push((e, out, cache));
                }
                (own, extra)
            }
        };

    let expert_out = |e: usize| -> &Mat {
        if e == t {
            &u_out
        } else {
            &extra.iter().find(|(i, _, _)| *i == e).expect("expert evaluated").1
        }
    };

    // Forced-routing scale s = p / p0 on the selected expert (k = 1 only;
    // for k >= 2 the live mixing weights already carry the dependence).
    let forced_scale = match (forced, &decision) {
        (Some(ForcedLayer::Whole { pbar0, experts, .. }), Decision::Whole(_))
            if cfg.grad_mode == GradMode::ProbWeighted && cfg.k == 1 && !pbar0.is_empty() =>
        {
            ForcedScale::Whole(pbar[experts[0]] / pbar0[experts[0]])
        }
        (Some(ForcedLayer::PerRow { p0, experts, .. }), Decision::PerRow(_))
            if cfg.grad_mode == GradMode::ProbWeighted && cfg.k == 1 && !p0.is_empty() =>
        {
            ForcedScale::PerRow(
                (0..z.rows())
                    .map(|n| probs.at(n, experts[n][0]) / p0[n][experts[n][0]])
                    .collect(),
            )
        }
        _ => ForcedScale::None,
    };

    let fixed_alpha_one = alpha == 1.0 && matches!(cfg.alpha_mode, AlphaMode::Fixed(_));
    let z_next = match &decision {
        Decision::Whole(picks) => {
            if picks.len() == 1 && picks[0].0 == t {
                // self-routing: alpha u + (1 - alpha) u collapses to u exactly
                z.add(&u_out)?
            } else if fixed_alpha_one {
                z.add(&u_out)?
            } else {
                let mut v = expert_out(picks[0].0).scale(picks[0].1);
                for &(e, w) in &picks[1..] {
                    v.add_scaled(expert_out(e), w)?;
                }
                if let ForcedScale::Whole(s) = forced_scale {
                    v = v.scale(s);
                }
                combine(z, &u_out, &v, alpha)
            }
        }
        Decision::PerRow(rows) => {
            if fixed_alpha_one {
                z.add(&u_out)?
            } else {
                let one_minus = 1.0 - alpha;
                let mut out = z.clone();
                for (n, picks) in rows.iter().enumerate() {
                    if picks.len() == 1 && picks[0].0 == t {
                        for c in 0..z.cols() {
                            out.set(n, c, z.at(n, c) + u_out.at(n, c));
                        }
                        continue;
                    }
                    let s = match &forced_scale {
                        ForcedScale::PerRow(s) => s[n],
                        _ => 1.0,
                    };
                    for c in 0..z.cols() {
                        let mut v = 0.0;
                        for &(e, w) in picks {
                            v += w * expert_out(e).at(n, c);
                        }
                        out.set(n, c, z.at(n, c) + alpha * u_out.at(n, c) + one_minus * (s * v));
                    }
                }
                out
            }
        }
    };

    let expert_caches: Vec<(usize, BlockCache)> =
        extra.iter().map(|(e, _, c)| (*e, c.clone())).collect();
    let expert_outs: Vec<(usize, Mat)> =
        extra.into_iter().map(|(e, o, _)| (e, o)).collect();

    Ok((
        z_next,
        MolexLayerCache {
            t,
            scores,
            probs,
            pbar,
            decision,
            u_cache,
            u_out,
            expert_caches,
            expert_outs,
            alpha,
            forced_scale,
        },
    ))
}

/// Spec surface: one mixed layer on an activation, recording selections.
pub fn molex_forward(
    z: &crate::backbone::Activation,
    t: usize,
    model: &BackboneModel,
    molex: &MolexState,
    stats: &mut SelectionStats,
) -> Result<crate::backbone::Activation> {
    let (tokens, _) = molex_layer(model, molex, t, &z.tokens, Some(stats), None)?;
    Ok(crate::backbone::Activation { tokens, layer_index: t + 1 })
}

/// Full mixed forward from embedded tokens; returns z_T and the trace.
/// With `parallel_experts` set, a sibling worker thread evaluates the
/// routed expert while the main thread evaluates the layer's own block.
pub fn molex_forward_traced(
    model: &BackboneModel,
    molex: &MolexState,
    z0: Mat,
    stats: Option<&mut SelectionStats>,
    forced: Option<&ForcedRouting>,
) -> Result<(Mat, MolexTrace)> {
    if molex.cfg.parallel_experts {
        with_expert_worker(model, move |worker| {
            forward_loop(model, molex, z0, stats, forced, Some(worker))
        })
    } else {
        forward_loop(model, molex, z0, stats, forced, None)
    }
}

fn forward_loop(
    model: &BackboneModel,
    molex: &MolexState,
    z0: Mat,
    mut stats: Option<&mut SelectionStats>,
    forced: Option<&ForcedRouting>,
    worker: Option<&ExpertWorker<'_>>,
) -> Result<(Mat, MolexTrace)> {
    let mut zs = vec![z0];
    let mut layers = Vec::with_capacity(model.layers.len());
    for t in 0..model.layers.len() {
        let z = zs.last().unwrap();
        let forced_layer = forced.map(|f| &f.layers[t]);
        let (z_next, cache) =
            molex_layer_inner(model, molex, t, z, stats.as_deref_mut(), forced_layer, worker)?;
        zs.push(z_next);
        layers.push(cache);
    }
    let z_t = zs.last().unwrap().clone();
    Ok((z_t, MolexTrace { zs, layers }))
}

// ---------------------------------------------------------------------------
// Mixed backward
// ---------------------------------------------------------------------------

/// Per-batch constants of the load-balancing gradient:
/// d lb / d probs[n][j] = coeff * E * f_j / total_rows.
#[derive(Debug, Clone, Default)]
pub struct LoadBalanceGrad {
    pub per_expert: Vec<f64>,
}

impl LoadBalanceGrad {
    pub fn from_batch(selections: &[usize], num_experts: usize, total_rows: usize, coeff: f64) -> Option<Self> {
        if coeff == 0.0 || selections.is_empty() || total_rows == 0 {
            return None;
        }
        let mut f = vec![0.0; num_experts];
        for &s in selections {
            f[s] += 1.0;
        }
        let n_sel = selections.len() as f64;
        let per_expert = f
            .iter()
            .map(|&c| coeff * num_experts as f64 * (c / n_sel) / total_rows as f64)
            .collect();
        Some(LoadBalanceGrad { per_expert })
    }
}

/// Backward through the whole mixed stack. `g_zt` is dL/dz_T from the head.
/// Router gradients flow through the one-hot probability channel (when
/// ProbWeighted), through live k >= 2 mixing weights, and through the
/// load-balancing term. Returns dL/dz_0.
pub fn molex_backward(
    model: &BackboneModel,
    molex: &MolexState,
    trace: &MolexTrace,
    g_zt: Mat,
    grads: &mut GradStore,
    lb: Option<&LoadBalanceGrad>,
) -> Result<Mat> {
    let act = model.config.block.activation();
    let cfg = &molex.cfg;
    let mut g = g_zt;
    for cache in trace.layers.iter().rev() {
        let t = cache.t;
        let alpha = cache.alpha;
        let one_minus = 1.0 - alpha;
        let learned_alpha = matches!(cfg.alpha_mode, AlphaMode::Learned(_));
        let fixed_alpha_one = alpha == 1.0 && matches!(cfg.alpha_mode, AlphaMode::Fixed(_));

        // dL/dprobs accumulator for the probability channels (N x T) and a
        // direct score-level accumulator for per-token k >= 2 weights.
        let mut dprobs = Mat::zeros(cache.probs.rows(), cache.probs.cols());
        let mut dprobs_used = false;
        let mut dscores = Mat::zeros(cache.scores.rows(), cache.scores.cols());
        let mut dscores_used = false;

        if let Some(lb) = lb {
            for n in 0..dprobs.rows() {
                for j in 0..dprobs.cols() {
                    dprobs.set(n, j, lb.per_expert[j]);
                }
            }
            dprobs_used = true;
        }

        let mut dz = match &cache.decision {
            Decision::Whole(picks) => {
                let self_route = picks.len() == 1 && picks[0].0 == t;
                if self_route || fixed_alpha_one {
                    // z_next = z + u: plain residual backward
                    let dz_u = block_backward(
                        &model.layers[t],
                        model.adapter_for(t),
                        &cache.u_cache,
                        act,
                        &g,
                        1.0,
                        t,
                        grads,
                        false,
                    )?;
                    g.add(&dz_u)?
                } else {
                    let mut dz = g.clone();
                    let dz_u = block_backward(
                        &model.layers[t],
                        model.adapter_for(t),
                        &cache.u_cache,
                        act,
                        &g,
                        alpha,
                        t,
                        grads,
                        false,
                    )?;
                    dz = dz.add(&dz_u)?;
                    for &(e, w) in picks.iter() {
                        let dz_e = block_backward(
                            &model.layers[e],
                            model.adapter_for(e),
                            cache.expert_cache(e),
                            act,
                            &g,
                            one_minus * w,
                            e,
                            grads,
                            false,
                        )?;
                        dz = dz.add(&dz_e)?;
                    }
                    if learned_alpha {
                        let mut v = cache.expert_out(picks[0].0).scale(picks[0].1);
                        for &(e, w) in &picks[1..] {
                            v.add_scaled(cache.expert_out(e), w)?;
                        }
                        let dalpha = inner(&g, &cache.u_out) - inner(&g, &v);
                        accumulate_alpha(molex, t, dalpha, grads)?;
                    }
                    if cfg.grad_mode == GradMode::ProbWeighted {
                        let inv_n = 1.0 / cache.probs.rows() as f64;
                        if picks.len() == 1 {
                            let e = picks[0].0;
                            let d_s = one_minus * inner(&g, cache.expert_out(e));
                            let d_pbar_e = d_s / cache.pbar[e];
                            for n in 0..dprobs.rows() {
                                dprobs.set(n, e, dprobs.at(n, e) + d_pbar_e * inv_n);
                            }
                        } else {
                            // live weights w_k = pbar_{e_k} / mass
                            let mass: f64 = picks.iter().map(|&(e, _)| cache.pbar[e]).sum();
                            let dws: Vec<f64> = picks
                                .iter()
                                .map(|&(e, _)| one_minus * inner(&g, cache.expert_out(e)))
                                .collect();
                            for &(ej, _) in picks.iter() {
                                let mut d_pbar_j = 0.0;
                                for (k_idx, &(ek, w_k)) in picks.iter().enumerate() {
                                    let delta = if ek == ej { 1.0 } else { 0.0 };
                                    d_pbar_j += dws[k_idx] * (delta - w_k) / mass;
                                }
                                for n in 0..dprobs.rows() {
                                    dprobs.set(n, ej, dprobs.at(n, ej) + d_pbar_j * inv_n);
                                }
                            }
                        }
                        dprobs_used = true;
                    }
                    dz
                }
            }
            Decision::PerRow(rows) => {
                if fixed_alpha_one {
                    let dz_u = block_backward(
                        &model.layers[t],
                        model.adapter_for(t),
                        &cache.u_cache,
                        act,
                        &g,
                        1.0,
                        t,
                        grads,
                        false,
                    )?;
                    g.add(&dz_u)?
                } else {
                    let n_rows = g.rows();
                    let cols = g.cols();
                    // Row-dependent branch weights: mask the upstream gradient
                    // per expert and run each block backward once.
                    let mut g_u = Mat::zeros(n_rows, cols);
                    for (n, picks) in rows.iter().enumerate() {
                        let w = if picks.len() == 1 && picks[0].0 == t { 1.0 } else { alpha };
                        for c in 0..cols {
                            g_u.set(n, c, g.at(n, c) * w);
                        }
                    }
                    let mut dz = g.clone();
                    let dz_u = block_backward(
                        &model.layers[t],
                        model.adapter_for(t),
                        &cache.u_cache,
                        act,
                        &g_u,
                        1.0,
                        t,
                        grads,
                        false,
                    )?;
                    dz = dz.add(&dz_u)?;

                    let mut distinct: Vec<usize> = Vec::new();
                    for picks in rows {
                        if picks.len() == 1 && picks[0].0 == t {
                            continue;
                        }
                        for &(e, _) in picks {
                            if !distinct.contains(&e) {
                                distinct.push(e);
                            }
                        }
                    }
                    distinct.sort_unstable();
                    for &e in &distinct {
                        let mut g_e = Mat::zeros(n_rows, cols);
                        for (n, picks) in rows.iter().enumerate() {
                            if picks.len() == 1 && picks[0].0 == t {
                                continue;
                            }
                            for &(pe, w) in picks {
                                if pe == e {
                                    for c in 0..cols {
                                        g_e.set(n, c, g.at(n, c) * one_minus * w);
                                    }
                                }
                            }
                        }
                        let dz_e = block_backward(
                            &model.layers[e],
                            model.adapter_for(e),
                            cache.expert_cache(e),
                            act,
                            &g_e,
                            1.0,
                            e,
                            grads,
                            false,
                        )?;
                        dz = dz.add(&dz_e)?;
                    }

                    let mut dalpha = 0.0;
                    for (n, picks) in rows.iter().enumerate() {
                        if picks.len() == 1 && picks[0].0 == t {
                            continue;
                        }
                        let mut v_row = vec![0.0; cols];
                        for &(e, w) in picks {
                            let eo = cache.expert_out(e);
                            for (c, v) in v_row.iter_mut().enumerate() {
                                *v += w * eo.at(n, c);
                            }
                        }
                        if learned_alpha {
                            for c in 0..cols {
                                dalpha += g.at(n, c) * (cache.u_out.at(n, c) - v_row[c]);
                            }
                        }
                        if cfg.grad_mode == GradMode::ProbWeighted {
                            if picks.len() == 1 {
                                let e = picks[0].0;
                                let eo = cache.expert_out(e);
                                let mut d_s = 0.0;
                                for c in 0..cols {
                                    d_s += g.at(n, c) * one_minus * eo.at(n, c);
                                }
                                let p = cache.probs.at(n, e);
                                dprobs.set(n, e, dprobs.at(n, e) + d_s / p);
                                dprobs_used = true;
                            } else {
                                // weights are a softmax over the selected raw
                                // scores; jacobian restricted to that set
                                let dws: Vec<f64> = picks
                                    .iter()
                                    .map(|&(e, _)| {
                                        let eo = cache.expert_out(e);
                                        (0..cols)
                                            .map(|c| g.at(n, c) * one_minus * eo.at(n, c))
                                            .sum()
                                    })
                                    .collect();
                                let dot: f64 = dws
                                    .iter()
                                    .zip(picks.iter())
                                    .map(|(d, &(_, w))| d * w)
                                    .sum();
                                for (k_idx, &(e, w)) in picks.iter().enumerate() {
                                    let d_score = w * (dws[k_idx] - dot);
                                    dscores.set(n, e, dscores.at(n, e) + d_score);
                                    dscores_used = true;
                                }
                            }
                        }
                    }
                    if learned_alpha {
                        accumulate_alpha(molex, t, dalpha, grads)?;
                    }
                    dz
                }
            }
        };

        if dprobs_used || dscores_used {
            if dprobs_used {
                // back through the per-row softmax onto the scores
                for n in 0..dprobs.rows() {
                    let p = cache.probs.row(n);
                    let dp = dprobs.row(n);
                    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                    for j in 0..dprobs.cols() {
                        let v = p[j] * (dp[j] - dot);
                        dscores.set(n, j, dscores.at(n, j) + v);
                    }
                }
            }
            if cfg.sigmoid_scores {
                // cached scores are post-sigmoid; sigma' = s (1 - s)
                for n in 0..dscores.rows() {
                    for j in 0..dscores.cols() {
                        let s = cache.scores.at(n, j);
                        dscores.set(n, j, dscores.at(n, j) * s * (1.0 - s));
                    }
                }
            }
            let dz_router = router_backward(molex, t, &cache.u_cache.z_in, &dscores, grads)?;
            dz = dz.add(&dz_router)?;
        }

        g = dz;
    }
    Ok(g)
}

fn inner(a: &Mat, b: &Mat) -> f64 {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum()
}

fn accumulate_alpha(molex: &MolexState, t: usize, dalpha: f64, grads: &mut GradStore) -> Result<()> {
    let mut d = Mat::zeros(1, molex.alpha.cols());
    let col = if molex.cfg.shared { 0 } else { t };
    d.set(0, col, dalpha);
    grads.accumulate("alpha", &d, 1.0)
}

/// dscores (N x T) -> router parameter grads plus the dL/dz contribution.
fn router_backward(
    molex: &MolexState,
    t: usize,
    z_in: &Mat,
    dscores: &Mat,
    grads: &mut GradStore,
) -> Result<Mat> {
    match molex.router_for(t) {
        RouterParams::Linear { w, .. } => {
            let dw = dscores.transpose().matmul(z_in)?;
            let mut db = Mat::zeros(1, dscores.cols());
            for n in 0..dscores.rows() {
                for j in 0..dscores.cols() {
                    db.set(0, j, db.at(0, j) + dscores.at(n, j));
                }
            }
            grads.accumulate(molex.router_name(t, "linear.w"), &dw, 1.0)?;
            grads.accumulate(molex.router_name(t, "linear.b"), &db, 1.0)?;
            dscores.matmul(w)
        }
        RouterParams::Cosine { p, e, temperature } => {
            let proj = z_in.matmul(&p.transpose())?; // N x proj_dim
            let mut da = Mat::zeros(proj.rows(), proj.cols());
            let mut de = Mat::zeros(e.rows(), e.cols());
            for n in 0..proj.rows() {
                let a = proj.row(n);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 {
                    continue;
                }
                for j in 0..e.rows() {
                    let ds = dscores.at(n, j);
                    if ds == 0.0 {
                        continue;
                    }
                    let ej = e.row(j);
                    let ne = ej.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if ne == 0.0 {
                        continue;
                    }
                    let dot: f64 = a.iter().zip(ej).map(|(x, y)| x * y).sum();
                    let cos = dot / (na * ne);
                    let scale = ds / temperature;
                    for c in 0..a.len() {
                        let d_cos_da = ej[c] / (na * ne) - cos * a[c] / (na * na);
                        da.set(n, c, da.at(n, c) + scale * d_cos_da);
                    }
                    for c in 0..ej.len() {
                        let d_cos_de = a[c] / (na * ne) - cos * ej[c] / (ne * ne);
                        de.set(j, c, de.at(j, c) + scale * d_cos_de);
                    }
                }
            }
            let dp = da.transpose().matmul(z_in)?;
            grads.accumulate(molex.router_name(t, "cosine.p"), &dp, 1.0)?;
            grads.accumulate(molex.router_name(t, "cosine.e"), &de, 1.0)?;
            da.matmul(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gate_scores_zero_weight_broadcasts_bias() {
        let router = RouterParams::Linear {
            w: Mat::zeros(3, 4),
            b: Mat::row_vector(&[0.1, 0.2, 0.3]),
        };
        let mut rng = RngState::new(1);
        let z = Mat::random_gaussian(5, 4, 1.0, &mut rng);
        let s = gate_scores(&z, &router, false).unwrap();
        for n in 0..5 {
            assert_eq!(s.row(n), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn cosine_gate_parallel_vector_scores_inverse_temperature() {
        let dim = 4;
        let proj = Mat::identity(dim);
        let mut e = Mat::zeros(2, dim);
        e.set(0, 0, 2.0); // parallel to the token below, different magnitude
        e.set(1, 1, 1.0);
        let router = RouterParams::Cosine { p: proj, e, temperature: 0.5 };
        let mut z = Mat::zeros(1, dim);
        z.set(0, 0, 3.0);
        let s = gate_scores(&z, &router, false).unwrap();
        assert!((s.at(0, 0) - 1.0 / 0.5).abs() < 1e-12);
        assert!(s.at(0, 1).abs() < 1e-12);
    }

    #[test]
    fn gate_scores_match_per_token_dot_oracle() {
        let mut rng = RngState::new(9);
        let w = Mat::random_gaussian(3, 4, 1.0, &mut rng);
        let b = Mat::random_gaussian(1, 3, 1.0, &mut rng);
        let z = Mat::random_gaussian(6, 4, 1.0, &mut rng);
        let router = RouterParams::Linear { w: w.clone(), b: b.clone() };
        let s = gate_scores(&z, &router, false).unwrap();
        for n in 0..6 {
            for j in 0..3 {
                let mut dot = 0.0;
                for c in 0..4 {
                    dot += z.at(n, c) * w.at(j, c);
                }
                assert!((s.at(n, j) - (dot + b.at(0, j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_masks_and_breaks_ties_low() {
        assert_eq!(
            topk(&[0.2, -1.0, 0.7], 1).unwrap(),
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.7]
        );
        assert_eq!(
            topk(&[0.2, -1.0, 0.7], 2).unwrap(),
            vec![0.2, f64::NEG_INFINITY, 0.7]
        );
        assert_eq!(topk(&[0.5, 0.5], 1).unwrap(), vec![0.5, f64::NEG_INFINITY]);
        assert!(matches!(topk(&[1.0, 2.0], 3), Err(Error::Config(_))));
    }

    #[test]
    fn gate_weights_one_hot_and_softmax() {
        let w = gate_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.7]).unwrap();
        assert_eq!(w, vec![0.0, 0.0, 1.0]);
        let w = gate_weights(&[0.2, f64::NEG_INFINITY, 0.7]).unwrap();
        assert!((w[0] - 0.37754).abs() < 1e-5);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 0.62246).abs() < 1e-5);
        // shift invariance on the finite entries
        let shifted = gate_weights(&[10.2, f64::NEG_INFINITY, 10.7]).unwrap();
        for (a, b) in w.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gate_weights(&[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn aggregate_mode_majority_and_ties() {
        // token argmaxes 2, 2, 5 -> majority 2
        let mut s = Mat::zeros(3, 6);
        s.set(0, 2, 1.0);
        s.set(1, 2, 1.0);
        s.set(2, 5, 1.0);
        assert_eq!(aggregate_batch(&s, BatchAgg::Mode).unwrap(), 2);
        // tie between 2 and 5 -> lower index
        let mut s = Mat::zeros(2, 6);
        s.set(0, 2, 1.0);
        s.set(1, 5, 1.0);
        assert_eq!(aggregate_batch(&s, BatchAgg::Mode).unwrap(), 2);
    }

    #[test]
    fn aggregate_mean_averages_probability_rows() {
        // rows softmax to ~(0.6, 0.4) and ~(0.2, 0.8); mean favors expert 1
        let ln = |p: f64| p.ln();
        let s = Mat::from_rows(&[vec![ln(0.6), ln(0.4)], vec![ln(0.2), ln(0.8)]]).unwrap();
        assert_eq!(aggregate_batch(&s, BatchAgg::Mean).unwrap(), 1);
        let probs = row_softmax(&s).unwrap();
        let pbar = probs.mean_rows();
        assert!((pbar.at(0, 0) - 0.4).abs() < 1e-12);
        assert!((pbar.at(0, 1) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn load_balance_closed_forms() {
        let t = 4;
        // uniform probabilities, uniform selections -> 1 (before coeff)
        let probs = Mat::from_vec(8, t, vec![1.0 / t as f64; 8 * t]).unwrap();
        let selections: Vec<usize> = (0..8).map(|i| i % t).collect();
        let lb = load_balance_loss(&probs, &selections, 1.0);
        assert!((lb - 1.0).abs() < 1e-12);
        // everything on one expert with probability 1 -> T
        let mut hot = Mat::zeros(8, t);
        for n in 0..8 {
            hot.set(n, 0, 1.0);
        }
        let lb = load_balance_loss(&hot, &vec![0; 8], 1.0);
        assert!((lb - t as f64).abs() < 1e-12);
        // coeff 0 -> exactly 0
        assert_eq!(load_balance_loss(&probs, &selections, 0.0), 0.0);
    }

    #[test]
    fn selection_stats_rows_and_csv() {
        let mut stats = SelectionStats::new(2);
        stats.record(0, 1);
        stats.record(1, 0);
        let csv = export_selection_stats(&stats).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,expert_0,expert_1");
        assert_eq!(lines[1], "0,0.000000,1.000000");
        assert_eq!(lines[2], "1,1.000000,0.000000");
    }

    #[test]
    fn export_requires_routed_layers() {
        let stats = SelectionStats::new(2);
        assert!(export_selection_stats(&stats).is_err());
    }

    proptest! {
        /// Permuting distinct scores permutes the mask identically.
        #[test]
        fn topk_permutation_equivariant(seed in 0u64..200, k in 1usize..4) {
            let mut rng = RngState::new(seed);
            // distinct scores by construction
            let mut scores: Vec<f64> = (0..5).map(|i| i as f64 * 0.37).collect();
            for s in scores.iter_mut() {
                *s += rng.next_f64() * 0.1;
            }
            // a deterministic permutation
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..5).collect();
                for i in (1..5).rev() {
                    let j = rng.next_range(i + 1);
                    p.swap(i, j);
                }
                p
            };
            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let masked = topk(&scores, k).unwrap();
            let masked_p = topk(&permuted, k).unwrap();
            for (pos, &src) in perm.iter().enumerate() {
                prop_assert_eq!(masked_p[pos].to_bits(), masked[src].to_bits());
            }
        }

        /// Stats row sums equal the number of routed passes (k = 1).
        #[test]
        fn stats_row_sums(seed in 0u64..100) {
            let mut rng = RngState::new(seed);
            let mut stats = SelectionStats::new(3);
            let passes = 1 + rng.next_range(20);
            for _ in 0..passes {
                for t in 0..3 {
                    stats.record(t, rng.next_range(3));
                }
            }
            for t in 0..3 {
                let row_sum: u64 = stats.counts()[t].iter().sum();
                prop_assert_eq!(row_sum, passes as u64);
                prop_assert_eq!(stats.total_routed()[t], passes as u64);
            }
        }
    }
}
