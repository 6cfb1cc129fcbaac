//! Layer probing: train small classifiers on frozen per-layer features to
//! measure which synthetic properties are decodable at which depth.
//!
//! Properties: sequence-length bin (encoded by padding structure),
//! designated-token presence, pair-order marker (pair tasks only), and a
//! random-label control that must stay at chance. Each (layer, property)
//! cell searches hidden units in {50, 100, 200} and dropout in
//! {0.0, 0.1, 0.2}; the report keeps the best cell and the full grid.

use molex_core::backbone::forward_residual_traced;
use molex_core::error::{Error, Result};
use molex_core::numerics::RngState;
use molex_core::training::optim::{adamw_step, AdamHyper};
use molex_core::training::FinetuneModel;
use molex_core::Mat;
use serde::{Deserialize, Serialize};

pub const HIDDEN_GRID: [usize; 3] = [50, 100, 200];
pub const DROPOUT_GRID: [f64; 3] = [0.0, 0.1, 0.2];

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeProperty {
    LengthBin,
    TokenPresence,
    PairOrder,
    RandomControl,
}

impl ProbeProperty {
    pub fn name(self) -> &'static str {
        match self {
            ProbeProperty::LengthBin => "length_bin",
            ProbeProperty::TokenPresence => "token_presence",
            ProbeProperty::PairOrder => "pair_order",
            ProbeProperty::RandomControl => "random_control",
        }
    }

    pub fn all() -> [ProbeProperty; 4] {
        [
            ProbeProperty::LengthBin,
            ProbeProperty::TokenPresence,
            ProbeProperty::PairOrder,
            ProbeProperty::RandomControl,
        ]
    }
}

pub struct ProbeDataset {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Reserved token ids inside the model vocabulary: the top id pads short
/// sequences, the two below mark pair order.
fn pad_token(vocab: usize) -> usize {
    vocab - 1
}

pub fn build_dataset(
    property: ProbeProperty,
    vocab: usize,
    seq_len: usize,
    samples: usize,
    seed: u64,
) -> ProbeDataset {
    let root = RngState::new(seed).derive(property as u64 + 100);
    let content_max = vocab.saturating_sub(3); // keep pad and markers reserved
    let mut inputs = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut rng = root.derive(i as u64);
        match property {
            ProbeProperty::LengthBin => {
                let lo = seq_len / 2;
                let len = lo + rng.next_range(seq_len - lo + 1);
                let mut toks: Vec<usize> =
                    (0..len).map(|_| rng.next_range(content_max)).collect();
                toks.resize(seq_len, pad_token(vocab));
                // three equal-width bins over [lo, seq_len]
                let bin = ((len - lo) * 3 / (seq_len - lo + 1)).min(2);
                inputs.push(toks);
                labels.push(bin);
            }
            ProbeProperty::TokenPresence => {
                let target = 1usize;
                let present = i % 2 == 1;
                let mut toks: Vec<usize> = (0..seq_len)
                    .map(|_| {
                        let mut t = rng.next_range(content_max);
                        while t == target {
                            t = rng.next_range(content_max);
                        }
                        t
                    })
                    .collect();
                if present {
                    for _ in 0..3 {
                        let pos = rng.next_range(seq_len);
                        toks[pos] = target;
                    }
                }
                inputs.push(toks);
                labels.push(present as usize);
            }
            ProbeProperty::PairOrder => {
                let inverted = i % 2 == 1;
                let marker = if inverted { vocab - 3 } else { vocab - 2 };
                let mut toks = vec![marker];
                toks.extend((1..seq_len).map(|_| rng.next_range(content_max)));
                inputs.push(toks);
                labels.push(inverted as usize);
            }
            ProbeProperty::RandomControl => {
                inputs.push((0..seq_len).map(|_| rng.next_range(content_max)).collect());
                labels.push(rng.next_range(2));
            }
        }
    }
    let classes = match property {
        ProbeProperty::LengthBin => 3,
        _ => 2,
    };
    ProbeDataset { inputs, labels, classes }
}

/// Mean-pooled activations of every layer (embedding included) for each
/// probe input, via the plain residual forward of the backbone.
pub fn layer_features(model: &FinetuneModel, dataset: &ProbeDataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let layers = model.backbone.layers.len() + 1;
    let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
    for tokens in &dataset.inputs {
        let z0 = model.backbone.embed(tokens)?;
        let (_, trace) = forward_residual_traced(&model.backbone, z0)?;
        for (l, z) in trace.zs.iter().enumerate() {
            features[l].push(z.mean_rows().row(0).to_vec());
        }
    }
    Ok(features)
}

/// One-hidden-layer classifier with a sigmoid hidden unit and inverted
/// dropout, trained with the shared optimizer kernel.
pub struct ProbeClassifier {
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

impl ProbeClassifier {
    pub fn init(input: usize, hidden: usize, classes: usize, rng: &mut RngState) -> Self {
        ProbeClassifier {
            w1: Mat::random_gaussian(hidden, input, (1.0 / input as f64).sqrt(), rng),
            b1: Mat::zeros(1, hidden),
            w2: Mat::random_gaussian(classes, hidden, (1.0 / hidden as f64).sqrt(), rng),
            b2: Mat::zeros(1, classes),
        }
    }

    fn hidden(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let mut pre = x.matmul(&self.w1.transpose())?;
        for r in 0..pre.rows() {
            for c in 0..pre.cols() {
                pre.set(r, c, pre.at(r, c) + self.b1.at(0, c));
            }
        }
        let act = pre.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok((pre, act))
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        let (_, act) = self.hidden(x)?;
        let mut out = act.matmul(&self.w2.transpose())?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.at(r, c) + self.b2.at(0, c));
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy over the rows; gradients for all four tensors.
    /// `dropout_mask` (when given) multiplies the hidden activations.
    pub fn loss_and_grads(
        &self,
        x: &Mat,
        labels: &[usize],
        dropout_mask: Option<&Mat>,
    ) -> Result<(f64, [Mat; 4])> {
        let n = x.rows();
        let (pre, mut act) = self.hidden(x)?;
        if let Some(mask) = dropout_mask {
            act = act.hadamard(mask)?;
        }
        let mut logits = act.matmul(&self.w2.transpose())?;
        for r in 0..n {
            for c in 0..logits.cols() {
                logits.set(r, c, logits.at(r, c) + self.b2.at(0, c));
            }
        }
        let probs = molex_core::numerics::row_softmax(&logits)?;
        let mut loss = 0.0;
        let mut dlogits = probs;
        let inv_n = 1.0 / n as f64;
        for (r, &label) in labels.iter().enumerate() {
            loss -= dlogits.at(r, label).max(1e-300).ln();
            dlogits.set(r, label, dlogits.at(r, label) - 1.0);
        }
        loss *= inv_n;
        let dlogits = dlogits.scale(inv_n);
        let dw2 = dlogits.transpose().matmul(&act)?;
        let mut db2 = Mat::zeros(1, dlogits.cols());
        for r in 0..n {
            for c in 0..dlogits.cols() {
                db2.set(0, c, db2.at(0, c) + dlogits.at(r, c));
            }
        }
        let mut dact = dlogits.matmul(&self.w2)?;
        if let Some(mask) = dropout_mask {
            dact = dact.hadamard(mask)?;
        }
        let sig = pre.map(|v| 1.0 / (1.0 + (-v).exp()));
        let dpre = dact.hadamard(&sig.map(|s| s * (1.0 - s)))?;
        let dw1 = dpre.transpose().matmul(x)?;
        let mut db1 = Mat::zeros(1, dpre.cols());
        for r in 0..n {
            for c in 0..dpre.cols() {
                db1.set(0, c, db1.at(0, c) + dpre.at(r, c));
            }
        }
        Ok((loss, [dw1, db1, dw2, db2]))
    }

    pub fn accuracy(&self, x: &Mat, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let mut correct = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if molex_core::backbone::argmax_row(logits.row(r)) == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    pub fn params_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn rows_matrix(rows: &[Vec<f64>], indices: &[usize]) -> Mat {
    let mut m = Mat::zeros(indices.len(), rows[0].len());
    for (r, &i) in indices.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&rows[i]);
    }
    m
}

/// Train one classifier configuration; returns the held-out accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_probe_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    hidden: usize,
    dropout: f64,
    cfg: &ProbeConfig,
    rng_seed: u64,
) -> Result<f64> {
    let n = features.len();
    let n_train = n * 4 / 5;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..n).collect();
    let x_val = rows_matrix(features, &val_idx);
    let y_val: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut rng = RngState::new(rng_seed);
    let mut clf = ProbeClassifier::init(features[0].len(), hidden, classes, &mut rng);
    let hyper = AdamHyper::default();
    let mut moments: Vec<(Mat, Mat)> = clf
        .params_mut()
        .iter()
        .map(|p| (Mat::zeros(p.rows(), p.cols()), Mat::zeros(p.rows(), p.cols())))
        .collect();

    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = train_idx.clone();
        // deterministic shuffle
        for i in (1..order.len()).rev() {
            let j = rng.next_range(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let x = rows_matrix(features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mask = if dropout > 0.0 {
                let keep = 1.0 - dropout;
                let mut m = Mat::zeros(x.rows(), hidden);
                for v in m.data_mut() {
                    *v = if rng.next_f64() < keep { 1.0 / keep } else { 0.0 };
                }
                Some(m)
            } else {
                None
            };
            let (loss, grads) = clf.loss_and_grads(&x, &y, mask.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Training { step, detail: "probe classifier diverged".into() });
            }
            for ((p, g), (m, v)) in
                clf.params_mut().into_iter().zip(grads.iter()).zip(moments.iter_mut())
            {
                adamw_step(p, g, m, v, step, cfg.lr, 0.0, hyper)?;
            }
        }
    }
    clf.accuracy(&x_val, &y_val)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub hidden: usize,
    pub dropout: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: usize,
    pub property: String,
    pub best_accuracy: f64,
    pub best_hidden: usize,
    pub best_dropout: f64,
    pub grid: Vec<GridPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: usize,
    pub properties: Vec<String>,
    pub cells: Vec<ProbeCell>,
    pub skipped: Vec<String>,
}

/// The full probing run: every property over every layer over the grid.
/// `pair_task` gates the pair-order property; undefined properties are
/// skipped with a warning entry.
pub fn run_probe(model: &FinetuneModel, pair_task: bool, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let vocab = model.backbone.config.vocab;
    let seq_len = model.backbone.config.seq_len;
    let layers = model.backbone.layers.len() + 1;
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    let mut properties = Vec::new();
    for property in ProbeProperty::all() {
        if property == ProbeProperty::PairOrder && !pair_task {
            skipped.push(format!(
                "property {} skipped: undefined for non-pair tasks",
                property.name()
            ));
            continue;
        }
        properties.push(property.name().to_string());
        let dataset = build_dataset(property, vocab, seq_len, cfg.samples, cfg.seed);
        let features = layer_features(model, &dataset)?;
        for (layer, feats) in features.iter().enumerate() {
            let mut grid = Vec::new();
            for &hidden in &HIDDEN_GRID {
                for &dropout in &DROPOUT_GRID {
                    let acc = train_probe_classifier(
                        feats,
                        &dataset.labels,
                        dataset.classes,
                        hidden,
                        dropout,
                        cfg,
                        cfg.seed ^ (layer as u64) << 8 ^ (hidden as u64) << 20
                            ^ ((dropout * 10.0) as u64) << 30
                            ^ property as u64,
                    )?;
                    grid.push(GridPoint { hidden, dropout, accuracy: acc });
                }
            }
            let best = grid
                .iter()
                .cloned()
                .max_by(|a, b| a.accuracy.partial_cmp(&b.accuracy).unwrap())
                .unwrap();
            cells.push(ProbeCell {
                layer,
                property: property.name().to_string(),
                best_accuracy: best.accuracy,
                best_hidden: best.hidden,
                best_dropout: best.dropout,
                grid,
            });
        }
    }
    Ok(ProbeReport { layers, properties, cells, skipped })
}

pub fn render_table(report: &ProbeReport) -> String {
    let mut out = String::from("layer");
    for p in &report.properties {
        out.push_str(&format!("  {p:>14}"));
    }
    out.push('\n');
    for layer in 0..report.layers {
        out.push_str(&format!("{layer:>5}"));
        for p in &report.properties {
            let cell = report
                .cells
                .iter()
                .find(|c| c.layer == layer && &c.property == p)
                .expect("cell");
            out.push_str(&format!("  {:>14.3}", cell.best_accuracy));
        }
        out.push('\n');
    }
    for s in &report.skipped {
        out.push_str(&format!("note: {s}\n"));
    }
    out
}
