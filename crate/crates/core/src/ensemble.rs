//! Linear mixed stacks as weighted ensembles of layer compositions, plus
//! margin-based robustness certificates.
//!
//! For linear blocks the mixed recursion
//! `z_{t+1} = z_t + alpha W_t z_t + (1 - alpha) W_{i_t} z_t`
//! expands into `x + sum_j c_j f_j(x)` where each f_j composes a subsequence
//! of layer matrices and c_j is a product of alpha / (1 - alpha) branch
//! factors. After t+1 layers at most 3^(t+1) - 1 non-identity compositions
//! can appear.
//!
//! Certificates are for linear predictors `f(x) = W^T x`: for every rival
//! class the margin is `(e_y - e_r)^T f(x)` and the sensitivity
//! `||W (e_y - e_r)||_2`; the prediction provably survives every l2
//! perturbation of radius below `min_r margin / sensitivity`, and for linear
//! predictors that radius is tight (Cauchy-Schwarz gives the exact ball
//! minimum `margin - eps * sensitivity`). An ensemble `sum c_j W_j` whose
//! bases all certify at radius eps, with non-colinear sensitivity vectors,
//! certifies at a strictly larger radius (strict triangle inequality).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::Mat;

/// Absolute tolerance on margin - eps * sensitivity comparisons, absorbing
/// f64 rounding when a condition holds with exact equality.
const COND_TOL: f64 = 1e-9;
/// Colinearity threshold on the sine between normalized sensitivity vectors.
const COLINEAR_TOL: f64 = 1e-9;
/// Below this sine the vectors are treated as exactly colinear; between the
/// two thresholds the assumption is reported inconclusive.
const COLINEAR_HARD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Linear stacks and unrolling
// ---------------------------------------------------------------------------

/// Square layer matrices with a frozen route schedule and mixing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStack {
    pub weights: Vec<Mat>,
    pub routes: Vec<usize>,
    pub alpha: f64,
}

impl LinearStack {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config("linear stack needs at least one layer".into()));
        }
        let d = self.weights[0].rows();
        for w in &self.weights {
            if w.rows() != d || w.cols() != d {
                return Err(Error::shape("linear_stack", "layers must be square and equal"));
            }
        }
        if self.routes.len() != self.weights.len() {
            return Err(Error::Config("route schedule length != layer count".into()));
        }
        if let Some(&bad) = self.routes.iter().find(|&&r| r >= self.weights.len()) {
            return Err(Error::Config(format!("route index {bad} out of range")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn random(layers: usize, dim: usize, alpha: f64, rng: &mut RngState) -> Self {
        let weights = (0..layers)
            .map(|_| Mat::random_gaussian(dim, dim, 1.0 / (dim as f64).sqrt(), rng))
            .collect();
        let routes = (0..layers).map(|_| rng.next_range(layers)).collect();
        LinearStack { weights, routes, alpha }
    }

    /// Mixed forward on a column vector under the frozen route schedule.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let mut z = x.to_vec();
        for (t, w) in self.weights.iter().enumerate() {
            let u = matvec(w, &z);
            let i_t = self.routes[t];
            if i_t == t {
                for (zv, uv) in z.iter_mut().zip(&u) {
                    *zv += uv;
                }
            } else {
                let v = matvec(&self.weights[i_t], &z);
                let a = self.alpha;
                let one_minus = 1.0 - a;
                for c in 0..z.len() {
                    z[c] = z[c] + a * u[c] + one_minus * v[c];
                }
            }
        }
        Ok(z)
    }

    /// The plain residual forward (no mixing) as one matrix:
    /// (I + W_{T-1}) ... (I + W_0).
    pub fn baseline_matrix(&self) -> Result<Mat> {
        let d = self.dim();
        let mut m = Mat::identity(d);
        for w in &self.weights {
            m = Mat::identity(d).add(w)?.matmul(&m)?;
        }
        Ok(m)
    }

    /// The bare layer composition W_{T-1} ... W_0 (no skip connections).
    /// This composition is always one of the unrolled base models, since the
    /// own layer stays in the mix at every depth.
    pub fn composition_matrix(&self) -> Result<Mat> {
        let d = self.dim();
        let mut m = Mat::identity(d);
        for w in &self.weights {
            m = w.matmul(&m)?;
        }
        Ok(m)
    }
}

fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
    out
}

/// One composition in the unrolled ensemble. `path` lists the layer indices
/// applied left to right (empty = identity term); `composed` is the product
/// of the corresponding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTerm {
    pub path: Vec<usize>,
    pub coefficient: f64,
    pub composed: Mat,
}

/// Expand the mixed recursion into its ensemble terms. Terms with identical
/// paths are merged by summing coefficients; zero-coefficient branches
/// (alpha = 0 or 1) are dropped.
pub fn unroll(stack: &LinearStack) -> Result<Vec<EnsembleTerm>> {
    stack.validate()?;
    let a = stack.alpha;
    let one_minus = 1.0 - a;
    let mut terms: std::collections::BTreeMap<Vec<usize>, f64> =
        std::collections::BTreeMap::new();
    terms.insert(Vec::new(), 1.0);
    for t in 0..stack.weights.len() {
        let i_t = stack.routes[t];
        let mut next = terms.clone(); // the skip branch keeps every term
        for (path, &coeff) in &terms {
            if a != 0.0 {
                let mut p = path.clone();
                p.push(t);
                *next.entry(p).or_insert(0.0) += a * coeff;
            }
            if one_minus != 0.0 {
                let mut p = path.clone();
                p.push(i_t);
                *next.entry(p).or_insert(0.0) += one_minus * coeff;
            }
        }
        terms = next;
    }
    let d = stack.dim();
    terms
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(path, coefficient)| {
            let mut composed = Mat::identity(d);
            for &idx in &path {
                composed = stack.weights[idx].matmul(&composed)?;
            }
            Ok(EnsembleTerm { path, coefficient, composed })
        })
        .collect()
}

/// Evaluate `sum_j c_j f_j(x)` over the terms (path-sorted for determinism).
pub fn ensemble_eval(terms: &[EnsembleTerm], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for term in terms {
        let fx = matvec(&term.composed, x);
        for (o, v) in out.iter_mut().zip(fx) {
            *o += term.coefficient * v;
        }
    }
    out
}

/// True iff the non-identity term count respects 3^(t+1) - 1 for a stack of
/// t+1 layers.
pub fn term_bound_check(terms: &[EnsembleTerm], t: usize) -> bool {
    let non_identity = terms.iter().filter(|term| !term.path.is_empty()).count();
    non_identity as u64 <= 3u64.pow(t as u32 + 1) - 1
}

/// The effective matrix of the whole unrolled ensemble (identity term
/// included): x maps to `ensemble_matrix * x`.
pub fn ensemble_matrix(terms: &[EnsembleTerm]) -> Result<Mat> {
    let d = terms
        .first()
        .ok_or_else(|| Error::Input("empty term list".into()))?
        .composed
        .rows();
    let mut m = Mat::zeros(d, d);
    for term in terms {
        m.add_scaled(&term.composed, term.coefficient)?;
    }
    Ok(m)
}

/// Split a two-layer mixed stack into (pretrained part, upcycled part,
/// remainder) as matrices M_f0, M_up, M_r with
/// `alpha * M_f0 x + (1 - alpha) * M_up x + M_r x` equal to the mixed
/// forward for every x. The remainder is
/// `(1 - alpha) * alpha * W_1 (W_{i_0} - W_0)`.
pub fn decompose_two_layer(stack: &LinearStack) -> Result<(Mat, Mat, Mat)> {
    stack.validate()?;
    if stack.weights.len() != 2 {
        return Err(Error::Unsupported("two-layer decomposition needs exactly 2 layers".into()));
    }
    let d = stack.dim();
    let eye = Mat::identity(d);
    let (w0, w1) = (&stack.weights[0], &stack.weights[1]);
    let (v0, v1) = (&stack.weights[stack.routes[0]], &stack.weights[stack.routes[1]]);
    let a = stack.alpha;

    // pretrained part: I + W0 + W1 (I + W0)
    let f0 = eye.add(w0)?.add(&w1.matmul(&eye.add(w0)?)?)?;
    // upcycled part: I + V0 + V1 (I + a W0 + (1 - a) V0)
    let z1 = eye.add(&w0.scale(a))?.add(&v0.scale(1.0 - a))?;
    let up = eye.add(v0)?.add(&v1.matmul(&z1)?)?;
    // remainder: (1 - a) a W1 (V0 - W0)
    let r = w1.matmul(&v0.sub(w0)?)?.scale((1.0 - a) * a);
    Ok((f0, up, r))
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RivalMargin {
    pub rival: usize,
    pub margin: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum Colinearity {
    Satisfied,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Certificate {
    pub label: usize,
    pub predicted: usize,
    /// Prediction matches the label; margins are meaningless otherwise.
    pub valid: bool,
    pub per_rival: Vec<RivalMargin>,
    /// Largest certified l2 radius (min margin / sensitivity); 0 when
    /// misclassified, infinite when no rival constrains.
    pub eps_star: f64,
    /// Radius the margin condition was checked at.
    pub epsilon: f64,
    /// margin >= epsilon * sensitivity for every rival.
    pub cond1: bool,
}

/// Certify a linear predictor `f(x) = W^T x` (W is d x C) at input x with
/// true class y. A misclassified input yields a no-certificate result
/// (`valid = false`), not an error.
pub fn certify_single(predictor: &Mat, x: &[f64], y: usize, epsilon: f64) -> Result<Certificate> {
    let (d, classes) = predictor.shape();
    if x.len() != d {
        return Err(Error::shape("certify_single", format!("x has {} dims, W has {d}", x.len())));
    }
    if y >= classes {
        return Err(Error::Input(format!("label {y} out of range (C = {classes})")));
    }
    let fx = predictor_apply(predictor, x);
    let predicted = crate::backbone::argmax_row(&fx);
    let valid = predicted == y;
    let mut per_rival = Vec::with_capacity(classes - 1);
    let mut eps_star = f64::INFINITY;
    let mut cond1 = true;
    for rival in 0..classes {
        if rival == y {
            continue;
        }
        let margin = fx[y] - fx[rival];
        let sens = sensitivity(predictor, y, rival);
        per_rival.push(RivalMargin { rival, margin, sensitivity: sens });
        if margin < epsilon * sens - COND_TOL {
            cond1 = false;
        }
        if sens > 0.0 {
            eps_star = eps_star.min(margin / sens);
        } else if margin < 0.0 {
            eps_star = 0.0;
        }
    }
    if !valid {
        eps_star = 0.0;
    }
    eps_star = eps_star.max(0.0);
    Ok(Certificate { label: y, predicted, valid, per_rival, eps_star, epsilon, cond1 })
}

fn predictor_apply(predictor: &Mat, x: &[f64]) -> Vec<f64> {
    let (d, classes) = predictor.shape();
    let mut fx = vec![0.0; classes];
    for (c, f) in fx.iter_mut().enumerate() {
        let mut acc = 0.0;
        for r in 0..d {
            acc += predictor.at(r, c) * x[r];
        }
        *f = acc;
    }
    fx
}

/// `W (e_y - e_r)` is the difference of predictor columns; its norm bounds
/// how fast the margin can shrink inside the ball.
fn sensitivity(predictor: &Mat, y: usize, rival: usize) -> f64 {
    let d = predictor.rows();
    let mut acc = 0.0;
    for r in 0..d {
        let v = predictor.at(r, y) - predictor.at(r, rival);
        acc += v * v;
    }
    acc.sqrt()
}

fn sensitivity_vector(predictor: &Mat, y: usize, rival: usize) -> Vec<f64> {
    (0..predictor.rows())
        .map(|r| predictor.at(r, y) - predictor.at(r, rival))
        .collect()
}

/// Worst-case perturbation direction at the given rival: the margin shrinks
/// fastest along `-W (e_y - e_r)`.
pub fn worst_case_direction(predictor: &Mat, y: usize, rival: usize) -> Vec<f64> {
    let v = sensitivity_vector(predictor, y, rival);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| -a / norm).collect()
}

/// Uniform sample from the l2 ball of the given radius.
pub fn sample_in_ball(dim: usize, radius: f64, rng: &mut RngState) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
    let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
    let r = radius * rng.next_f64().powf(1.0 / dim as f64);
    dir.into_iter().map(|a| a / norm * r).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Assumptions {
    /// Condition `margin >= eps * sensitivity` per base model.
    pub cond1: Vec<bool>,
    pub noncolinear: Colinearity,
}

impl Assumptions {
    pub fn hold(&self) -> bool {
        self.cond1.iter().all(|&c| c) && self.noncolinear == Colinearity::Satisfied
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnsembleCertificate {
    pub certificate: Certificate,
    pub assumptions: Assumptions,
    /// Certified strictly beyond `epsilon` with the assumptions verified.
    pub strict: bool,
    pub strict_gap: f64,
}

fn check_colinearity(models: &[Mat], y: usize, classes: usize) -> Colinearity {
    let mut min_sin = f64::INFINITY;
    for rival in 0..classes {
        if rival == y {
            continue;
        }
        let vecs: Vec<Vec<f64>> = models
            .iter()
            .map(|m| sensitivity_vector(m, y, rival))
            .collect();
        for i in 0..vecs.len() {
            for j in (i + 1)..vecs.len() {
                let (a, b) = (&vecs[i], &vecs[j]);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Colinearity::Violated;
                }
                let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                let sin = (1.0 - cos * cos).max(0.0).sqrt();
                min_sin = min_sin.min(sin);
            }
        }
    }
    if min_sin > COLINEAR_TOL {
        Colinearity::Satisfied
    } else if min_sin < COLINEAR_HARD {
        Colinearity::Violated
    } else {
        Colinearity::Inconclusive
    }
}

/// Certify the weighted ensemble `sum_j c_j W_j^T x`. Checks, per base, the
/// margin condition at `epsilon`, and the pairwise non-colinearity of the
/// sensitivity vectors; when both hold the ensemble radius strictly exceeds
/// `epsilon`. Assumption failures flag the certificate instead of erroring.
pub fn certify_ensemble(
    models: &[Mat],
    coeffs: &[f64],
    x: &[f64],
    y: usize,
    epsilon: f64,
) -> Result<EnsembleCertificate> {
    if models.is_empty() || models.len() != coeffs.len() {
        return Err(Error::Input("need matching, non-empty models and coefficients".into()));
    }
    if coeffs.iter().any(|&c| c < 0.0) {
        return Err(Error::Input("ensemble coefficients must be nonnegative".into()));
    }
    let shape = models[0].shape();
    let mut combined = Mat::zeros(shape.0, shape.1);
    let mut cond1 = Vec::with_capacity(models.len());
    for (m, &c) in models.iter().zip(coeffs) {
        if m.shape() != shape {
            return Err(Error::shape("certify_ensemble", "base model shapes differ"));
        }
        let base = certify_single(m, x, y, epsilon)?;
        cond1.push(base.cond1 && base.valid);
        combined.add_scaled(m, c)?;
    }
    let noncolinear = if models.len() == 1 {
        // a single base model degenerates to the plain certificate; there is
        // no pair to compare
        Colinearity::Satisfied
    } else {
        check_colinearity(models, y, shape.1)
    };
    let certificate = certify_single(&combined, x, y, epsilon)?;
    let assumptions = Assumptions { cond1, noncolinear };
    let strict = models.len() > 1
        && assumptions.hold()
        && certificate.valid
        && certificate.eps_star > epsilon;
    let strict_gap = certificate.eps_star - epsilon;
    Ok(EnsembleCertificate { certificate, assumptions, strict, strict_gap })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StackComparison {
    /// Radius of the unrolled mixed ensemble.
    pub eps_molex: f64,
    /// Radius of the bare layer composition (one of the base models).
    pub eps_sequential: f64,
    /// Radius of the unmixed residual forward; at alpha = 1 the mixed
    /// ensemble sums back to exactly this matrix, so the radii coincide.
    pub eps_baseline: f64,
    pub assumptions: Assumptions,
    /// Assumptions verified and the mixed radius strictly above the
    /// composition's.
    pub strict: bool,
    pub gap: f64,
    pub term_count: usize,
}

/// Certify the unrolled mixed stack against the bare layer composition of
/// the same layers. The margin condition is checked for every unrolled base
/// at the composition's own radius; when it and non-colinearity hold, the
/// mixed radius is strictly larger. The unmixed residual model's radius is
/// reported alongside for reference.
pub fn molex_vs_sequential(stack: &LinearStack, x: &[f64], y: usize) -> Result<StackComparison> {
    let terms = unroll(stack)?;
    let seq = stack.composition_matrix()?.transpose();
    let eps_seq = certify_single(&seq, x, y, 0.0)?.eps_star;
    let baseline = stack.baseline_matrix()?.transpose();
    let eps_baseline = certify_single(&baseline, x, y, 0.0)?.eps_star;

    let models: Vec<Mat> = terms.iter().map(|t| t.composed.transpose()).collect();
    let coeffs: Vec<f64> = terms.iter().map(|t| t.coefficient).collect();
    let ens = certify_ensemble(&models, &coeffs, x, y, eps_seq)?;
    let eps_molex = ens.certificate.eps_star;
    let strict = ens.assumptions.hold() && ens.certificate.valid && eps_molex > eps_seq;
    Ok(StackComparison {
        eps_molex,
        eps_sequential: eps_seq,
        eps_baseline,
        assumptions: ens.assumptions,
        strict,
        gap: eps_molex - eps_seq,
        term_count: terms.len(),
    })
}

/// Report shape for the certificate JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub y: usize,
    pub per_rival: Vec<RivalMargin>,
    pub eps_star: f64,
    pub assumptions: AssumptionsReport,
    pub strict_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionsReport {
    pub cond1: Vec<bool>,
    pub noncolinear: bool,
}

impl CertificateReport {
    pub fn from_ensemble(c: &EnsembleCertificate) -> Self {
        CertificateReport {
            y: c.certificate.label,
            per_rival: c.certificate.per_rival.clone(),
            eps_star: c.certificate.eps_star,
            assumptions: AssumptionsReport {
                cond1: c.assumptions.cond1.clone(),
                noncolinear: c.assumptions.noncolinear == Colinearity::Satisfied,
            },
            strict_gap: c.strict_gap,
        }
    }
}
