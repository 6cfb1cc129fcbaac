//! Deterministic dense linear algebra, activations, and the
//! finite-difference harness every analytic gradient in this crate must pass.

pub mod matrix;
pub mod rng;
pub mod scalar;

use crate::error::{Error, Result};
pub use matrix::Matrix;
pub use rng::RngState;
pub use scalar::Scalar;

/// Row-wise softmax with max-subtraction. Entries equal to -inf are treated
/// as masked and map to exactly 0; a row with no finite entry is an error.
/// With a single unmasked entry the output is exactly one-hot.
pub fn row_softmax<S: Scalar>(m: &Matrix<S>) -> Result<Matrix<S>> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mut max = S::neg_infinity();
        for &v in row {
            if v.is_nan() || (v.is_infinite() && v > S::zero()) {
                return Err(Error::Numeric(format!("softmax row {r} has NaN or +inf")));
            }
            if v > max {
                max = v;
            }
        }
        if max == S::neg_infinity() {
            return Err(Error::InvalidRow { row: r });
        }
        let out_row = out.row_mut(r);
        let mut sum = S::zero();
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            *o = (v - max).exp(); // exp(-inf) == 0 exactly
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Gelu,
    Sigmoid,
    Identity,
}

impl ActivationKind {
    pub fn apply_scalar<S: Scalar>(self, x: S) -> S {
        match self {
            ActivationKind::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            ActivationKind::Gelu => {
                // 0.5 * x * (1 + erf(x / sqrt(2)))
                let half = S::cast(0.5);
                half * x * (S::one() + (x / S::cast(std::f64::consts::SQRT_2)).erf())
            }
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative at the pre-activation x. Relu uses subgradient 0 at x = 0.
    pub fn derivative_scalar<S: Scalar>(self, x: S) -> S {
        match self {
            ActivationKind::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            ActivationKind::Gelu => {
                // Phi(x) + x * phi(x) with Phi the standard normal CDF.
                let half = S::cast(0.5);
                let phi_cdf =
                    half * (S::one() + (x / S::cast(std::f64::consts::SQRT_2)).erf());
                let pdf = (-(x * x) * half).exp()
                    / S::cast((2.0 * std::f64::consts::PI).sqrt());
                phi_cdf + x * pdf
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (S::one() - s)
            }
            ActivationKind::Identity => S::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "gelu" => Ok(ActivationKind::Gelu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // Split by sign to avoid overflow in exp.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Elementwise activation; `Identity` returns the input unchanged.
pub fn activation<S: Scalar>(m: &Matrix<S>, kind: ActivationKind) -> Matrix<S> {
    if kind == ActivationKind::Identity {
        return m.clone();
    }
    m.map(|v| kind.apply_scalar(v))
}

/// Central-difference gradient check.
///
/// Perturbs each coordinate of `params` by +-h, evaluates `loss`, and returns
/// the maximum over coordinates of
/// `|fd - analytic| / max(1e-8, |fd| + |analytic|)`.
pub fn finite_diff_check<S: Scalar, F>(
    mut loss: F,
    params: &Matrix<S>,
    analytic_grad: &Matrix<S>,
    h: S,
) -> Result<S>
where
    F: FnMut(&Matrix<S>) -> Result<S>,
{
    if params.shape() != analytic_grad.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{:?} vs {:?}", params.shape(), analytic_grad.shape()),
        ));
    }
    if h <= S::zero() {
        return Err(Error::Config("finite_diff_check: h must be positive".into()));
    }
    let mut work = params.clone();
    let mut max_err = S::zero();
    let two = S::cast(2.0);
    let floor = S::cast(1e-8);
    for idx in 0..params.len() {
        let base = params.data()[idx];
        work.data_mut()[idx] = base + h;
        let up = loss(&work)?;
        work.data_mut()[idx] = base - h;
        let down = loss(&work)?;
        work.data_mut()[idx] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric("non-finite loss in finite_diff_check".into()));
        }
        let fd = (up - down) / (two * h);
        let an = analytic_grad.data()[idx];
        let err = (fd - an).abs() / floor.max(fd.abs() + an.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type Mat = Matrix<f64>;

    #[test]
    fn softmax_symmetric_row() {
        let m = Mat::row_vector(&[0.0, 0.0]);
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_is_exactly_one_hot() {
        let m = Mat::row_vector(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 5.0]);
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let m = Mat::row_vector(&[0.2, 0.7]);
        let s = row_softmax(&m).unwrap();
        assert!((s.at(0, 0) - 0.37754).abs() < 1e-5);
        assert!((s.at(0, 1) - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let m = Mat::row_vector(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(row_softmax(&m), Err(Error::InvalidRow { row: 0 })));
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Mat::row_vector(&[0.0, f64::NAN]);
        assert!(matches!(row_softmax(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn relu_and_sigmoid_points() {
        let m = Mat::row_vector(&[-1.0, 2.0]);
        assert_eq!(activation(&m, ActivationKind::Relu).data(), &[0.0, 2.0]);
        let z = Mat::row_vector(&[0.0]);
        assert_eq!(activation(&z, ActivationKind::Sigmoid).data(), &[0.5]);
        // extreme inputs stay finite
        let big = Mat::row_vector(&[-800.0, 800.0]);
        let s = activation(&big, ActivationKind::Sigmoid);
        assert!(s.is_finite());
    }

    #[test]
    fn identity_returns_input_unchanged() {
        let m = Mat::row_vector(&[1.5, -2.5, 0.0]);
        let out = activation(&m, ActivationKind::Identity);
        assert_eq!(m, out);
    }

    #[test]
    fn gelu_matches_erf_form() {
        let x = 1.0f64;
        let want = 0.5 * x * (1.0 + crate::numerics::scalar::erf_f64(x / 2f64.sqrt()));
        let got = ActivationKind::Gelu.apply_scalar(x);
        assert!((got - want).abs() < 1e-15);
        // spot value: gelu(1) ~ 0.8413447460685429 (x * Phi(x))
        assert!((got - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for kind in [ActivationKind::Gelu, ActivationKind::Sigmoid, ActivationKind::Relu] {
            for &x in &[-1.7f64, -0.4, 0.3, 1.1, 2.6] {
                let h = 1e-6;
                let fd = (kind.apply_scalar(x + h) - kind.apply_scalar(x - h)) / (2.0 * h);
                let an = kind.derivative_scalar(x);
                assert!(
                    (fd - an).abs() < 1e-8,
                    "{} at {x}: fd {fd} vs analytic {an}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn finite_diff_quadratic_loss() {
        let mut rng = RngState::new(3);
        let p = Mat::random_gaussian(2, 3, 1.0, &mut rng);
        let grad = p.clone(); // d/dp of 0.5 * ||p||^2
        let err = finite_diff_check(
            |m: &Mat| Ok(0.5 * m.frobenius_sq()),
            &p,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn finite_diff_zero_function() {
        let p = Mat::zeros(2, 2);
        let grad = Mat::zeros(2, 2);
        let err = finite_diff_check(|_: &Mat| Ok(0.0), &p, &grad, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_flags_wrong_gradient() {
        let mut rng = RngState::new(4);
        let p = Mat::random_gaussian(2, 2, 1.0, &mut rng);
        let wrong = p.scale(2.0); // doubled gradient
        let err = finite_diff_check(
            |m: &Mat| Ok(0.5 * m.frobenius_sq()),
            &p,
            &wrong,
            1e-5,
        )
        .unwrap();
        // |fd - 2 fd| / (|fd| + |2 fd|) = 1/3
        assert!((err - 1.0 / 3.0).abs() < 1e-4, "err {err}");
    }

    #[test]
    fn finite_diff_propagates_non_finite_loss() {
        let p = Mat::row_vector(&[1.0]);
        let g = Mat::row_vector(&[1.0]);
        let r = finite_diff_check(|_: &Mat| Ok(f64::NAN), &p, &g, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..300) {
            let mut rng = RngState::new(seed);
            let m = Mat::random_gaussian(4, 6, 3.0, &mut rng);
            let s = row_softmax(&m).unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariance(seed in 0u64..300, shift in -20.0f64..20.0) {
            let mut rng = RngState::new(seed);
            let m = Mat::random_gaussian(2, 5, 2.0, &mut rng);
            let shifted = m.map(|v| v + shift);
            let a = row_softmax(&m).unwrap();
            let b = row_softmax(&shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}
