//! Exact spectral calculus of the Dirichlet Laplacian on the unit interval.
//!
//! The operator `A = -d^2/dx^2` with homogeneous Dirichlet conditions on
//! `(0, 1)` has eigenvalues `lambda_i = pi^2 i^2` and orthonormal
//! eigenfunctions `phi_i(x) = sqrt(2) sin(i pi x)`. Everything in this module
//! is a diagonal operation on the coefficient vector of a field in that
//! basis: fractional powers, the semigroup `S(t) = exp(-tA)`, and the
//! operator norms used as oracles by the rest of the crate.
//!
//! The domain is fixed to length one; no other domain appears in the studies
//! this crate runs.

use std::f64::consts::PI;

/// A function on `(0, 1)` represented by its first `J` sine coefficients.
///
/// The basis is orthonormal, so the `L^2` norm of the function equals the
/// Euclidean norm of `coeffs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(coeffs: Vec<f64>) -> Self {
        assert!(!coeffs.is_empty(), "a spectral field needs at least one mode");
        SpectralField { coeffs }
    }

    pub fn zeros(modes: usize) -> Self {
        SpectralField::new(vec![0.0; modes])
    }

    /// The field `phi_i` inside a space of `modes` coefficients.
    pub fn basis(i: usize, modes: usize) -> Self {
        assert!(i >= 1 && i <= modes);
        let mut coeffs = vec![0.0; modes];
        coeffs[i - 1] = 1.0;
        SpectralField::new(coeffs)
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient of mode `i` (1-based).
    pub fn coeff(&self, i: usize) -> f64 {
        self.coeffs[i - 1]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// `L^2(0,1)` norm (Parseval).
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// `H^1_0` norm `(sum lambda_i c_i^2)^(1/2)`.
    pub fn h1_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| eigenvalue(i + 1) * c * c)
            .sum::<f64>()
            .sqrt()
    }

    /// Point evaluation `sum_i c_i sqrt(2) sin(i pi x)`; `O(J)` per call.
    pub fn evaluate(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * eigenfunction_at(i + 1, x))
            .sum()
    }

    /// Copy truncated (or zero-padded) to `modes` coefficients.
    pub fn resized(&self, modes: usize) -> Self {
        let mut coeffs = vec![0.0; modes];
        let keep = modes.min(self.coeffs.len());
        coeffs[..keep].copy_from_slice(&self.coeffs[..keep]);
        SpectralField::new(coeffs)
    }

    pub fn scaled(&self, a: f64) -> Self {
        SpectralField::new(self.coeffs.iter().map(|c| a * c).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.n_modes(), other.n_modes());
        SpectralField::new(
            self.coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.n_modes(), other.n_modes());
        SpectralField::new(
            self.coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}

/// `lambda_i = pi^2 i^2`. Panics on `i = 0`.
pub fn eigenvalue(i: usize) -> f64 {
    assert!(i >= 1, "mode indices start at 1");
    let k = i as f64 * PI;
    k * k
}

/// `phi_i(x) = sqrt(2) sin(i pi x)`. Panics outside `[0, 1]`.
pub fn eigenfunction_at(i: usize, x: f64) -> f64 {
    assert!(i >= 1, "mode indices start at 1");
    assert!((0.0..=1.0).contains(&x), "evaluation point outside [0, 1]");
    std::f64::consts::SQRT_2 * (i as f64 * PI * x).sin()
}

/// `A^alpha v`: coefficient `i` multiplied by `lambda_i^alpha`.
pub fn fractional_power_apply(alpha: f64, v: &SpectralField) -> SpectralField {
    if alpha == 0.0 {
        return v.clone();
    }
    let coeffs = v
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| eigenvalue(i + 1).powf(alpha) * c)
        .collect();
    SpectralField::new(coeffs)
}

/// `S(t) v = exp(-tA) v`. Panics on `t < 0`.
pub fn semigroup_apply(t: f64, v: &SpectralField) -> SpectralField {
    assert!(t >= 0.0, "the semigroup is only defined for t >= 0");
    let coeffs = v
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| (-eigenvalue(i + 1) * t).exp() * c)
        .collect();
    SpectralField::new(coeffs)
}

/// Operator norm of `A^alpha S(t)` truncated to `modes` modes:
/// `max_{i <= J} lambda_i^alpha exp(-lambda_i t)`.
pub fn smoothing_norm(alpha: f64, t: f64, modes: usize) -> f64 {
    assert!(alpha >= 0.0 && t > 0.0 && modes >= 1);
    (1..=modes)
        .map(|i| {
            let lam = eigenvalue(i);
            lam.powf(alpha) * (-lam * t).exp()
        })
        .fold(0.0, f64::max)
}

/// Supremum of `lambda^alpha exp(-lambda t)` over real `lambda >= lambda_1`;
/// the closed-form envelope of [`smoothing_norm`].
pub fn smoothing_norm_envelope(alpha: f64, t: f64) -> f64 {
    assert!(alpha >= 0.0 && t > 0.0);
    let lam1 = eigenvalue(1);
    if alpha > 0.0 && alpha / t >= lam1 {
        (alpha / t).powf(alpha) * (-alpha).exp()
    } else {
        lam1.powf(alpha) * (-lam1 * t).exp()
    }
}

/// Hilbert-Schmidt norm of `A^{-beta}` truncated to `modes` modes,
/// `(sum_{j<=J} lambda_j^{-2 beta})^(1/2)`; the series converges only for
/// `beta > 1/4`, smaller exponents are rejected as divergent.
pub fn hs_norm_fractional(beta: f64, modes: usize) -> crate::Result<f64> {
    if beta <= 0.25 {
        return Err(crate::Error::Divergent(format!(
            "||A^-beta||_HS diverges for beta = {beta} <= 1/4"
        )));
    }
    let sum: f64 = (1..=modes).map(|j| eigenvalue(j).powf(-2.0 * beta)).sum();
    Ok(sum.sqrt())
}

/// A diagonal operator in the sine eigenbasis; composition of two such
/// operators is the entrywise product of their multiplier vectors.
#[derive(Debug, Clone)]
pub struct SpectralOperatorDiag {
    diag: Vec<f64>,
    description: String,
}

impl SpectralOperatorDiag {
    pub fn new(diag: Vec<f64>, description: impl Into<String>) -> Self {
        SpectralOperatorDiag {
            diag,
            description: description.into(),
        }
    }

    /// `A^alpha` truncated to `modes` modes.
    pub fn fractional_power(alpha: f64, modes: usize) -> Self {
        let diag = (1..=modes).map(|i| eigenvalue(i).powf(alpha)).collect();
        SpectralOperatorDiag::new(diag, format!("A^{alpha}"))
    }

    /// The harmonic mode decay `phi_j -> phi_j / j`.
    pub fn harmonic_decay(modes: usize) -> Self {
        let diag = (1..=modes).map(|j| 1.0 / j as f64).collect();
        SpectralOperatorDiag::new(diag, "diag(1/j)")
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn apply(&self, v: &SpectralField) -> SpectralField {
        assert_eq!(self.diag.len(), v.n_modes(), "operator/field mode mismatch");
        SpectralField::new(
            self.diag
                .iter()
                .zip(v.coeffs())
                .map(|(d, c)| d * c)
                .collect(),
        )
    }

    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.diag.len(), other.diag.len());
        SpectralOperatorDiag::new(
            self.diag
                .iter()
                .zip(&other.diag)
                .map(|(a, b)| a * b)
                .collect(),
            format!("{} . {}", self.description, other.description),
        )
    }
}
