//! Piecewise-linear finite elements on a uniform mesh of the unit interval.
//!
//! The mesh has `N = 1/h` elements and `n = N - 1` interior nodes; fields
//! vanish on the boundary. Mass and stiffness matrices are the classic P1
//! tridiagonals. On a uniform mesh the generalized eigenproblem
//! `K w = mu M w` has closed-form solutions
//!
//! ```text
//! w_k(x_j) = c_k sin(k pi j h),   mu_k = (6/h^2) (1 - cos(k pi h)) / (2 + cos(k pi h)),
//! ```
//!
//! with `c_k = sqrt(6 / (2 + cos(k pi h)))` making the vectors mass
//! orthonormal. The discrete semigroup `S_h(t)` and fractional powers of the
//! discrete Laplacian `A_h = M^{-1} K` are exact diagonal operations in that
//! basis; the basis change is a fast sine transform. A dense eigensolver is
//! kept in the tests as an independent cross-check of the closed form.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::{self, SpectralField};
use crate::transforms::{DstScratch, SineTransform};

/// Symmetric tridiagonal matrix stored as main diagonal and off diagonal.
#[derive(Debug, Clone)]
pub struct Tridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl Tridiag {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn matvec(&self, x: &[f64], out: &mut Vec<f64>) {
        let n = self.n();
        assert_eq!(x.len(), n);
        out.clear();
        out.resize(n, 0.0);
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.off[i] * x[i + 1];
            }
            out[i] = v;
        }
    }

    /// `x^T T y`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.n();
        assert_eq!(x.len(), n);
        assert_eq!(y.len(), n);
        let mut acc = 0.0;
        for i in 0..n {
            let mut v = self.diag[i] * y[i];
            if i > 0 {
                v += self.off[i - 1] * y[i - 1];
            }
            if i + 1 < n {
                v += self.off[i] * y[i + 1];
            }
            acc += x[i] * v;
        }
        acc
    }

    /// Thomas solve; valid for the positive definite matrices used here.
    pub fn solve(&self, b: &[f64], out: &mut Vec<f64>) {
        let n = self.n();
        assert_eq!(b.len(), n);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut beta = self.diag[0];
        c[0] = if n > 1 { self.off[0] / beta } else { 0.0 };
        d[0] = b[0] / beta;
        for i in 1..n {
            beta = self.diag[i] - self.off[i - 1] * c[i - 1];
            if i + 1 < n {
                c[i] = self.off[i] / beta;
            }
            d[i] = (b[i] - self.off[i - 1] * d[i - 1]) / beta;
        }
        out.clear();
        out.resize(n, 0.0);
        out[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            out[i] = d[i] - c[i] * out[i + 1];
        }
    }
}

/// Reusable buffers for the basis changes; one per worker thread.
#[derive(Default)]
pub struct FemScratch {
    pub dst: DstScratch,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
}

/// Uniform P1 finite element space with cached eigendecomposition.
pub struct FemSpace {
    h: f64,
    n_elem: usize,
    mass: Tridiag,
    stiffness: Tridiag,
    /// Generalized eigenvalues `mu_k`, ascending.
    eigenvalues: Vec<f64>,
    /// `c_k` with `w_k(x_j) = c_k sin(k pi j h)`; makes `w_k^T M w_k = 1`.
    eig_scale: Vec<f64>,
    dst: SineTransform,
}

impl FemSpace {
    /// Assemble the space for mesh width `h`; `1/h` must be an integer >= 2.
    pub fn assemble(h: f64) -> Result<Arc<FemSpace>> {
        if h.is_nan() || h <= 0.0 {
            return Err(Error::Config(format!("mesh width must be positive, got {h}")));
        }
        let inv = 1.0 / h;
        let n_elem = inv.round() as usize;
        if n_elem < 2 || (inv - n_elem as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "1/h must be an integer >= 2, got 1/h = {inv}"
            )));
        }
        let h = 1.0 / n_elem as f64;
        let n = n_elem - 1;
        let stiffness = Tridiag {
            diag: vec![2.0 / h; n],
            off: vec![-1.0 / h; n.saturating_sub(1)],
        };
        let mass = Tridiag {
            diag: vec![2.0 * h / 3.0; n],
            off: vec![h / 6.0; n.saturating_sub(1)],
        };
        let mut eigenvalues = Vec::with_capacity(n);
        let mut eig_scale = Vec::with_capacity(n);
        for k in 1..=n {
            let theta = k as f64 * PI * h;
            let s = (0.5 * theta).sin();
            let denom = 2.0 + theta.cos();
            eigenvalues.push(12.0 / (h * h) * s * s / denom);
            eig_scale.push((6.0 / denom).sqrt());
        }
        Ok(Arc::new(FemSpace {
            h,
            n_elem,
            mass,
            stiffness,
            eigenvalues,
            eig_scale,
            dst: SineTransform::new(n_elem),
        }))
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_elem(&self) -> usize {
        self.n_elem
    }

    pub fn n_interior(&self) -> usize {
        self.n_elem - 1
    }

    /// Coordinate of interior node `j` (1-based).
    pub fn node_x(&self, j: usize) -> f64 {
        j as f64 * self.h
    }

    pub fn mass(&self) -> &Tridiag {
        &self.mass
    }

    pub fn stiffness(&self) -> &Tridiag {
        &self.stiffness
    }

    /// Generalized eigenvalue `mu_k` (1-based).
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k - 1]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Materialized mass-orthonormal eigenvector `w_k`.
    pub fn eigenvector(self: &Arc<Self>, k: usize) -> FemField {
        let n = self.n_interior();
        assert!(k >= 1 && k <= n);
        let c = self.eig_scale[k - 1];
        let nodal = (1..=n)
            .map(|j| c * (k as f64 * PI * j as f64 * self.h).sin())
            .collect();
        FemField::new(nodal, self)
    }

    pub fn field_from_nodal(self: &Arc<Self>, nodal: Vec<f64>) -> FemField {
        assert_eq!(nodal.len(), self.n_interior());
        FemField::new(nodal, self)
    }

    pub fn zero_field(self: &Arc<Self>) -> FemField {
        FemField::new(vec![0.0; self.n_interior()], self)
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(self: &Arc<Self>, f: impl Fn(f64) -> f64) -> FemField {
        let nodal = (1..=self.n_interior()).map(|j| f(self.node_x(j))).collect();
        FemField::new(nodal, self)
    }

    /// Expansion coefficients of a field in the eigenbasis: `a_k = w_k^T M u`.
    pub fn to_eigen_coords(&self, nodal: &[f64], scratch: &mut FemScratch) -> Vec<f64> {
        self.mass.matvec(nodal, &mut scratch.buf_a);
        let mut a = std::mem::take(&mut scratch.buf_a);
        self.dst.apply(&mut a, &mut scratch.dst);
        for (ak, ck) in a.iter_mut().zip(&self.eig_scale) {
            *ak *= ck;
        }
        a
    }

    /// Reconstruct nodal values from eigen coefficients (consumes `coords`).
    pub fn from_eigen_coords(&self, mut coords: Vec<f64>, scratch: &mut FemScratch) -> Vec<f64> {
        for (ak, ck) in coords.iter_mut().zip(&self.eig_scale) {
            *ak *= ck;
        }
        self.dst.apply(&mut coords, &mut scratch.dst);
        coords
    }

    /// Discrete Laplacian `A_h u = M^{-1} K u`.
    pub fn laplacian(self: &Arc<Self>, u: &FemField, scratch: &mut FemScratch) -> FemField {
        assert!(u.space_is(self));
        self.stiffness.matvec(u.nodal(), &mut scratch.buf_a);
        let mut out = Vec::new();
        self.mass.solve(&scratch.buf_a, &mut out);
        FemField::new(out, self)
    }

    /// Exact action of the discrete semigroup `exp(-t A_h)`.
    pub fn semigroup(self: &Arc<Self>, t: f64, u: &FemField, scratch: &mut FemScratch) -> FemField {
        assert!(t >= 0.0, "the semigroup is only defined for t >= 0");
        assert!(u.space_is(self));
        let mut a = self.to_eigen_coords(u.nodal(), scratch);
        for (ak, mu) in a.iter_mut().zip(&self.eigenvalues) {
            *ak *= (-mu * t).exp();
        }
        FemField::new(self.from_eigen_coords(a, scratch), self)
    }

    /// `A_h^beta u` through the eigendecomposition.
    pub fn fractional(self: &Arc<Self>, beta: f64, u: &FemField, scratch: &mut FemScratch) -> FemField {
        assert!(u.space_is(self));
        if beta == 0.0 {
            return u.clone();
        }
        let mut a = self.to_eigen_coords(u.nodal(), scratch);
        for (ak, mu) in a.iter_mut().zip(&self.eigenvalues) {
            *ak *= mu.powf(beta);
        }
        FemField::new(self.from_eigen_coords(a, scratch), self)
    }

    /// `L^2` projection of a function given by point evaluation, with
    /// 4-point Gauss-Legendre quadrature per element.
    pub fn l2_project_fn(self: &Arc<Self>, f: impl Fn(f64) -> f64) -> FemField {
        const GP: [f64; 4] = [
            -0.861_136_311_594_052_6,
            -0.339_981_043_584_856_3,
            0.339_981_043_584_856_3,
            0.861_136_311_594_052_6,
        ];
        const GW: [f64; 4] = [
            0.347_854_845_137_453_86,
            0.652_145_154_862_546_1,
            0.652_145_154_862_546_1,
            0.347_854_845_137_453_86,
        ];
        let n = self.n_interior();
        let h = self.h;
        let mut b = vec![0.0; n];
        for e in 0..self.n_elem {
            let x_left = e as f64 * h;
            for (gp, gw) in GP.iter().zip(GW.iter()) {
                let x = x_left + 0.5 * h * (1.0 + gp);
                let w = 0.5 * h * gw;
                let fx = f(x);
                let local = (x - x_left) / h;
                // Left hat (node e) and right hat (node e + 1), skipping boundary.
                if e >= 1 {
                    b[e - 1] += w * fx * (1.0 - local);
                }
                if e < n {
                    b[e] += w * fx * local;
                }
            }
        }
        let mut c = Vec::new();
        self.mass.solve(&b, &mut c);
        FemField::new(c, self)
    }

    /// `L^2` projection of a sine series, using the exact element integrals
    /// `(phi_m, psi_j)`.
    pub fn l2_project_spectral(
        self: &Arc<Self>,
        v: &SpectralField,
        scratch: &mut FemScratch,
    ) -> FemField {
        let coupling = self.coupling(v.n_modes());
        self.project_coeffs(&coupling, v.coeffs(), scratch)
    }

    /// Ritz (energy) projection of a `C^0` function: load values
    /// `b_j = (2 f(x_j) - f(x_{j-1}) - f(x_{j+1})) / h` are the exact element
    /// integrals of `f' psi_j'`.
    pub fn ritz_project_fn(self: &Arc<Self>, f: impl Fn(f64) -> f64) -> FemField {
        let n = self.n_interior();
        let h = self.h;
        let vals: Vec<f64> = (0..=self.n_elem).map(|j| f(j as f64 * h)).collect();
        let b: Vec<f64> = (1..=n)
            .map(|j| (2.0 * vals[j] - vals[j - 1] - vals[j + 1]) / h)
            .collect();
        let mut c = Vec::new();
        self.stiffness.solve(&b, &mut c);
        FemField::new(c, self)
    }

    pub fn ritz_project_spectral(self: &Arc<Self>, v: &SpectralField) -> FemField {
        self.ritz_project_fn(|x| v.evaluate(x))
    }

    /// Coupling tables between the first `j_modes` sine modes and this mesh.
    pub fn coupling(&self, j_modes: usize) -> SpectralCoupling {
        SpectralCoupling::new(self, j_modes)
    }

    /// `P^h` applied to the sine series with the given coefficients.
    pub fn project_coeffs(
        self: &Arc<Self>,
        coupling: &SpectralCoupling,
        coeffs: &[f64],
        scratch: &mut FemScratch,
    ) -> FemField {
        let b = self.load_vector(coupling, coeffs, scratch);
        let mut c = Vec::new();
        self.mass.solve(&b, &mut c);
        FemField::new(c, self)
    }

    /// Load vector `b_j = (sum_m c_m phi_m, psi_j)` via mode folding.
    pub fn load_vector(
        &self,
        coupling: &SpectralCoupling,
        coeffs: &[f64],
        scratch: &mut FemScratch,
    ) -> Vec<f64> {
        assert!(coeffs.len() <= coupling.j_modes);
        let n = self.n_interior();
        let mut g = vec![0.0; n];
        for (m, &c) in coeffs.iter().enumerate() {
            let idx = coupling.fold_index[m];
            if idx > 0 {
                g[idx - 1] += coupling.fold_sign[m] * coupling.load_weight[m] * c;
            }
        }
        self.dst.apply(&mut g, &mut scratch.dst);
        g
    }

    /// Exact sine coefficients `(u, phi_m)` of a nodal field for
    /// `m = 1..=j_modes`.
    pub fn spectral_coeffs(
        &self,
        coupling: &SpectralCoupling,
        nodal: &[f64],
        scratch: &mut FemScratch,
    ) -> Vec<f64> {
        assert_eq!(nodal.len(), self.n_interior());
        scratch.buf_b.clear();
        scratch.buf_b.extend_from_slice(nodal);
        let mut d = std::mem::take(&mut scratch.buf_b);
        self.dst.apply(&mut d, &mut scratch.dst);
        let out = (0..coupling.j_modes)
            .map(|m| {
                let idx = coupling.fold_index[m];
                if idx == 0 {
                    0.0
                } else {
                    coupling.fold_sign[m] * coupling.load_weight[m] * d[idx - 1]
                }
            })
            .collect();
        scratch.buf_b = d;
        out
    }

    /// Nodal values of `sum_m weight_m (u, phi_m) phi_m`, the generic
    /// mode-weighted smoothing used for the diffusion operator.
    pub fn mode_weighted_node_values(
        &self,
        coupling: &SpectralCoupling,
        nodal: &[f64],
        mode_weights: &[f64],
        scratch: &mut FemScratch,
    ) -> Vec<f64> {
        assert_eq!(mode_weights.len(), coupling.j_modes);
        let coeffs = self.spectral_coeffs(coupling, nodal, scratch);
        let n = self.n_interior();
        let mut g = vec![0.0; n];
        for m in 0..coupling.j_modes {
            let idx = coupling.fold_index[m];
            if idx > 0 {
                g[idx - 1] += coupling.fold_sign[m] * mode_weights[m] * coeffs[m];
            }
        }
        self.dst.apply(&mut g, &mut scratch.dst);
        for v in g.iter_mut() {
            *v *= SQRT_2;
        }
        g
    }

    /// Exact nodal prolongation onto a nested finer mesh.
    pub fn prolong_to(self: &Arc<Self>, fine: &Arc<FemSpace>, u: &FemField) -> FemField {
        assert!(u.space_is(self));
        assert!(
            fine.n_elem.is_multiple_of(self.n_elem),
            "meshes must be nested for exact prolongation"
        );
        let coarse_n = self.n_elem;
        let fine_n = fine.n_elem;
        let nodal = u.nodal();
        let value = |j: usize| -> f64 {
            if j == 0 || j == coarse_n {
                0.0
            } else {
                nodal[j - 1]
            }
        };
        let out = (1..fine_n)
            .map(|i| {
                let q = i * coarse_n;
                let j = q / fine_n;
                let rem = q % fine_n;
                let frac = rem as f64 / fine_n as f64;
                (1.0 - frac) * value(j) + frac * value(j + 1)
            })
            .collect();
        FemField::new(out, fine)
    }

    /// Estimate of the operator norm of `A^{s/2} (I - P^h) A^{-r/2}` over the
    /// span of the first `j_modes` eigenfunctions (power iteration on the
    /// Gram matrix). For `s = 0` the Gram entries are exact; for `s > 0` the
    /// projected parts are expanded over a finite mode tail.
    pub fn projection_error_norm(
        self: &Arc<Self>,
        s: f64,
        r: f64,
        j_modes: usize,
        scratch: &mut FemScratch,
    ) -> f64 {
        assert!((0.0..=1.0).contains(&s), "s must lie in [0, 1]");
        assert!(r >= s && r <= 2.0, "r must lie in [s, 2]");
        let jm = j_modes;
        let coupling = self.coupling(jm.max(8 * self.n_elem));
        // Nodal projections q_m = P^h phi_m and their plain DSTs.
        let mut q = Vec::with_capacity(jm);
        let mut qdst = Vec::with_capacity(jm);
        for m in 1..=jm {
            let mut coeffs = vec![0.0; m];
            coeffs[m - 1] = 1.0;
            let field = self.project_coeffs(&coupling, &coeffs, scratch);
            let mut d = field.nodal().to_vec();
            self.dst.apply(&mut d, &mut scratch.dst);
            q.push(field.into_nodal());
            qdst.push(d);
        }
        // (phi_m, q) for any nodal q with precomputed DST.
        let pairing = |m: usize, dst_q: &[f64]| -> f64 {
            let idx = coupling.fold_index[m - 1];
            if idx == 0 {
                0.0
            } else {
                coupling.fold_sign[m - 1] * coupling.load_weight[m - 1] * dst_q[idx - 1]
            }
        };
        let mut gram = vec![0.0; jm * jm];
        if s == 0.0 {
            for a in 0..jm {
                for b in a..jm {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    let val = delta - pairing(a + 1, &qdst[b]) - pairing(b + 1, &qdst[a])
                        + self.mass.quad_form(&q[a], &q[b]);
                    let w = spectral::eigenvalue(a + 1).powf(-0.5 * r)
                        * spectral::eigenvalue(b + 1).powf(-0.5 * r);
                    gram[a * jm + b] = w * val;
                    gram[b * jm + a] = w * val;
                }
            }
        } else {
            // q_m expanded over modes i <= tail; (A^s q_a, q_b) by weighted sums.
            let tail = coupling.j_modes;
            let mut qhat = vec![0.0; jm * tail];
            for a in 0..jm {
                for (i, slot) in qhat[a * tail..(a + 1) * tail].iter_mut().enumerate() {
                    let idx = coupling.fold_index[i];
                    *slot = if idx == 0 {
                        0.0
                    } else {
                        coupling.fold_sign[i] * coupling.load_weight[i] * qdst[a][idx - 1]
                    };
                }
            }
            let lam_s: Vec<f64> = (1..=tail).map(|i| spectral::eigenvalue(i).powf(s)).collect();
            for a in 0..jm {
                for b in a..jm {
                    let delta = if a == b { lam_s[a] } else { 0.0 };
                    let mut cross = 0.0;
                    for i in 0..tail {
                        cross += lam_s[i] * qhat[a * tail + i] * qhat[b * tail + i];
                    }
                    let val = delta - lam_s[a] * qhat[b * tail + a] - lam_s[b] * qhat[a * tail + b]
                        + cross;
                    let w = spectral::eigenvalue(a + 1).powf(-0.5 * r)
                        * spectral::eigenvalue(b + 1).powf(-0.5 * r);
                    gram[a * jm + b] = w * val;
                    gram[b * jm + a] = w * val;
                }
            }
        }
        // Power iteration for the largest eigenvalue of the PSD Gram matrix.
        let mut v = vec![1.0 / (jm as f64).sqrt(); jm];
        let mut gv = vec![0.0; jm];
        let mut lambda = 0.0;
        for _ in 0..600 {
            for a in 0..jm {
                gv[a] = (0..jm).map(|b| gram[a * jm + b] * v[b]).sum();
            }
            let norm = gv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next: f64 = v.iter().zip(&gv).map(|(a, b)| a * b).sum();
            for (vi, gi) in v.iter_mut().zip(&gv) {
                *vi = gi / norm;
            }
            if (next - lambda).abs() <= 1e-14 * next.abs().max(1e-300) {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda.max(0.0).sqrt()
    }
}

/// Precomputed fold tables between sine modes and a uniform mesh.
///
/// `sin(m pi j / N)` is periodic in `m` with antiperiod `N`: writing
/// `m mod 2N = r`, the mode vanishes on the grid for `r = 0` or `r = N`,
/// aliases to `+r` for `r < N` and to `-(2N - r)` otherwise. `load_weight`
/// carries the exact hat-function integrals
/// `(phi_m, psi_j) = s_m sin(m pi j h)` with
/// `s_m = 4 sqrt(2) sin^2(m pi h / 2) / (m^2 pi^2 h)`.
pub struct SpectralCoupling {
    j_modes: usize,
    fold_index: Vec<usize>, // 0 marks an annihilated mode, else 1-based row
    fold_sign: Vec<f64>,
    load_weight: Vec<f64>,
}

impl SpectralCoupling {
    fn new(space: &FemSpace, j_modes: usize) -> Self {
        let big_n = space.n_elem;
        let h = space.h;
        let mut fold_index = Vec::with_capacity(j_modes);
        let mut fold_sign = Vec::with_capacity(j_modes);
        let mut load_weight = Vec::with_capacity(j_modes);
        for m in 1..=j_modes {
            let r = m % (2 * big_n);
            let (idx, sign) = if r == 0 || r == big_n {
                (0, 0.0)
            } else if r < big_n {
                (r, 1.0)
            } else {
                (2 * big_n - r, -1.0)
            };
            fold_index.push(idx);
            fold_sign.push(sign);
            let sh = (0.5 * m as f64 * PI * h).sin();
            load_weight.push(4.0 * SQRT_2 * sh * sh / ((m * m) as f64 * PI * PI * h));
        }
        SpectralCoupling {
            j_modes,
            fold_index,
            fold_sign,
            load_weight,
        }
    }

    pub fn j_modes(&self) -> usize {
        self.j_modes
    }
}

/// A function in the P1 space, stored by its interior nodal values.
#[derive(Clone)]
pub struct FemField {
    nodal: Vec<f64>,
    space: Arc<FemSpace>,
}

impl FemField {
    fn new(nodal: Vec<f64>, space: &Arc<FemSpace>) -> Self {
        FemField {
            nodal,
            space: Arc::clone(space),
        }
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn space_is(&self, space: &Arc<FemSpace>) -> bool {
        Arc::ptr_eq(&self.space, space) || self.space.n_elem == space.n_elem
    }

    pub fn nodal(&self) -> &[f64] {
        &self.nodal
    }

    pub fn nodal_mut(&mut self) -> &mut [f64] {
        &mut self.nodal
    }

    pub fn into_nodal(self) -> Vec<f64> {
        self.nodal
    }

    /// `L^2` norm through the mass matrix.
    pub fn l2_norm(&self) -> f64 {
        self.space.mass.quad_form(&self.nodal, &self.nodal).max(0.0).sqrt()
    }

    /// `H^1` seminorm through the stiffness matrix (equals the `H^1_0` norm
    /// of the represented function).
    pub fn h1_seminorm(&self) -> f64 {
        self.space
            .stiffness
            .quad_form(&self.nodal, &self.nodal)
            .max(0.0)
            .sqrt()
    }

    /// Max norm; piecewise linear functions attain it at a node.
    pub fn linf_norm(&self) -> f64 {
        self.nodal.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Point evaluation of the piecewise linear function.
    pub fn evaluate(&self, x: f64) -> f64 {
        assert!((0.0..=1.0).contains(&x));
        let n_elem = self.space.n_elem;
        let pos = x * n_elem as f64;
        let j = (pos.floor() as usize).min(n_elem - 1);
        let frac = pos - j as f64;
        let left = if j == 0 { 0.0 } else { self.nodal[j - 1] };
        let right = if j + 1 == n_elem { 0.0 } else { self.nodal[j] };
        (1.0 - frac) * left + frac * right
    }

    pub fn scaled(&self, a: f64) -> Self {
        FemField {
            nodal: self.nodal.iter().map(|v| a * v).collect(),
            space: Arc::clone(&self.space),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.nodal.len(), other.nodal.len());
        FemField {
            nodal: self
                .nodal
                .iter()
                .zip(&other.nodal)
                .map(|(a, b)| a + b)
                .collect(),
            space: Arc::clone(&self.space),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.nodal.len(), other.nodal.len());
        FemField {
            nodal: self
                .nodal
                .iter()
                .zip(&other.nodal)
                .map(|(a, b)| a - b)
                .collect(),
            space: Arc::clone(&self.space),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scratch() -> FemScratch {
        FemScratch::default()
    }

    #[test]
    fn assemble_smallest_meshes_exactly() {
        let s = FemSpace::assemble(0.5).unwrap();
        assert_eq!(s.n_interior(), 1);
        assert_relative_eq!(s.stiffness().diag[0], 4.0, max_relative = 1e-15);
        assert_relative_eq!(s.mass().diag[0], 1.0 / 3.0, max_relative = 1e-15);

        let s = FemSpace::assemble(0.25).unwrap();
        assert_relative_eq!(s.stiffness().diag[1], 8.0, max_relative = 1e-15);
        assert_relative_eq!(s.stiffness().off[0], -4.0, max_relative = 1e-15);
        assert_relative_eq!(s.mass().diag[1], 1.0 / 6.0, max_relative = 1e-15);
        assert_relative_eq!(s.mass().off[0], 1.0 / 24.0, max_relative = 1e-15);
    }

    #[test]
    fn assemble_rejects_bad_widths() {
        assert!(FemSpace::assemble(0.4).is_err());
        assert!(FemSpace::assemble(1.0).is_err());
        assert!(FemSpace::assemble(-0.25).is_err());
    }

    #[test]
    fn first_eigenvalue_obeys_dispersion_interval() {
        for i in 1..=7 {
            let h = 0.5_f64.powi(i);
            let s = FemSpace::assemble(h).unwrap();
            let mu1 = s.eigenvalue(1);
            let lam1 = PI * PI;
            assert!(mu1 >= lam1, "h={h}: {mu1} < {lam1}");
            assert!(mu1 <= lam1 * (1.0 + lam1 * h * h / 6.0 * 1.1), "h={h}");
            if i >= 5 {
                assert!((mu1 - lam1) / lam1 < 0.02);
            }
        }
    }

    /// Dense generalized eigensolver as an independent cross-check of the
    /// closed-form eigenpairs (Cholesky reduction + symmetric QR).
    #[test]
    fn eigendecomposition_matches_dense_solver() {
        use nalgebra::{DMatrix, SymmetricEigen};
        let space = FemSpace::assemble(1.0 / 16.0).unwrap();
        let n = space.n_interior();
        let to_dense = |t: &Tridiag| {
            let mut m = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                m[(i, i)] = t.diag[i];
                if i + 1 < n {
                    m[(i, i + 1)] = t.off[i];
                    m[(i + 1, i)] = t.off[i];
                }
            }
            m
        };
        let mass = to_dense(space.mass());
        let stiff = to_dense(space.stiffness());
        let chol = mass.clone().cholesky().unwrap();
        let l_inv = chol.l().try_inverse().unwrap();
        let reduced = &l_inv * stiff * l_inv.transpose();
        let sym = (reduced.clone() + reduced.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut mus: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for k in 1..=n {
            assert_relative_eq!(mus[k - 1], space.eigenvalue(k), max_relative = 1e-10);
        }
        // Mass orthonormality of the closed-form vectors.
        for k in [1usize, 2, n / 2 + 1, n] {
            let wk = space.eigenvector(k);
            for l in [1usize, 2, n / 2 + 1, n] {
                let wl = space.eigenvector(l);
                let ip = space.mass().quad_form(wk.nodal(), wl.nodal());
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-10, "({k},{l}): {ip}");
            }
        }
    }

    #[test]
    fn eigen_coordinate_roundtrip() {
        let space = FemSpace::assemble(1.0 / 32.0).unwrap();
        let mut sc = scratch();
        let u: Vec<f64> = (1..space.n_elem()).map(|j| ((j * j) as f64 * 0.11).sin()).collect();
        let a = space.to_eigen_coords(&u, &mut sc);
        let back = space.from_eigen_coords(a, &mut sc);
        for (x, y) in u.iter().zip(&back) {
            assert!((x - y).abs() < 1e-11);
        }
    }

    #[test]
    fn l2_projection_is_idempotent_on_the_space() {
        let space = FemSpace::assemble(1.0 / 8.0).unwrap();
        let v = space.field_from_nodal(vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.05, 0.4]);
        let proj = space.l2_project_fn(|x| v.evaluate(x));
        for (a, b) in proj.nodal().iter().zip(v.nodal()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = space.l2_project_fn(|_| 0.0);
        assert!(zero.l2_norm() < 1e-15);
    }

    #[test]
    fn l2_projection_of_first_mode_on_two_elements() {
        let space = FemSpace::assemble(0.5).unwrap();
        let mut sc = scratch();
        let phi1 = SpectralField::basis(1, 1);
        let proj = space.l2_project_spectral(&phi1, &mut sc);
        // Hand integral: (phi_1, psi_1) = 4 sqrt(2) / pi^2, mass = 1/3.
        let expect = 12.0 * SQRT_2 / (PI * PI);
        assert_relative_eq!(proj.nodal()[0], expect, max_relative = 1e-13);
        // 4-point Gauss on two half-interval elements carries ~1e-7 error.
        let viaq = space.l2_project_fn(|x| phi1.evaluate(x));
        assert_relative_eq!(viaq.nodal()[0], expect, max_relative = 1e-6);
    }

    #[test]
    fn exact_spectral_loads_match_quadrature() {
        let space = FemSpace::assemble(1.0 / 16.0).unwrap();
        let mut sc = scratch();
        let v = SpectralField::new(vec![0.7, 0.0, -0.4, 0.2, 0.1]);
        let fast = space.l2_project_spectral(&v, &mut sc);
        let slow = space.l2_project_fn(|x| v.evaluate(x));
        for (a, b) in fast.nodal().iter().zip(slow.nodal()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn spectral_coeffs_are_exact_hat_integrals() {
        let space = FemSpace::assemble(1.0 / 8.0).unwrap();
        let mut sc = scratch();
        let u = space.interpolate(|x| x * (1.0 - x));
        let coupling = space.coupling(24);
        let coeffs = space.spectral_coeffs(&coupling, u.nodal(), &mut sc);
        // Reference by midpoint quadrature of u(x) phi_m(x).
        for m in [1usize, 2, 7, 8, 9, 16, 23] {
            let mut acc = 0.0;
            let panels = 8192;
            for p in 0..panels {
                let a = p as f64 / panels as f64;
                let b = (p + 1) as f64 / panels as f64;
                let xm = 0.5 * (a + b);
                acc += (b - a) * u.evaluate(xm) * spectral::eigenfunction_at(m, xm);
            }
            assert!(
                (coeffs[m - 1] - acc).abs() < 1e-6,
                "mode {m}: {} vs {acc}",
                coeffs[m - 1]
            );
        }
    }

    #[test]
    fn ritz_projection_reproduces_the_space_and_converges_in_h1() {
        let space = FemSpace::assemble(1.0 / 8.0).unwrap();
        let v = space.field_from_nodal(vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.05, 0.4]);
        let proj = space.ritz_project_fn(|x| v.evaluate(x));
        for (a, b) in proj.nodal().iter().zip(v.nodal()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = space.ritz_project_fn(|_| 0.0);
        assert!(zero.h1_seminorm() < 1e-15);

        // H^1 error for phi_1 decays like h (Galerkin orthogonality gives
        // err^2 = |phi_1|_1^2 - |R phi_1|_1^2).
        let phi1 = SpectralField::basis(1, 1);
        let err = |h: f64| {
            let sp = FemSpace::assemble(h).unwrap();
            let r = sp.ritz_project_spectral(&phi1);
            (PI * PI - r.h1_seminorm().powi(2)).max(0.0).sqrt()
        };
        let ratio = err(1.0 / 16.0) / err(1.0 / 32.0);
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn laplacian_matches_eigenpairs_and_dispersion() {
        let space = FemSpace::assemble(1.0 / 64.0).unwrap();
        let mut sc = scratch();
        let zero = space.zero_field();
        assert!(space.laplacian(&zero, &mut sc).l2_norm() < 1e-15);

        let w3 = space.eigenvector(3);
        let aw = space.laplacian(&w3, &mut sc);
        let expect = w3.scaled(space.eigenvalue(3));
        assert!(aw.sub(&expect).l2_norm() < 1e-9 * expect.l2_norm());

        // Interpolant of phi_1: A_h u ~ pi^2 u within 1% relative L^2.
        let u = space.interpolate(|x| spectral::eigenfunction_at(1, x));
        let au = space.laplacian(&u, &mut sc);
        let rel = au.sub(&u.scaled(PI * PI)).l2_norm() / u.scaled(PI * PI).l2_norm();
        assert!(rel <= 0.01, "relative error {rel}");
    }

    /// Crank-Nicolson with 10^4 substeps as an independent oracle for the
    /// exact discrete semigroup action.
    #[test]
    fn discrete_semigroup_matches_crank_nicolson() {
        let space = FemSpace::assemble(1.0 / 32.0).unwrap();
        let mut sc = scratch();
        let n = space.n_interior();
        let u0: Vec<f64> = (0..n).map(|j| ((j * 37 + 11) % 17) as f64 / 17.0 - 0.5).collect();
        let u = space.field_from_nodal(u0.clone());
        assert!(space.semigroup(0.0, &u, &mut sc).sub(&u).l2_norm() < 1e-14);

        let t = 0.1;
        let exact = space.semigroup(t, &u, &mut sc);

        let substeps = 10_000;
        let dt = t / substeps as f64;
        let mix = |a: f64| Tridiag {
            diag: space
                .mass()
                .diag
                .iter()
                .zip(&space.stiffness().diag)
                .map(|(m, k)| m + a * dt * k)
                .collect(),
            off: space
                .mass()
                .off
                .iter()
                .zip(&space.stiffness().off)
                .map(|(m, k)| m + a * dt * k)
                .collect(),
        };
        let lhs = mix(0.5);
        let rhs = mix(-0.5);
        let mut cur = u0;
        let mut b = Vec::new();
        let mut next = Vec::new();
        for _ in 0..substeps {
            rhs.matvec(&cur, &mut b);
            lhs.solve(&b, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        let cn = space.field_from_nodal(cur);
        let rel = exact.sub(&cn).l2_norm() / exact.l2_norm();
        assert!(rel < 1e-6, "relative deviation {rel}");

        let w2 = space.eigenvector(2);
        let decayed = space.semigroup(0.25, &w2, &mut sc);
        let expect = w2.scaled((-space.eigenvalue(2) * 0.25).exp());
        assert!(decayed.sub(&expect).l2_norm() < 1e-12);
    }

    #[test]
    fn fractional_powers_compose() {
        let space = FemSpace::assemble(1.0 / 16.0).unwrap();
        let mut sc = scratch();
        let u = space.interpolate(|x| (2.0 * PI * x).sin() * x);
        assert!(space.fractional(0.0, &u, &mut sc).sub(&u).l2_norm() < 1e-15);
        let full = space.fractional(1.0, &u, &mut sc);
        let lap = space.laplacian(&u, &mut sc);
        assert!(full.sub(&lap).l2_norm() <= 1e-9 * lap.l2_norm().max(1.0));
        let half = space.fractional(0.5, &u, &mut sc);
        let half_twice = space.fractional(0.5, &half, &mut sc);
        assert!(half_twice.sub(&full).l2_norm() <= 1e-10 * full.l2_norm().max(1.0));
    }

    #[test]
    fn prolongation_is_exact_on_nested_meshes() {
        let coarse = FemSpace::assemble(1.0 / 8.0).unwrap();
        let fine = FemSpace::assemble(1.0 / 64.0).unwrap();
        let u = coarse.interpolate(|x| x * (1.0 - x) * (3.0 * x).cos());
        let up = coarse.prolong_to(&fine, &u);
        for &x in &[0.0, 0.113, 0.25, 0.5, 0.77, 0.999, 1.0] {
            assert!((u.evaluate(x) - up.evaluate(x)).abs() < 1e-14);
        }
        assert_relative_eq!(u.l2_norm(), up.l2_norm(), max_relative = 1e-12);
    }

    #[test]
    fn projection_error_halving_rates() {
        let mut sc = scratch();
        let norms: Vec<(f64, f64)> = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
            .iter()
            .map(|&h| {
                let space = FemSpace::assemble(h).unwrap();
                let jm = (4.0 / h) as usize;
                (
                    space.projection_error_norm(0.0, 1.0, jm, &mut sc),
                    space.projection_error_norm(0.0, 2.0, jm, &mut sc),
                )
            })
            .collect();
        for w in norms.windows(2) {
            let r1 = w[0].0 / w[1].0;
            let r2 = w[0].1 / w[1].1;
            assert!((1.8..=2.2).contains(&r1), "(0,1) ratio {r1}");
            assert!((3.5..=4.5).contains(&r2), "(0,2) ratio {r2}");
        }
    }

    #[test]
    fn field_norms_and_energy_identity() {
        let space = FemSpace::assemble(1.0 / 32.0).unwrap();
        let mut sc = scratch();
        let u = space.interpolate(|x| x * (1.0 - x));
        // |u|_1^2 = u^T K u equals the L^2 norm of A_h^{1/2} u.
        let half = space.fractional(0.5, &u, &mut sc);
        assert_relative_eq!(
            half.l2_norm().powi(2),
            u.h1_seminorm().powi(2),
            max_relative = 1e-10
        );
        assert!(u.linf_norm() <= 0.25 + 1e-12);
    }
}
