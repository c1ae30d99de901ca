//! Pathwise sensitivities along a carrier trajectory.
//!
//! Three linear(ized) equations are advanced in lockstep with the splitting
//! scheme, sharing its noise increments and its exponential Euler structure:
//!
//! - the first variation `eta` (derivative of the state with respect to the
//!   initial value along a direction `y`), driven by the derivatives of the
//!   per-step maps `F_tau`, `G_tau`;
//! - the second variation `zeta` along a pair `(y, z)`, with the bilinear
//!   forcings `D^2 F_tau (eta_y, eta_z)` and `D^2 G_tau (eta_y, eta_z)`;
//! - the Malliavin derivative `D_s^u X(t)`, which starts at time `s` from
//!   `P^h G(X(s)) u` and evolves with the derivatives of the original
//!   (non-split) coefficients.
//!
//! Because every stage mirrors the carrier's discrete pipeline, `eta` is the
//! exact linearization of the discrete flow: pathwise finite differences of
//! the carrier converge to it at rate `epsilon` with no `tau` floor.
//!
//! The module also carries a finite-dimensional Malliavin
//! integration-by-parts identity where both sides are computable, one by
//! Monte Carlo and one in closed form.

use crate::error::{Error, Result};
use crate::model::{self, DiffusionSpec};
use crate::noise::{self, NoisePath};
use crate::schemes::{DriftKind, Field, SchemeConfig, SchemeKind, SpaceKind, Stepper};
use crate::spectral::SpectralField;
use crate::transforms::mean_and_std;

/// Advances a carrier trajectory together with variation equations.
///
/// The carrier state, the variations and all scratch live here; one solver
/// per worker thread.
pub struct SensitivitySolver {
    cfg: SchemeConfig,
    stepper: Stepper,
    aux: AuxPlan,
}

/// Extra precomputation for the linearized steps.
#[allow(clippy::large_enum_variant)]
enum AuxPlan {
    Spectral {
        modes: usize,
        colloc: model::Collocation,
        diffusion: model::SpectralDiffusion,
        decay: Vec<f64>,
        ws: model::CollocScratch,
        grid: GridBufs,
    },
    Fem {
        space: std::sync::Arc<crate::fem::FemSpace>,
        diffusion: model::FemDiffusion,
        decay: Vec<f64>,
        scratch: crate::fem::FemScratch,
        buf: Vec<f64>,
    },
}

#[derive(Default)]
struct GridBufs {
    u: Vec<f64>,
    w: Vec<f64>,
    gw: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl SensitivitySolver {
    pub fn new(cfg: &SchemeConfig, j_noise: usize) -> Result<SensitivitySolver> {
        if cfg.scheme != SchemeKind::SplittingExpoEuler {
            return Err(Error::Config(
                "sensitivities are defined along the splitting scheme".into(),
            ));
        }
        let aux = match &cfg.space {
            SpaceKind::Spectral { modes } => AuxPlan::Spectral {
                modes: *modes,
                colloc: model::Collocation::for_modes(*modes),
                diffusion: model::SpectralDiffusion::new(&cfg.diffusion, *modes),
                decay: (1..=*modes)
                    .map(|j| (-crate::spectral::eigenvalue(j) * cfg.tau).exp())
                    .collect(),
                ws: model::CollocScratch::default(),
                grid: GridBufs::default(),
            },
            SpaceKind::Fem(space) => AuxPlan::Fem {
                diffusion: model::FemDiffusion::new(&cfg.diffusion, space, j_noise),
                decay: space
                    .eigenvalues()
                    .iter()
                    .map(|mu| (-mu * cfg.tau).exp())
                    .collect(),
                space: std::sync::Arc::clone(space),
                scratch: crate::fem::FemScratch::default(),
                buf: Vec::new(),
            },
        };
        Ok(SensitivitySolver {
            cfg: cfg.clone(),
            stepper: Stepper::new(cfg, j_noise)?,
            aux,
        })
    }

    pub fn initial_state(&self) -> Field {
        self.stepper.initial_state()
    }

    /// Direction `y` realized in the run's space.
    pub fn direction(&self, y: &SpectralField) -> Field {
        match &self.aux {
            AuxPlan::Spectral { modes, .. } => Field::Spectral(y.resized(*modes)),
            AuxPlan::Fem { space, .. } => {
                let mut sc = crate::fem::FemScratch::default();
                Field::Fem(space.l2_project_spectral(y, &mut sc))
            }
        }
    }

    /// Advance the carrier by one step.
    pub fn step_carrier(&mut self, state: &mut Field, dw: &SpectralField, k: usize) -> Result<()> {
        self.stepper.step(state, dw, k)
    }

    /// `G(x) u` realized in the run's space; the Malliavin initial condition
    /// at the observation time.
    pub fn malliavin_initial(&mut self, x: &Field, u: &SpectralField) -> Result<Field> {
        match (&mut self.aux, x) {
            (
                AuxPlan::Spectral {
                    modes,
                    colloc,
                    diffusion,
                    ws,
                    ..
                },
                Field::Spectral(xs),
            ) => {
                let u_run = noise::restrict_modes(u, (*modes).min(u.n_modes()));
                let u_run = u_run.resized(*modes);
                Ok(Field::Spectral(diffusion.apply(colloc, xs, &u_run, ws)?))
            }
            (
                AuxPlan::Fem {
                    diffusion,
                    scratch,
                    buf,
                    space,
                    ..
                },
                Field::Fem(xf),
            ) => {
                let nodal = diffusion.apply(xf.nodal(), u, scratch, buf)?;
                Ok(Field::Fem(space.field_from_nodal(nodal)))
            }
            _ => Err(Error::Dimension("state kind does not match the plan".into())),
        }
    }

    /// One exponential Euler step of the first variation:
    /// `eta <- S_tau (DPhi_tau(x_k) eta + DG_tau(x_k)[eta] dW)`,
    /// with `x_k` the carrier state before its own step.
    pub fn step_first_variation(
        &mut self,
        eta: &mut Field,
        x_k: &Field,
        dw: &SpectralField,
    ) -> Result<()> {
        let tau = self.cfg.tau;
        let drift_on = self.cfg.drift == DriftKind::Cubic;
        match (&mut self.aux, eta, x_k) {
            (
                AuxPlan::Spectral {
                    modes,
                    colloc,
                    diffusion,
                    decay,
                    ws,
                    grid,
                },
                Field::Spectral(eta_s),
                Field::Spectral(xs),
            ) => {
                let spec = diffusion.spec().clone();
                colloc.node_values(xs.coeffs(), &mut grid.u, &mut ws.dst);
                colloc.node_values(eta_s.coeffs(), &mut grid.a, &mut ws.dst);
                // Values of DPhi_tau(x) eta; the linearized drift substep.
                for (e, &x) in grid.a.iter_mut().zip(&grid.u) {
                    *e *= if drift_on {
                        model::flow_derivative(x, tau)
                    } else {
                        1.0
                    };
                }
                let mut etastar =
                    colloc.coeffs_from_values(&mut grid.a, *modes, &mut ws.dst);
                // Noise derivative at X* (values of the flowed carrier).
                let dw_run = noise::restrict_modes(dw, *modes);
                let forcing = spectral_dg(
                    colloc, &spec, xs, tau, drift_on, &etastar, &dw_run, ws, grid,
                )?;
                for ((e, f), d) in etastar.iter_mut().zip(forcing.iter()).zip(decay.iter()) {
                    *e = d * (*e + f);
                }
                *eta_s = SpectralField::new(etastar);
                Ok(())
            }
            (
                AuxPlan::Fem {
                    space,
                    diffusion,
                    decay,
                    scratch,
                    buf,
                },
                Field::Fem(eta_f),
                Field::Fem(xf),
            ) => {
                let spec = diffusion.spec().clone();
                let n = space.n_interior();
                let mut etastar = vec![0.0; n];
                for ((e, &x), &ev) in etastar
                    .iter_mut()
                    .zip(xf.nodal())
                    .zip(eta_f.nodal())
                {
                    *e = ev
                        * if drift_on {
                            model::flow_derivative(x, tau)
                        } else {
                            1.0
                        };
                }
                let xstar: Vec<f64> = xf
                    .nodal()
                    .iter()
                    .map(|&x| if drift_on { model::splitting_flow(x, tau) } else { x })
                    .collect();
                let forcing =
                    fem_dg(space, diffusion, &spec, &xstar, &etastar, dw, scratch, buf)?;
                let mut sum: Vec<f64> = etastar
                    .iter()
                    .zip(&forcing)
                    .map(|(a, b)| a + b)
                    .collect();
                let mut coords = space.to_eigen_coords(&sum, scratch);
                for (c, d) in coords.iter_mut().zip(decay.iter()) {
                    *c *= d;
                }
                sum = space.from_eigen_coords(coords, scratch);
                *eta_f = space.field_from_nodal(sum);
                Ok(())
            }
            _ => Err(Error::Dimension("state kind does not match the plan".into())),
        }
    }

    /// One step of the second variation along `(y, z)`:
    /// `zeta <- S_tau (D^2Phi(x)(eta_y, eta_z) + DPhi(x) zeta + noise)`,
    /// where the noise forcing is
    /// `D^2 G_tau(x)(eta_y, eta_z) dW + DG_tau(x)[zeta] dW`.
    pub fn step_second_variation(
        &mut self,
        zeta: &mut Field,
        eta_y: &Field,
        eta_z: &Field,
        x_k: &Field,
        dw: &SpectralField,
    ) -> Result<()> {
        let tau = self.cfg.tau;
        let drift_on = self.cfg.drift == DriftKind::Cubic;
        match (&mut self.aux, zeta, eta_y, eta_z, x_k) {
            (
                AuxPlan::Spectral {
                    modes,
                    colloc,
                    diffusion,
                    decay,
                    ws,
                    grid,
                },
                Field::Spectral(zeta_s),
                Field::Spectral(ey),
                Field::Spectral(ez),
                Field::Spectral(xs),
            ) => {
                let spec = diffusion.spec().clone();
                colloc.node_values(xs.coeffs(), &mut grid.u, &mut ws.dst);
                colloc.node_values(ey.coeffs(), &mut grid.a, &mut ws.dst);
                colloc.node_values(ez.coeffs(), &mut grid.b, &mut ws.dst);
                // Symmetric product of the two first variations.
                let prod: Vec<f64> = grid
                    .a
                    .iter()
                    .zip(&grid.b)
                    .map(|(a, b)| a * b)
                    .collect();
                // Stage-one second derivative: D2Phi(x) ey ez + DPhi(x) zeta.
                colloc.node_values(zeta_s.coeffs(), &mut grid.a, &mut ws.dst);
                let mut vals: Vec<f64> = grid
                    .u
                    .iter()
                    .zip(prod.iter())
                    .zip(&grid.a)
                    .map(|((&x, &p), &zv)| {
                        if drift_on {
                            model::flow_second_derivative(x, tau) * p
                                + model::flow_derivative(x, tau) * zv
                        } else {
                            zv
                        }
                    })
                    .collect();
                let mut zstar = colloc.coeffs_from_values(&mut vals, *modes, &mut ws.dst);
                let dw_run = noise::restrict_modes(dw, *modes);
                // Linear part of the noise forcing, DG_tau(x)[zstar] dW.
                let lin = spectral_dg(
                    colloc, &spec, xs, tau, drift_on, &zstar, &dw_run, ws, grid,
                )?;
                // Bilinear part: -sin(X*) (DPhi ey)(DPhi ez) A^gamma dW,
                // plus the B1 route through D2Phi handled in zstar above.
                let bil = spectral_d2g(
                    colloc, &spec, xs, tau, drift_on, ey, ez, &dw_run, ws, grid,
                )?;
                for (((zc, l), b), d) in zstar
                    .iter_mut()
                    .zip(lin.iter())
                    .zip(bil.iter())
                    .zip(decay.iter())
                {
                    *zc = d * (*zc + l + b);
                }
                *zeta_s = SpectralField::new(zstar);
                Ok(())
            }
            (
                AuxPlan::Fem {
                    space,
                    diffusion,
                    decay,
                    scratch,
                    buf,
                },
                Field::Fem(zeta_f),
                Field::Fem(ey),
                Field::Fem(ez),
                Field::Fem(xf),
            ) => {
                let spec = diffusion.spec().clone();
                let tau_ = tau;
                let xstar: Vec<f64> = xf
                    .nodal()
                    .iter()
                    .map(|&x| if drift_on { model::splitting_flow(x, tau_) } else { x })
                    .collect();
                let prod: Vec<f64> = ey
                    .nodal()
                    .iter()
                    .zip(ez.nodal())
                    .map(|(a, b)| a * b)
                    .collect();
                let eystar: Vec<f64> = ey
                    .nodal()
                    .iter()
                    .zip(xf.nodal())
                    .map(|(&e, &x)| e * if drift_on { model::flow_derivative(x, tau_) } else { 1.0 })
                    .collect();
                let ezstar: Vec<f64> = ez
                    .nodal()
                    .iter()
                    .zip(xf.nodal())
                    .map(|(&e, &x)| e * if drift_on { model::flow_derivative(x, tau_) } else { 1.0 })
                    .collect();
                let zstar: Vec<f64> = xf
                    .nodal()
                    .iter()
                    .zip(prod.iter())
                    .zip(zeta_f.nodal())
                    .map(|((&x, &p), &zv)| {
                        if drift_on {
                            model::flow_second_derivative(x, tau_) * p
                                + model::flow_derivative(x, tau_) * zv
                        } else {
                            zv
                        }
                    })
                    .collect();
                let lin = fem_dg(space, diffusion, &spec, &xstar, &zstar, dw, scratch, buf)?;
                // Bilinear noise part: -sin(X*) (DPhi ey)(DPhi ez) P^h(A^gamma dW).
                let mut total: Vec<f64> = zstar
                    .iter()
                    .zip(&lin)
                    .map(|(a, b)| a + b)
                    .collect();
                if spec.g_enabled {
                    buf.clear();
                    buf.extend(dw.coeffs().iter().enumerate().map(|(i, c)| {
                        c * crate::spectral::eigenvalue(i + 1).powf(spec.g_smoothing_exponent)
                    }));
                    let coupling = space.coupling(dw.n_modes());
                    let pgw = space.project_coeffs(&coupling, buf, scratch);
                    for (((t, &x), (&ay, &az)), &p) in total
                        .iter_mut()
                        .zip(&xstar)
                        .zip(eystar.iter().zip(&ezstar))
                        .zip(pgw.nodal())
                    {
                        *t += -x.sin() * (ay * az) * p;
                    }
                }
                let mut coords = space.to_eigen_coords(&total, scratch);
                for (c, d) in coords.iter_mut().zip(decay.iter()) {
                    *c *= d;
                }
                let out = space.from_eigen_coords(coords, scratch);
                *zeta_f = space.field_from_nodal(out);
                Ok(())
            }
            _ => Err(Error::Dimension("state kind does not match the plan".into())),
        }
    }

    /// One step of the Malliavin derivative with the derivatives of the
    /// original coefficients:
    /// `D <- S_tau (D + tau (1 - 3 x^2) D + DG(x)[D] dW)`.
    pub fn step_malliavin(
        &mut self,
        d_state: &mut Field,
        x_k: &Field,
        dw: &SpectralField,
    ) -> Result<()> {
        let tau = self.cfg.tau;
        let drift_on = self.cfg.drift == DriftKind::Cubic;
        match (&mut self.aux, d_state, x_k) {
            (
                AuxPlan::Spectral {
                    modes,
                    colloc,
                    diffusion,
                    decay,
                    ws,
                    grid,
                },
                Field::Spectral(ds),
                Field::Spectral(xs),
            ) => {
                let spec = diffusion.spec().clone();
                colloc.node_values(xs.coeffs(), &mut grid.u, &mut ws.dst);
                colloc.node_values(ds.coeffs(), &mut grid.a, &mut ws.dst);
                let mut vals: Vec<f64> = grid
                    .u
                    .iter()
                    .zip(&grid.a)
                    .map(|(&x, &dv)| {
                        let df = if drift_on { model::drift_derivative(x) } else { 0.0 };
                        dv + tau * df * dv
                    })
                    .collect();
                let mut lin = colloc.coeffs_from_values(&mut vals, *modes, &mut ws.dst);
                let dw_run = noise::restrict_modes(dw, *modes);
                // DG at the carrier state itself (not flowed).
                let forcing = spectral_dg_raw(
                    colloc, &spec, xs, ds, &dw_run, ws, grid,
                )?;
                for ((l, f), d) in lin.iter_mut().zip(forcing.iter()).zip(decay.iter()) {
                    *l = d * (*l + f);
                }
                *ds = SpectralField::new(lin);
                Ok(())
            }
            (
                AuxPlan::Fem {
                    space,
                    diffusion,
                    decay,
                    scratch,
                    buf,
                },
                Field::Fem(df_state),
                Field::Fem(xf),
            ) => {
                let spec = diffusion.spec().clone();
                let lin: Vec<f64> = xf
                    .nodal()
                    .iter()
                    .zip(df_state.nodal())
                    .map(|(&x, &dv)| {
                        let df = if drift_on { model::drift_derivative(x) } else { 0.0 };
                        dv + tau * df * dv
                    })
                    .collect();
                let forcing = fem_dg(
                    space,
                    diffusion,
                    &spec,
                    xf.nodal(),
                    df_state.nodal(),
                    dw,
                    scratch,
                    buf,
                )?;
                let total: Vec<f64> = lin.iter().zip(&forcing).map(|(a, b)| a + b).collect();
                let mut coords = space.to_eigen_coords(&total, scratch);
                for (c, d) in coords.iter_mut().zip(decay.iter()) {
                    *c *= d;
                }
                let out = space.from_eigen_coords(coords, scratch);
                *df_state = space.field_from_nodal(out);
                Ok(())
            }
            _ => Err(Error::Dimension("state kind does not match the plan".into())),
        }
    }
}

/// `DG_tau(x)[m] dW` on the collocation grid: the state is flowed first,
/// the direction is transported by `DPhi_tau`, and
/// `DG(w)[v] dW = (B1 v) dW + cos(w) v (A^gamma dW)`.
#[allow(clippy::too_many_arguments)]
fn spectral_dg(
    colloc: &model::Collocation,
    spec: &DiffusionSpec,
    x: &SpectralField,
    tau: f64,
    drift_on: bool,
    direction_coeffs: &[f64],
    dw: &SpectralField,
    ws: &mut model::CollocScratch,
    grid: &mut GridBufs,
) -> Result<Vec<f64>> {
    let modes = x.n_modes();
    // Transport the direction by DPhi (already done by the caller: the
    // direction passed here is in the flowed frame), and evaluate at the
    // flowed state.
    let flowed: Vec<f64> = grid
        .u
        .iter()
        .map(|&v| if drift_on { model::splitting_flow(v, tau) } else { v })
        .collect();
    dg_values(
        colloc, spec, modes, &flowed, direction_coeffs, dw, ws, grid,
    )
}

/// `DG(x)[m] dW` with the raw (non-flowed) state values already in `grid.u`.
#[allow(clippy::too_many_arguments)]
fn spectral_dg_raw(
    colloc: &model::Collocation,
    spec: &DiffusionSpec,
    x: &SpectralField,
    direction: &SpectralField,
    dw: &SpectralField,
    ws: &mut model::CollocScratch,
    grid: &mut GridBufs,
) -> Result<Vec<f64>> {
    let state_vals = grid.u.clone();
    dg_values(
        colloc,
        spec,
        x.n_modes(),
        &state_vals,
        direction.coeffs(),
        dw,
        ws,
        grid,
    )
}

/// Common kernel: coefficients of `(B1 m) dW + cos(state) m (A^gamma dW)`.
#[allow(clippy::too_many_arguments)]
fn dg_values(
    colloc: &model::Collocation,
    spec: &DiffusionSpec,
    modes: usize,
    state_values: &[f64],
    direction_coeffs: &[f64],
    dw: &SpectralField,
    ws: &mut model::CollocScratch,
    grid: &mut GridBufs,
) -> Result<Vec<f64>> {
    if dw.n_modes() != modes || direction_coeffs.len() != modes {
        return Err(Error::Dimension("direction/noise mode mismatch".into()));
    }
    let g = colloc.grid_len();
    let mut out = vec![0.0; g];
    colloc.node_values(dw.coeffs(), &mut grid.w, &mut ws.dst);
    if spec.b1_harmonic {
        let scaled: Vec<f64> = direction_coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c / (i + 1) as f64)
            .collect();
        colloc.node_values(&scaled, &mut grid.gw, &mut ws.dst);
        for ((o, &b), &wv) in out.iter_mut().zip(&grid.gw).zip(&grid.w) {
            *o += b * wv;
        }
    }
    if spec.g_enabled {
        let scaled: Vec<f64> = dw
            .coeffs()
            .iter()
            .enumerate()
            .map(|(i, c)| c * crate::spectral::eigenvalue(i + 1).powf(spec.g_smoothing_exponent))
            .collect();
        colloc.node_values(&scaled, &mut grid.gw, &mut ws.dst);
        colloc.node_values(direction_coeffs, &mut grid.b, &mut ws.dst);
        for (((o, &x), &mv), &gv) in out
            .iter_mut()
            .zip(state_values)
            .zip(&grid.b)
            .zip(&grid.gw)
        {
            *o += x.cos() * mv * gv;
        }
    }
    Ok(colloc.coeffs_from_values(&mut out, modes, &mut ws.dst))
}

/// Bilinear second derivative of the noise map on the grid:
/// `-sin(X*) (DPhi ey)(DPhi ez) (A^gamma dW)`.
#[allow(clippy::too_many_arguments)]
fn spectral_d2g(
    colloc: &model::Collocation,
    spec: &DiffusionSpec,
    x: &SpectralField,
    tau: f64,
    drift_on: bool,
    ey: &SpectralField,
    ez: &SpectralField,
    dw: &SpectralField,
    ws: &mut model::CollocScratch,
    grid: &mut GridBufs,
) -> Result<Vec<f64>> {
    let modes = x.n_modes();
    if !spec.g_enabled {
        return Ok(vec![0.0; modes]);
    }
    let scaled: Vec<f64> = dw
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| c * crate::spectral::eigenvalue(i + 1).powf(spec.g_smoothing_exponent))
        .collect();
    colloc.node_values(&scaled, &mut grid.gw, &mut ws.dst);
    colloc.node_values(ey.coeffs(), &mut grid.a, &mut ws.dst);
    colloc.node_values(ez.coeffs(), &mut grid.b, &mut ws.dst);
    let mut vals = vec![0.0; colloc.grid_len()];
    for (i, slot) in vals.iter_mut().enumerate() {
        let xv = grid.u[i];
        let (xstar, dphi) = if drift_on {
            (
                model::splitting_flow(xv, tau),
                model::flow_derivative(xv, tau),
            )
        } else {
            (xv, 1.0)
        };
        // Products written symmetrically so swapping (y, z) is bit-exact.
        let p = (dphi * grid.a[i]) * (dphi * grid.b[i]);
        *slot = -xstar.sin() * p * grid.gw[i];
    }
    Ok(colloc.coeffs_from_values(&mut vals, modes, &mut ws.dst))
}

/// FEM counterpart of the noise-derivative forcing,
/// `(B1 m) P^h dW + cos(state) m P^h(A^gamma dW)` at the nodes.
#[allow(clippy::too_many_arguments)]
fn fem_dg(
    space: &std::sync::Arc<crate::fem::FemSpace>,
    diffusion: &model::FemDiffusion,
    spec: &DiffusionSpec,
    state_nodal: &[f64],
    direction_nodal: &[f64],
    dw: &SpectralField,
    scratch: &mut crate::fem::FemScratch,
    buf: &mut Vec<f64>,
) -> Result<Vec<f64>> {
    let n = space.n_interior();
    if state_nodal.len() != n || direction_nodal.len() != n {
        return Err(Error::Dimension("nodal length mismatch".into()));
    }
    let j_modes = diffusion.j_modes();
    if dw.n_modes() > j_modes {
        return Err(Error::Dimension("noise exceeds the coupling".into()));
    }
    let coupling = space.coupling(j_modes);
    let mut out = vec![0.0; n];
    if spec.b1_harmonic {
        let pw = space.project_coeffs(&coupling, dw.coeffs(), scratch);
        let b1_weights: Vec<f64> = (1..=j_modes).map(|j| 1.0 / j as f64).collect();
        let b1v =
            space.mode_weighted_node_values(&coupling, direction_nodal, &b1_weights, scratch);
        for ((o, &b), &p) in out.iter_mut().zip(&b1v).zip(pw.nodal()) {
            *o += b * p;
        }
    }
    if spec.g_enabled {
        buf.clear();
        buf.extend(dw.coeffs().iter().enumerate().map(|(i, c)| {
            c * crate::spectral::eigenvalue(i + 1).powf(spec.g_smoothing_exponent)
        }));
        let pgw = space.project_coeffs(&coupling, buf, scratch);
        for (((o, &x), &m), &p) in out
            .iter_mut()
            .zip(state_nodal)
            .zip(direction_nodal)
            .zip(pgw.nodal())
        {
            *o += x.cos() * m * p;
        }
    }
    Ok(out)
}

/// Inner product in the natural geometry of the space.
pub fn field_inner(a: &Field, b: &Field) -> f64 {
    match (a, b) {
        (Field::Spectral(x), Field::Spectral(y)) => x
            .coeffs()
            .iter()
            .zip(y.coeffs())
            .map(|(p, q)| p * q)
            .sum(),
        (Field::Fem(x), Field::Fem(y)) => x.space().mass().quad_form(x.nodal(), y.nodal()),
        _ => panic!("mismatched field kinds"),
    }
}

/// `D phi (X)[v]` for the observable `phi(X) = sin ||X||`, with the removable
/// singularity at `X = 0` set to its limit 0.
pub fn sin_norm_gradient_dot(x: &Field, v: &Field) -> f64 {
    let norm = x.l2_norm();
    if norm == 0.0 {
        return 0.0;
    }
    norm.cos() * field_inner(x, v) / norm
}

/// Monte Carlo estimate of `D E[phi(X(T, xi))] y` through the first
/// variation; returns the mean and the 95% halfwidth.
pub fn estimate_du(
    cfg: &SchemeConfig,
    y: &SpectralField,
    samples: usize,
    seed: u64,
    dt_fine: f64,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::InsufficientData(
            "at least two samples are needed for a halfwidth".into(),
        ));
    }
    cfg.validate(dt_fine)?;
    let j_noise = match &cfg.space {
        SpaceKind::Spectral { modes } => *modes,
        SpaceKind::Fem(space) => space.n_interior(),
    };
    let n_steps = cfg.n_steps();
    let m_sub = (cfg.tau / dt_fine).round() as usize;
    let n_fine = n_steps * m_sub;
    let mut vals = Vec::with_capacity(samples);
    let mut solver = SensitivitySolver::new(cfg, j_noise)?;
    for m in 0..samples {
        let path = NoisePath::new(seed, m as u64, j_noise, dt_fine, n_fine);
        let mut x = solver.initial_state();
        let mut eta = solver.direction(y);
        for k in 0..n_steps {
            let dw = path.increment(k * m_sub, (k + 1) * m_sub)?;
            solver.step_first_variation(&mut eta, &x, &dw)?;
            solver.step_carrier(&mut x, &dw, k)?;
        }
        vals.push(sin_norm_gradient_dot(&x, &eta));
    }
    let (mean, std) = mean_and_std(&vals);
    Ok((mean, 1.96 * std / (samples as f64).sqrt()))
}

/// A finite-dimensional integration-by-parts instance.
///
/// `F = sum_i a_i W(h_i) phi_{p_i}` with `h_i(t) = 1_{win_i}(t) phi_{j_i}`,
/// and `Phi(t)` piecewise constant in time and diagonal over modes. Both
/// sides of
///
/// ```text
/// E (F, int Phi dW) = E int (D_t F, Phi(t))_HS dt
/// ```
///
/// are computable: the left by Monte Carlo over paths, the right in closed
/// form from window overlaps.
pub struct IbpCase {
    pub j_modes: usize,
    pub dt_fine: f64,
    /// Windows as fine-step ranges; must partition or at least tile `[0, n)`.
    pub windows: Vec<(usize, usize)>,
    /// Terms `(a, j, p, window_index)`.
    pub terms: Vec<(f64, usize, usize, usize)>,
    /// `Phi` diagonal per window, length `j_modes` each.
    pub phi_diag: Vec<Vec<f64>>,
}

pub struct IbpReport {
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub pass: bool,
}

pub fn malliavin_ibp_check(case: &IbpCase, m_samples: usize, seed: u64) -> Result<IbpReport> {
    if case.windows.len() != case.phi_diag.len() {
        return Err(Error::Config("one diagonal per window is required".into()));
    }
    let n_fine = case.windows.iter().map(|&(_, b)| b).max().unwrap_or(0);
    let mut lhs = Vec::with_capacity(m_samples);
    for m in 0..m_samples {
        let path = NoisePath::new(seed, m as u64, case.j_modes, case.dt_fine, n_fine);
        let incs: Vec<SpectralField> = case
            .windows
            .iter()
            .map(|&(a, b)| path.increment(a, b))
            .collect::<Result<_>>()?;
        // F over the modes.
        let mut f = vec![0.0; case.j_modes];
        for &(a, j, p, w) in &case.terms {
            f[p - 1] += a * incs[w].coeff(j);
        }
        // int Phi dW over the modes.
        let mut integral = vec![0.0; case.j_modes];
        for (w, diag) in case.phi_diag.iter().enumerate() {
            for (mode, d) in diag.iter().enumerate() {
                integral[mode] += d * incs[w].coeff(mode + 1);
            }
        }
        lhs.push(f.iter().zip(&integral).map(|(a, b)| a * b).sum::<f64>());
    }
    let (lhs_mean, std) = mean_and_std(&lhs);
    let lhs_se = std / (m_samples as f64).sqrt();

    // Closed form: E (F, int Phi dW) = sum_i a_i delta_{j_i, p_i}
    //   sum_w |win_w cap win_i| d_{w, j_i}.
    let mut rhs = 0.0;
    for &(a, j, p, wi) in &case.terms {
        if j != p {
            continue;
        }
        let (ia, ib) = case.windows[wi];
        for (w, diag) in case.phi_diag.iter().enumerate() {
            let (wa, wb) = case.windows[w];
            let overlap = ib.min(wb).saturating_sub(ia.max(wa)) as f64 * case.dt_fine;
            rhs += a * overlap * diag[j - 1];
        }
    }
    let pass = (lhs_mean - rhs).abs() <= 3.0 * lhs_se.max(1e-300);
    Ok(IbpReport {
        lhs_mean,
        lhs_se,
        rhs,
        pass,
    })
}

/// Helper used by the verification suite and tests: carrier plus first
/// variation to final time on one path.
pub fn run_first_variation(
    cfg: &SchemeConfig,
    path: &NoisePath,
    y: &SpectralField,
) -> Result<(Field, Field)> {
    cfg.validate(path.dt_fine())?;
    let mut solver = SensitivitySolver::new(cfg, path.j_modes())?;
    let mut x = solver.initial_state();
    let mut eta = solver.direction(y);
    let m_sub = (cfg.tau / path.dt_fine()).round() as usize;
    for k in 0..cfg.n_steps() {
        let dw = path.increment(k * m_sub, (k + 1) * m_sub)?;
        solver.step_first_variation(&mut eta, &x, &dw)?;
        solver.step_carrier(&mut x, &dw, k)?;
    }
    Ok((x, eta))
}

/// Carrier plus both first variations and the second variation on one path.
pub fn run_second_variation(
    cfg: &SchemeConfig,
    path: &NoisePath,
    y: &SpectralField,
    z: &SpectralField,
) -> Result<(Field, Field, Field, Field)> {
    cfg.validate(path.dt_fine())?;
    let mut solver = SensitivitySolver::new(cfg, path.j_modes())?;
    let mut x = solver.initial_state();
    let mut eta_y = solver.direction(y);
    let mut eta_z = solver.direction(z);
    let mut zeta = match &eta_y {
        Field::Spectral(f) => Field::Spectral(SpectralField::zeros(f.n_modes())),
        Field::Fem(f) => Field::Fem(f.space().zero_field()),
    };
    let m_sub = (cfg.tau / path.dt_fine()).round() as usize;
    for k in 0..cfg.n_steps() {
        let dw = path.increment(k * m_sub, (k + 1) * m_sub)?;
        solver.step_second_variation(&mut zeta, &eta_y, &eta_z, &x, &dw)?;
        solver.step_first_variation(&mut eta_y, &x, &dw)?;
        solver.step_first_variation(&mut eta_z, &x, &dw)?;
        solver.step_carrier(&mut x, &dw, k)?;
    }
    Ok((x, eta_y, eta_z, zeta))
}

/// Carrier plus Malliavin derivative `D_s X(T)` in a fixed direction `u`.
pub fn run_malliavin(
    cfg: &SchemeConfig,
    path: &NoisePath,
    s_step: usize,
    u: &SpectralField,
) -> Result<(Field, Field)> {
    cfg.validate(path.dt_fine())?;
    let n_steps = cfg.n_steps();
    if s_step > n_steps {
        return Err(Error::Config(format!(
            "observation step {s_step} past the end of the run"
        )));
    }
    let mut solver = SensitivitySolver::new(cfg, path.j_modes())?;
    let mut x = solver.initial_state();
    let m_sub = (cfg.tau / path.dt_fine()).round() as usize;
    let mut d_state: Option<Field> = None;
    for k in 0..n_steps {
        if k == s_step {
            d_state = Some(solver.malliavin_initial(&x, u)?);
        }
        let dw = path.increment(k * m_sub, (k + 1) * m_sub)?;
        if let Some(d) = d_state.as_mut() {
            solver.step_malliavin(d, &x, &dw)?;
        }
        solver.step_carrier(&mut x, &dw, k)?;
    }
    if s_step == n_steps {
        d_state = Some(solver.malliavin_initial(&x, u)?);
    }
    Ok((x, d_state.expect("initialized above")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitialData;
    use crate::schemes::NoiseSampling;
    use crate::spectral;

    fn cfg_spectral(modes: usize, tau: f64, t_final: f64) -> SchemeConfig {
        SchemeConfig {
            tau,
            t_final,
            space: SpaceKind::Spectral { modes },
            scheme: SchemeKind::SplittingExpoEuler,
            diffusion: DiffusionSpec::section6(),
            initial: InitialData::Hat,
            drift: DriftKind::Cubic,
            noise_sampling: NoiseSampling::default(),
        }
    }

    #[test]
    fn zero_direction_stays_zero() {
        let cfg = cfg_spectral(8, 1.0 / 32.0, 0.25);
        let path = NoisePath::new(11, 0, 8, 1.0 / 32.0, 32);
        let (_, eta) = run_first_variation(&cfg, &path, &SpectralField::zeros(8)).unwrap();
        assert_eq!(eta.l2_norm(), 0.0);
    }

    /// Frozen-coefficient oracle: with the carrier at the origin and the
    /// noise terms off, each mode obeys `eta_k = exp((1 - lambda_j) k tau)`.
    #[test]
    fn linearization_around_zero_matches_scalar_solve() {
        let modes = 6;
        let tau = 1.0 / 64.0;
        let mut cfg = cfg_spectral(modes, tau, 0.5);
        cfg.diffusion = DiffusionSpec::zero();
        cfg.initial = InitialData::Custom(vec![0.0; modes]);
        let path = NoisePath::new(3, 0, modes, tau, 32);
        let y = SpectralField::new(vec![1.0; modes]);
        let (_, eta) = run_first_variation(&cfg, &path, &y).unwrap();
        let eta = eta.as_spectral().unwrap();
        let k = (0.5 / tau).round();
        for j in 1..=modes {
            let expect = ((1.0 - spectral::eigenvalue(j)) * k * tau).exp();
            assert!(
                (eta.coeff(j) - expect).abs() <= 1e-6 * (1.0 + expect),
                "mode {j}: {} vs {expect}",
                eta.coeff(j)
            );
        }
    }

    /// Pathwise finite differences of the carrier converge to eta at rate
    /// epsilon (the variation is the exact linearization of the discrete
    /// map).
    #[test]
    fn finite_difference_consistency_halves_with_epsilon() {
        let modes = 16;
        let tau = 1.0 / 32.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let path = NoisePath::new(17, 5, modes, tau, 8);
        let y = SpectralField::basis(2, modes);
        let (_, eta) = run_first_variation(&cfg, &path, &y).unwrap();
        let eta = eta.as_spectral().unwrap().clone();

        let xi = InitialData::Hat.to_spectral(modes);
        let run_from = |eps: f64| {
            let mut shifted = cfg.clone();
            shifted.initial =
                InitialData::Custom(xi.add(&y.scaled(eps)).into_coeffs());
            let base = crate::schemes::run_trajectory(&cfg, &path, None).unwrap();
            let moved = crate::schemes::run_trajectory(&shifted, &path, None).unwrap();
            moved
                .final_field
                .as_spectral()
                .unwrap()
                .sub(base.final_field.as_spectral().unwrap())
                .scaled(1.0 / eps)
        };
        let err = |eps: f64| run_from(eps).sub(&eta).l2_norm();
        let e1 = err(1e-4);
        let e2 = err(5e-5);
        let ratio = e1 / e2;
        assert!(e1 < 1e-3, "absolute consistency error too large: {e1}");
        assert!((1.7..=2.3).contains(&ratio), "epsilon ratio {ratio}");
    }

    #[test]
    fn second_variation_vanishing_directions_and_symmetry() {
        let modes = 12;
        let tau = 1.0 / 32.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let path = NoisePath::new(23, 2, modes, tau, 8);
        let y = SpectralField::basis(1, modes);
        let z = SpectralField::basis(3, modes).scaled(0.5);

        let zero = SpectralField::zeros(modes);
        let (_, _, _, zeta0) = run_second_variation(&cfg, &path, &zero, &z).unwrap();
        assert_eq!(zeta0.l2_norm(), 0.0);

        let (_, _, _, zyz) = run_second_variation(&cfg, &path, &y, &z).unwrap();
        let (_, _, _, zzy) = run_second_variation(&cfg, &path, &z, &y).unwrap();
        let a = zyz.as_spectral().unwrap();
        let b = zzy.as_spectral().unwrap();
        for j in 1..=modes {
            assert_eq!(
                a.coeff(j).to_bits(),
                b.coeff(j).to_bits(),
                "asymmetry in mode {j}"
            );
        }
    }

    /// Second-order finite differences of the carrier approach zeta as
    /// epsilon shrinks.
    #[test]
    fn second_variation_matches_second_differences() {
        let modes = 12;
        let tau = 1.0 / 32.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let path = NoisePath::new(29, 4, modes, tau, 8);
        let y = SpectralField::basis(1, modes);
        let z = SpectralField::basis(2, modes);
        let (_, _, _, zeta) = run_second_variation(&cfg, &path, &y, &z).unwrap();
        let zeta = zeta.as_spectral().unwrap().clone();

        let xi = InitialData::Hat.to_spectral(modes);
        let run_at = |dy: f64, dz: f64| {
            let mut shifted = cfg.clone();
            shifted.initial = InitialData::Custom(
                xi.add(&y.scaled(dy)).add(&z.scaled(dz)).into_coeffs(),
            );
            crate::schemes::run_trajectory(&shifted, &path, None)
                .unwrap()
                .final_field
                .as_spectral()
                .unwrap()
                .clone()
        };
        let second_diff = |eps: f64| {
            let fpp = run_at(eps, eps);
            let fp0 = run_at(eps, 0.0);
            let f0p = run_at(0.0, eps);
            let f00 = run_at(0.0, 0.0);
            fpp.sub(&fp0).sub(&f0p.sub(&f00)).scaled(1.0 / (eps * eps))
        };
        let e1 = second_diff(2e-3).sub(&zeta).l2_norm();
        let e2 = second_diff(1e-3).sub(&zeta).l2_norm();
        let ratio = e1 / e2;
        assert!(e1 < 1e-2, "absolute consistency error too large: {e1}");
        assert!((1.6..=2.4).contains(&ratio), "epsilon ratio {ratio}");
    }

    #[test]
    fn malliavin_initial_condition_is_exact() {
        let modes = 10;
        let tau = 1.0 / 32.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let path = NoisePath::new(31, 9, modes, tau, 8);
        let u = SpectralField::basis(2, modes);
        // Observation at the final step: D equals G(X(T)) u exactly.
        let n = cfg.n_steps();
        let (x, d) = run_malliavin(&cfg, &path, n, &u).unwrap();
        let mut solver = SensitivitySolver::new(&cfg, modes).unwrap();
        let expect = solver.malliavin_initial(&x, &u).unwrap();
        let diff = d
            .as_spectral()
            .unwrap()
            .sub(expect.as_spectral().unwrap())
            .l2_norm();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn du_estimate_is_linear_and_rejects_tiny_samples() {
        let modes = 8;
        let tau = 1.0 / 16.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let y = SpectralField::basis(1, modes);
        assert!(estimate_du(&cfg, &y, 1, 7, tau).is_err());
        let (a, hw_a) = estimate_du(&cfg, &y, 64, 7, tau).unwrap();
        let (b, hw_b) = estimate_du(&cfg, &y.scaled(2.0), 64, 7, tau).unwrap();
        assert_eq!(b.to_bits(), (2.0 * a).to_bits(), "doubling broke linearity");
        assert_eq!(hw_b.to_bits(), (2.0 * hw_a).to_bits());
        let (z, hw_z) = estimate_du(&cfg, &SpectralField::zeros(modes), 16, 7, tau).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(hw_z, 0.0);
    }

    /// Superposition on identical paths: the variation is linear in its
    /// direction, and power-of-two rescalings are bit-exact.
    #[test]
    fn first_variation_is_linear_in_the_direction() {
        let modes = 12;
        let tau = 1.0 / 32.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let path = NoisePath::new(41, 6, modes, tau, 8);
        let y = SpectralField::basis(1, modes).scaled(0.7);
        let z = SpectralField::basis(5, modes).scaled(-1.1);
        let (_, ey) = run_first_variation(&cfg, &path, &y).unwrap();
        let (_, ez) = run_first_variation(&cfg, &path, &z).unwrap();
        let (_, eyz) = run_first_variation(&cfg, &path, &y.add(&z)).unwrap();
        let lhs = eyz.as_spectral().unwrap();
        let rhs = ey
            .as_spectral()
            .unwrap()
            .add(ez.as_spectral().unwrap());
        let rel = lhs.sub(&rhs).l2_norm() / rhs.l2_norm().max(1e-300);
        assert!(rel <= 1e-12, "superposition defect {rel:.3e}");

        // Fourth moments stay finite and scale exactly under doubling.
        let mut sum4 = 0.0;
        let mut sum4_doubled = 0.0;
        for m in 0..16u64 {
            let p = NoisePath::new(43, m, modes, tau, 8);
            let (_, e1) = run_first_variation(&cfg, &p, &y).unwrap();
            let (_, e2) = run_first_variation(&cfg, &p, &y.scaled(2.0)).unwrap();
            sum4 += e1.l2_norm().powi(4);
            sum4_doubled += e2.l2_norm().powi(4);
        }
        assert!(sum4.is_finite() && sum4 > 0.0);
        assert_eq!((16.0 * sum4).to_bits(), sum4_doubled.to_bits());
    }

    /// The second variation is bilinear: power-of-two direction rescalings
    /// multiply it exactly, and its second moment is stable across meshes.
    #[test]
    fn second_variation_bilinear_scaling_and_mesh_stability() {
        let modes = 12;
        let tau = 1.0 / 32.0;
        let cfg = cfg_spectral(modes, tau, 0.25);
        let path = NoisePath::new(47, 8, modes, tau, 8);
        let y = SpectralField::basis(1, modes);
        let z = SpectralField::basis(2, modes);
        let (_, _, _, base) = run_second_variation(&cfg, &path, &y, &z).unwrap();
        let (_, _, _, scaled) =
            run_second_variation(&cfg, &path, &y.scaled(2.0), &z.scaled(4.0)).unwrap();
        let base = base.as_spectral().unwrap();
        let scaled = scaled.as_spectral().unwrap();
        for j in 1..=modes {
            assert_eq!(
                scaled.coeff(j).to_bits(),
                (8.0 * base.coeff(j)).to_bits(),
                "bilinear scaling broke in mode {j}"
            );
        }

        // E ||zeta(T)||^2 across a small mesh ladder stays within a factor 2.
        let mut moments = Vec::new();
        for &h in &[1.0 / 16.0, 1.0 / 32.0] {
            let space = crate::fem::FemSpace::assemble(h).unwrap();
            let cfg = SchemeConfig {
                tau,
                t_final: 0.25,
                space: SpaceKind::Fem(space),
                scheme: SchemeKind::SplittingExpoEuler,
                diffusion: DiffusionSpec::section6(),
                initial: InitialData::Hat,
                drift: DriftKind::Cubic,
                noise_sampling: NoiseSampling::default(),
            };
            let mut acc = 0.0;
            let m_paths = 32;
            for m in 0..m_paths {
                let p = NoisePath::new(53, m, 31, tau, 8);
                let (_, _, _, zeta) = run_second_variation(&cfg, &p, &y, &z).unwrap();
                acc += zeta.l2_norm().powi(2);
            }
            moments.push(acc / m_paths as f64);
        }
        let spread = moments[0].max(moments[1]) / moments[0].min(moments[1]);
        assert!(spread <= 2.0, "zeta moments {moments:?}");
    }

    #[test]
    fn ibp_zero_functional_and_matching_overlap() {
        // F = 0: both sides vanish.
        let case = IbpCase {
            j_modes: 2,
            dt_fine: 1.0 / 32.0,
            windows: vec![(0, 16), (16, 32)],
            terms: vec![],
            phi_diag: vec![vec![1.0, 0.5], vec![0.25, -1.0]],
        };
        let rep = malliavin_ibp_check(&case, 2_000, 5).unwrap();
        assert_eq!(rep.rhs, 0.0);
        assert!(rep.pass, "lhs {} se {}", rep.lhs_mean, rep.lhs_se);

        // F the increment of mode 1 over the first window, Phi = identity on
        // mode 1 everywhere: the expectation is the window length.
        let case = IbpCase {
            j_modes: 1,
            dt_fine: 1.0 / 32.0,
            windows: vec![(0, 16), (16, 32)],
            terms: vec![(1.0, 1, 1, 0)],
            phi_diag: vec![vec![1.0], vec![1.0]],
        };
        let rep = malliavin_ibp_check(&case, 20_000, 6).unwrap();
        assert!((rep.rhs - 0.5).abs() < 1e-15);
        assert!(rep.pass, "lhs {} vs rhs {}", rep.lhs_mean, rep.rhs);
    }

    #[test]
    fn ibp_small_random_case_within_three_se() {
        let case = IbpCase {
            j_modes: 2,
            dt_fine: 1.0 / 64.0,
            windows: vec![(0, 40), (40, 64)],
            terms: vec![
                (0.7, 1, 1, 0),
                (-1.3, 2, 2, 1),
                (0.4, 1, 2, 0), // off-diagonal: contributes nothing on average
            ],
            phi_diag: vec![vec![0.9, -0.2], vec![0.3, 1.1]],
        };
        let rep = malliavin_ibp_check(&case, 40_000, 12).unwrap();
        // Closed form: 0.7 * |win0| * 0.9 + (-1.3) * |win1| * 1.1.
        let expect = 0.7 * (40.0 / 64.0) * 0.9 + (-1.3) * (24.0 / 64.0) * 1.1;
        assert!((rep.rhs - expect).abs() < 1e-12);
        assert!(rep.pass, "lhs {} vs rhs {} (se {})", rep.lhs_mean, rep.rhs, rep.lhs_se);
    }
}
