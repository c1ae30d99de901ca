//! Monte Carlo convergence studies, order regression and persistence.
//!
//! The spatial study couples every mesh of the ladder to a fine reference
//! mesh through common random numbers: each trajectory draws one noise path
//! and advances all resolutions in lockstep on the same increments. Strong
//! errors are root mean square distances at the final time (coarse solutions
//! prolonged onto the reference mesh, which is exact for nested meshes);
//! weak errors are differences of observable means, estimated from the
//! per-path differences so the coupling cancels most of the Monte Carlo
//! variance.
//!
//! Results reduce through fixed-order pairwise sums over the trajectory
//! index, so a study's report is byte-identical for any worker count.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::model::{DiffusionSpec, DiffusionVariant, InitialData};
use crate::noise::NoisePath;
use crate::schemes::{DriftKind, Field, NoiseSampling, SchemeConfig, SchemeKind, SpaceKind, Stepper};
use crate::transforms::{mean_and_std, pairwise_sum};

/// Observables for the weak error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservableTag {
    /// `phi(X) = sin ||X||` with the `L^2` norm of the run's space.
    #[serde(rename = "sin_l2norm")]
    SinL2Norm,
}

pub fn observable_eval(tag: ObservableTag, field: &Field) -> f64 {
    match tag {
        ObservableTag::SinL2Norm => field.l2_norm().sin(),
    }
}

/// Built-in study sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Minutes on a laptop: `h` in `{2^-4, 2^-5, 2^-6}` against a `2^-8`
    /// reference, 2000 trajectories, `kappa = 1/200`.
    Desk,
    /// The full study: `h` in `{2^-5 .. 2^-8}` against `2^-12`, 20000
    /// trajectories, `kappa = 1/1000`. Hours of compute.
    Paper,
}

/// Configuration of the spatial convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyConfig {
    pub t_final: f64,
    /// Time step shared by every resolution (also the noise grid).
    pub kappa: f64,
    pub h_ladder: Vec<f64>,
    pub h_reference: f64,
    /// Trajectory count `M`.
    pub trajectories: usize,
    pub seed: u64,
    pub observable: ObservableTag,
    pub diffusion_variant: DiffusionVariant,
    /// Worker threads; 0 picks the machine's parallelism.
    #[serde(default)]
    pub workers: usize,
    /// Per-step damping rule for the noise term (diagnostic knob; the
    /// scheme's own rule is the default).
    #[serde(default)]
    pub noise_sampling: NoiseSampling,
}

impl StudyConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => StudyConfig {
                t_final: 1.0,
                kappa: 1.0 / 200.0,
                h_ladder: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
                h_reference: 1.0 / 256.0,
                trajectories: 2000,
                seed: 2000, // any fixed default; overridable
                observable: ObservableTag::SinL2Norm,
                diffusion_variant: DiffusionVariant::PaperSection6,
                workers: 0,
                noise_sampling: NoiseSampling::ConvolutionMatched,
            },
            Profile::Paper => StudyConfig {
                t_final: 1.0,
                kappa: 1.0 / 1000.0,
                h_ladder: vec![1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
                h_reference: 1.0 / 4096.0,
                trajectories: 20_000,
                seed: 2000,
                observable: ObservableTag::SinL2Norm,
                diffusion_variant: DiffusionVariant::PaperSection6,
                workers: 0,
                noise_sampling: NoiseSampling::ConvolutionMatched,
            },
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad study config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_ladder.is_empty() {
            return Err(Error::Config("the mesh ladder is empty".into()));
        }
        if self.kappa.is_nan() || self.kappa <= 0.0 {
            return Err(Error::Config(format!("kappa must be positive: {}", self.kappa)));
        }
        let steps = self.t_final / self.kappa;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Config(format!(
                "kappa = {} does not divide T = {}",
                self.kappa, self.t_final
            )));
        }
        let nref = integer_reciprocal(self.h_reference)?;
        for &h in &self.h_ladder {
            let n = integer_reciprocal(h)?;
            if n > nref {
                return Err(Error::Config(format!(
                    "ladder mesh h = {h} is finer than the reference {}",
                    self.h_reference
                )));
            }
            if nref % n != 0 {
                return Err(Error::Config(format!(
                    "meshes must be nested: 1/h = {n} does not divide {nref}"
                )));
            }
        }
        if self.trajectories < 2 {
            return Err(Error::Config("at least two trajectories are needed".into()));
        }
        Ok(())
    }
}

fn integer_reciprocal(h: f64) -> Result<usize> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("mesh width must be positive: {h}")));
    }
    let inv = 1.0 / h;
    let n = inv.round() as usize;
    if n < 2 || (inv - n as f64).abs() > 1e-9 {
        return Err(Error::Config(format!("1/h must be an integer >= 2: {inv}")));
    }
    Ok(n)
}

/// Configuration of the temporal self-convergence study (spectral space,
/// each ladder step compared with the same scheme at `tau / ref_refinement`
/// on shared noise paths).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalStudyConfig {
    pub t_final: f64,
    pub modes: usize,
    pub tau_ladder: Vec<f64>,
    pub ref_refinement: usize,
    pub trajectories: usize,
    pub seed: u64,
    pub observable: ObservableTag,
    pub diffusion_variant: DiffusionVariant,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub noise_sampling: NoiseSampling,
}

impl TemporalStudyConfig {
    pub fn default_ladder() -> Self {
        TemporalStudyConfig {
            t_final: 1.0,
            modes: 64,
            tau_ladder: vec![1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0, 1.0 / 400.0],
            ref_refinement: 16,
            trajectories: 1000,
            seed: 2000,
            observable: ObservableTag::SinL2Norm,
            diffusion_variant: DiffusionVariant::PaperSection6,
            workers: 0,
            noise_sampling: NoiseSampling::default(),
        }
    }
}

/// One resolution row of a study report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorRow {
    /// Mesh width `h` for spatial studies, step `tau` for temporal ones.
    pub h: f64,
    pub strong_error: f64,
    pub strong_halfwidth: f64,
    pub strong_order_pairwise: Option<f64>,
    pub weak_error: f64,
    pub weak_halfwidth: f64,
    pub weak_order_pairwise: Option<f64>,
    pub aborts: usize,
}

/// Full study output. Halfwidths are 95% normal-approximation intervals.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
    pub strong_order: Option<f64>,
    pub weak_order: Option<f64>,
    pub strong_fit_residual: Option<f64>,
    pub weak_fit_residual: Option<f64>,
    pub total_trajectories: usize,
    pub dropped_trajectories: usize,
}

/// Least-squares order fit on a log-log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    /// Consecutive-pair orders `log(e_i/e_{i+1}) / log(h_i/h_{i+1})`.
    pub pairwise: Vec<f64>,
}

/// Fit `log e` against `log h`. Rejects fewer than two points and
/// nonpositive values.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "order fit needs at least two points, got {}",
            points.len()
        )));
    }
    for &(h, e) in points {
        if !(h > 0.0 && e > 0.0) {
            return Err(Error::Nonpositive(format!(
                "order fit requires positive resolutions and errors, got ({h}, {e})"
            )));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let xbar = pairwise_sum(&xs) / n;
    let ybar = pairwise_sum(&ys) / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - xbar) * (y - ybar);
        den += (x - xbar) * (x - xbar);
    }
    let slope = num / den;
    let intercept = ybar - slope * xbar;
    let mut res = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let r = y - (intercept + slope * x);
        res += r * r;
    }
    let pairwise = points
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
        .collect();
    Ok(OrderFit {
        slope,
        intercept,
        residual_rms: (res / n).sqrt(),
        pairwise,
    })
}

/// Deterministic parallel map: workers steal indices, results are reassembled
/// in index order before any reduction.
pub fn parallel_map<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    let workers = if workers == 0 {
        std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1)
    } else {
        workers
    };
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let counter = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let mut collected: Vec<Vec<(usize, T)>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers.min(n) {
            let counter = &counter;
            let f = &f;
            handles.push(scope.spawn(move || {
                let mut local = Vec::new();
                loop {
                    let i = counter.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    local.push((i, f(i)));
                }
                local
            }));
        }
        for h in handles {
            collected.push(h.join().expect("worker panicked"));
        }
    });
    for chunk in collected {
        for (i, v) in chunk {
            slots[i] = Some(v);
        }
    }
    slots.into_iter().map(|s| s.expect("all indices produced")).collect()
}

struct TrajectorySample {
    /// Index of the ladder entry that aborted, `usize::MAX` for the reference.
    aborted: Option<usize>,
    sq_err: Vec<f64>,
    phi_diff: Vec<f64>,
}

/// Run the coupled spatial study.
pub fn run_study(cfg: &StudyConfig) -> Result<ErrorReport> {
    cfg.validate()?;
    let mut ladder = cfg.h_ladder.clone();
    ladder.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n_ref = integer_reciprocal(cfg.h_reference)?;
    let j_modes = n_ref - 1;
    let n_steps = (cfg.t_final / cfg.kappa).round() as usize;
    let diffusion = DiffusionSpec::from_variant(cfg.diffusion_variant)?;

    let ref_space = FemSpace::assemble(cfg.h_reference)?;
    let spaces: Vec<Arc<FemSpace>> = ladder
        .iter()
        .map(|&h| FemSpace::assemble(h))
        .collect::<Result<_>>()?;

    let scheme_for = |space: &Arc<FemSpace>| SchemeConfig {
        tau: cfg.kappa,
        t_final: cfg.t_final,
        space: SpaceKind::Fem(Arc::clone(space)),
        scheme: SchemeKind::SplittingExpoEuler,
        diffusion: diffusion.clone(),
        initial: InitialData::Hat,
        drift: DriftKind::Cubic,
        noise_sampling: cfg.noise_sampling,
    };

    let samples = parallel_map(cfg.trajectories, cfg.workers, |m| {
        let path = NoisePath::new(cfg.seed, m as u64, j_modes, cfg.kappa, n_steps);
        run_coupled_trajectory(cfg, &ladder, &spaces, &ref_space, &scheme_for, &path)
    });

    assemble_report(cfg, &ladder, samples)
}

fn run_coupled_trajectory(
    cfg: &StudyConfig,
    ladder: &[f64],
    spaces: &[Arc<FemSpace>],
    ref_space: &Arc<FemSpace>,
    scheme_for: &dyn Fn(&Arc<FemSpace>) -> SchemeConfig,
    path: &NoisePath,
) -> TrajectorySample {
    let build = |space: &Arc<FemSpace>| -> (Stepper, Field) {
        let sc = scheme_for(space);
        let stepper = Stepper::new(&sc, path.j_modes()).expect("valid scheme config");
        let state = stepper.initial_state();
        (stepper, state)
    };
    let (mut ref_stepper, mut ref_state) = build(ref_space);
    let mut runs: Vec<(Stepper, Field)> = spaces.iter().map(build).collect();
    let n_steps = (cfg.t_final / cfg.kappa).round() as usize;
    for k in 0..n_steps {
        let dw = match path.increment(k, k + 1) {
            Ok(dw) => dw,
            Err(_) => unreachable!("increment range checked by construction"),
        };
        if ref_stepper.step(&mut ref_state, &dw, k).is_err() {
            return TrajectorySample {
                aborted: Some(usize::MAX),
                sq_err: vec![0.0; ladder.len()],
                phi_diff: vec![0.0; ladder.len()],
            };
        }
        for (i, (stepper, state)) in runs.iter_mut().enumerate() {
            if stepper.step(state, &dw, k).is_err() {
                return TrajectorySample {
                    aborted: Some(i),
                    sq_err: vec![0.0; ladder.len()],
                    phi_diff: vec![0.0; ladder.len()],
                };
            }
        }
    }
    let ref_field = ref_state.as_fem().expect("reference runs on a mesh");
    let phi_ref = observable_eval(cfg.observable, &ref_state);
    let mut sq_err = Vec::with_capacity(ladder.len());
    let mut phi_diff = Vec::with_capacity(ladder.len());
    for (space, (_, state)) in spaces.iter().zip(&runs) {
        let coarse = state.as_fem().expect("ladder runs on meshes");
        let diff = space.prolong_to(ref_space, coarse).sub(ref_field);
        let d = diff.l2_norm();
        sq_err.push(d * d);
        phi_diff.push(observable_eval(cfg.observable, state) - phi_ref);
    }
    TrajectorySample {
        aborted: None,
        sq_err,
        phi_diff,
    }
}

fn assemble_report(
    cfg: &StudyConfig,
    ladder: &[f64],
    samples: Vec<TrajectorySample>,
) -> Result<ErrorReport> {
    let total = samples.len();
    let mut abort_counts = vec![0usize; ladder.len()];
    let mut dropped = 0usize;
    let kept: Vec<&TrajectorySample> = samples
        .iter()
        .filter(|s| {
            if let Some(i) = s.aborted {
                dropped += 1;
                if i < abort_counts.len() {
                    abort_counts[i] += 1;
                }
                false
            } else {
                true
            }
        })
        .collect();
    let fraction = dropped as f64 / total.max(1) as f64;
    if fraction > 0.01 {
        return Err(Error::AbortThreshold {
            fraction,
            threshold: 0.01,
        });
    }
    let m = kept.len();
    if m < 2 {
        return Err(Error::InsufficientData(
            "fewer than two surviving trajectories".into(),
        ));
    }
    let mut rows = Vec::with_capacity(ladder.len());
    for (i, &h) in ladder.iter().enumerate() {
        let sq: Vec<f64> = kept.iter().map(|s| s.sq_err[i]).collect();
        let (mse, mse_std) = mean_and_std(&sq);
        let strong = mse.max(0.0).sqrt();
        let mse_hw = 1.96 * mse_std / (m as f64).sqrt();
        // Delta method for the square root; zero when the error vanishes.
        let strong_hw = if strong > 0.0 { mse_hw / (2.0 * strong) } else { 0.0 };
        let dphi: Vec<f64> = kept.iter().map(|s| s.phi_diff[i]).collect();
        let (dmean, dstd) = mean_and_std(&dphi);
        rows.push(ErrorRow {
            h,
            strong_error: strong,
            strong_halfwidth: strong_hw,
            strong_order_pairwise: None,
            weak_error: dmean.abs(),
            weak_halfwidth: 1.96 * dstd / (m as f64).sqrt(),
            weak_order_pairwise: None,
            aborts: abort_counts[i],
        });
    }
    fill_orders(&mut rows);
    let strong_fit = fit_order(
        &rows
            .iter()
            .map(|r| (r.h, r.strong_error))
            .collect::<Vec<_>>(),
    )
    .ok();
    let weak_fit = fit_order(
        &rows
            .iter()
            .map(|r| (r.h, r.weak_error))
            .collect::<Vec<_>>(),
    )
    .ok();
    Ok(ErrorReport {
        rows,
        strong_order: strong_fit.as_ref().map(|f| f.slope),
        weak_order: weak_fit.as_ref().map(|f| f.slope),
        strong_fit_residual: strong_fit.as_ref().map(|f| f.residual_rms),
        weak_fit_residual: weak_fit.as_ref().map(|f| f.residual_rms),
        total_trajectories: cfg.trajectories,
        dropped_trajectories: dropped,
    })
}

fn fill_orders(rows: &mut [ErrorRow]) {
    for i in 1..rows.len() {
        let (a, b) = (&rows[i - 1], &rows[i]);
        let denom = (a.h / b.h).ln();
        if a.strong_error > 0.0 && b.strong_error > 0.0 && denom != 0.0 {
            rows[i].strong_order_pairwise = Some((rows[i - 1].strong_error / rows[i].strong_error).ln() / denom);
        }
        let denom = (rows[i - 1].h / rows[i].h).ln();
        if rows[i - 1].weak_error > 0.0 && rows[i].weak_error > 0.0 && denom != 0.0 {
            rows[i].weak_order_pairwise =
                Some((rows[i - 1].weak_error / rows[i].weak_error).ln() / denom);
        }
    }
}

/// Run the temporal self-convergence study on shared paths.
pub fn run_temporal_study(cfg: &TemporalStudyConfig) -> Result<ErrorReport> {
    if cfg.tau_ladder.is_empty() {
        return Err(Error::Config("the step ladder is empty".into()));
    }
    if cfg.ref_refinement < 2 {
        return Err(Error::Config("refinement factor must be at least 2".into()));
    }
    let mut ladder = cfg.tau_ladder.clone();
    ladder.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tau_min = *ladder.last().unwrap();
    let dt_fine = tau_min / cfg.ref_refinement as f64;
    let n_fine = (cfg.t_final / dt_fine).round() as usize;
    let diffusion = DiffusionSpec::from_variant(cfg.diffusion_variant)?;
    let scheme_at = |tau: f64| SchemeConfig {
        tau,
        t_final: cfg.t_final,
        space: SpaceKind::Spectral { modes: cfg.modes },
        scheme: SchemeKind::SplittingExpoEuler,
        diffusion: diffusion.clone(),
        initial: InitialData::Hat,
        drift: DriftKind::Cubic,
        noise_sampling: cfg.noise_sampling,
    };
    for &tau in &ladder {
        scheme_at(tau).validate(dt_fine)?;
        scheme_at(tau / cfg.ref_refinement as f64).validate(dt_fine)?;
    }

    let samples = parallel_map(cfg.trajectories, cfg.workers, |m| {
        let path = NoisePath::new(cfg.seed, m as u64, cfg.modes, dt_fine, n_fine);
        let mut sq_err = Vec::with_capacity(ladder.len());
        let mut phi_diff = Vec::with_capacity(ladder.len());
        let mut aborted = None;
        for (i, &tau) in ladder.iter().enumerate() {
            let coarse = crate::schemes::run_trajectory(&scheme_at(tau), &path, None);
            let fine = crate::schemes::run_trajectory(
                &scheme_at(tau / cfg.ref_refinement as f64),
                &path,
                None,
            );
            match (coarse, fine) {
                (Ok(c), Ok(f)) => {
                    let d = c
                        .final_field
                        .as_spectral()
                        .unwrap()
                        .sub(f.final_field.as_spectral().unwrap())
                        .l2_norm();
                    sq_err.push(d * d);
                    phi_diff.push(
                        observable_eval(cfg.observable, &c.final_field)
                            - observable_eval(cfg.observable, &f.final_field),
                    );
                }
                _ => {
                    aborted = Some(i);
                    sq_err = vec![0.0; ladder.len()];
                    phi_diff = vec![0.0; ladder.len()];
                    break;
                }
            }
        }
        TrajectorySample {
            aborted,
            sq_err,
            phi_diff,
        }
    });

    let pseudo = StudyConfig {
        t_final: cfg.t_final,
        kappa: dt_fine,
        h_ladder: ladder.clone(),
        h_reference: dt_fine,
        trajectories: cfg.trajectories,
        seed: cfg.seed,
        observable: cfg.observable,
        diffusion_variant: cfg.diffusion_variant,
        workers: cfg.workers,
        noise_sampling: NoiseSampling::default(),
    };
    assemble_report(&pseudo, &ladder, samples)
}

/// Everything needed to persist a study.
pub struct EmitOptions {
    pub out_dir: PathBuf,
    pub config_json: serde_json::Value,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Write `errors.csv`, `manifest.json` and a gnuplot-ready `loglog.dat`;
/// returns the paths written.
pub fn emit_results(report: &ErrorReport, opts: &EmitOptions) -> Result<Vec<PathBuf>> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| Error::Io {
            path: p.clone(),
            source,
        }
    };
    std::fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;

    let csv_path = opts.out_dir.join("errors.csv");
    let mut csv = String::new();
    csv.push_str(
        "h,strong_error,strong_halfwidth,strong_order_pairwise,weak_error,weak_halfwidth,weak_order_pairwise,aborts\n",
    );
    for row in &report.rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.h,
            row.strong_error,
            row.strong_halfwidth,
            opt(row.strong_order_pairwise),
            row.weak_error,
            row.weak_halfwidth,
            opt(row.weak_order_pairwise),
            row.aborts
        ));
    }
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    let manifest_path = opts.out_dir.join("manifest.json");
    let manifest = serde_json::json!({
        "schema": 1,
        "config": opts.config_json,
        "seed": opts.seed,
        "versions": { "spde-core": env!("CARGO_PKG_VERSION") },
        "wall_time_s": opts.wall_time_s,
        "report": report,
    });
    let mut file = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    file.write_all(text.as_bytes()).map_err(io_err(&manifest_path))?;

    let dat_path = opts.out_dir.join("loglog.dat");
    let mut dat = String::from("# h strong_error weak_error\n");
    for row in &report.rows {
        dat.push_str(&format!("{} {} {}\n", row.h, row.strong_error, row.weak_error));
    }
    std::fs::write(&dat_path, dat).map_err(io_err(&dat_path))?;

    Ok(vec![csv_path, manifest_path, dat_path])
}

/// Parse a CSV produced by [`emit_results`]; shortest round-trip float
/// formatting makes this lossless.
pub fn parse_report_csv(path: &Path) -> Result<Vec<ErrorRow>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Config(format!(
                "line {} has {} fields, expected 8",
                i + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("bad number {s:?}: {e}")))
        };
        let opt_num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        rows.push(ErrorRow {
            h: num(fields[0])?,
            strong_error: num(fields[1])?,
            strong_halfwidth: num(fields[2])?,
            strong_order_pairwise: opt_num(fields[3])?,
            weak_error: num(fields[4])?,
            weak_halfwidth: num(fields[5])?,
            weak_order_pairwise: opt_num(fields[6])?,
            aborts: fields[7]
                .parse()
                .map_err(|e| Error::Config(format!("bad abort count: {e}")))?,
        });
    }
    Ok(rows)
}
