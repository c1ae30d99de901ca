//! Reproducible truncated space-time white noise.
//!
//! The cylindrical Wiener process is truncated to `J` sine modes and sampled
//! on a fine time grid of width `dt_fine`. Every Gaussian draw is a pure
//! function of `(seed, trajectory_index, step, mode)` through a splitmix-style
//! counter hash, so regenerating a path is bit-identical no matter how work
//! is scheduled across threads, and different trajectories are independent
//! streams.
//!
//! Window sums over `[a, b)` are accumulated along a fixed dyadic tree: a
//! window is split at the coarsest power-of-two boundary it contains. Splits
//! on those boundaries therefore reproduce the exact same floating point sum,
//! which is what couples runs at different step sizes on one Brownian path.

use std::io::Write;

use crate::error::{Error, Result};
use crate::spectral::SpectralField;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn to_unit_open(bits: u64) -> f64 {
    // (0, 1]: never 0, so the logarithm below is finite.
    ((bits >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal from a keyed counter (Box-Muller, cosine branch).
#[inline]
fn gaussian(step_key: u64, lane: u64) -> f64 {
    let u1 = to_unit_open(mix64(step_key ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let u2 = to_unit_open(mix64(
        step_key ^ (lane | 0x8000_0000_0000_0000).wrapping_mul(0xc2b2_ae3d_27d4_eb4f),
    ));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-trajectory record of truncated Brownian increments.
///
/// `increments[k][j] ~ N(0, dt_fine)`, independent across steps and modes,
/// generated lazily from the counter hash.
#[derive(Debug, Clone)]
pub struct NoisePath {
    seed: u64,
    trajectory_index: u64,
    j_modes: usize,
    dt_fine: f64,
    n_fine: usize,
    traj_key: u64,
}

impl NoisePath {
    pub fn new(seed: u64, trajectory_index: u64, j_modes: usize, dt_fine: f64, n_fine: usize) -> Self {
        assert!(j_modes >= 1 && dt_fine > 0.0);
        let traj_key = mix64(mix64(seed ^ 0xa076_1d64_78bd_642f) ^ trajectory_index.wrapping_mul(0xe703_7ed1_a0b4_28db));
        NoisePath {
            seed,
            trajectory_index,
            j_modes,
            dt_fine,
            n_fine,
            traj_key,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trajectory_index(&self) -> u64 {
        self.trajectory_index
    }

    pub fn j_modes(&self) -> usize {
        self.j_modes
    }

    pub fn dt_fine(&self) -> f64 {
        self.dt_fine
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    #[inline]
    fn step_key(&self, step: usize) -> u64 {
        mix64(self.traj_key ^ (step as u64).wrapping_mul(0x8ebc_6af0_9c88_c6e3))
    }

    /// Standard-normal draw for `(step, mode)`; `mode` is 1-based.
    #[inline]
    pub fn fine_gaussian(&self, step: usize, mode: usize) -> f64 {
        debug_assert!(step < self.n_fine && mode >= 1 && mode <= self.j_modes);
        gaussian(self.step_key(step), mode as u64)
    }

    /// Brownian increment of one mode over one fine step, `N(0, dt_fine)`.
    #[inline]
    pub fn fine_increment(&self, step: usize, mode: usize) -> f64 {
        self.fine_gaussian(step, mode) * self.dt_fine.sqrt()
    }

    fn window_sum(&self, mode: usize, a: usize, b: usize) -> f64 {
        if b - a == 1 {
            return self.fine_increment(a, mode);
        }
        let split = dyadic_split(a, b);
        self.window_sum(mode, a, split) + self.window_sum(mode, split, b)
    }

    /// Increment field over fine steps `[k_start, k_end)`; the empty range
    /// yields the zero field.
    pub fn increment(&self, k_start: usize, k_end: usize) -> Result<SpectralField> {
        if k_start > k_end || k_end > self.n_fine {
            return Err(Error::Range {
                start: k_start,
                end: k_end,
                len: self.n_fine,
            });
        }
        let mut coeffs = vec![0.0; self.j_modes];
        if k_start < k_end {
            for (j, c) in coeffs.iter_mut().enumerate() {
                *c = self.window_sum(j + 1, k_start, k_end);
            }
        }
        Ok(SpectralField::new(coeffs))
    }

    /// Raw dump of all fine increments, little-endian f64, row-major
    /// `[step][mode]`.
    pub fn dump_increments(&self, mut out: impl Write) -> std::io::Result<()> {
        for step in 0..self.n_fine {
            for mode in 1..=self.j_modes {
                out.write_all(&self.fine_increment(step, mode).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Coarsest power-of-two boundary strictly inside `(a, b)`.
fn dyadic_split(a: usize, b: usize) -> usize {
    debug_assert!(b > a + 1);
    let mut k = usize::BITS - 1;
    loop {
        let step = 1usize << k;
        let c = (a / step + 1) * step;
        if c < b {
            return c;
        }
        k -= 1;
    }
}

/// Truncate a field to its first `j_coarse` modes (zero modes allowed).
pub fn restrict_modes(w: &SpectralField, j_coarse: usize) -> SpectralField {
    assert!(j_coarse <= w.n_modes(), "restriction cannot add modes");
    if j_coarse == 0 {
        // Degenerate but convenient: an all-zero single-slot field.
        return SpectralField::zeros(1);
    }
    SpectralField::new(w.coeffs()[..j_coarse].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{mean_and_std, pairwise_sum};

    #[test]
    fn deterministic_and_thread_order_free() {
        let a = NoisePath::new(42, 7, 16, 1.0 / 128.0, 128);
        let b = NoisePath::new(42, 7, 16, 1.0 / 128.0, 128);
        for step in [0usize, 1, 63, 127] {
            for mode in [1usize, 2, 16] {
                assert_eq!(
                    a.fine_increment(step, mode).to_bits(),
                    b.fine_increment(step, mode).to_bits()
                );
            }
        }
        // Different trajectories differ.
        let c = NoisePath::new(42, 8, 16, 1.0 / 128.0, 128);
        assert_ne!(
            a.fine_increment(0, 1).to_bits(),
            c.fine_increment(0, 1).to_bits()
        );
    }

    #[test]
    fn nesting_is_bit_exact_on_dyadic_splits() {
        let path = NoisePath::new(1234, 0, 8, 1.0 / 64.0, 64);
        for &(a, m, b) in &[(0usize, 32usize, 64usize), (0, 16, 32), (16, 24, 32), (8, 12, 16)] {
            let whole = path.increment(a, b).unwrap();
            let left = path.increment(a, m).unwrap();
            let right = path.increment(m, b).unwrap();
            for j in 1..=8 {
                assert_eq!(
                    whole.coeff(j).to_bits(),
                    (left.coeff(j) + right.coeff(j)).to_bits(),
                    "window [{a},{m},{b}) mode {j}"
                );
            }
        }
    }

    #[test]
    fn empty_range_and_bad_ranges() {
        let path = NoisePath::new(5, 0, 4, 0.25, 4);
        let z = path.increment(2, 2).unwrap();
        assert!(z.l2_norm() == 0.0);
        assert!(path.increment(3, 2).is_err());
        assert!(path.increment(0, 5).is_err());
    }

    #[test]
    fn restriction_examples() {
        let w = SpectralField::new(vec![1.0, -2.0, 3.0]);
        assert_eq!(restrict_modes(&w, 3), w);
        assert_eq!(restrict_modes(&w, 2).coeffs(), &[1.0, -2.0]);
        assert!(restrict_modes(&w, 0).l2_norm() == 0.0);
        assert!(restrict_modes(&w, 2).l2_norm() <= w.l2_norm());
    }

    /// Sample variance of mode-1 window increments against the chi-square
    /// concentration band.
    #[test]
    fn window_variance_matches_chi_square_band() {
        let m_samples = 100_000;
        let window = 8usize;
        let dt = 1.0 / 256.0;
        let tau = window as f64 * dt;
        let mut sq = Vec::with_capacity(m_samples);
        for traj in 0..m_samples {
            let path = NoisePath::new(2024, traj as u64, 1, dt, window);
            let w = path.increment(0, window).unwrap();
            sq.push(w.coeff(1) * w.coeff(1));
        }
        let mean = pairwise_sum(&sq) / m_samples as f64;
        // Var(chi^2 sample mean) = 2 tau^2 / M.
        let band = 3.0 * tau * (2.0 / m_samples as f64).sqrt();
        assert!(
            (mean - tau).abs() <= band,
            "sample variance {mean} outside {tau} +- {band}"
        );
    }

    /// Ito isometry on the truncated series: E ||dW||^2 = J tau.
    #[test]
    fn increment_norm_matches_ito_isometry() {
        let m_samples = 20_000;
        let j_modes = 16;
        let window = 4usize;
        let dt = 1.0 / 512.0;
        let tau = window as f64 * dt;
        let mut sq = Vec::with_capacity(m_samples);
        for traj in 0..m_samples {
            let path = NoisePath::new(77, traj as u64, j_modes, dt, window);
            let w = path.increment(0, window).unwrap();
            sq.push(w.l2_norm().powi(2));
        }
        let (mean, std) = mean_and_std(&sq);
        let expect = j_modes as f64 * tau;
        let se = std / (m_samples as f64).sqrt();
        assert!(
            (mean - expect).abs() <= 3.0 * se,
            "E||dW||^2 = {mean}, expected {expect} +- {}",
            3.0 * se
        );
    }

    /// Cross-correlation between trajectories and between modes stays inside
    /// the normal sampling band.
    #[test]
    fn independence_across_trajectories_and_modes() {
        let n = 10_000;
        let dt = 1.0;
        let mut prod_traj = Vec::with_capacity(n);
        let mut prod_modes = Vec::with_capacity(n);
        for k in 0..n {
            let p0 = NoisePath::new(9, 2 * k as u64, 2, dt, 1);
            let p1 = NoisePath::new(9, 2 * k as u64 + 1, 2, dt, 1);
            prod_traj.push(p0.fine_gaussian(0, 1) * p1.fine_gaussian(0, 1));
            prod_modes.push(p0.fine_gaussian(0, 1) * p0.fine_gaussian(0, 2));
        }
        let corr_traj = pairwise_sum(&prod_traj) / n as f64;
        let corr_modes = pairwise_sum(&prod_modes) / n as f64;
        let band = 4.0 / (n as f64).sqrt();
        assert!(corr_traj.abs() < band, "trajectory correlation {corr_traj}");
        assert!(corr_modes.abs() < band, "mode correlation {corr_modes}");
    }

    /// Empirical covariance matrix of (mode 1, mode 2) increments is diagonal
    /// within three standard errors.
    #[test]
    fn mode_covariance_is_diagonal() {
        let n = 50_000;
        let dt = 0.01;
        let mut v11 = Vec::with_capacity(n);
        let mut v22 = Vec::with_capacity(n);
        let mut v12 = Vec::with_capacity(n);
        for k in 0..n {
            let p = NoisePath::new(31, k as u64, 2, dt, 1);
            let (a, b) = (p.fine_increment(0, 1), p.fine_increment(0, 2));
            v11.push(a * a);
            v22.push(b * b);
            v12.push(a * b);
        }
        let (m11, s11) = mean_and_std(&v11);
        let (m22, s22) = mean_and_std(&v22);
        let (m12, s12) = mean_and_std(&v12);
        let root = (n as f64).sqrt();
        assert!((m11 - dt).abs() <= 3.0 * s11 / root);
        assert!((m22 - dt).abs() <= 3.0 * s22 / root);
        assert!(m12.abs() <= 3.0 * s12 / root);
    }

    #[test]
    fn dump_is_little_endian_row_major() {
        let path = NoisePath::new(3, 1, 2, 0.5, 2);
        let mut bytes = Vec::new();
        path.dump_increments(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 2 * 2 * 8);
        let first = f64::from_le_bytes(bytes[0..8].try_into().unwrap());
        assert_eq!(first, path.fine_increment(0, 1));
        let last = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        assert_eq!(last, path.fine_increment(1, 2));
    }
}
