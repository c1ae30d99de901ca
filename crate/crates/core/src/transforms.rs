//! Fast sine transform used for eigenbasis changes and dealiased collocation.
//!
//! All spatial grids in this crate are uniform with `N = 1/h` a power of two,
//! so the type-I discrete sine transform of length `N - 1`,
//!
//! ```text
//! S[k] = sum_{j=1}^{N-1} x[j] sin(pi j k / N),   k = 1..N-1,
//! ```
//!
//! is computed through one complex radix-2 FFT of length `2N`. A direct
//! `O(n^2)` summation is kept as a fallback for grids whose `N` is not a
//! power of two and as the reference in the unit tests. The transform is its
//! own inverse up to the factor `2/N`.

use std::f64::consts::PI;

/// Iterative radix-2 complex FFT with precomputed twiddles and bit-reversal.
struct Fft {
    len: usize,
    twiddle_re: Vec<f64>,
    twiddle_im: Vec<f64>,
    reversed: Vec<u32>,
}

impl Fft {
    fn new(len: usize) -> Self {
        debug_assert!(len.is_power_of_two());
        let half = len / 2;
        let mut twiddle_re = Vec::with_capacity(half);
        let mut twiddle_im = Vec::with_capacity(half);
        for k in 0..half {
            let angle = -2.0 * PI * k as f64 / len as f64;
            twiddle_re.push(angle.cos());
            twiddle_im.push(angle.sin());
        }
        let bits = len.trailing_zeros();
        let reversed = (0..len as u32)
            .map(|i| i.reverse_bits() >> (32 - bits))
            .collect();
        Fft {
            len,
            twiddle_re,
            twiddle_im,
            reversed,
        }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.len;
        debug_assert_eq!(re.len(), n);
        debug_assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.reversed[i] as usize;
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut span = 2;
        while span <= n {
            let stride = n / span;
            let half = span / 2;
            let mut start = 0;
            while start < n {
                for k in 0..half {
                    let wr = self.twiddle_re[k * stride];
                    let wi = self.twiddle_im[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
                start += span;
            }
            span <<= 1;
        }
    }
}

/// Reusable buffers for [`SineTransform::apply`]; one per worker thread.
#[derive(Default)]
pub struct DstScratch {
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Type-I discrete sine transform plan of length `grid_n - 1`.
///
/// For power-of-two grids the odd extension of length `2 grid_n` is packed
/// into a complex FFT of length `grid_n` (the even/odd real-FFT split), so
/// one transform costs one half-length complex FFT plus an `O(N)` unpack.
pub struct SineTransform {
    grid_n: usize,
    fft: Option<Fft>,
    /// `cos(pi k / N)`, `sin(pi k / N)` for the real-FFT recombination.
    half_cos: Vec<f64>,
    half_sin: Vec<f64>,
}

impl SineTransform {
    /// Plan a transform for the grid `x_j = j / grid_n`, `j = 1..grid_n - 1`.
    pub fn new(grid_n: usize) -> Self {
        assert!(grid_n >= 2, "grid must have at least one interior point");
        let (fft, half_cos, half_sin) = if grid_n.is_power_of_two() {
            let mut half_cos = Vec::with_capacity(grid_n);
            let mut half_sin = Vec::with_capacity(grid_n);
            for k in 0..grid_n {
                let angle = PI * k as f64 / grid_n as f64;
                half_cos.push(angle.cos());
                half_sin.push(angle.sin());
            }
            (Some(Fft::new(grid_n)), half_cos, half_sin)
        } else {
            (None, Vec::new(), Vec::new())
        };
        SineTransform {
            grid_n,
            fft,
            half_cos,
            half_sin,
        }
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    /// Number of interior points / modes handled by the plan.
    pub fn len(&self) -> usize {
        self.grid_n - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-place unnormalized DST-I of `x` (length `self.len()`).
    pub fn apply(&self, x: &mut [f64], scratch: &mut DstScratch) {
        let n = self.len();
        assert_eq!(x.len(), n, "input length must match the plan");
        match &self.fft {
            Some(fft) => {
                // Odd extension y of length 2N packed as z_j = y_{2j} + i y_{2j+1}.
                let big_n = self.grid_n;
                let y = |idx: usize| -> f64 {
                    if idx == 0 || idx == big_n {
                        0.0
                    } else if idx < big_n {
                        x[idx - 1]
                    } else {
                        -x[2 * big_n - idx - 1]
                    }
                };
                scratch.re.clear();
                scratch.im.clear();
                scratch.re.extend((0..big_n).map(|j| y(2 * j)));
                scratch.im.extend((0..big_n).map(|j| y(2 * j + 1)));
                fft.forward(&mut scratch.re, &mut scratch.im);
                // With Z the half-length FFT and W = exp(-i pi k / N), the
                // odd extension gives Y_k = -2i S_k, hence
                // S_k = ((a - c) cos + (b + d) sin - b + d) / 4
                // for Z_k = a + ib, Z_{N-k} = c + id.
                let re = &scratch.re;
                let im = &scratch.im;
                for k in 1..=n {
                    let (a, b) = (re[k], im[k]);
                    let (c, d) = (re[big_n - k], im[big_n - k]);
                    x[k - 1] =
                        0.25 * ((a - c) * self.half_cos[k] + (b + d) * self.half_sin[k] - b + d);
                }
            }
            None => {
                scratch.re.clear();
                scratch.re.extend_from_slice(x);
                let step = PI / self.grid_n as f64;
                for (k, slot) in x.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &v) in scratch.re.iter().enumerate() {
                        acc += v * ((j + 1) as f64 * (k + 1) as f64 * step).sin();
                    }
                    *slot = acc;
                }
            }
        }
    }
}

/// Smallest power of two that is >= `n`.
pub fn next_power_of_two(n: usize) -> usize {
    n.next_power_of_two()
}

/// Pairwise (fixed binary tree) summation; the reduction order depends only
/// on the slice order, never on thread scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Mean and (unbiased) standard deviation via pairwise summation.
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, var.max(0.0).sqrt())
}
