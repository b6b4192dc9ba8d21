//! Dense linear algebra and seeded random sampling.
//!
//! Matrices are `ndarray` arrays in standard (row-major) layout. The
//! factorizations here target desk-scale problems (p up to a few hundred).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Dense real matrix, row-major.
pub type DenseMatrix = Array2<f64>;

/// Smallest pivot accepted by [`cholesky`].
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Largest asymmetry accepted by [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8, whose output is fixed by its specification, so a
/// given pair yields the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    /// Stream for item `index` of a family of parallel streams under `seed`.
    /// `domain` separates unrelated families (e.g. sampling vs. init).
    pub fn derived(seed: u64, domain: u64, index: u64) -> Self {
        let stream = mix64(mix64(domain ^ 0x9e37_79b9_7f4a_7c15) ^ index);
        SeededRng::new(seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        // 53 random mantissa bits
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn max_asymmetry(m: &DenseMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > PIVOT_FLOOR) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Inverse of a symmetric positive definite matrix via Cholesky solves.
/// Intended for test oracles and diagnostics at desk scale.
pub fn inverse_spd(m: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(m)?;
    let n = m.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for c in 0..n {
        e.fill(0.0);
        e[c] = 1.0;
        let y = solve_lower(l.view(), e.view());
        let x = solve_lower_transpose(l.view(), y.view());
        inv.column_mut(c).assign(&x);
    }
    // exact symmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Ok(inv)
}

/// Draws `count` rows `x ~ N(0, theta^{-1})`.
///
/// With `theta = L Lᵀ`, `x = L^{-T} u` for standard normal `u` has
/// covariance `(L Lᵀ)^{-1}`.
pub fn sample_from_precision(theta: &DenseMatrix, count: usize, rng: &mut SeededRng) -> Result<DenseMatrix> {
    let l = cholesky(theta)?;
    Ok(sample_with_factor(l.view(), count, rng))
}

/// Same as [`sample_from_precision`] with a precomputed Cholesky factor.
pub fn sample_with_factor(l: ArrayView2<f64>, count: usize, rng: &mut SeededRng) -> DenseMatrix {
    let p = l.nrows();
    let mut out = Array2::<f64>::zeros((count, p));
    let mut u = Array1::<f64>::zeros(p);
    for mut row in out.rows_mut() {
        u.iter_mut().for_each(|v| *v = rng.standard_normal());
        row.assign(&solve_lower_transpose(l, u.view()));
    }
    out
}

/// Empirical covariance (1/n normalization, mean removed).
pub fn empirical_covariance(x: ArrayView2<f64>) -> DenseMatrix {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty sample");
    let centered = &x - &mean;
    centered.t().dot(&centered) / n
}
