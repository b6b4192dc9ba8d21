//! Candidate precision matrices, their mixtures, the RBF covariate map and
//! the non-paranormal marginal transforms.

use ndarray::{Array2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::numerics::{cholesky, DenseMatrix};
use crate::{Error, Result};

/// Symmetric matrix with `diag` on the diagonal and `band` on the `±l`-th
/// off-diagonals.
pub fn banded_precision(p: usize, l: usize, diag: f64, band: f64) -> Result<DenseMatrix> {
    if l == 0 || l >= p {
        return Err(Error::Domain(format!("band offset {l} must lie in 1..{p}")));
    }
    let mut m = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        m[[i, i]] = diag;
        if i + l < p {
            m[[i, i + l]] = band;
            m[[i + l, i]] = band;
        }
    }
    cholesky(&m)?;
    Ok(m)
}

/// Unit diagonal everywhere; block `l` (zero-based) of width `size` is
/// dense with `diag` on its diagonal and `fill` off it.
pub fn block_precision(p: usize, l: usize, size: usize, diag: f64, fill: f64) -> Result<DenseMatrix> {
    let start = l * size;
    if size == 0 || start + size > p {
        return Err(Error::Domain(format!(
            "block {l} of size {size} does not fit in dimension {p}"
        )));
    }
    let mut m = Array2::<f64>::eye(p);
    for r in start..start + size {
        for c in start..start + size {
            m[[r, c]] = if r == c { diag } else { fill };
        }
    }
    cholesky(&m)?;
    Ok(m)
}

/// `Σ w_l Ψ_l`. Positive definiteness is only guaranteed for convex weights,
/// so any other combination is checked.
pub fn mix_precision(weights: &[f64], candidates: &[DenseMatrix]) -> Result<DenseMatrix> {
    if weights.len() != candidates.len() || candidates.is_empty() {
        return Err(Error::shape(format!(
            "{} weights for {} candidates",
            weights.len(),
            candidates.len()
        )));
    }
    let mut out = Array2::<f64>::zeros(candidates[0].raw_dim());
    for (w, c) in weights.iter().zip(candidates) {
        if c.raw_dim() != out.raw_dim() {
            return Err(Error::shape("candidate matrices differ in shape"));
        }
        if *w != 0.0 {
            out.scaled_add(*w, c);
        }
    }
    let convex = weights.iter().all(|&w| w >= 0.0) && (weights.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    if !convex {
        cholesky(&out)?;
    }
    Ok(out)
}

/// Radial basis function network `φ(z) = Σ α_ℓ exp(-β_ℓ ‖z - c_ℓ‖²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rbf {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// One center per row.
    pub centers: Vec<Vec<f64>>,
}

impl Rbf {
    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        rbf_eval(&self.alpha, &self.beta, &self.centers, z)
    }
}

pub fn rbf_eval(alpha: &[f64], beta: &[f64], centers: &[Vec<f64>], z: &[f64]) -> Result<f64> {
    if alpha.len() != beta.len() || alpha.len() != centers.len() {
        return Err(Error::shape("RBF parameter lists differ in length"));
    }
    let mut total = 0.0;
    for ((a, b), c) in alpha.iter().zip(beta).zip(centers) {
        if c.len() != z.len() {
            return Err(Error::shape("RBF center dimension differs from covariate"));
        }
        let d2: f64 = c.iter().zip(z).map(|(ci, zi)| (zi - ci) * (zi - ci)).sum();
        total += a * (-b * d2).exp();
    }
    Ok(total)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Monotone marginal transforms of the non-paranormal settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NpnKind {
    /// `x + sin x`
    Sin,
    /// `x² sign x`
    SquareSign,
}

impl NpnKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            NpnKind::Sin => x + x.sin(),
            NpnKind::SquareSign => x * x.abs(),
        }
    }
}

pub fn npn_transform(mut x: ArrayViewMut2<f64>, kind: NpnKind) {
    x.mapv_inplace(|v| kind.apply(v));
}
