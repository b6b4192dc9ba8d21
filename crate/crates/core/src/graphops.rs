//! Post-processing of estimated coefficient matrices into edge scores and
//! sparse skeletons.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::numerics::DenseMatrix;
use crate::{Error, Result};

/// Estimated graph for one sample: `W[j, k] = -beta_jk(z)`, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGraph(DenseMatrix);

impl std::borrow::Borrow<DenseMatrix> for PerSampleGraph {
    fn borrow(&self) -> &DenseMatrix {
        &self.0
    }
}

impl PerSampleGraph {
    /// Wraps `w`, forcing its diagonal to exactly zero.
    pub fn new(mut w: DenseMatrix) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::shape("graph matrix must be square"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("graph has non-finite entries".into()));
        }
        w.diag_mut().fill(0.0);
        Ok(PerSampleGraph(w))
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_inner(self) -> DenseMatrix {
        self.0
    }
}

/// Binary symmetric adjacency with empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Skeleton {
    p: usize,
    // upper triangle, row-major over j < k
    upper: Vec<bool>,
}

/// Position of the unordered pair `(j, k)`, `j < k`, in row-major upper
/// triangle order.
#[inline]
pub fn pair_index(p: usize, j: usize, k: usize) -> usize {
    debug_assert!(j < k && k < p);
    j * (2 * p - j - 1) / 2 + (k - j - 1)
}

pub fn pair_count(p: usize) -> usize {
    p * p.saturating_sub(1) / 2
}

/// All unordered pairs `(j, k)` with `j < k`, in [`pair_index`] order.
pub fn upper_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(move |j| ((j + 1)..p).map(move |k| (j, k)))
}

impl Skeleton {
    pub fn empty(p: usize) -> Self {
        Skeleton {
            p,
            upper: vec![false; pair_count(p)],
        }
    }

    pub fn from_pairs(p: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != pair_count(p) {
            return Err(Error::shape(format!("{} pair flags for p = {p}", flags.len())));
        }
        Ok(Skeleton { p, upper: flags })
    }

    /// Edge wherever `pred(j, k)` holds for `j < k`.
    pub fn from_fn(p: usize, mut pred: impl FnMut(usize, usize) -> bool) -> Self {
        Skeleton {
            p,
            upper: upper_pairs(p).map(|(j, k)| pred(j, k)).collect(),
        }
    }

    /// Symmetric boolean matrix; fails on asymmetry or a set diagonal.
    pub fn from_matrix(m: &Array2<bool>) -> Result<Self> {
        let p = m.nrows();
        if m.ncols() != p {
            return Err(Error::shape("skeleton matrix must be square"));
        }
        for j in 0..p {
            if m[[j, j]] {
                return Err(Error::Domain("skeleton diagonal must be empty".into()));
            }
            for k in (j + 1)..p {
                if m[[j, k]] != m[[k, j]] {
                    return Err(Error::Domain("skeleton must be symmetric".into()));
                }
            }
        }
        Ok(Skeleton::from_fn(p, |j, k| m[[j, k]]))
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn contains(&self, j: usize, k: usize) -> bool {
        match j.cmp(&k) {
            std::cmp::Ordering::Less => self.upper[pair_index(self.p, j, k)],
            std::cmp::Ordering::Greater => self.upper[pair_index(self.p, k, j)],
            std::cmp::Ordering::Equal => false,
        }
    }

    pub fn insert(&mut self, j: usize, k: usize) {
        if j != k {
            let (a, b) = if j < k { (j, k) } else { (k, j) };
            let idx = pair_index(self.p, a, b);
            self.upper[idx] = true;
        }
    }

    /// Pair flags in [`upper_pairs`] order.
    pub fn pair_flags(&self) -> &[bool] {
        &self.upper
    }

    pub fn edge_count(&self) -> usize {
        self.upper.iter().filter(|&&e| e).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        upper_pairs(self.p)
            .zip(&self.upper)
            .filter(|(_, &e)| e)
            .map(|(pair, _)| pair)
            .collect()
    }

    pub fn is_subset_of(&self, other: &Skeleton) -> bool {
        self.p == other.p && self.upper.iter().zip(&other.upper).all(|(&a, &b)| !a || b)
    }

    pub fn to_matrix(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.p, self.p), |(j, k)| self.contains(j, k))
    }

    /// Edge list as CSV: header `j,k`, one undirected edge per line, `j < k`.
    pub fn write_edge_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "j,k")?;
        for (j, k) in self.edges() {
            writeln!(w, "{j},{k}")?;
        }
        Ok(())
    }
}

/// Rule for turning the two directed estimates of a pair into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetrization {
    /// `min(|W_jk|, |W_kj|)`, consistent with the AND rule.
    #[default]
    Min,
    /// `(|W_jk| + |W_kj|) / 2`.
    Mean,
}

/// Scales `w` so its largest off-diagonal magnitude is 1.
pub fn normalize(w: &DenseMatrix) -> Result<DenseMatrix> {
    let p = w.nrows();
    let mut max = 0.0f64;
    for j in 0..p {
        for k in 0..p {
            if j != k {
                max = max.max(w[[j, k]].abs());
            }
        }
    }
    if max == 0.0 {
        return Err(Error::AllZeroGraph);
    }
    let mut out = w / max;
    out.diag_mut().fill(0.0);
    Ok(out)
}

pub fn symmetric_scores(w: &DenseMatrix, rule: Symmetrization) -> DenseMatrix {
    let p = w.nrows();
    let mut s = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        for k in (j + 1)..p {
            let (a, b) = (w[[j, k]].abs(), w[[k, j]].abs());
            let v = match rule {
                Symmetrization::Min => a.min(b),
                Symmetrization::Mean => 0.5 * (a + b),
            };
            s[[j, k]] = v;
            s[[k, j]] = v;
        }
    }
    s
}

/// Symmetric scores for the unordered pairs, in [`upper_pairs`] order.
pub fn pair_scores(w: &DenseMatrix, rule: Symmetrization) -> Vec<f64> {
    upper_pairs(w.nrows())
        .map(|(j, k)| {
            let (a, b) = (w[[j, k]].abs(), w[[k, j]].abs());
            match rule {
                Symmetrization::Min => a.min(b),
                Symmetrization::Mean => 0.5 * (a + b),
            }
        })
        .collect()
}

/// AND rule: edge `(j, k)` iff both `|W_jk| ≥ tau` and `|W_kj| ≥ tau`.
pub fn threshold_and(w: &DenseMatrix, tau: f64) -> Skeleton {
    Skeleton::from_fn(w.nrows(), |j, k| w[[j, k]].abs() >= tau && w[[k, j]].abs() >= tau)
}

/// `tau = eta * weak + (1 - eta) * strong`, a threshold between the largest
/// weak-edge magnitude and the smallest strong-edge magnitude.
pub fn corollary2_threshold(weak: f64, strong: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Domain(format!("eta = {eta} must lie in (0, 1)")));
    }
    if weak < 0.0 {
        return Err(Error::Domain("weak-edge ceiling must be nonnegative".into()));
    }
    if strong <= weak {
        return Err(Error::MarginViolated { weak, strong });
    }
    Ok(eta * weak + (1.0 - eta) * strong)
}

/// One histogram bin of edge magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Histogram of pair scores on `[0, 1]` over a set of normalized graphs,
/// for choosing a threshold at a visible gap.
pub fn magnitude_histogram<'a>(
    graphs: impl IntoIterator<Item = &'a DenseMatrix>,
    rule: Symmetrization,
    bins: usize,
) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for w in graphs {
        for s in pair_scores(w, rule) {
            let b = ((s * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower: i as f64 / bins as f64,
            upper: (i + 1) as f64 / bins as f64,
            count,
        })
        .collect()
}
