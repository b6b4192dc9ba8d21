//! Covariate-free nodewise Lasso baseline.
//!
//! Each node is regressed on the others with an l1 penalty, minimizing
//! `(1/2n)‖y - Xb‖² + λ‖b‖₁` by cyclic coordinate descent on the Gram
//! matrix. The estimate is a single graph per penalty level; per-cluster
//! estimation is obtained by calling the estimator on each cluster's rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphops::{Skeleton, Symmetrization};
use crate::metrics::{score_sample, SampleMetrics};
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

/// Stationarity tolerance every converged solution satisfies.
pub const KKT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Sweeps stop once no coefficient moves by more than this.
    pub tol: f64,
    pub max_iter: usize,
    pub n_lambda: usize,
    /// Smallest grid value as a fraction of `λ_max`.
    pub min_ratio: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-11,
            max_iter: 100_000,
            n_lambda: 50,
            min_ratio: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub coef: Array1<f64>,
    pub sweeps: usize,
    /// False when `max_iter` sweeps ran out; `coef` is then the last iterate.
    pub converged: bool,
}

impl LassoFit {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxIterExceeded(self.sweeps))
        }
    }
}

fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Largest stationarity violation of `b` given the correlation vector
/// `g = c - G b` of the current residual.
fn kkt_violation(b: ArrayView1<f64>, g: ArrayView1<f64>, lambda: f64, skip: Option<usize>) -> f64 {
    let mut worst = 0.0f64;
    for (k, (&bk, &gk)) in b.iter().zip(g.iter()).enumerate() {
        if Some(k) == skip {
            continue;
        }
        let v = if bk == 0.0 {
            (gk.abs() - lambda).max(0.0)
        } else {
            (gk - lambda * bk.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Coordinate descent on `(1/2) bᵀGb - cᵀb + λ‖b‖₁`, starting from `b`.
/// Coordinate `skip` is held at zero. Returns `(sweeps, converged)`.
fn cd_gram(
    gram: ArrayView2<f64>,
    c: ArrayView1<f64>,
    skip: Option<usize>,
    lambda: f64,
    b: &mut Array1<f64>,
    opts: &LassoOptions,
) -> (usize, bool) {
    let d = c.len();
    let exact_grad = |b: &Array1<f64>| &c - &gram.dot(b);
    let mut g = exact_grad(b);
    let mut sweeps = 0;
    while sweeps < opts.max_iter {
        sweeps += 1;
        let mut max_step = 0.0f64;
        for k in 0..d {
            let gkk = gram[[k, k]];
            if Some(k) == skip || gkk <= 0.0 {
                continue;
            }
            let old = b[k];
            let new = soft_threshold(g[k] + gkk * old, lambda) / gkk;
            let step = new - old;
            if step != 0.0 {
                b[k] = new;
                g.scaled_add(-step, &gram.column(k));
                max_step = max_step.max(step.abs());
            }
        }
        if max_step < opts.tol {
            // the incremental gradient drifts; confirm on a fresh one
            g = exact_grad(b);
            if kkt_violation(b.view(), g.view(), lambda, skip) <= 0.1 * KKT_TOL {
                return (sweeps, true);
            }
        }
    }
    (sweeps, false)
}

fn check_design(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::shape(format!(
            "design has {} rows, response {}",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Domain("lasso needs at least one observation".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("penalty {lambda} must be nonnegative")));
    }
    Ok(())
}

fn gram_parts(x: ArrayView2<f64>, y: ArrayView1<f64>) -> (DenseMatrix, Array1<f64>) {
    let n = x.nrows() as f64;
    (x.t().dot(&x) / n, x.t().dot(&y) / n)
}

/// Minimizes `(1/2n)‖y - Xb‖² + λ‖b‖₁` from a zero start.
pub fn lasso_cd(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    Ok(lasso_path(x, y, &[lambda], opts)?.pop().expect("one penalty"))
}

/// Solutions along `lambdas`, each warm-started from the previous one.
pub fn lasso_path(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<LassoFit>> {
    for &l in lambdas {
        check_design(x, y, l)?;
    }
    let (gram, c) = gram_parts(x, y);
    let mut b = Array1::<f64>::zeros(x.ncols());
    Ok(lambdas
        .iter()
        .map(|&l| {
            let (sweeps, converged) = cd_gram(gram.view(), c.view(), None, l, &mut b, opts);
            LassoFit {
                coef: b.clone(),
                sweeps,
                converged,
            }
        })
        .collect())
}

/// `max_k |(1/n) X_kᵀ y|`, the smallest penalty with an all-zero solution.
pub fn lambda_max(x: ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
    let n = x.nrows() as f64;
    x.t().dot(&y).iter().fold(0.0f64, |m, v| m.max(v.abs() / n))
}

/// `count` log-spaced values from `max` down to `min_ratio * max`.
pub fn log_grid(max: f64, min_ratio: f64, count: usize) -> Result<Vec<f64>> {
    if !(max > 0.0) || !(min_ratio > 0.0 && min_ratio < 1.0) || count == 0 {
        return Err(Error::Domain(format!(
            "grid needs a positive maximum ({max}), a ratio in (0,1) ({min_ratio}) and at least one point"
        )));
    }
    if count == 1 {
        return Ok(vec![max]);
    }
    let step = min_ratio.ln() / (count - 1) as f64;
    Ok((0..count).map(|i| max * (step * i as f64).exp()).collect())
}

/// Graphs of one nodewise Lasso fit over a descending penalty grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoPath {
    /// Strictly descending, positive.
    pub lambdas: Vec<f64>,
    /// One `p×p` matrix per penalty with `W_jk = b_jk` from node `j`'s
    /// regression on original scales; zero diagonal.
    pub graphs: Vec<DenseMatrix>,
    /// Node regressions that hit `max_iter` somewhere on the path.
    pub unconverged: usize,
}

/// Columns centered and scaled to unit (1/n) variance; constant columns
/// become zero with scale 0.
pub fn standardize(x: ArrayView2<f64>) -> (DenseMatrix, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut z = &x - &mean;
    let mut scale = Array1::<f64>::zeros(x.ncols());
    for (k, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
            scale[k] = sd;
        } else {
            col.fill(0.0);
        }
    }
    (z, scale)
}

/// Shared grid for all node regressions of `x`, computed on standardized
/// columns: from the largest `λ_max` over nodes down by `min_ratio`.
pub fn nodewise_grid(x: ArrayView2<f64>, opts: &LassoOptions) -> Result<Vec<f64>> {
    if x.nrows() < 2 {
        return Err(Error::Domain("nodewise lasso needs at least two observations".into()));
    }
    let (z, _) = standardize(x);
    let corr = z.t().dot(&z) / x.nrows() as f64;
    let p = corr.nrows();
    let mut max = 0.0f64;
    for j in 0..p {
        for k in 0..p {
            if j != k {
                max = max.max(corr[[j, k]].abs());
            }
        }
    }
    log_grid(max, opts.min_ratio, opts.n_lambda)
}

/// Regresses every node on the others at each penalty in `lambdas`. The
/// regressions run on standardized columns; coefficients are returned on
/// the original scales (`b_jk · sd_j / sd_k`).
pub fn nodewise_lasso_graphs(x: ArrayView2<f64>, lambdas: &[f64], opts: &LassoOptions) -> Result<LassoPath> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(Error::Domain("nodewise lasso needs at least two observations".into()));
    }
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) || lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain(
            "penalties must be positive and strictly descending".into(),
        ));
    }
    let (z, scale) = standardize(x);
    let gram = z.t().dot(&z) / n as f64;

    // per node: coefficient rows along the path, plus convergence
    let per_node: Vec<(Vec<Array1<f64>>, bool)> = (0..p)
        .into_par_iter()
        .map(|j| {
            let c = gram.column(j).to_owned();
            let mut b = Array1::<f64>::zeros(p);
            let mut ok = true;
            let rows = lambdas
                .iter()
                .map(|&l| {
                    let (_, converged) = cd_gram(gram.view(), c.view(), Some(j), l, &mut b, opts);
                    ok &= converged;
                    b.clone()
                })
                .collect();
            (rows, ok)
        })
        .collect();

    let graphs = (0..lambdas.len())
        .map(|li| {
            let mut w = Array2::<f64>::zeros((p, p));
            for (j, (rows, _)) in per_node.iter().enumerate() {
                for k in 0..p {
                    if k != j && scale[k] > 0.0 {
                        w[[j, k]] = rows[li][k] * scale[j] / scale[k];
                    }
                }
            }
            w
        })
        .collect();
    Ok(LassoPath {
        lambdas: lambdas.to_vec(),
        graphs,
        unconverged: per_node.iter().filter(|(_, ok)| !ok).count(),
    })
}

/// [`nodewise_lasso_graphs`] over the rows carrying each distinct label,
/// each with its own [`nodewise_grid`]. Returned in ascending label order.
pub fn nodewise_lasso_by_cluster(
    x: ArrayView2<f64>,
    labels: &[usize],
    opts: &LassoOptions,
) -> Result<Vec<(usize, Vec<usize>, LassoPath)>> {
    if labels.len() != x.nrows() {
        return Err(Error::shape("one cluster label per row required"));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    distinct
        .into_iter()
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let sub = x.select(Axis(0), &rows);
            let grid = nodewise_grid(sub.view(), opts)?;
            let path = nodewise_lasso_graphs(sub.view(), &grid, opts)?;
            Ok((c, rows, path))
        })
        .collect()
}

/// Metric evaluated per penalty when selecting along a path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PathMetric {
    Auroc,
    Auprc,
    /// F1 of the AND-rule skeleton of the normalized graph at this threshold.
    F1(f64),
    /// Balanced accuracy, same skeleton as [`PathMetric::F1`].
    Ba(f64),
}

impl PathMetric {
    fn tau(self) -> f64 {
        match self {
            PathMetric::F1(t) | PathMetric::Ba(t) => t,
            _ => 0.0,
        }
    }

    pub fn pick(self, m: &SampleMetrics) -> f64 {
        match self {
            PathMetric::Auroc => m.auroc,
            PathMetric::Auprc => m.auprc,
            PathMetric::F1(_) => m.f1,
            PathMetric::Ba(_) => m.ba,
        }
    }

    pub fn eval(self, w: &DenseMatrix, truth: &Skeleton) -> Result<f64> {
        Ok(self.pick(&score_sample(w, truth, Symmetrization::Min, self.tau())?))
    }
}

/// Penalty with the highest `score`, and that score. Ties go to the
/// earliest (largest) penalty.
pub fn best_over_path_by(path: &LassoPath, mut score: impl FnMut(&DenseMatrix) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (&l, w) in path.lambdas.iter().zip(&path.graphs) {
        let v = score(w)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((l, v));
        }
    }
    best.ok_or_else(|| Error::Domain("empty lasso path".into()))
}

pub fn best_over_path(path: &LassoPath, truth: &Skeleton, metric: PathMetric) -> Result<(f64, f64)> {
    best_over_path_by(path, |w| metric.eval(w, truth))
}

/// Path export: header `lambda,w_0_0,w_0_1,...` then one row per penalty
/// with the row-major flattened graph.
pub fn write_path_csv<W: std::io::Write>(mut w: W, path: &LassoPath) -> Result<()> {
    let p = path.graphs.first().map_or(0, |g| g.nrows());
    let mut header = vec!["lambda".to_string()];
    header.extend((0..p).flat_map(|j| (0..p).map(move |k| format!("w_{j}_{k}"))));
    writeln!(w, "{}", header.join(","))?;
    for (l, g) in path.lambdas.iter().zip(&path.graphs) {
        let cells: Vec<String> = std::iter::once(*l)
            .chain(g.iter().copied())
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
