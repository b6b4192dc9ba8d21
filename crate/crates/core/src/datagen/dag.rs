//! Directed acyclic graphs, structural equation simulation and
//! moralization.
//!
//! Weighted adjacency matrices are indexed `[child, parent]`: a nonzero
//! `A[j, k]` means `k → j`, so a linear SEM reads `x = A x + ε`.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::graphops::Skeleton;
use crate::numerics::{DenseMatrix, SeededRng};
use crate::{Error, Result};

/// Kahn's algorithm over the support of `a`; parents precede children.
pub fn topological_order(a: &DenseMatrix) -> Result<Vec<usize>> {
    let p = a.nrows();
    if a.ncols() != p {
        return Err(Error::shape("adjacency matrix must be square"));
    }
    let mut indegree: Vec<usize> = (0..p)
        .map(|j| (0..p).filter(|&k| k != j && a[[j, k]] != 0.0).count())
        .collect();
    if (0..p).any(|j| a[[j, j]] != 0.0) {
        return Err(Error::CyclicGraph);
    }
    let mut ready: VecDeque<usize> = (0..p).filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(p);
    while let Some(k) = ready.pop_front() {
        order.push(k);
        for j in 0..p {
            if j != k && a[[j, k]] != 0.0 {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
    }
    if order.len() == p {
        Ok(order)
    } else {
        Err(Error::CyclicGraph)
    }
}

/// Random rooted tree over `p` nodes with edges oriented away from the root.
pub fn random_tree_dag(p: usize, rng: &mut SeededRng) -> Result<DenseMatrix> {
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(rng);
    tree_over_order(&order, rng)
}

/// Grows a tree breadth-first: nodes join in the given order and every
/// expanded node receives 1 to 3 children, so each parent precedes its
/// children in `order`.
pub fn tree_over_order(order: &[usize], rng: &mut SeededRng) -> Result<DenseMatrix> {
    let p = order.len();
    if p < 2 {
        return Err(Error::Domain("a tree needs at least two nodes".into()));
    }
    let mut b = Array2::<f64>::zeros((p, p));
    let mut queue = VecDeque::from([order[0]]);
    let mut next = 1;
    while next < p {
        let parent = queue.pop_front().expect("queue nonempty while nodes remain");
        let children: usize = rng.random_range(1..=3);
        for _ in 0..children {
            if next == p {
                break;
            }
            let child = order[next];
            b[[child, parent]] = 1.0;
            queue.push_back(child);
            next += 1;
        }
    }
    Ok(b)
}

/// Normalized Hermite function `ψ_n(x) = (2^n n! √π)^{-1/2} H_n(x) e^{-x²/2}`
/// with physicists' polynomials `H_n`, via the stable three-term recurrence.
pub fn hermite_function(n: usize, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    for k in 0..n {
        let k = k as f64;
        let next = (2.0 / (k + 1.0)).sqrt() * x * cur - (k / (k + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Number of basis functions in the non-linear SEM.
pub const HERMITE_TERMS: usize = 3;

/// Edge functions of a structural equation model.
#[derive(Clone, Copy, Debug)]
pub enum SemFamily<'a> {
    /// `f_jk(x) = A_jk x`
    Linear,
    /// `f_jk(x) = Σ_m A_jk c[j, k, m] ψ_m(x)` for `m < HERMITE_TERMS`.
    Hermite(&'a Array3<f64>),
}

/// Evaluates the SEM in topological order for a fixed noise vector.
pub fn sem_propagate(a: &DenseMatrix, family: SemFamily<'_>, eps: ArrayView1<f64>) -> Result<Array1<f64>> {
    let p = a.nrows();
    if eps.len() != p {
        return Err(Error::shape("noise length differs from node count"));
    }
    if let SemFamily::Hermite(c) = family {
        if c.dim() != (p, p, HERMITE_TERMS) {
            return Err(Error::shape("Hermite coefficient array must be p x p x 3"));
        }
    }
    let order = topological_order(a)?;
    let mut x = Array1::<f64>::zeros(p);
    for &j in &order {
        let mut v = eps[j];
        for k in 0..p {
            let w = a[[j, k]];
            if k == j || w == 0.0 {
                continue;
            }
            v += match family {
                SemFamily::Linear => w * x[k],
                SemFamily::Hermite(c) => (0..HERMITE_TERMS)
                    .map(|m| w * c[[j, k, m]] * hermite_function(m, x[k]))
                    .sum::<f64>(),
            };
        }
        x[j] = v;
    }
    Ok(x)
}

/// One draw with `ε_j ~ N(0, σ²)` independently.
pub fn sem_simulate(a: &DenseMatrix, family: SemFamily<'_>, sigma: f64, rng: &mut SeededRng) -> Result<Array1<f64>> {
    let eps = Array1::from_shape_fn(a.nrows(), |_| sigma * rng.standard_normal());
    sem_propagate(a, family, eps.view())
}

/// Undirected version of the DAG supported on `a != 0`, plus an edge
/// between every pair of parents sharing a child unless `pseudo` is set.
pub fn moralize(a: &DenseMatrix, pseudo: bool) -> Result<Skeleton> {
    topological_order(a)?;
    let p = a.nrows();
    let mut s = Skeleton::empty(p);
    for j in 0..p {
        let parents: Vec<usize> = (0..p).filter(|&k| k != j && a[[j, k]] != 0.0).collect();
        for &k in &parents {
            s.insert(j, k);
        }
        if !pseudo {
            for (i, &u) in parents.iter().enumerate() {
                for &v in &parents[i + 1..] {
                    s.insert(u, v);
                }
            }
        }
    }
    Ok(s)
}

/// Precision of `x = A x + ε` with `ε ~ N(0, diag(omega))`:
/// `Θ = (I - A)ᵀ diag(omega)^{-1} (I - A)`.
pub fn linear_sem_precision(a: &DenseMatrix, omega: &[f64]) -> Result<DenseMatrix> {
    topological_order(a)?;
    let p = a.nrows();
    if omega.len() != p {
        return Err(Error::shape("noise variance length differs from node count"));
    }
    if omega.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Domain("noise variances must be positive".into()));
    }
    let m = Array2::<f64>::eye(p) - a;
    let mut scaled = m.clone();
    for (mut row, w) in scaled.rows_mut().into_iter().zip(omega) {
        row /= *w;
    }
    Ok(m.t().dot(&scaled))
}
