//! The six synthetic settings: Gaussian (G1, G2), non-paranormal (N1, N2)
//! and DAG-based (D1, D2), each with a covariate `z` that selects a cluster
//! and mixes candidate graphs.
//!
//! Every sample is drawn from its own random stream, derived from the
//! dataset seed and the sample index, so samples can be generated in
//! parallel and ground truth can be rebuilt from `z` alone.

mod dag;
mod io;
mod precision;

pub use dag::{
    hermite_function, linear_sem_precision, moralize, random_tree_dag, sem_propagate, sem_simulate, topological_order,
    tree_over_order, SemFamily, HERMITE_TERMS,
};
pub use io::{export_csv, load_dataset, save_dataset, DatasetMeta, DATASET_FORMAT};
pub use precision::{banded_precision, block_precision, mix_precision, npn_transform, rbf_eval, sigmoid, NpnKind, Rbf};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphops::Skeleton;
use crate::numerics::{cholesky, sample_with_factor, DenseMatrix, SeededRng};
use crate::{Error, Result};

const CONSTANTS_DOMAIN: u64 = 0x5e77_1465;
const SAMPLE_DOMAIN: u64 = 0x5a3b_1e00;

/// Off-diagonal precision entries at or below this magnitude are not edges.
pub const SUPPORT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SettingId {
    G1,
    G2,
    N1,
    N2,
    D1,
    D2,
}

impl SettingId {
    pub const ALL: [SettingId; 6] = [
        SettingId::G1,
        SettingId::G2,
        SettingId::N1,
        SettingId::N2,
        SettingId::D1,
        SettingId::D2,
    ];

    /// The Gaussian setting whose draws this one transforms, if any.
    pub fn gaussian_base(self) -> Option<SettingId> {
        match self {
            SettingId::N1 => Some(SettingId::G1),
            SettingId::N2 => Some(SettingId::G2),
            _ => None,
        }
    }

    pub fn npn_kind(self) -> Option<NpnKind> {
        match self {
            SettingId::N1 => Some(NpnKind::Sin),
            SettingId::N2 => Some(NpnKind::SquareSign),
            _ => None,
        }
    }

    pub fn is_dag(self) -> bool {
        matches!(self, SettingId::D1 | SettingId::D2)
    }

    pub fn default_p(self) -> usize {
        match self {
            SettingId::G2 | SettingId::N2 => 90,
            _ => 50,
        }
    }

    pub fn q(self) -> usize {
        match self {
            SettingId::G2 | SettingId::N2 => 10,
            _ => 2,
        }
    }

    pub fn cluster_count(self) -> usize {
        match self {
            SettingId::G2 | SettingId::N2 => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for SettingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for SettingId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SettingId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown setting {s:?} (expected G1, G2, N1, N2, D1 or D2)")))
    }
}

/// Tunable generator constants. Defaults per setting via [`SettingParams::defaults`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingParams {
    pub p: usize,
    /// Diagonal of each candidate precision.
    pub diag: f64,
    /// Band value of the G1/N1 candidates.
    pub band: f64,
    /// In-block off-diagonal value of the G2/N2 candidates.
    pub fill: f64,
    /// Block width for G2/N2.
    pub block_size: usize,
    /// Number of RBF centers for G2/N2.
    pub rbf_centers: usize,
    /// Standard deviation of the SEM noise (D settings).
    pub noise_sd: f64,
    /// D2 only: weight each edge function by `Ã_kj` instead of `Ã_jk`,
    /// which reverses every edge of the effective DAG.
    pub transposed_coeffs: bool,
    /// Covariate redraws allowed when a mixed precision is not positive definite.
    pub max_resample: usize,
}

impl SettingParams {
    pub fn defaults(id: SettingId) -> Self {
        let p = id.default_p();
        SettingParams {
            p,
            diag: 1.0,
            band: 0.45,
            fill: 0.3,
            block_size: p / 3,
            rbf_centers: 10,
            noise_sd: 0.5,
            transposed_coeffs: false,
            max_resample: 1000,
        }
    }

    /// Defaults with a different node count (block width rescaled).
    pub fn with_p(id: SettingId, p: usize) -> Self {
        SettingParams {
            p,
            block_size: p / 3,
            ..SettingParams::defaults(id)
        }
    }
}

/// A fully instantiated setting: parameters plus every random constant.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingSpec {
    pub id: SettingId,
    pub params: SettingParams,
    /// Seed the random constants were drawn from.
    pub seed: u64,
    /// `Ψ_1..Ψ_3` for G/N settings, `B_1, B_2` for D settings.
    pub candidates: Vec<DenseMatrix>,
    pub rbf: Option<Rbf>,
    /// `c[j, k, m]` for D2.
    pub hermite: Option<Array3<f64>>,
}

impl SettingSpec {
    pub fn new(id: SettingId, seed: u64) -> Result<Self> {
        SettingSpec::with_params(id, SettingParams::defaults(id), seed)
    }

    pub fn with_params(id: SettingId, params: SettingParams, seed: u64) -> Result<Self> {
        let p = params.p;
        let mut rng = SeededRng::derived(seed, CONSTANTS_DOMAIN, 0);
        let mut rbf = None;
        let mut hermite = None;
        let candidates = match id {
            SettingId::G1 | SettingId::N1 => (1..=3)
                .map(|l| banded_precision(p, l, params.diag, params.band))
                .collect::<Result<Vec<_>>>()?,
            SettingId::G2 | SettingId::N2 => {
                let q = id.q();
                let centers = params.rbf_centers;
                rbf = Some(Rbf {
                    alpha: (0..centers).map(|_| rng.uniform(-10.0, 10.0)).collect(),
                    beta: (0..centers).map(|_| rng.uniform(0.1, 0.5)).collect(),
                    centers: (0..centers)
                        .map(|_| (0..q).map(|_| rng.uniform(-1.0, 1.0)).collect())
                        .collect(),
                });
                (0..3)
                    .map(|l| block_precision(p, l, params.block_size, params.diag, params.fill))
                    .collect::<Result<Vec<_>>>()?
            }
            SettingId::D1 | SettingId::D2 => {
                // both trees grow along one node order, so any mixture stays acyclic
                let mut order: Vec<usize> = (0..p).collect();
                order.shuffle(&mut rng);
                let b1 = tree_over_order(&order, &mut rng)?;
                let b2 = tree_over_order(&order, &mut rng)?;
                if id == SettingId::D2 {
                    hermite = Some(Array3::from_shape_fn((p, p, HERMITE_TERMS), |_| rng.uniform(0.1, 0.5)));
                }
                vec![b1, b2]
            }
        };
        Ok(SettingSpec {
            id,
            params,
            seed,
            candidates,
            rbf,
            hermite,
        })
    }

    pub fn p(&self) -> usize {
        self.params.p
    }

    pub fn q(&self) -> usize {
        self.id.q()
    }

    pub fn draw_covariate(&self, rng: &mut SeededRng) -> Vec<f64> {
        match self.id {
            SettingId::G1 | SettingId::N1 => (0..2).map(|_| rng.uniform(0.0, 1.0)).collect(),
            SettingId::G2 | SettingId::N2 => (0..self.q()).map(|_| rng.standard_normal()).collect(),
            SettingId::D1 | SettingId::D2 => (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        }
    }

    /// The weighted DAG that drives simulation and truth for D settings.
    pub fn effective_dag(&self, z: &[f64]) -> Result<DenseMatrix> {
        let (a, _) = dag_mix(z, &self.candidates[0], &self.candidates[1])?;
        if self.id == SettingId::D2 && self.params.transposed_coeffs {
            Ok(a.t().to_owned())
        } else {
            Ok(a)
        }
    }

    pub fn ground_truth(&self, z: &[f64]) -> Result<GroundTruth> {
        let (weights, cluster) = covariate_to_weights(self, z)?;
        let graph = if self.id.is_dag() {
            TruthGraph::Dag(self.effective_dag(z)?)
        } else {
            TruthGraph::Precision(mix_precision(&weights, &self.candidates)?)
        };
        Ok(GroundTruth { cluster, graph })
    }

    /// Draws `(z, x)` for sample `index` from the stream of `seed`.
    pub fn draw_sample(&self, seed: u64, index: u64) -> Result<(Vec<f64>, Array1<f64>)> {
        let mut rng = SeededRng::derived(seed, SAMPLE_DOMAIN, index);
        let mut attempts = 0;
        loop {
            let z = self.draw_covariate(&mut rng);
            if self.id.is_dag() {
                let a = self.effective_dag(&z)?;
                let family = match &self.hermite {
                    Some(c) => SemFamily::Hermite(c),
                    None => SemFamily::Linear,
                };
                let x = sem_simulate(&a, family, self.params.noise_sd, &mut rng)?;
                return Ok((z, x));
            }
            let (weights, _) = covariate_to_weights(self, &z)?;
            let factor = mix_precision(&weights, &self.candidates).and_then(|t| cholesky(&t));
            match factor {
                Ok(l) => {
                    let mut x = sample_with_factor(l.view(), 1, &mut rng).row(0).to_owned();
                    if let Some(kind) = self.id.npn_kind() {
                        x.mapv_inplace(|v| kind.apply(v));
                    }
                    return Ok((z, x));
                }
                Err(Error::NotPositiveDefinite { .. }) if attempts < self.params.max_resample => {
                    attempts += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Mixture weights over the setting's candidates and the 1-based cluster of `z`.
///
/// Boundary values belong to the interval below them.
pub fn covariate_to_weights(spec: &SettingSpec, z: &[f64]) -> Result<(Vec<f64>, usize)> {
    if z.len() != spec.q() {
        return Err(Error::shape(format!(
            "covariate has {} entries, setting {} expects {}",
            z.len(),
            spec.id,
            spec.q()
        )));
    }
    match spec.id {
        SettingId::G1 | SettingId::N1 => {
            let (z1, z2) = (z[0], z[1]);
            Ok(if z2 <= 1.0 / 3.0 {
                (vec![z1, 1.0 - z1, 0.0], 1)
            } else if z2 <= 2.0 / 3.0 {
                (vec![0.0, z1, 1.0 - z1], 2)
            } else {
                (vec![z1, 0.0, 1.0 - z1], 3)
            })
        }
        SettingId::G2 | SettingId::N2 => {
            let rbf = spec
                .rbf
                .as_ref()
                .ok_or_else(|| Error::Domain("setting lacks RBF constants".into()))?;
            Ok(mixed_covariate_weights(sigmoid(rbf.eval(z)?)))
        }
        SettingId::D1 | SettingId::D2 => {
            let (w, cluster) = dag_weights(z)?;
            Ok((w.to_vec(), cluster))
        }
    }
}

/// G2/N2 weights as a function of the squashed covariate `z̃ ∈ (0, 1)`.
/// The second branch is not convex for `z̃ > 0.5`.
pub fn mixed_covariate_weights(zt: f64) -> (Vec<f64>, usize) {
    if !(0.1..=0.9).contains(&zt) {
        (vec![zt, 0.0, 1.0 - zt], 1)
    } else {
        (vec![zt, 0.5, 0.5 - zt], 2)
    }
}

/// Weights on `(B_1, B_2)` and the 1-based cluster for a D-setting covariate.
pub fn dag_weights(z: &[f64]) -> Result<([f64; 2], usize)> {
    if z.len() != 2 {
        return Err(Error::shape("DAG settings use a 2-d covariate"));
    }
    let (z1, z2) = (z[0], z[1]);
    Ok(if z1 > 0.0 && z1 <= 0.5 {
        ([1.0, 0.0], 1)
    } else if z1 > -0.5 && z1 <= 0.0 {
        ([0.0, 1.0], 2)
    } else {
        let w = z2 * z2;
        ([w, 1.0 - w], 3)
    })
}

/// Weighted DAG `Ã` for covariate `z` and its binary support `A`.
pub fn dag_mix(z: &[f64], b1: &DenseMatrix, b2: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if b1.raw_dim() != b2.raw_dim() {
        return Err(Error::shape("candidate DAGs differ in shape"));
    }
    let ([w1, w2], _) = dag_weights(z)?;
    let mut a = Array2::<f64>::zeros(b1.raw_dim());
    if w1 != 0.0 {
        a.scaled_add(w1, b1);
    }
    if w2 != 0.0 {
        a.scaled_add(w2, b2);
    }
    let support = a.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
    Ok((a, support))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TruthGraph {
    Precision(DenseMatrix),
    /// Weighted DAG indexed `[child, parent]`.
    Dag(DenseMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// 1-based.
    pub cluster: usize,
    pub graph: TruthGraph,
}

impl GroundTruth {
    /// Edge set of the true undirected graph. For DAGs this is the moral
    /// graph, or the pseudo-moral graph (no married parents) if requested.
    pub fn skeleton(&self, pseudo: bool) -> Result<Skeleton> {
        match &self.graph {
            TruthGraph::Precision(theta) => {
                let p = theta.nrows();
                Ok(Skeleton::from_fn(p, |j, k| theta[[j, k]].abs() > SUPPORT_TOL))
            }
            TruthGraph::Dag(a) => moralize(a, pseudo),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Splits { train, val, test }
    }

    /// One twelfth each for validation and test, the rest for training.
    pub fn for_total(n: usize) -> Self {
        let held = n / 12;
        Splits::new(n - 2 * held, held, held)
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Rows are stored as train, then validation, then test.
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SettingSpec,
    /// Seed of the per-sample streams.
    pub seed: u64,
    pub splits: Splits,
    pub x: DenseMatrix,
    pub z: DenseMatrix,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn x_split(&self, split: Split) -> ArrayView2<'_, f64> {
        self.x.slice(s![self.splits.range(split), ..])
    }

    pub fn z_split(&self, split: Split) -> ArrayView2<'_, f64> {
        self.z.slice(s![self.splits.range(split), ..])
    }

    pub fn ground_truth(&self, row: usize) -> Result<GroundTruth> {
        let z = self.z.row(row).to_vec();
        self.spec.ground_truth(&z)
    }

    /// 1-based cluster label of every row in `rows`.
    pub fn clusters(&self, rows: Range<usize>) -> Result<Vec<usize>> {
        rows.map(|i| covariate_to_weights(&self.spec, &self.z.row(i).to_vec()).map(|(_, c)| c))
            .collect()
    }
}

pub fn generate_dataset(spec: &SettingSpec, n: usize, splits: Splits, seed: u64) -> Result<Dataset> {
    if splits.total() != n {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} do not sum to n = {n}",
            splits.train, splits.val, splits.test
        )));
    }
    let rows: Vec<(Vec<f64>, Array1<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| spec.draw_sample(seed, i))
        .collect::<Result<_>>()?;
    let mut x = Array2::<f64>::zeros((n, spec.p()));
    let mut z = Array2::<f64>::zeros((n, spec.q()));
    for (i, (zi, xi)) in rows.into_iter().enumerate() {
        x.row_mut(i).assign(&xi);
        z.row_mut(i).assign(&Array1::from(zi));
    }
    if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("generated data contains non-finite values".into()));
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        splits,
        x,
        z,
    })
}

/// Pair labels (over `j < k`) of each row's true skeleton.
pub fn truth_labels(data: &Dataset, rows: Range<usize>, pseudo: bool) -> Result<Vec<Skeleton>> {
    rows.into_par_iter()
        .map(|i| data.ground_truth(i)?.skeleton(pseudo))
        .collect()
}
