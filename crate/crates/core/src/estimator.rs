//! Covariate-dependent nodewise regression.
//!
//! A single network maps a covariate `z` to all `p(p-1)` coefficients
//! `β_jk(z)`, and node `j` is predicted as `x̂_j = Σ_{k≠j} β_jk(z) x_k`.
//! Output coordinate `idx(j, k) = j(p-1) + k - [k > j]`, i.e. row-major over
//! `(j, k)` with `k ≠ j` and `k` ascending.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SettingId, Split};
use crate::graphops::PerSampleGraph;
use crate::neuralnet::{
    backward, forward, optimizer_step, read_params, write_params, AdamConfig, MlpSpec, OptimState, ParamSet,
};
use crate::numerics::SeededRng;
use crate::{Error, Result};

const INDEX_MAP: &str = "row-major over (j,k), k != j, k ascending";
const MODEL_FORMAT: &str = "cdgm-model-1";
/// Rows per forward pass when evaluating large covariate batches.
const EVAL_CHUNK: usize = 256;

pub fn coef_index(p: usize, j: usize, k: usize) -> usize {
    debug_assert!(j != k && j < p && k < p);
    j * (p - 1) + if k < j { k } else { k - 1 }
}

/// Inverse of [`coef_index`].
pub fn coef_pair(p: usize, idx: usize) -> (usize, usize) {
    let j = idx / (p - 1);
    let r = idx % (p - 1);
    (j, if r < j { r } else { r + 1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    /// Residual MLP.
    Dnn,
    /// Single affine layer: coefficients linear in `z`.
    Linear,
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Dnn => "dnn",
            ModelFamily::Linear => "linear",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dnn" => Ok(ModelFamily::Dnn),
            "linear" | "reggmm" => Ok(ModelFamily::Linear),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdgmModel {
    pub p: usize,
    pub q: usize,
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl CdgmModel {
    pub fn new(p: usize, q: usize, spec: MlpSpec, params: ParamSet) -> Result<Self> {
        if p < 2 {
            return Err(Error::Config("need at least two nodes".into()));
        }
        if spec.input_dim != q || spec.output_dim != p * (p - 1) {
            return Err(Error::shape(format!(
                "network maps {} -> {}, model needs {q} -> {}",
                spec.input_dim,
                spec.output_dim,
                p * (p - 1)
            )));
        }
        if !params.matches(&spec) {
            return Err(Error::shape("parameters do not match the network spec"));
        }
        Ok(CdgmModel { p, q, spec, params })
    }

    /// Evaluation-mode coefficients, one row of `p(p-1)` per covariate row.
    pub fn coefficients(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let chunks: Vec<Array2<f64>> = z
            .axis_chunks_iter(Axis(0), EVAL_CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|chunk| forward(&self.spec, &self.params, chunk, None).map(|(out, _)| out))
            .collect::<Result<_>>()?;
        if chunks.is_empty() {
            return Ok(Array2::zeros((0, self.spec.output_dim)));
        }
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share width"))
    }
}

/// `x̂_ij = Σ_{k≠j} coefs[i, idx(j,k)] x_ik`.
fn predict_from_coefs(coefs: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let p = x.ncols();
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for ((c, xi), mut oi) in coefs.rows().into_iter().zip(x.rows()).zip(out.rows_mut()) {
        for j in 0..p {
            let row = c.slice(s![j * (p - 1)..(j + 1) * (p - 1)]);
            let mut acc = 0.0;
            for k in 0..j {
                acc += row[k] * xi[k];
            }
            for k in j + 1..p {
                acc += row[k - 1] * xi[k];
            }
            oi[j] = acc;
        }
    }
    out
}

/// Gradient of the batch MSE with respect to the coefficients:
/// `(2/B) (x̂_ij - x_ij) x_ik` at `idx(j, k)`.
fn coef_gradient(xhat: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let (b, p) = x.dim();
    let scale = 2.0 / b as f64;
    let mut g = Array2::<f64>::zeros((b, p * (p - 1)));
    for ((xh, xi), mut gi) in xhat.rows().into_iter().zip(x.rows()).zip(g.rows_mut()) {
        for j in 0..p {
            let r = scale * (xh[j] - xi[j]);
            let base = j * (p - 1);
            for k in 0..j {
                gi[base + k] = r * xi[k];
            }
            for k in j + 1..p {
                gi[base + k - 1] = r * xi[k];
            }
        }
    }
    g
}

fn check_batch(model: &CdgmModel, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<()> {
    if z.ncols() != model.q || x.ncols() != model.p || z.nrows() != x.nrows() {
        return Err(Error::shape(format!(
            "expected z: n x {} and x: n x {}, got {:?} and {:?}",
            model.q,
            model.p,
            z.dim(),
            x.dim()
        )));
    }
    Ok(())
}

/// Nodewise predictions for a batch of `(z, x)` rows.
pub fn predict_nodes(model: &CdgmModel, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_batch(model, z, x)?;
    let coefs = model.coefficients(z)?;
    Ok(predict_from_coefs(coefs.view(), x))
}

/// Mean over rows of the squared Euclidean residual norm.
pub fn mse_loss(xhat: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64> {
    if xhat.dim() != x.dim() {
        return Err(Error::shape("prediction and target shapes differ"));
    }
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = xhat.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / x.nrows() as f64)
}

/// Evaluation-mode batch MSE and its gradient with respect to every
/// network parameter.
pub fn loss_and_gradient(model: &CdgmModel, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(f64, ParamSet)> {
    check_batch(model, z, x)?;
    let (coefs, cache) = forward(&model.spec, &model.params, z, None)?;
    let xhat = predict_from_coefs(coefs.view(), x);
    let loss = mse_loss(xhat.view(), x)?;
    let grads = backward(&model.params, &cache, coef_gradient(xhat.view(), x).view())?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub block1: Vec<usize>,
    pub block2: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Per-setting architecture and epochs; Adam at lr 5e-4 decayed by 0.25
    /// every 20 epochs, batch 512, gradient norm clipped at 1. The linear
    /// family starts at lr 5e-3.
    pub fn for_setting(id: SettingId, family: ModelFamily) -> Self {
        let (block1, block2, dropout, epochs) = match id {
            SettingId::G1 | SettingId::N1 => (vec![128, 64], vec![128], 0.3, 50),
            SettingId::G2 | SettingId::N2 => (vec![128, 64], vec![128], 0.3, 80),
            SettingId::D1 | SettingId::D2 => (vec![64, 32], vec![64], 0.1, 80),
        };
        let mut cfg = TrainConfig {
            family,
            block1,
            block2,
            dropout,
            epochs,
            batch_size: 512,
            optimizer: AdamConfig::default(),
            seed: 0,
        };
        if family == ModelFamily::Linear {
            cfg.block1.clear();
            cfg.block2.clear();
            cfg.dropout = 0.0;
            cfg.optimizer.lr = 5e-3;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn mlp_spec(&self, p: usize, q: usize) -> Result<MlpSpec> {
        let out = p * (p - 1);
        match self.family {
            ModelFamily::Linear => Ok(MlpSpec::linear(q, out)),
            ModelFamily::Dnn => MlpSpec::new(q, self.block1.clone(), self.block2.clone(), out, self.dropout),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub init_val_loss: f64,
    /// Zero-based epoch of the returned snapshot; `None` if no epoch beat
    /// the initialization.
    pub best_epoch: Option<usize>,
    pub wall_time_s: f64,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.best_epoch.map_or(self.init_val_loss, |e| self.val_loss[e])
    }
}

fn eval_loss(model: &CdgmModel, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64> {
    let xhat = predict_nodes(model, z, x)?;
    mse_loss(xhat.view(), x)
}

/// Trains on the train split and keeps the snapshot with the lowest
/// validation MSE.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(CdgmModel, TrainHistory)> {
    train_arrays(
        data.x_split(Split::Train),
        data.z_split(Split::Train),
        data.x_split(Split::Val),
        data.z_split(Split::Val),
        cfg,
    )
}

pub fn train_arrays(
    x_train: ArrayView2<f64>,
    z_train: ArrayView2<f64>,
    x_val: ArrayView2<f64>,
    z_val: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(CdgmModel, TrainHistory)> {
    cfg.validate()?;
    let start = Instant::now();
    let (n, p) = x_train.dim();
    let q = z_train.ncols();
    if n == 0 || x_val.nrows() == 0 {
        return Err(Error::Config(
            "training needs nonempty train and validation splits".into(),
        ));
    }
    let spec = cfg.mlp_spec(p, q)?;
    let params = ParamSet::init(&spec, &mut SeededRng::new(cfg.seed, 1));
    let mut model = CdgmModel::new(p, q, spec, params)?;
    check_batch(&model, z_train, x_train)?;
    check_batch(&model, z_val, x_val)?;

    let mut shuffle_rng = SeededRng::new(cfg.seed, 2);
    let mut dropout_rng = SeededRng::new(cfg.seed, 3);
    let mut state = OptimState::new(cfg.optimizer, &model.params);
    let mut history = TrainHistory {
        init_val_loss: eval_loss(&model, z_val, x_val)?,
        ..TrainHistory::default()
    };
    let mut best_params = model.params.clone();
    let mut best = history.init_val_loss;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        state.start_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let zb = z_train.select(Axis(0), batch);
            let xb = x_train.select(Axis(0), batch);
            let (coefs, cache) = forward(&model.spec, &model.params, zb.view(), Some(&mut dropout_rng))?;
            let xhat = predict_from_coefs(coefs.view(), xb.view());
            let loss = mse_loss(xhat.view(), xb.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            let g = coef_gradient(xhat.view(), xb.view());
            let grads = backward(&model.params, &cache, g.view())?;
            optimizer_step(&mut model.params, &grads, &mut state).map_err(|e| match e {
                Error::NonFiniteGradient => Error::NonFiniteLoss { epoch },
                other => other,
            })?;
        }
        let val = eval_loss(&model, z_val, x_val)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.train_loss.push(epoch_loss / n as f64);
        history.val_loss.push(val);
        if val < best {
            best = val;
            best_params = model.params.clone();
            history.best_epoch = Some(epoch);
        }
    }
    model.params = best_params;
    history.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, history))
}

/// Per-sample weight matrices with entry `(j, k) = -β_jk(z)`.
pub fn estimate_graphs(model: &CdgmModel, z: ArrayView2<f64>) -> Result<Vec<PerSampleGraph>> {
    if z.ncols() != model.q {
        return Err(Error::shape("covariate width differs from the model"));
    }
    let coefs = model.coefficients(z)?;
    let p = model.p;
    coefs
        .outer_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| {
            let mut w = Array2::<f64>::zeros((p, p));
            for (idx, v) in c.iter().enumerate() {
                let (j, k) = coef_pair(p, idx);
                w[[j, k]] = -v;
            }
            PerSampleGraph::new(w)
        })
        .collect()
}

fn sidecar_text(model: &CdgmModel) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    format!(
        "{MODEL_FORMAT}\np {}\nq {}\nblock1 {}\nblock2 {}\ndropout {}\nindex_map {INDEX_MAP}\n",
        model.p,
        model.q,
        join(&model.spec.block1),
        join(&model.spec.block2),
        model.spec.dropout
    )
}

/// Writes `params.bin` and the text sidecar `model.txt` into `dir`.
pub fn save_model(model: &CdgmModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_params(BufWriter::new(File::create(dir.join("params.bin"))?), &model.params)?;
    fs::write(dir.join("model.txt"), sidecar_text(model))?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<CdgmModel> {
    let path = dir.join("model.txt");
    let text = fs::read_to_string(&path)?;
    let bad = |reason: &str| Error::Format {
        path: path.clone(),
        reason: reason.into(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(MODEL_FORMAT) {
        return Err(bad("unknown sidecar format"));
    }
    let mut field = |name: &str| -> Result<String> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(name))
            .and_then(|rest| rest.strip_prefix(' ').or(Some(rest).filter(|r| r.is_empty())))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing field {name}")))
    };
    let num = |s: String| s.trim().parse::<usize>().map_err(|_| bad("bad integer"));
    let widths = |s: String| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|w| w.parse().map_err(|_| bad("bad layer width")))
            .collect()
    };
    let p = num(field("p")?)?;
    let q = num(field("q")?)?;
    let block1 = widths(field("block1")?)?;
    let block2 = widths(field("block2")?)?;
    let dropout: f64 = field("dropout")?.trim().parse().map_err(|_| bad("bad dropout"))?;
    if field("index_map")? != INDEX_MAP {
        return Err(bad("unsupported index map"));
    }
    if p < 2 {
        return Err(bad("p must be at least 2"));
    }
    let spec = MlpSpec::new(q, block1, block2, p * (p - 1), dropout)?;
    let params = read_params(BufReader::new(File::open(dir.join("params.bin"))?))?;
    CdgmModel::new(p, q, spec, params)
}
