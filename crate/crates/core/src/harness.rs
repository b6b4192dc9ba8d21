//! Seeded experiment pipeline: generate a setting, fit each method, score
//! the per-sample graphs and write report, replicate and histogram files.
//!
//! Everything random in replicate `r` derives from `seeds[r]`, which seeds
//! the setting's constants, the data and the training streams. Replicates
//! can therefore run concurrently without changing any output.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    best_over_path_by, nodewise_lasso_by_cluster, write_path_csv, LassoOptions, LassoPath, PathMetric,
};
use crate::datagen::{generate_dataset, truth_labels, Dataset, SettingId, SettingParams, SettingSpec, Split, Splits};
use crate::estimator::{estimate_graphs, train, ModelFamily, TrainConfig};
use crate::graphops::{magnitude_histogram, normalize, HistogramBin, Skeleton, Symmetrization};
use crate::metrics::{
    aggregate, aggregate_experiments, score_sample, score_samples, stable_mean, stable_std, write_report_csv,
    MetricsReport, ReportRow, SampleMetrics,
};
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "CDGM_THREADS";

pub const REPORT_FILE: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dnn")]
    Dnn,
    #[serde(rename = "reggmm")]
    RegGmm,
    #[serde(rename = "nodewise-lasso")]
    NodewiseLasso,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dnn, Method::RegGmm, Method::NodewiseLasso];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dnn => "dnn",
            Method::RegGmm => "reggmm",
            Method::NodewiseLasso => "nodewise-lasso",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected dnn, reggmm or nodewise-lasso)")))
    }
}

/// One experiment: a setting, its replicate seeds, the methods to compare
/// and where to write the results.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub setting: SettingId,
    pub params: SettingParams,
    /// One seed per replicate; distinct.
    pub seeds: Vec<u64>,
    pub splits: Splits,
    pub methods: Vec<Method>,
    /// F1/BA thresholds on normalized graphs; nonnegative, ascending.
    pub thresholds: Vec<f64>,
    /// Score DAG settings against the pseudo-moral graph.
    pub pseudo_moral: bool,
    pub symmetrization: Symmetrization,
    /// Seeds are overwritten per replicate.
    pub dnn: TrainConfig,
    pub reggmm: TrainConfig,
    pub lasso: LassoOptions,
    pub histogram_bins: usize,
    /// Write every per-cluster lasso path as CSV.
    pub export_lasso_paths: bool,
    pub output: PathBuf,
}

/// Keys accepted by [`ExperimentConfig::parse`], in the order
/// [`ExperimentConfig::to_text`] writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "setting",
    "replicates",
    "seeds",
    "n_train",
    "n_val",
    "n_test",
    "methods",
    "thresholds",
    "pseudo_moral",
    "symmetrization",
    "histogram_bins",
    "export_lasso_paths",
    "output",
    "p",
    "diag",
    "band",
    "fill",
    "block_size",
    "rbf_centers",
    "noise_sd",
    "transposed_coeffs",
    "max_resample",
    "dnn.block1",
    "dnn.block2",
    "dnn.dropout",
    "dnn.epochs",
    "dnn.batch_size",
    "dnn.lr",
    "dnn.clip",
    "dnn.step_size",
    "dnn.decay",
    "reggmm.epochs",
    "reggmm.batch_size",
    "reggmm.lr",
    "reggmm.clip",
    "reggmm.step_size",
    "reggmm.decay",
    "lasso.n_lambda",
    "lasso.min_ratio",
    "lasso.tol",
    "lasso.max_iter",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// Integers written plainly or in exponent form (`1e4`).
fn parse_count(key: &str, v: &str) -> Result<usize> {
    if let Ok(n) = v.trim().parse::<usize>() {
        return Ok(n);
    }
    let f: f64 = parse_num(key, v)?;
    if f >= 0.0 && f.fract() == 0.0 && f <= usize::MAX as f64 {
        Ok(f as usize)
    } else {
        Err(Error::Config(format!("{key}: {v:?} is not a nonnegative integer")))
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(key, s)).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_clip(key: &str, v: &str) -> Result<Option<f64>> {
    if v.trim().eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        Ok(Some(parse_num(key, v)?))
    }
}

fn fmt_clip(c: Option<f64>) -> String {
    c.map_or_else(|| "none".into(), |v| v.to_string())
}

impl ExperimentConfig {
    /// Defaults: one replicate (seed 1), 10 000/1 000/1 000 samples, the
    /// DNN only, thresholds 0.01 to 0.1.
    pub fn new(setting: SettingId) -> Self {
        let mut dnn = TrainConfig::for_setting(setting, ModelFamily::Dnn);
        let mut reggmm = TrainConfig::for_setting(setting, ModelFamily::Linear);
        dnn.seed = 1;
        reggmm.seed = 1;
        ExperimentConfig {
            setting,
            params: SettingParams::defaults(setting),
            seeds: vec![1],
            splits: Splits::new(10_000, 1_000, 1_000),
            methods: vec![Method::Dnn],
            thresholds: vec![0.01, 0.025, 0.05, 0.075, 0.1],
            pseudo_moral: false,
            symmetrization: Symmetrization::Min,
            dnn,
            reggmm,
            lasso: LassoOptions::default(),
            histogram_bins: 50,
            export_lasso_paths: false,
            output: PathBuf::from("results"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys other than
    /// `setting` apply on top of that setting's defaults regardless of
    /// their position in the file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let setting = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "setting")
            .ok_or_else(|| Error::Config("missing key: setting".into()))?
            .1
            .parse()?;
        let mut cfg = ExperimentConfig::new(setting);
        cfg.apply(entries.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        ExperimentConfig::parse(&fs::read_to_string(path)?)
    }

    /// Applies overrides in order, except that `p` (which resets
    /// `block_size` to `p / 3`) goes first. `replicates = R` means seeds
    /// `1..=R` unless `seeds` is also given, in which case the two must agree.
    pub fn apply<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let (mut ordered, rest): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(k, _)| *k == "p");
        ordered.extend(rest);
        let mut replicates = None;
        let mut seeds_given = false;
        for (k, v) in ordered {
            match k {
                "replicates" => replicates = Some(parse_count(k, v)?),
                "seeds" => {
                    self.seeds = parse_list(k, v, parse_num)?;
                    seeds_given = true;
                }
                _ => self.set(k, v)?,
            }
        }
        if let Some(r) = replicates {
            if seeds_given {
                if r != self.seeds.len() {
                    return Err(Error::Config(format!(
                        "replicates = {r} but {} seeds were given",
                        self.seeds.len()
                    )));
                }
            } else {
                self.seeds = (1..=r as u64).collect();
            }
        }
        Ok(())
    }

    /// Sets one key other than `replicates` and `seeds`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match k {
            "setting" => {
                let id: SettingId = v.parse()?;
                if id != self.setting {
                    *self = ExperimentConfig {
                        seeds: std::mem::take(&mut self.seeds),
                        output: std::mem::take(&mut self.output),
                        ..ExperimentConfig::new(id)
                    };
                }
            }
            "n_train" => self.splits.train = parse_count(k, v)?,
            "n_val" => self.splits.val = parse_count(k, v)?,
            "n_test" => self.splits.test = parse_count(k, v)?,
            "methods" => self.methods = parse_list(k, v, |_, s| s.parse())?,
            "thresholds" => self.thresholds = parse_list(k, v, parse_num)?,
            "pseudo_moral" => self.pseudo_moral = parse_bool(k, v)?,
            "symmetrization" => {
                self.symmetrization = match v.trim().to_ascii_lowercase().as_str() {
                    "min" => Symmetrization::Min,
                    "mean" => Symmetrization::Mean,
                    _ => return Err(Error::Config(format!("{k}: expected min or mean, got {v:?}"))),
                }
            }
            "histogram_bins" => self.histogram_bins = parse_count(k, v)?,
            "export_lasso_paths" => self.export_lasso_paths = parse_bool(k, v)?,
            "output" => self.output = PathBuf::from(v.trim()),
            "p" => {
                let p = parse_count(k, v)?;
                self.params.p = p;
                self.params.block_size = p / 3;
            }
            "diag" => self.params.diag = parse_num(k, v)?,
            "band" => self.params.band = parse_num(k, v)?,
            "fill" => self.params.fill = parse_num(k, v)?,
            "block_size" => self.params.block_size = parse_count(k, v)?,
            "rbf_centers" => self.params.rbf_centers = parse_count(k, v)?,
            "noise_sd" => self.params.noise_sd = parse_num(k, v)?,
            "transposed_coeffs" => self.params.transposed_coeffs = parse_bool(k, v)?,
            "max_resample" => self.params.max_resample = parse_count(k, v)?,
            "dnn.block1" => self.dnn.block1 = parse_list(k, v, parse_count)?,
            "dnn.block2" => self.dnn.block2 = parse_list(k, v, parse_count)?,
            "dnn.dropout" => self.dnn.dropout = parse_num(k, v)?,
            _ => {
                let (prefix, field) = k
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown key {k:?}")))?;
                match prefix {
                    "dnn" | "reggmm" => {
                        let tc = if prefix == "dnn" {
                            &mut self.dnn
                        } else {
                            &mut self.reggmm
                        };
                        match field {
                            "epochs" => tc.epochs = parse_count(k, v)?,
                            "batch_size" => tc.batch_size = parse_count(k, v)?,
                            "lr" => tc.optimizer.lr = parse_num(k, v)?,
                            "clip" => tc.optimizer.clip_norm = parse_clip(k, v)?,
                            "step_size" => tc.optimizer.schedule.step_size = parse_count(k, v)?,
                            "decay" => tc.optimizer.schedule.decay = parse_num(k, v)?,
                            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
                        }
                    }
                    "lasso" => match field {
                        "n_lambda" => self.lasso.n_lambda = parse_count(k, v)?,
                        "min_ratio" => self.lasso.min_ratio = parse_num(k, v)?,
                        "tol" => self.lasso.tol = parse_num(k, v)?,
                        "max_iter" => self.lasso.max_iter = parse_count(k, v)?,
                        _ => return Err(Error::Config(format!("unknown key {k:?}"))),
                    },
                    _ => return Err(Error::Config(format!("unknown key {k:?}"))),
                }
            }
        }
        Ok(())
    }

    pub fn replicates(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one replicate is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("replicate seeds must be distinct".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut m = self.methods.clone();
        m.sort_by_key(|x| x.name());
        if m.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("methods are listed twice".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("at least one threshold is required".into()));
        }
        if self.thresholds.iter().any(|t| !(*t >= 0.0 && t.is_finite()))
            || self.thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(
                "thresholds must be nonnegative and strictly ascending".into(),
            ));
        }
        if self.splits.train < 2 || self.splits.test == 0 {
            return Err(Error::Config("need at least 2 training and 1 test sample".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        let uses_net = self.methods.iter().any(|m| *m != Method::NodewiseLasso);
        if uses_net && self.splits.val == 0 {
            return Err(Error::Config("network methods need a validation split".into()));
        }
        self.dnn.validate()?;
        self.reggmm.validate()?;
        if self.lasso.n_lambda == 0 || !(self.lasso.min_ratio > 0.0 && self.lasso.min_ratio < 1.0) {
            return Err(Error::Config(
                "lasso grid needs n_lambda >= 1 and min_ratio in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let mut tc = match method {
            Method::Dnn => self.dnn.clone(),
            _ => self.reggmm.clone(),
        };
        tc.seed = seed;
        tc
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let sched = |t: &TrainConfig| (t.optimizer.schedule.step_size, t.optimizer.schedule.decay);
        let values: Vec<String> = vec![
            self.setting.to_string(),
            self.replicates().to_string(),
            join(&self.seeds),
            self.splits.train.to_string(),
            self.splits.val.to_string(),
            self.splits.test.to_string(),
            join(&self.methods),
            join(&self.thresholds),
            self.pseudo_moral.to_string(),
            match self.symmetrization {
                Symmetrization::Min => "min".into(),
                Symmetrization::Mean => "mean".into(),
            },
            self.histogram_bins.to_string(),
            self.export_lasso_paths.to_string(),
            self.output.display().to_string(),
            p.p.to_string(),
            p.diag.to_string(),
            p.band.to_string(),
            p.fill.to_string(),
            p.block_size.to_string(),
            p.rbf_centers.to_string(),
            p.noise_sd.to_string(),
            p.transposed_coeffs.to_string(),
            p.max_resample.to_string(),
            join(&self.dnn.block1),
            join(&self.dnn.block2),
            self.dnn.dropout.to_string(),
            self.dnn.epochs.to_string(),
            self.dnn.batch_size.to_string(),
            self.dnn.optimizer.lr.to_string(),
            fmt_clip(self.dnn.optimizer.clip_norm),
            sched(&self.dnn).0.to_string(),
            sched(&self.dnn).1.to_string(),
            self.reggmm.epochs.to_string(),
            self.reggmm.batch_size.to_string(),
            self.reggmm.optimizer.lr.to_string(),
            fmt_clip(self.reggmm.optimizer.clip_norm),
            sched(&self.reggmm).0.to_string(),
            sched(&self.reggmm).1.to_string(),
            self.lasso.n_lambda.to_string(),
            self.lasso.min_ratio.to_string(),
            self.lasso.tol.to_string(),
            self.lasso.max_iter.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Metrics of one method at one threshold, averaged over the scored samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub threshold: f64,
    pub metrics: SampleMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub init_val_loss: f64,
    pub best_val_loss: f64,
    pub wall_time_s: f64,
}

/// Penalties picked for one cluster of the lasso baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub cluster: usize,
    pub rows: usize,
    pub lambda_auroc: f64,
    pub lambda_auprc: f64,
    pub unconverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub n_train: usize,
    /// Samples scored: the test split for network methods, the training
    /// split for the lasso baseline.
    pub n_scored: usize,
    pub runtime_s: f64,
    pub thresholds: Vec<ThresholdRecord>,
    pub training: Option<TrainSummary>,
    pub clusters: Vec<ClusterSelection>,
}

/// Contents of `replicate_<r>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub setting: SettingId,
    pub replicate: usize,
    pub seed: u64,
    /// Set when the replicate failed; `methods` then holds what finished.
    pub error: Option<String>,
    pub methods: Vec<MethodRecord>,
}

/// Per-sample metrics of one method, one vector per threshold.
struct MethodScores {
    record: MethodRecord,
    per_sample: Vec<Vec<SampleMetrics>>,
    histogram: Option<Vec<HistogramBin>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<ReportRow>,
    /// Per method and threshold, over the successful replicates.
    pub reports: Vec<(Method, f64, MetricsReport)>,
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &ReplicateRecord> {
        self.records.iter().filter(|r| r.error.is_some())
    }

    pub fn report(&self, method: Method, threshold: f64) -> Option<&MetricsReport> {
        self.reports
            .iter()
            .find(|(m, t, _)| *m == method && *t == threshold)
            .map(|(_, _, r)| r)
    }
}

fn normalized_or_raw(w: &DenseMatrix) -> Result<DenseMatrix> {
    match normalize(w) {
        Err(Error::AllZeroGraph) => Ok(w.clone()),
        other => other,
    }
}

/// Magnitude histogram of the max-normalized graphs.
pub fn normalized_histogram<G>(graphs: &[G], rule: Symmetrization, bins: usize) -> Result<Vec<HistogramBin>>
where
    G: std::borrow::Borrow<DenseMatrix> + Sync,
{
    let normalized = graphs
        .par_iter()
        .map(|g| normalized_or_raw(g.borrow()))
        .collect::<Result<Vec<_>>>()?;
    Ok(magnitude_histogram(&normalized, rule, bins))
}

fn fit_network(
    cfg: &ExperimentConfig,
    method: Method,
    data: &Dataset,
    seed: u64,
    truths: &[Skeleton],
) -> Result<MethodScores> {
    let start = Instant::now();
    let tc = cfg.train_config(method, seed);
    let (model, history) = train(data, &tc)?;
    let graphs = estimate_graphs(&model, data.z_split(Split::Test))?;
    let per_sample = score_graphs(&graphs, truths, &cfg.scoring())?;
    let histogram = normalized_histogram(&graphs, cfg.symmetrization, cfg.histogram_bins)?;
    Ok(MethodScores {
        record: MethodRecord {
            method,
            n_train: cfg.splits.train,
            n_scored: graphs.len(),
            runtime_s: start.elapsed().as_secs_f64(),
            thresholds: summarize(&cfg.thresholds, &per_sample),
            training: Some(TrainSummary {
                epochs: tc.epochs,
                best_epoch: history.best_epoch,
                init_val_loss: history.init_val_loss,
                best_val_loss: history.best_val_loss(),
                wall_time_s: history.wall_time_s,
            }),
            clusters: Vec::new(),
        },
        per_sample,
        histogram: Some(histogram),
    })
}

/// Per-sample metrics of one cluster's path at the penalty maximizing the
/// cluster mean of `metric`.
fn select_on_path(
    path: &LassoPath,
    distinct: &[(Skeleton, usize)],
    metric: PathMetric,
    rule: Symmetrization,
) -> Result<(f64, Vec<SampleMetrics>)> {
    let tau = match metric {
        PathMetric::F1(t) | PathMetric::Ba(t) => t,
        _ => 0.0,
    };
    let total: usize = distinct.iter().map(|(_, c)| c).sum();
    let mut cache: HashMap<usize, Vec<SampleMetrics>> = HashMap::new();
    let mut index = 0usize;
    let (lambda, _) = best_over_path_by(path, |w| {
        let scores = distinct
            .iter()
            .map(|(t, _)| score_sample(w, t, rule, tau))
            .collect::<Result<Vec<_>>>()?;
        let weighted: Vec<f64> = scores
            .iter()
            .zip(distinct)
            .map(|(s, (_, c))| metric.pick(s) * *c as f64)
            .collect();
        cache.insert(index, scores);
        index += 1;
        Ok(weighted.iter().sum::<f64>() / total as f64)
    })?;
    let at = path
        .lambdas
        .iter()
        .position(|&l| l == lambda)
        .expect("selected from the path");
    Ok((lambda, cache.remove(&at).expect("scored every penalty")))
}

/// Settings shared by the scoring helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringOptions {
    pub thresholds: Vec<f64>,
    pub pseudo_moral: bool,
    pub symmetrization: Symmetrization,
}

impl ExperimentConfig {
    pub fn scoring(&self) -> ScoringOptions {
        ScoringOptions {
            thresholds: self.thresholds.clone(),
            pseudo_moral: self.pseudo_moral,
            symmetrization: self.symmetrization,
        }
    }
}

/// Per-threshold per-sample metrics of graphs against their truths.
pub fn score_graphs<G>(graphs: &[G], truths: &[Skeleton], scoring: &ScoringOptions) -> Result<Vec<Vec<SampleMetrics>>>
where
    G: std::borrow::Borrow<DenseMatrix> + Sync,
{
    scoring
        .thresholds
        .iter()
        .map(|&tau| score_samples(graphs, truths, scoring.symmetrization, tau))
        .collect()
}

/// Fits the per-cluster nodewise lasso on the rows of `split` (clusters
/// from the generator) and scores each row's truth at the best penalty of
/// its cluster, chosen separately for every metric and threshold. Returns
/// per-threshold per-row metrics and the chosen penalties. With
/// `export_dir`, each cluster's path is written as
/// `lasso_path_<tag>_cluster<c>.csv`.
pub fn evaluate_lasso(
    data: &Dataset,
    split: Split,
    opts: &LassoOptions,
    scoring: &ScoringOptions,
    export: Option<(&Path, &str)>,
) -> Result<(Vec<Vec<SampleMetrics>>, Vec<ClusterSelection>)> {
    let rows = data.splits.range(split);
    let labels = data.clusters(rows.clone())?;
    let truths = truth_labels(data, rows.clone(), scoring.pseudo_moral)?;
    let fits = nodewise_lasso_by_cluster(data.x.slice(ndarray::s![rows, ..]), &labels, opts)?;

    let n = labels.len();
    let mut per_sample = vec![vec![SampleMetrics::default(); n]; scoring.thresholds.len()];
    let mut clusters = Vec::new();
    for (cluster, members, path) in &fits {
        if let Some((dir, tag)) = export {
            let file = dir.join(format!("lasso_path_{tag}_cluster{cluster}.csv"));
            write_path_csv(BufWriter::new(fs::File::create(file)?), path)?;
        }
        // distinct truths in first-seen order, with multiplicities
        let mut distinct: Vec<(Skeleton, usize)> = Vec::new();
        let mut slot_of = Vec::with_capacity(members.len());
        for &i in members {
            match distinct.iter().position(|(t, _)| *t == truths[i]) {
                Some(s) => {
                    distinct[s].1 += 1;
                    slot_of.push(s);
                }
                None => {
                    slot_of.push(distinct.len());
                    distinct.push((truths[i].clone(), 1));
                }
            }
        }
        let rule = scoring.symmetrization;
        let (lambda_auroc, auroc) = select_on_path(path, &distinct, PathMetric::Auroc, rule)?;
        let (lambda_auprc, auprc) = select_on_path(path, &distinct, PathMetric::Auprc, rule)?;
        for (ti, &tau) in scoring.thresholds.iter().enumerate() {
            let (_, f1) = select_on_path(path, &distinct, PathMetric::F1(tau), rule)?;
            let (_, ba) = select_on_path(path, &distinct, PathMetric::Ba(tau), rule)?;
            for (&i, &s) in members.iter().zip(&slot_of) {
                per_sample[ti][i] = SampleMetrics {
                    auroc: auroc[s].auroc,
                    auprc: auprc[s].auprc,
                    f1: f1[s].f1,
                    ba: ba[s].ba,
                };
            }
        }
        clusters.push(ClusterSelection {
            cluster: *cluster,
            rows: members.len(),
            lambda_auroc,
            lambda_auprc,
            unconverged: path.unconverged,
        });
    }
    Ok((per_sample, clusters))
}

fn fit_lasso(cfg: &ExperimentConfig, data: &Dataset, replicate: usize) -> Result<MethodScores> {
    let start = Instant::now();
    let tag = format!("rep{replicate}");
    let export = cfg.export_lasso_paths.then_some((cfg.output.as_path(), tag.as_str()));
    let (per_sample, clusters) = evaluate_lasso(data, Split::Train, &cfg.lasso, &cfg.scoring(), export)?;
    Ok(MethodScores {
        record: MethodRecord {
            method: Method::NodewiseLasso,
            n_train: cfg.splits.train,
            n_scored: per_sample[0].len(),
            runtime_s: start.elapsed().as_secs_f64(),
            thresholds: summarize(&cfg.thresholds, &per_sample),
            training: None,
            clusters,
        },
        per_sample,
        histogram: None,
    })
}

/// Threshold records from per-threshold per-sample metrics.
pub fn summarize(thresholds: &[f64], per_sample: &[Vec<SampleMetrics>]) -> Vec<ThresholdRecord> {
    thresholds
        .iter()
        .zip(per_sample)
        .map(|(&threshold, s)| ThresholdRecord {
            threshold,
            metrics: crate::metrics::mean_metrics(s),
        })
        .collect()
}

/// Runs every method of one replicate. On error the methods completed so
/// far are returned with the error message.
fn run_replicate(cfg: &ExperimentConfig, replicate: usize, seed: u64) -> (Vec<MethodScores>, Option<String>) {
    let mut done = Vec::new();
    let result = (|| -> Result<()> {
        let spec = SettingSpec::with_params(cfg.setting, cfg.params.clone(), seed)?;
        let data = generate_dataset(&spec, cfg.splits.total(), cfg.splits, seed)?;
        let mut test_truths = None;
        for &method in &cfg.methods {
            let scores = match method {
                Method::Dnn | Method::RegGmm => {
                    if test_truths.is_none() {
                        test_truths = Some(truth_labels(&data, data.splits.range(Split::Test), cfg.pseudo_moral)?);
                    }
                    fit_network(cfg, method, &data, seed, test_truths.as_deref().expect("just set"))?
                }
                Method::NodewiseLasso => fit_lasso(cfg, &data, replicate)?,
            };
            done.push(scores);
        }
        Ok(())
    })();
    (done, result.err().map(|e| e.to_string()))
}

pub fn write_histogram(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    use std::io::Write;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "lower,upper,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.lower, b.upper, b.count)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Report rows from replicate records: for each method and threshold, one
/// row per successful replicate, then `mean` and `std` rows.
pub fn report_rows(records: &[ReplicateRecord]) -> Result<Vec<ReportRow>> {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let Some(first) = ok.first() else {
        return Ok(Vec::new());
    };
    let setting = first.setting.to_string();
    let mut rows = Vec::new();
    for mr in &first.methods {
        for (ti, tr) in mr.thresholds.iter().enumerate() {
            let mut per_experiment = Vec::new();
            let mut runtimes = Vec::new();
            for rec in &ok {
                let m =
                    rec.methods.iter().find(|m| m.method == mr.method).ok_or_else(|| {
                        Error::Domain(format!("replicate {} lacks method {}", rec.replicate, mr.method))
                    })?;
                let t = m
                    .thresholds
                    .get(ti)
                    .filter(|t| t.threshold == tr.threshold)
                    .ok_or_else(|| Error::Domain(format!("replicate {} has different thresholds", rec.replicate)))?;
                per_experiment.push(t.metrics);
                runtimes.push(m.runtime_s);
                rows.push(ReportRow {
                    setting: setting.clone(),
                    replicate: rec.replicate.to_string(),
                    method: mr.method.to_string(),
                    n_train: m.n_train,
                    threshold: tr.threshold,
                    metrics: t.metrics,
                    runtime_s: m.runtime_s,
                });
            }
            let summary = aggregate_experiments(per_experiment)?;
            for (label, metrics, runtime) in [
                ("mean", summary.mean, stable_mean(&runtimes)),
                ("std", summary.std, stable_std(&runtimes)),
            ] {
                rows.push(ReportRow {
                    setting: setting.clone(),
                    replicate: label.into(),
                    method: mr.method.to_string(),
                    n_train: mr.n_train,
                    threshold: tr.threshold,
                    metrics,
                    runtime_s: runtime,
                });
            }
        }
    }
    Ok(rows)
}

/// Runs all replicates (concurrently) and writes, under `cfg.output`:
/// `config.txt`, `replicate_<r>.json`, `histogram_<method>_rep<r>.csv` for
/// network methods, and `report.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join(CONFIG_FILE), cfg.to_text())?;

    let results: Vec<(Vec<MethodScores>, Option<String>)> = cfg
        .seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| run_replicate(cfg, r, seed))
        .collect();

    let mut records = Vec::with_capacity(results.len());
    for (r, (scores, error)) in results.iter().enumerate() {
        for s in scores {
            if let Some(h) = &s.histogram {
                write_histogram(&cfg.output.join(format!("histogram_{}_rep{r}.csv", s.record.method)), h)?;
            }
        }
        let record = ReplicateRecord {
            setting: cfg.setting,
            replicate: r,
            seed: cfg.seeds[r],
            error: error.clone(),
            methods: scores.iter().map(|s| s.record.clone()).collect(),
        };
        write_json(&cfg.output.join(format!("replicate_{r}.json")), &record)?;
        records.push(record);
    }

    let mut reports = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        for (ti, &tau) in cfg.thresholds.iter().enumerate() {
            let per_replicate: Vec<Vec<SampleMetrics>> = results
                .iter()
                .filter(|(_, e)| e.is_none())
                .map(|(s, _)| s[mi].per_sample[ti].clone())
                .collect();
            if !per_replicate.is_empty() {
                reports.push((method, tau, aggregate(per_replicate)?));
            }
        }
    }
    let rows = report_rows(&records)?;
    write_report_csv(BufWriter::new(fs::File::create(cfg.output.join(REPORT_FILE))?), &rows)?;
    Ok(ExperimentOutcome { rows, reports, records })
}

/// Rebuilds the report from the `replicate_<r>.json` files in `dir`.
pub fn report_from_dir(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut records = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("replicate_") && name.ends_with(".json") {
            let record: ReplicateRecord =
                serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(Error::Domain(format!(
            "no replicate_<r>.json files in {}",
            dir.display()
        )));
    }
    records.sort_by_key(|r| r.replicate);
    report_rows(&records)
}

/// Builds the global worker pool, capped by `CDGM_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(setting: SettingId, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(&format!(
            "setting = {setting}\np = 8\nn_train = 300\nn_val = 60\nn_test = 40\n\
             methods = dnn, reggmm, nodewise-lasso\ndnn.epochs = 2\nreggmm.epochs = 2\n\
             dnn.block1 = 16\ndnn.block2 = 8\nlasso.n_lambda = 8\nreplicates = 2\n"
        ))
        .unwrap();
        cfg.output = dir.to_path_buf();
        cfg
    }

    #[test]
    fn parse_defaults_and_overrides() {
        let cfg = ExperimentConfig::parse("# comment\ndnn.epochs = 3 # trailing\nsetting = d2\n").unwrap();
        assert_eq!(cfg.setting, SettingId::D2);
        assert_eq!(cfg.dnn.epochs, 3);
        assert_eq!(cfg.dnn.block1, vec![64, 32]);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.splits, Splits::new(10_000, 1_000, 1_000));

        let cfg = ExperimentConfig::parse("setting = G1\nreplicates = 3\nn_train = 1e4").unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.splits.train, 10_000);
    }

    #[test]
    fn parse_rejections() {
        for text in [
            "dnn.epochs = 3",
            "setting = G1\nseeds = 4, 4",
            "setting = G1\nreplicates = 2\nseeds = 1",
            "setting = G1\nthresholds = 0.1, 0.05",
            "setting = G1\nbogus = 1",
            "setting = G1\nmethods = glasso",
            "setting = G1\nmethods = dnn, dnn",
            "setting = G1\nreplicates = 0",
            "setting = G1\nno equals sign",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::new(SettingId::N2);
        cfg.apply([
            ("seeds", "5,9"),
            ("dnn.clip", "none"),
            ("thresholds", "0.2"),
            ("p", "30"),
            ("lasso.tol", "1e-9"),
        ])
        .unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn small_experiment_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(SettingId::G1, dir.path());
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures().count(), 0);
        // 3 methods × 5 thresholds × (2 replicates + mean + std)
        assert_eq!(out.rows.len(), 3 * 5 * 4);
        for name in [
            "report.csv",
            "config.txt",
            "replicate_0.json",
            "replicate_1.json",
            "histogram_dnn_rep1.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let lasso = out.report(Method::NodewiseLasso, 0.1).unwrap();
        assert_eq!(lasso.per_sample[0].len(), 300);
        assert_eq!(out.report(Method::Dnn, 0.01).unwrap().per_sample[1].len(), 40);
        for (_, _, r) in &out.reports {
            for m in &r.per_experiment {
                assert!((0.0..=1.0).contains(&m.auroc) && (0.0..=1.0).contains(&m.f1));
            }
        }
        // the report command reproduces the CSV from the replicate files
        let rebuilt = report_from_dir(dir.path()).unwrap();
        assert_eq!(rebuilt, out.rows);
    }

    #[test]
    fn failed_replicate_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(SettingId::G1, dir.path());
        cfg.methods = vec![Method::Dnn];
        // a band this large makes the candidates indefinite
        cfg.params.band = 0.9;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures().count(), 2);
        assert!(out.rows.is_empty());
        let rec: ReplicateRecord =
            serde_json::from_str(&fs::read_to_string(dir.path().join("replicate_0.json")).unwrap()).unwrap();
        assert!(rec.error.unwrap().contains("positive definite"));
    }
}
