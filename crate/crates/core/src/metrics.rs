//! Skeleton-recovery metrics and their aggregation: per sample, then the
//! mean over samples of one experiment, then mean and standard deviation
//! across replicate experiments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::graphops::{normalize, pair_scores, threshold_and, Skeleton, Symmetrization};
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve, `P(s_pos > s_neg) + P(tie) / 2`, via the
/// Mann-Whitney rank sum with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels {
            positives: pos,
            total: labels.len(),
        });
    }
    // ascending ranks; work in doubled ranks so every value is an integer
    let mut groups = tie_groups(scores);
    groups.reverse();
    let mut next_rank = 1u64;
    let mut doubled_rank_sum = 0u64;
    for g in &groups {
        let len = g.len() as u64;
        // midrank * 2 = first + last
        let doubled_mid = 2 * next_rank + len - 1;
        let g_pos = g.iter().filter(|&&i| labels[i]).count() as u64;
        doubled_rank_sum += doubled_mid * g_pos;
        next_rank += len;
    }
    let (pos, neg) = (pos as u64, neg as u64);
    // 2U = 2R - pos(pos+1)
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / 2.0 / (pos * neg) as f64)
}

/// Average precision: mean over positives of the precision at the rank
/// where each positive is retrieved. Tied scores are retrieved together.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::DegenerateLabels {
            positives: 0,
            total: labels.len(),
        });
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut sum = 0.0;
    for g in tie_groups(scores) {
        let g_pos = g.iter().filter(|&&i| labels[i]).count();
        tp += g_pos;
        seen += g.len();
        let precision = tp as f64 / seen as f64;
        // one term per positive, in retrieval order
        for _ in 0..g_pos {
            sum += precision;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(predicted: &Skeleton, truth: &Skeleton) -> Result<Self> {
        if predicted.p() != truth.p() {
            return Err(Error::shape("skeletons differ in node count"));
        }
        let mut c = Confusion::default();
        for (&a, &b) in predicted.pair_flags().iter().zip(truth.pair_flags()) {
            match (a, b) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// F1 and balanced accuracy over the unordered off-diagonal pairs.
///
/// F1 is 0 when precision + recall is 0. Balanced accuracy averages the
/// true-positive and true-negative rates of the classes present in `truth`.
pub fn f1_ba(predicted: &Skeleton, truth: &Skeleton) -> Result<(f64, f64)> {
    let c = Confusion::of(predicted, truth)?;
    let precision = ratio(c.tp, c.tp + c.fp).unwrap_or(0.0);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match recall {
        Some(r) if precision + r > 0.0 => 2.0 * precision * r / (precision + r),
        _ => 0.0,
    };
    let specificity = ratio(c.tn, c.tn + c.fp);
    let ba = match (recall, specificity) {
        (Some(r), Some(s)) => 0.5 * (r + s),
        (Some(r), None) => r,
        (None, Some(s)) => s,
        (None, None) => 0.0,
    };
    Ok((f1, ba))
}

/// Metrics for one sample (or the mean over samples of one experiment).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub ba: f64,
}

impl SampleMetrics {
    fn fields(&self) -> [f64; 4] {
        [self.auroc, self.auprc, self.f1, self.ba]
    }

    fn from_fields(v: [f64; 4]) -> Self {
        SampleMetrics {
            auroc: v[0],
            auprc: v[1],
            f1: v[2],
            ba: v[3],
        }
    }
}

/// All four metrics for one estimated weight matrix. AUROC and AUPRC use
/// symmetrized magnitudes as scores; F1 and BA use the AND-rule skeleton of
/// the max-normalized matrix at threshold `tau`.
pub fn score_sample(w: &DenseMatrix, truth: &Skeleton, rule: Symmetrization, tau: f64) -> Result<SampleMetrics> {
    if w.nrows() != truth.p() {
        return Err(Error::shape("graph and truth differ in node count"));
    }
    let scores = pair_scores(w, rule);
    let labels = truth.pair_flags();
    let normalized = match normalize(w) {
        Ok(n) => n,
        Err(Error::AllZeroGraph) => w.clone(),
        Err(e) => return Err(e),
    };
    let (f1, ba) = f1_ba(&threshold_and(&normalized, tau), truth)?;
    Ok(SampleMetrics {
        auroc: auroc(&scores, labels)?,
        auprc: auprc(&scores, labels)?,
        f1,
        ba,
    })
}

/// [`score_sample`] over paired graphs and truths, in parallel.
pub fn score_samples<G>(graphs: &[G], truths: &[Skeleton], rule: Symmetrization, tau: f64) -> Result<Vec<SampleMetrics>>
where
    G: std::borrow::Borrow<DenseMatrix> + Sync,
{
    use rayon::prelude::*;
    if graphs.len() != truths.len() {
        return Err(Error::shape("graph and truth counts differ"));
    }
    graphs
        .par_iter()
        .zip(truths.par_iter())
        .map(|(g, t)| score_sample(g.borrow(), t, rule, tau))
        .collect()
}

/// Order-independent mean: values are summed in sorted order so any
/// permutation of the input gives a bit-identical result.
pub fn stable_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn stable_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = stable_mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m).powi(2)).collect();
    let mut sorted = sq;
    sorted.sort_by(f64::total_cmp);
    (sorted.iter().sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn fieldwise(items: &[SampleMetrics], f: impl Fn(&[f64]) -> f64) -> SampleMetrics {
    let mut out = [0.0; 4];
    for (i, slot) in out.iter_mut().enumerate() {
        let col: Vec<f64> = items.iter().map(|m| m.fields()[i]).collect();
        *slot = f(&col);
    }
    SampleMetrics::from_fields(out)
}

pub fn mean_metrics(items: &[SampleMetrics]) -> SampleMetrics {
    fieldwise(items, stable_mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per replicate, per sample.
    pub per_sample: Vec<Vec<SampleMetrics>>,
    /// Per replicate: mean over its samples.
    pub per_experiment: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
    pub std: SampleMetrics,
}

/// Averages over samples within each replicate, then takes the mean and
/// sample standard deviation across replicates.
pub fn aggregate(per_replicate: Vec<Vec<SampleMetrics>>) -> Result<MetricsReport> {
    if per_replicate.is_empty() || per_replicate.iter().any(Vec::is_empty) {
        return Err(Error::Domain(
            "aggregation needs at least one sample per replicate".into(),
        ));
    }
    let per_experiment: Vec<SampleMetrics> = per_replicate.iter().map(|s| mean_metrics(s)).collect();
    Ok(summarize_replicates(per_replicate, per_experiment))
}

/// Builds a report from experiment-level means when per-sample values are
/// no longer available (e.g. when re-aggregating stored replicate outputs).
pub fn aggregate_experiments(per_experiment: Vec<SampleMetrics>) -> Result<MetricsReport> {
    if per_experiment.is_empty() {
        return Err(Error::Domain("aggregation needs at least one replicate".into()));
    }
    Ok(summarize_replicates(Vec::new(), per_experiment))
}

fn summarize_replicates(per_sample: Vec<Vec<SampleMetrics>>, per_experiment: Vec<SampleMetrics>) -> MetricsReport {
    MetricsReport {
        mean: fieldwise(&per_experiment, stable_mean),
        std: fieldwise(&per_experiment, stable_std),
        per_sample,
        per_experiment,
    }
}

/// Column list of the report CSV.
pub const REPORT_COLUMNS: [&str; 10] = [
    "setting",
    "replicate",
    "method",
    "n_train",
    "threshold",
    "auroc",
    "auprc",
    "f1",
    "ba",
    "runtime_s",
];

/// One line of the report CSV. `replicate` is a replicate index, or
/// `mean` / `std` for the across-replicate summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub replicate: String,
    pub method: String,
    pub n_train: usize,
    pub threshold: f64,
    pub metrics: SampleMetrics,
    pub runtime_s: f64,
}

pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{}", REPORT_COLUMNS.join(","))?;
    for r in rows {
        let m = r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            r.setting, r.replicate, r.method, r.n_train, r.threshold, m.auroc, m.auprc, m.f1, m.ba, r.runtime_s
        )?;
    }
    Ok(())
}
