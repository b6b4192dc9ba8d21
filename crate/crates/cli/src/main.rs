//! `cdgm`: data generation, training, evaluation, baselines, bound
//! calculators and full experiments from the command line.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 on a
//! runtime failure.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cdgm_core::baselines::LassoOptions;
use cdgm_core::datagen::{
    export_csv, generate_dataset, load_dataset, save_dataset, truth_labels, SettingId, SettingParams, SettingSpec,
    Split, Splits,
};
use cdgm_core::estimator::{estimate_graphs, load_model, save_model, train, ModelFamily, TrainConfig};
use cdgm_core::graphops::Symmetrization;
use cdgm_core::harness::{
    configure_threads, evaluate_lasso, normalized_histogram, report_from_dir, run_experiment, score_graphs, summarize,
    write_histogram, write_json, ExperimentConfig, ScoringOptions, ThresholdRecord,
};
use cdgm_core::metrics::{write_report_csv, SampleMetrics};
use cdgm_core::theory::{
    edge_bound_cor2, generalization_term, network_size_theorem2, xi_theorem2, BoundInputs, RateMode,
};
use cdgm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "cdgm", version, about = "Covariate-dependent graphical model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset directory (meta.json, X.f64, Z.f64).
    Generate(GenerateArgs),
    /// Train a model on a dataset's train split (validation split selects the snapshot).
    Train(TrainArgs),
    /// Score a trained model's per-sample graphs against the ground truth.
    Eval(EvalArgs),
    /// Per-cluster nodewise lasso, best over the penalty path.
    Baseline(BaselineArgs),
    /// Print the order-level bound calculators over a grid of (n, p).
    Bounds(BoundsArgs),
    /// Run a full experiment from a key = value config file.
    Experiment(ExperimentArgs),
    /// Rebuild report.csv from the replicate files of an experiment directory.
    Report(ReportArgs),
}

/// Accepts plain integers and exponent notation such as `1e4`.
fn parse_count(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(f) if f >= 0.0 && f.fract() == 0.0 && f <= usize::MAX as f64 => Ok(f as usize),
        _ => Err(format!("{s:?} is not a nonnegative integer")),
    }
}

fn parse_setting(s: &str) -> Result<SettingId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Family {
    Dnn,
    Linear,
}

impl From<Family> for ModelFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Dnn => ModelFamily::Dnn,
            Family::Linear => ModelFamily::Linear,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SymArg {
    Min,
    Mean,
}

impl From<SymArg> for Symmetrization {
    fn from(s: SymArg) -> Self {
        match s {
            SymArg::Min => Symmetrization::Min,
            SymArg::Mean => Symmetrization::Mean,
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_setting)]
    setting: SettingId,
    /// Total number of samples; one twelfth each go to validation and test.
    #[arg(long, value_parser = parse_count)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the setting's random constants (defaults to --seed).
    #[arg(long)]
    setting_seed: Option<u64>,
    /// Number of nodes (defaults to the setting's own).
    #[arg(long, value_parser = parse_count)]
    p: Option<usize>,
    /// Band value of the G1/N1 candidate precisions.
    #[arg(long)]
    band: Option<f64>,
    /// Weight D2 edge functions by the transposed mixture entry.
    #[arg(long)]
    transposed_coeffs: bool,
    /// Also write X.csv and Z.csv.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "dnn")]
    family: Family,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoringArgs {
    /// Thresholds for F1 and balanced accuracy on normalized graphs.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.025,0.05,0.075,0.1")]
    thresholds: Vec<f64>,
    /// Score DAG settings against the pseudo-moral graph.
    #[arg(long)]
    pseudo_moral: bool,
    #[arg(long, value_enum, default_value = "min")]
    symmetrization: SymArg,
    /// Write the per-threshold report rows here as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl ScoringArgs {
    fn options(&self) -> Result<ScoringOptions, Error> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t >= 0.0))
            || self.thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(
                "thresholds must be nonnegative and strictly ascending".into(),
            ));
        }
        Ok(ScoringOptions {
            thresholds: self.thresholds.clone(),
            pseudo_moral: self.pseudo_moral,
            symmetrization: self.symmetrization.into(),
        })
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Write the magnitude histogram of the normalized graphs here.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, default_value_t = 50)]
    n_lambda: usize,
    #[arg(long, default_value_t = 1e-3)]
    min_ratio: f64,
    /// Write each cluster's lasso path as CSV into this directory.
    #[arg(long)]
    export_paths: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    /// Sample sizes (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<f64>,
    /// Node counts (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<u32>,
    #[arg(long, default_value_t = 2)]
    q: u32,
    #[arg(long, default_value_t = 2)]
    m: u32,
    #[arg(long = "lipschitz", default_value_t = 4.0)]
    lipschitz: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Pseudo-dimension of the network class.
    #[arg(long, default_value_t = 1000.0)]
    pseudo_dim: f64,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 0.1)]
    beta_weak: f64,
    #[arg(long, default_value_t = 0.5)]
    beta_strong: f64,
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    approx_error: f64,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set dnn.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Destination file (defaults to standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_metrics(label: &str, records: &[ThresholdRecord]) {
    println!("{label}");
    println!("  threshold    auroc    auprc       f1       ba");
    for r in records {
        let m = r.metrics;
        println!(
            "  {:>9} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.threshold, m.auroc, m.auprc, m.f1, m.ba
        );
    }
}

fn write_rows(
    path: &Path,
    setting: SettingId,
    method: &str,
    n_train: usize,
    records: &[ThresholdRecord],
    runtime: f64,
) -> Result<(), Error> {
    let rows: Vec<_> = records
        .iter()
        .map(|r| cdgm_core::metrics::ReportRow {
            setting: setting.to_string(),
            replicate: "0".into(),
            method: method.into(),
            n_train,
            threshold: r.threshold,
            metrics: r.metrics,
            runtime_s: runtime,
        })
        .collect();
    write_report_csv(BufWriter::new(fs::File::create(path)?), &rows)
}

fn generate(a: &GenerateArgs) -> Result<(), Error> {
    let mut params = match a.p {
        Some(p) => SettingParams::with_p(a.setting, p),
        None => SettingParams::defaults(a.setting),
    };
    if let Some(b) = a.band {
        params.band = b;
    }
    params.transposed_coeffs = a.transposed_coeffs;
    let spec = SettingSpec::with_params(a.setting, params, a.setting_seed.unwrap_or(a.seed))?;
    let data = generate_dataset(&spec, a.n, Splits::for_total(a.n), a.seed)?;
    save_dataset(&data, &a.out)?;
    if a.csv {
        export_csv(&data, &a.out)?;
    }
    let s = data.splits;
    println!(
        "wrote {} ({} samples: {} train, {} val, {} test; p = {}, q = {})",
        a.out.display(),
        a.n,
        s.train,
        s.val,
        s.test,
        data.p(),
        data.q()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), Error> {
    let data = load_dataset(&a.data)?;
    let mut cfg = TrainConfig::for_setting(data.spec.id, a.family.into());
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    let (model, history) = train(&data, &cfg)?;
    save_model(&model, &a.out)?;
    write_json(&a.out.join("history.json"), &history)?;
    println!(
        "trained {} epochs in {:.1}s; best validation MSE {:.4} at epoch {}",
        cfg.epochs,
        history.wall_time_s,
        history.best_val_loss(),
        history
            .best_epoch
            .map_or("none (initialization)".into(), |e| e.to_string())
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), Error> {
    let scoring = a.scoring.options()?;
    let start = std::time::Instant::now();
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    let split: Split = a.split.into();
    let graphs = estimate_graphs(&model, data.z_split(split))?;
    let truths = truth_labels(&data, data.splits.range(split), scoring.pseudo_moral)?;
    let per_sample: Vec<Vec<SampleMetrics>> = score_graphs(&graphs, &truths, &scoring)?;
    let records = summarize(&scoring.thresholds, &per_sample);
    print_metrics(&format!("model on {} samples", graphs.len()), &records);
    if let Some(h) = &a.histogram {
        write_histogram(h, &normalized_histogram(&graphs, scoring.symmetrization, a.bins)?)?;
    }
    if let Some(r) = &a.scoring.report {
        let runtime = start.elapsed().as_secs_f64();
        write_rows(r, data.spec.id, "model", data.splits.train, &records, runtime)?;
    }
    Ok(())
}

fn baseline(a: &BaselineArgs) -> Result<(), Error> {
    let scoring = a.scoring.options()?;
    let start = std::time::Instant::now();
    let data = load_dataset(&a.data)?;
    let opts = LassoOptions {
        n_lambda: a.n_lambda,
        min_ratio: a.min_ratio,
        ..LassoOptions::default()
    };
    if let Some(dir) = &a.export_paths {
        fs::create_dir_all(dir)?;
    }
    let export = a.export_paths.as_deref().map(|d| (d, "baseline"));
    let (per_sample, clusters) = evaluate_lasso(&data, a.split.into(), &opts, &scoring, export)?;
    let records = summarize(&scoring.thresholds, &per_sample);
    for c in &clusters {
        println!(
            "cluster {}: {} rows, best penalty {:.4e} (AUROC) / {:.4e} (AUPRC)",
            c.cluster, c.rows, c.lambda_auroc, c.lambda_auprc
        );
    }
    print_metrics("nodewise lasso, best over path", &records);
    if let Some(r) = &a.scoring.report {
        let runtime = start.elapsed().as_secs_f64();
        write_rows(r, data.spec.id, "nodewise-lasso", data.splits.train, &records, runtime)?;
    }
    Ok(())
}

fn bounds(a: &BoundsArgs) -> Result<(), Error> {
    let mut lines = Vec::new();
    for &n in &a.n {
        for &p in &a.p {
            let inputs = BoundInputs {
                lipschitz: a.lipschitz,
                alpha: a.alpha,
                m: a.m,
                q: a.q,
                p,
                n,
                delta: a.delta,
                pseudo_dim: a.pseudo_dim,
                eta: a.eta,
                beta_weak: a.beta_weak,
                beta_strong: a.beta_strong,
                gamma: a.gamma,
            };
            let xi = xi_theorem2(&inputs, RateMode::Lipschitz)?;
            let xi_q = xi_theorem2(&inputs, RateMode::Quadratic)?;
            // the network size is only defined for xi < 1
            let (layers, neurons) = match network_size_theorem2(a.m, a.q, xi) {
                Ok((h, r)) => (h.to_string(), r.to_string()),
                Err(_) => ("n/a".into(), "n/a".into()),
            };
            lines.push(format!(
                "{n},{p},{xi:.6e},{xi_q:.6e},{layers},{neurons},{:.6e},{:.6e}",
                generalization_term(&inputs)?,
                edge_bound_cor2(&inputs, a.approx_error)?
            ));
        }
    }
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "# order-level diagnostic: constants hidden by the bounds are taken as 1"
    )?;
    writeln!(
        out,
        "n,p,xi_lipschitz,xi_quadratic,layers,neurons,generalization,edge_bound"
    )?;
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(())
}

fn experiment(a: &ExperimentArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    let mut pairs = Vec::new();
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim(), v.trim()));
    }
    cfg.apply(pairs)?;
    if let Some(out) = &a.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    let outcome = run_experiment(&cfg)?;
    for r in outcome.failures() {
        eprintln!(
            "replicate {} (seed {}) failed: {}",
            r.replicate,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    if outcome.rows.is_empty() {
        return Err(Error::Domain("every replicate failed".into()));
    }
    for row in outcome.rows.iter().filter(|r| r.replicate == "mean") {
        let m = row.metrics;
        println!(
            "{} {:<15} tau={:<6} auroc {:.4} auprc {:.4} f1 {:.4} ba {:.4}",
            row.setting, row.method, row.threshold, m.auroc, m.auprc, m.f1, m.ba
        );
    }
    println!("results in {}", cfg.output.display());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<(), Error> {
    let rows = report_from_dir(&a.dir)?;
    match &a.out {
        Some(path) => write_report_csv(BufWriter::new(fs::File::create(path)?), &rows),
        None => write_report_csv(io::stdout().lock(), &rows),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Bounds(a) => bounds(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
