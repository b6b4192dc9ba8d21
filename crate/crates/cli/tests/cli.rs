use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cdgm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdgm"))
        .args(args)
        .current_dir(cwd)
        .env("CDGM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_writes_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdgm(
        &[
            "generate",
            "--setting",
            "G1",
            "--n",
            "1.2e3",
            "--seed",
            "7",
            "--p",
            "10",
            "--out",
            "d/",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["meta.json", "X.f64", "Z.f64"] {
        assert!(dir.path().join("d").join(f).exists(), "{f}");
    }
    assert_eq!(fs::metadata(dir.path().join("d/X.f64")).unwrap().len(), 1200 * 10 * 8);
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdgm(
        &[
            "generate",
            "--setting",
            "G1",
            "--n",
            "100",
            "--out",
            "d",
            "--frobnicate",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--frobnicate"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

    let o = cdgm(&["generate", "--setting", "G7", "--n", "100", "--out", "d"], dir.path());
    assert_eq!(code(&o), 1);
    let o = cdgm(&["no-such-command"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn help_is_available_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "generate",
        "train",
        "eval",
        "baseline",
        "bounds",
        "experiment",
        "report",
    ] {
        let o = cdgm(&[sub, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn bounds_prints_a_labeled_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdgm(
        &["bounds", "--n", "1e6", "--p", "50", "--q", "2", "--m", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# order-level diagnostic"));
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().nth(2).unwrap().starts_with("1000000,50,"));

    // alpha = 1 zeroes log(1/alpha): a runtime domain failure
    let o = cdgm(&["bounds", "--n", "1e6", "--p", "50", "--alpha", "1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).is_empty());
}

#[test]
fn train_eval_and_baseline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&cdgm(
            &[
                "generate",
                "--setting",
                "D2",
                "--n",
                "1200",
                "--p",
                "8",
                "--seed",
                "2",
                "--out",
                "d"
            ],
            d
        )),
        0
    );
    let o = cdgm(&["train", "--data", "d", "--epochs", "2", "--out", "m"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("m/params.bin").exists() && d.join("m/history.json").exists());

    let o = cdgm(
        &[
            "eval",
            "--data",
            "d",
            "--model",
            "m",
            "--thresholds",
            "0.1",
            "--histogram",
            "h.csv",
            "--report",
            "r.csv",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(report.starts_with("setting,replicate,method,n_train,threshold,auroc,auprc,f1,ba,runtime_s"));
    assert_eq!(report.lines().count(), 2);
    assert!(fs::read_to_string(d.join("h.csv"))
        .unwrap()
        .starts_with("lower,upper,count"));

    let o = cdgm(
        &[
            "baseline",
            "--data",
            "d",
            "--n-lambda",
            "6",
            "--pseudo-moral",
            "--export-paths",
            "paths",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("best over path"));
    assert_eq!(fs::read_dir(d.join("paths")).unwrap().count(), 3);

    let o = cdgm(&["eval", "--data", "d", "--model", "missing"], d);
    assert_eq!(code(&o), 2);
    let o = cdgm(&["eval", "--data", "d", "--model", "m", "--thresholds", "0.2,0.1"], d);
    assert_eq!(code(&o), 1);
}

#[test]
fn experiment_and_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("c.txt"),
        "setting = G1\np = 8\nn_train = 300\nn_val = 50\nn_test = 30\nmethods = reggmm, nodewise-lasso\n\
         reggmm.epochs = 2\nlasso.n_lambda = 6\nreplicates = 2\n",
    )
    .unwrap();
    let o = cdgm(
        &[
            "experiment",
            "--config",
            "c.txt",
            "--out",
            "e",
            "--set",
            "thresholds=0.05,0.1",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = fs::read_to_string(d.join("e/report.csv")).unwrap();
    // 2 methods × 2 thresholds × (2 replicates + mean + std), plus header
    assert_eq!(written.lines().count(), 1 + 2 * 2 * 4);

    let o = cdgm(&["report", "--dir", "e"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), written);

    let o = cdgm(&["experiment", "--config", "c.txt", "--set", "replicates=0"], d);
    assert_eq!(code(&o), 1);
    let o = cdgm(&["report", "--dir", "nowhere"], d);
    assert_eq!(code(&o), 2);
}
