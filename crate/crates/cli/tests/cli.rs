use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shiftscope"));
    c.env_remove("SHIFTSCOPE_OUT").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Hyperparameters small enough for a two-second end-to-end run.
const FAST: &[&str] = &[
    "--k-max",
    "40",
    "--n-mc",
    "2000",
    "--K",
    "15",
    "--epochs",
    "150",
    "--batch",
    "80",
    "--folds",
    "3",
    "--max-refine-iters",
    "2",
];

#[test]
fn bench_gen_writes_cohorts_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "--out",
        out,
        "bench-gen",
        "global",
        "--sigma",
        "0.3",
        "--n",
        "200",
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["X.csv", "Y.csv", "truth.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let t = json(&dir.path().join("truth.json"));
    assert_eq!(t["kind"], "global");
    assert_eq!(t["seed"], 7);
    let rows = fs::read_to_string(dir.path().join("Y.csv")).unwrap().lines().count();
    assert_eq!(rows, 201);
}

#[test]
fn bench_gen_local_records_injected_ids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["--out", out, "bench-gen", "local", "--inject", "30", "--n", "300"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&dir.path().join("truth.json"));
    let ids: Vec<u64> = t["injected_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(ids, (300..330).collect::<Vec<u64>>());
}

#[test]
fn negative_sigma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "bench-gen",
        "global",
        "--sigma=-0.5",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sigma"), "{}", stderr(&o));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = bin()
        .env("SHIFTSCOPE_OUT", &target)
        .args(["bench-gen", "local", "--inject", "5", "--n", "50"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("truth.json").exists());
}

fn local_data(dir: &Path) {
    let o = run(&[
        "--out",
        dir.to_str().unwrap(),
        "bench-gen",
        "local",
        "--inject",
        "60",
        "--n",
        "600",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn baseline_needs_truth() {
    let dir = tempfile::tempdir().unwrap();
    local_data(dir.path());
    let x = dir.path().join("X.csv");
    let y = dir.path().join("Y.csv");
    let o = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "baseline",
        "--x",
        x.to_str().unwrap(),
        "--y",
        y.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("injected ids"), "{}", stderr(&o));
}

#[test]
fn baseline_recall_at_custom_k() {
    let dir = tempfile::tempdir().unwrap();
    local_data(dir.path());
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    let out = dir.path().join("bl");
    let o = run(&[
        "--out",
        out.to_str().unwrap(),
        "baseline",
        "--x",
        &p("X.csv"),
        "--y",
        &p("Y.csv"),
        "--truth",
        &p("truth.json"),
        "--k",
        "100",
        "--mlp-iters",
        "20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = json(&out.join("baseline.json"));
    assert_eq!(b["k"], 100);
    let r = b["injected_recall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r));
    let ranking = fs::read_to_string(out.join("ranking.csv")).unwrap();
    assert!(ranking.starts_with("id,score,rank"));
    assert_eq!(ranking.lines().count(), 661);
}

#[test]
fn missing_input_fails_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "pipeline",
        "--x",
        "/nonexistent/X.csv",
        "--y",
        "/nonexistent/Y.csv",
    ]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("load") && e.contains("not found"), "{e}");
}

#[test]
fn score_equalize_attribute_chain() {
    let dir = tempfile::tempdir().unwrap();
    local_data(dir.path());
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    let data = ["--x".to_owned(), p("X.csv"), "--y".to_owned(), p("Y.csv")];

    let mut args = vec!["--out".to_owned(), p("s"), "score".to_owned()];
    args.extend(data.iter().cloned());
    args.extend(["--k-max", "40", "--n-mc", "20000", "--p-ext", "1e-3"].map(String::from));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let f = json(&dir.path().join("s/flagged.json"));
    assert!(f["Y"]["threshold"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("s/scores_Y.csv").exists());

    let mut args = vec!["--out".to_owned(), p("e"), "equalize".to_owned()];
    args.extend(data.iter().cloned());
    args.extend(["--k-max", "40", "--n-mc", "2000"].map(String::from));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let eq = json(&dir.path().join("e/equalization.json"));
    assert!(!eq["pruned_y"].as_array().unwrap().is_empty());
    assert!(dir.path().join("e/trace.csv").exists());

    let mut args = vec!["--out".to_owned(), p("a"), "attribute".to_owned()];
    args.extend(data.iter().cloned());
    args.push("--equalization".into());
    args.push(p("e/equalization.json"));
    args.extend(FAST.iter().map(|s| s.to_string()));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let a = json(&dir.path().join("a/attribution.json"));
    assert!(!a.as_array().unwrap().is_empty());
}

fn pipeline_run(out: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["--out", out.to_str().unwrap(), "pipeline"];
    args.extend_from_slice(extra);
    args.extend_from_slice(FAST);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    json(&out.join("report.json"))
}

fn strip_times(mut v: serde_json::Value) -> serde_json::Value {
    v.as_object_mut().unwrap().remove("wall_times");
    v
}

#[test]
fn pipeline_is_deterministic_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--bench", "global", "--n", "800", "--seeds", "0,1"];
    let a = pipeline_run(&dir.path().join("a"), &[&base[..], &["--sigma", "1.0"]].concat());
    let b = pipeline_run(&dir.path().join("b"), &[&base[..], &["--sigma", "1.0"]].concat());
    assert_eq!(a["schema"], "shiftscope.run-report/1");
    assert_eq!(strip_times(a.clone()), strip_times(b));
    for f in ["seeds.csv", "modes.csv", "inclusion.csv"] {
        assert!(dir.path().join("a").join(f).exists());
    }
    let c = pipeline_run(&dir.path().join("c"), &[&base[..], &["--sigma", "0.5"]].concat());
    assert_eq!(c["config"]["input"]["sigma"], 0.5);

    let agg = dir.path().join("agg");
    let o = run(&[
        "--out",
        agg.to_str().unwrap(),
        "aggregate",
        dir.path().join("a/report.json").to_str().unwrap(),
        dir.path().join("c/report.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bands = fs::read_to_string(agg.join("ratio_bands.csv")).unwrap();
    assert!(bands.lines().any(|l| l.starts_with("0.5,pruned_to_total,2,")));
    assert!(bands.lines().any(|l| l.starts_with("1.0,pruned_to_total,2,")));
    assert!(agg.join("inclusion_frequency.csv").exists());

    // a different equalization level is a configuration mismatch
    let d = pipeline_run(
        &dir.path().join("d"),
        &[&base[..], &["--sigma", "1.0", "--alpha", "0.01"]].concat(),
    );
    assert_eq!(d["config"]["equalize"]["alpha"], 0.01);
    let reports = [
        dir.path().join("a/report.json").to_str().unwrap().to_owned(),
        dir.path().join("d/report.json").to_str().unwrap().to_owned(),
    ];
    let o = run(&["--out", agg.to_str().unwrap(), "aggregate", &reports[0], &reports[1]]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema mismatch"), "{}", stderr(&o));
    let o = run(&[
        "--out",
        agg.to_str().unwrap(),
        "aggregate",
        "--force",
        &reports[0],
        &reports[1],
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_input_and_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
seeds = [3]
k_max = 40
n_mc = 2000
K = 15
epochs = 150
batch = 80
folds = 3
alpha = 0.02

[input]
kind = "global"
sigma = 1.0
n = 600
"#,
    )
    .unwrap();
    let out = dir.path().join("r");
    // flags override file values
    let o = run(&[
        "--out",
        out.to_str().unwrap(),
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        "0.04",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("report.json"));
    assert_eq!(r["config"]["seeds"], serde_json::json!([3]));
    assert_eq!(r["config"]["equalize"]["k_max"], 40);
    assert_eq!(r["config"]["equalize"]["alpha"], 0.04);
    assert_eq!(r["config"]["train"]["K"], 15);
    assert_eq!(r["config"]["input"]["n"], 600);

    fs::write(&cfg, "k_maximum = 3\n").unwrap();
    let o = run(&[
        "--out",
        out.to_str().unwrap(),
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("k_maximum"), "{}", stderr(&o));
}
