use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn dtl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DTL_OUTPUT_ROOT")
        .output()
        .expect("run dtl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

const MINIMAL_SWEEP: &str = r#"{
  "version": 1,
  "target": {"kind": "generated", "n_features": 6, "classes": 4, "seed": 3},
  "sigmas": [0.5],
  "target_sizes": [100],
  "source_size": 500,
  "test_size": 500,
  "algorithms": ["source"],
  "replicates": 1,
  "train": {"epochs": 5}
}"#;

#[test]
fn simulate_default_grid_writes_fourteen_sources_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dtl(&["simulate", "--out", "a", "--rows", "40"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let models: Vec<_> = std::fs::read_dir(tmp.path().join("a/models"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("source_"))
        .collect();
    assert_eq!(models.len(), 14);
    assert!(tmp.path().join("a/resolved_config.json").exists());
    assert!(tmp.path().join("a/data/target_test.csv").exists());
    let o = dtl(&["simulate", "--out", "b", "--rows", "40"], tmp.path());
    assert!(o.status.success());
    assert_eq!(
        read_tree(&tmp.path().join("a")),
        read_tree(&tmp.path().join("b"))
    );
}

#[test]
fn zero_sigma_source_has_zero_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dtl(
        &[
            "simulate",
            "--out",
            "s",
            "--rows",
            "10",
            "--sigma",
            "0",
            "--n-features",
            "10",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dtl(
        &["kl", "s/models/source_s0_r0.json", "s/models/target.json"],
        tmp.path(),
    );
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn kl_of_a_model_with_itself_is_zero_and_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    dtl(
        &[
            "simulate",
            "--out",
            "x",
            "--rows",
            "10",
            "--sigma",
            "1",
            "--n-features",
            "5",
        ],
        tmp.path(),
    );
    dtl(
        &[
            "simulate",
            "--out",
            "y",
            "--rows",
            "10",
            "--sigma",
            "1",
            "--n-features",
            "4",
        ],
        tmp.path(),
    );
    let o = dtl(
        &["kl", "x/models/target.json", "x/models/target.json"],
        tmp.path(),
    );
    assert_eq!(stdout(&o), "0\n");
    let o = dtl(
        &["kl", "x/models/target.json", "y/models/target.json"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("structure"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
}

#[test]
fn invalid_sigma_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dtl(&["simulate", "--out", "x", "--sigma", "-0.5"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sigma"));
}

#[test]
fn minimal_sweep_runs_quickly_and_matches_kl_command() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("sweep.json"), MINIMAL_SWEEP).unwrap();
    let o = dtl(
        &["sweep", "--config", "sweep.json", "--dry-run"],
        tmp.path(),
    );
    assert_eq!(stdout(&o), "1\n");
    assert!(!tmp.path().join("dtl-output").exists());

    let start = Instant::now();
    let o = dtl(
        &["sweep", "--config", "sweep.json", "--out", "runs"],
        tmp.path(),
    );
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = tmp.path().join(stdout(&o).trim());
    assert!(run.starts_with(tmp.path().join("runs")));
    assert!(stderr(&o).contains("training jobs finished"));
    let csv = std::fs::read_to_string(run.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "sigma,kl,target_size,algorithm,lambda_schedule,lambda_resolved,seed,test_accuracy,train_seconds,status"
    );
    let recorded: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let o = dtl(
        &[
            "kl",
            run.join("models/source_s0_r0.json").to_str().unwrap(),
            run.join("models/target.json").to_str().unwrap(),
        ],
        tmp.path(),
    );
    let printed: f64 = stdout(&o).trim().parse().unwrap();
    assert!((printed - recorded).abs() <= 1e-11 * recorded.abs().max(1.0));
    assert!(run.join("resolved_config.json").exists());
    assert!(run.join("summary.csv").exists());
}

#[test]
fn sweep_honours_output_root_variable() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("sweep.json"), MINIMAL_SWEEP).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dtl"))
        .args(["sweep", "--config", "sweep.json"])
        .current_dir(tmp.path())
        .env("DTL_OUTPUT_ROOT", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).trim().starts_with("from-env"));
}

#[test]
fn sweep_with_failing_cells_exits_1_and_keeps_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = MINIMAL_SWEEP.replace(
        r#""algorithms": ["source"]"#,
        r#""algorithms": ["source", "finetune_last3"], "network": "m1""#,
    );
    std::fs::write(tmp.path().join("sweep.json"), cfg).unwrap();
    let o = dtl(
        &[
            "sweep",
            "--config",
            "sweep.json",
            "--out",
            "runs",
            "--epochs",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let run = tmp.path().join(stdout(&o).trim());
    let csv = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains(",ok\n"));
    assert!(csv.contains("error: "));
}

#[test]
fn configs_reject_unknown_keys_and_missing_version() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("bad.json"),
        r#"{"version": 1, "sigmass": [1]}"#,
    )
    .unwrap();
    std::fs::write(tmp.path().join("nover.json"), r#"{"sigmas": [1]}"#).unwrap();
    for file in ["bad.json", "nover.json"] {
        for cmd in ["sweep", "simulate", "train"] {
            let o = dtl(&[cmd, "--config", file, "--out", "o"], tmp.path());
            assert!(!o.status.success(), "{cmd} accepted {file}");
        }
    }
}

fn sweep_csv(dir: &Path) -> std::path::PathBuf {
    let csv = "sigma,kl,target_size,algorithm,lambda_schedule,lambda_resolved,seed,test_accuracy,train_seconds,status\n\
0.1,0.01,50,dann,fixed(1),1,0,0.9,,ok\n\
0.5,0.2,50,dann,fixed(1),1,0,0.8,,ok\n\
1,0.9,50,dann,fixed(1),1,0,0.7,,ok\n";
    let p = dir.join("results.csv");
    std::fs::write(&p, csv).unwrap();
    p
}

#[test]
fn plot_draws_one_series_per_algorithm_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    sweep_csv(tmp.path());
    let o = dtl(
        &["plot", "--results", "results.csv", "--out", "figs/a.svg"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read_to_string(tmp.path().join("figs/a.svg")).unwrap();
    assert_eq!(a.matches("<polyline").count(), 1);
    assert!(tmp.path().join("figs/a.config.json").exists());
    dtl(
        &["plot", "--results", "results.csv", "--out", "figs/b.svg"],
        tmp.path(),
    );
    assert_eq!(
        a,
        std::fs::read_to_string(tmp.path().join("figs/b.svg")).unwrap()
    );
    let o = dtl(
        &[
            "plot",
            "--results",
            "results.csv",
            "--figure",
            "model_comparison",
            "--target-size",
            "50",
            "--out",
            "c.svg",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn plot_input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    sweep_csv(tmp.path());
    let o = dtl(
        &[
            "plot",
            "--results",
            "results.csv",
            "--algorithm",
            "mcd",
            "--out",
            "x.svg",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no rows matched"));
    assert!(!tmp.path().join("x.svg").exists());
    std::fs::write(tmp.path().join("short.csv"), "sigma,kl\n0.1,0.2\n").unwrap();
    let o = dtl(
        &["plot", "--results", "short.csv", "--out", "y.svg"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing columns"));
}

#[test]
fn train_and_eval_every_model_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dtl(
        &[
            "simulate",
            "--out",
            "sim",
            "--rows",
            "300",
            "--sigma",
            "0.5",
            "--n-features",
            "6",
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    std::fs::write(
        tmp.path().join("train.json"),
        r#"{"version": 1, "domain_width": 16, "train": {"epochs": 2}}"#,
    )
    .unwrap();
    for alg in [
        "source",
        "target",
        "dann",
        "dann_target",
        "mcd",
        "finetune_all",
        "finetune_last1",
    ] {
        let out = format!("m-{alg}");
        let o = dtl(
            &[
                "train",
                "--config",
                "train.json",
                "--algorithm",
                alg,
                "--source",
                "sim/data/source_s0.csv",
                "--target",
                "sim/data/target_train.csv",
                "--model",
                "sim/models/target.json",
                "--out",
                &out,
            ],
            tmp.path(),
        );
        assert!(o.status.success(), "{alg}: {}", stderr(&o));
        let model = stdout(&o).trim().to_string();
        assert!(tmp.path().join(&out).join("resolved_config.json").exists());
        let o = dtl(
            &[
                "eval",
                "--model",
                &model,
                "--data",
                "sim/data/target_test.csv",
            ],
            tmp.path(),
        );
        assert!(o.status.success(), "{alg}: {}", stderr(&o));
        let acc: f64 = stdout(&o).trim().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let o = dtl(
        &[
            "train",
            "--algorithm",
            "dann",
            "--source",
            "sim/data/source_s0.csv",
            "--out",
            "z",
        ],
        tmp.path(),
    );
    assert!(!o.status.success());
}
