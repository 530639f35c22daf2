use std::path::Path;
use std::process::{Command, Output};

fn mlbranch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlbranch"))
        .args(args)
        .arg("--output")
        .arg(dir)
        .env_remove("MLMC_BRANCH_SEED")
        .output()
        .expect("binary runs")
}

fn data_rows(csv: &str) -> usize {
    csv.lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn variance_study_has_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let out = mlbranch(dir.path(), &["study", "variance", "--levels", "2..9", "--n", "2000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("variance.csv")).unwrap();
    assert_eq!(data_rows(&csv), 8);
    assert!(csv.contains("\nabscissa,statistic,stderr,n,"));
}

#[test]
fn tables_do_not_depend_on_thread_count() {
    let runs: Vec<String> = ["1", "2", "8"]
        .iter()
        .map(|t| {
            let dir = tempfile::tempdir().unwrap();
            let out = mlbranch(
                dir.path(),
                &["--threads", t, "--scheme", "milstein", "--seed", "9", "study", "work", "--levels", "1..5", "--n", "3000"],
            );
            assert!(out.status.success());
            std::fs::read_to_string(dir.path().join("work.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["--scheme", "antithetic-cc", "price"],
        &["--param", "nonsense.key=1", "price"],
        &["--eta", "-1", "price"],
        &["--model", "heston", "price"],
    ];
    for args in cases {
        let out = mlbranch(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "model = gbm\nscheme = antithetic-cc\n").unwrap();
    let out = mlbranch(dir.path(), &["--config", bad.to_str().unwrap(), "price"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("scheme") && msg.contains("model"), "{msg}");
}

#[test]
fn unconverged_bias_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = mlbranch(
        dir.path(),
        &["--max-level", "1", "--param", "mlmc.initial_level=1", "--no-branching", "price", "--eps", "0.002"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn price_prints_summary_and_writes_levels() {
    let dir = tempfile::tempdir().unwrap();
    let out = mlbranch(dir.path(), &["--scheme", "milstein", "price", "--eps", "0.01"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("estimate") && text.contains("total work"));
    let csv = std::fs::read_to_string(dir.path().join("price.csv")).unwrap();
    assert!(csv.contains("# estimate="));
    let quiet = mlbranch(dir.path(), &["--quiet", "--scheme", "milstein", "price", "--eps", "0.01"]);
    assert!(quiet.status.success());
    assert!(quiet.stdout.is_empty());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mlbranch"));
        cmd.args(args).arg("--output").arg(dir.path()).env_remove("MLMC_BRANCH_SEED");
        if let Some(v) = env {
            cmd.env("MLMC_BRANCH_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read_to_string(dir.path().join("variance.csv")).unwrap()
    };
    let args = ["study", "variance", "--levels", "1..3", "--n", "500"];
    let from_env = run(Some("42"), &args);
    assert!(from_env.contains("# seed=42"));
    let explicit: Vec<&str> = ["--seed", "42"].iter().chain(args.iter()).copied().collect();
    assert_eq!(from_env, run(None, &explicit));
    let flag_wins: Vec<&str> = ["--seed", "3"].iter().chain(args.iter()).copied().collect();
    assert!(run(Some("42"), &flag_wins).contains("# seed=3"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mlbranch(dir.path(), &["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
