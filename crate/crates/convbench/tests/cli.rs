use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = "\
conv 4 3 3 2 8 8 1 1
pool 4 4 4
conv 3 2 2 4 4 4 2 0
fc 5 12
";

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_convbench"));
    cmd.env_remove("CONVBENCH_THREADS");
    cmd
}

fn models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn write_model(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("toy.model");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], model: &Path) -> Output {
    bin().arg("--model").arg(model).args(args).output().unwrap()
}

fn rows(out: &Output) -> Vec<Vec<String>> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn toy_sweep_with_check() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), TOY);
    let out = run(
        &[
            "--batch",
            "1:3:2",
            "--min-time",
            "0",
            "--check",
            "--mc",
            "8",
            "--nc",
            "12",
            "--kc",
            "8",
            "--mr",
            "4",
            "--nr",
            "4",
        ],
        &model,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert!(text.starts_with("model,batch,algo,threads,layer,m,n,k,time_s,gflops,workspace_bytes\n"));
    let rows = rows(&out);
    // two batches, three timed layers plus a total each
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0][..5], ["toy", "1", "convgemm", "1", "conv1"]);
    assert_eq!(rows[4][..5], ["toy", "3", "convgemm", "1", "conv1"]);
    for row in rows.iter().filter(|r| r[4] != "total") {
        let dims: Vec<f64> = row[5..8].iter().map(|v| v.parse().unwrap()).collect();
        let time: f64 = row[8].parse().unwrap();
        let gflops: f64 = row[9].parse().unwrap();
        let want = 2.0 * dims[0] * dims[1] * dims[2] / time / 1e9;
        assert!((gflops - want).abs() <= 1e-12 * want, "{row:?}");
    }
}

#[test]
fn writes_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), TOY);
    let csv = dir.path().join("r.csv");
    let out = bin()
        .arg("--model")
        .arg(&model)
        .args(["--algo", "im2col", "--min-time", "0", "--out"])
        .arg(&csv)
        .env("CONVBENCH_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).all(|l| l.starts_with("toy,1,im2col,2,")));
}

#[test]
fn shipped_alexnet_dims() {
    let out = run(
        &["--algo", "im2col-only", "--batch", "2", "--min-time", "0"],
        &models_dir().join("alexnet.model"),
    );
    assert!(out.status.success());
    let dims: Vec<String> = rows(&out)
        .iter()
        .filter(|r| r[4] != "total")
        .map(|r| r[5..8].join("x"))
        .collect();
    assert_eq!(
        dims,
        [
            "64x5832x363",
            "192x5202x1600",
            "384x1250x1728",
            "384x242x3456",
            "256x242x3456"
        ]
    );
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), TOY);
    for args in [
        &["--algo", "winograd"][..],
        &["--batch", "0"],
        &["--threads", "0"],
        &["--mr", "0"],
    ] {
        let out = run(args, &model);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    let out = run(&[], &dir.path().join("missing.model"));
    assert_eq!(out.status.code(), Some(1));
    let bad = write_model(dir.path(), "conv 1 1 1 1 4 4 1 0\nrelu\n");
    let out = run(&[], &bad);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn allocation_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "conv 1 1 1 1 100000 100000 1 0\n");
    let out = run(&["--batch", "1000", "--min-time", "0"], &model);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // header still emitted
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("model,"));
}

#[test]
fn help_exits_0() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("--min-time"));
}
