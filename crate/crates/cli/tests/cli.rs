use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pwinr::data_io::PlaneWaveStack;

fn pwinr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwinr"))
        .args(args)
        .env("PWINR_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pwinr(args);
    assert!(
        out.status.success(),
        "pwinr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path) -> PathBuf {
    let path = dir.join("phantom.pwst");
    ok(&["phantom", "--out", s(&path)]);
    path
}

const TINY: [&str; 6] = ["--width", "16", "--layers", "2", "--embedding", "2"];

fn train_tiny(stack: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--stack", s(stack), "--out", s(out)];
    args.extend_from_slice(&TINY);
    if !extra.contains(&"--iterations") {
        args.extend_from_slice(&["--iterations", "3"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = dir.path().join("x.pwst");
    assert_eq!(pwinr(&["phantom", "--spec", s(&missing), "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(pwinr(&["phantom", "--bogus"]).status.code(), Some(2));

    let stack = phantom(dir.path());
    let run = dir.path().join("run");
    let code = pwinr(&["train", "--stack", s(&stack), "--out", s(&run), "--lambda", "1.5"]).status.code();
    assert_eq!(code, Some(2));
    let code = pwinr(&["train", "--stack", s(&stack), "--out", s(&run), "--views", "99"]).status.code();
    assert_eq!(code, Some(2));

    let garbage = dir.path().join("garbage.pwst");
    fs::write(&garbage, b"PWST not really").unwrap();
    let code = pwinr(&["train", "--stack", s(&garbage), "--out", s(&run)]).status.code();
    assert_eq!(code, Some(1));
}

#[test]
fn phantom_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pwst");
    let b = dir.path().join("b.pwst");
    let c = dir.path().join("c.pwst");
    ok(&["phantom", "--seed", "3", "--out", s(&a)]);
    ok(&["phantom", "--seed", "3", "--out", s(&b)]);
    ok(&["phantom", "--seed", "4", "--out", s(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let stack = PlaneWaveStack::load(&a).unwrap();
    assert_eq!((stack.height(), stack.width(), stack.angle_count()), (64, 64, 8));
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let stack = phantom(dir.path());
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    train_tiny(&stack, &r1, &[]);
    train_tiny(&stack, &r2, &[]);
    for file in ["model.pwin", "loss.csv", "manifest.json"] {
        assert_eq!(fs::read(r1.join(file)).unwrap(), fs::read(r2.join(file)).unwrap(), "{file}");
    }
    let losses = fs::read_to_string(r1.join("loss.csv")).unwrap();
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "iteration,loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(r1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["iterations_completed"], 3);
    assert_eq!(manifest["timings"]["train_secs"], 0.0);
    assert_eq!(manifest["inputs"][0]["bytes"], fs::metadata(&stack).unwrap().len());
}

#[test]
fn single_iteration_gives_one_loss_row() {
    let dir = tempfile::tempdir().unwrap();
    let stack = phantom(dir.path());
    let run = dir.path().join("run");
    train_tiny(&stack, &run, &["--iterations", "1"]);
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 2);
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let stack = phantom(dir.path());
    let straight = dir.path().join("straight");
    let resumed = dir.path().join("resumed");
    train_tiny(&stack, &straight, &["--iterations", "4"]);
    // The last checkpoint is taken at iteration 3, so the resumed run
    // replays only the final step.
    train_tiny(&stack, &resumed, &["--iterations", "4", "--checkpoint-every", "3"]);
    fs::remove_file(resumed.join("model.pwin")).unwrap();
    train_tiny(&stack, &resumed, &["--iterations", "4", "--resume"]);
    for file in ["model.pwin", "loss.csv"] {
        assert_eq!(fs::read(straight.join(file)).unwrap(), fs::read(resumed.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn infer_renders_any_grid_size() {
    let dir = tempfile::tempdir().unwrap();
    let stack = phantom(dir.path());
    let run = dir.path().join("run");
    train_tiny(&stack, &run, &[]);
    let weights = run.join("model.pwin");

    let o = dir.path().join("o.pgm");
    let o_prime = dir.path().join("o_prime.pgm");
    ok(&["infer", "--weights", s(&weights), "--angle", "-5.5", "--height", "128", "--width", "96", "--which", "o", "--out", s(&o)]);
    ok(&["infer", "--weights", s(&weights), "--angle", "-5.5", "--height", "128", "--width", "96", "--out", s(&o_prime)]);
    let bytes = fs::read(&o).unwrap();
    let header = b"P5 96 128 255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 96 * 128);
    assert_ne!(fs::read(&o).unwrap(), fs::read(&o_prime).unwrap());

    let png = dir.path().join("img.png");
    ok(&["infer", "--weights", s(&weights), "--angle", "0", "--height", "32", "--width", "48", "--out", s(&png)]);
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");

    let bad = dir.path().join("img.bmp");
    let code = pwinr(&["infer", "--weights", s(&weights), "--angle", "0", "--height", "8", "--width", "8", "--out", s(&bad)]);
    assert_eq!(code.status.code(), Some(2));
}

#[test]
fn eval_reports_holdout_section() {
    let dir = tempfile::tempdir().unwrap();
    let stack = phantom(dir.path());
    let run = dir.path().join("run");
    train_tiny(&stack, &run, &["--views", "3"]);
    let eval = dir.path().join("eval");
    ok(&["eval", "--weights", s(&run.join("model.pwin")), "--stack", s(&stack), "--out", s(&eval)]);
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("section,angle_index,angle_deg,source,metric,region,value\n"));
    let holdout_ssim = csv
        .lines()
        .filter(|l| l.starts_with("holdout,") && l.contains(",o_prime,ssim,"))
        .count();
    assert_eq!(holdout_ssim, 5);
    let json = fs::read_to_string(eval.join("metrics.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&json).unwrap();
}

#[test]
fn report_prints_ratio() {
    let out = ok(&["report", "--model-bytes", "530000", "--stack-bytes", "8000000"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["ratio"].as_f64().unwrap() - 15.0943).abs() < 1e-3);
    assert_eq!(pwinr(&["report", "--stack-bytes", "10"]).status.code(), Some(2));
}
