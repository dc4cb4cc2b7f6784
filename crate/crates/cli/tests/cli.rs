use std::path::Path;
use std::process::{Command, Output};

use pearl::TensorContainer;

fn pearl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pearl")).args(args).output().expect("binary runs")
}

fn synth(dir: &Path, seed: &str) {
    let out = pearl(&["synth", "--out", dir.to_str().unwrap(), "--seed", seed]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn run_args<'a>(dir: &'a str, out: &'a str) -> Vec<String> {
    [
        "run", "--features", &format!("{dir}/features.prl"), "--prototypes", &format!("{dir}/prototypes.prl"),
        "--image", &format!("{dir}/image.prl"), "--config", &format!("{dir}/config.txt"), "--out", out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn call(args: &[String]) -> Output {
    pearl(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn run_writes_labels_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    synth(tmp.path(), "1");
    let out = format!("{dir}/seg.prl");
    let mut args = run_args(dir, &out);
    args.extend(["--dump-field".into(), "--dump-system".into(), format!("{dir}/system.prl")]);
    let o = call(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seg = TensorContainer::read_file(&out).unwrap();
    assert_eq!(seg.require("labels").unwrap().shape, vec![128, 192]);
    assert_eq!(seg.require("F").unwrap().shape, vec![3, 128, 192]);
    let system = TensorContainer::read_file(format!("{dir}/system.prl")).unwrap();
    for name in ["A", "L", "rho", "G"] {
        assert!(system.get(name).is_some(), "{name}");
    }
}

#[test]
fn repeated_runs_are_byte_identical_across_exec_policies() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    synth(tmp.path(), "2");
    let a = format!("{dir}/a.prl");
    let b = format!("{dir}/b.prl");
    assert!(call(&run_args(dir, &a)).status.success());
    let mut seq = run_args(dir, &b);
    seq.push("--sequential".into());
    assert!(call(&seq).status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn debug_flags_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    synth(tmp.path(), "3");
    let mut args = run_args(dir, &format!("{dir}/seg.prl"));
    args.extend(["--debug-identity-R".into(), "--no-key-key".into()]);
    assert!(call(&args).status.success());
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    synth(tmp.path(), "4");
    std::fs::write(tmp.path().join("config.txt"), "tau_s=-1\n").unwrap();
    let o = call(&run_args(dir, &format!("{dir}/seg.prl")));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau_s"));
}

#[test]
fn missing_entry_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    synth(tmp.path(), "5");
    TensorContainer::default().write_file(tmp.path().join("prototypes.prl")).unwrap();
    let o = call(&run_args(dir, &format!("{dir}/seg.prl")));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prototypes"));
}

#[test]
fn missing_file_exits_with_io_code() {
    let o = pearl(&["run", "--features", "/nonexistent/f.prl", "--prototypes", "p", "--image", "i", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_reports_csv() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("s0"), "6");
    synth(&tmp.path().join("s1"), "7");
    std::fs::copy(tmp.path().join("s0/config.txt"), tmp.path().join("config.txt")).unwrap();
    let manifest = tmp.path().join("manifest.csv");
    std::fs::write(
        &manifest,
        "dataset,features,image,gt,prototypes\n\
         synth,s0/features.prl,s0/image.prl,s0/image.prl,s0/prototypes.prl\n\
         synth,s1/features.prl,s1/image.prl,s1/image.prl,s1/prototypes.prl\n",
    )
    .unwrap();
    let o = pearl(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        tmp.path().join("config.txt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dataset,mIoU,pAcc"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "synth");
    assert!(row[1].parse::<f64>().unwrap() >= 95.0);
}

#[test]
fn pes_reproduces_published_column() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = tmp.path().join("rows.csv");
    std::fs::write(
        &rows,
        "miou,pacc,latency,memory\n61.5,87.4,31.7,1.32\n63.2,88.2,40.5,1.32\n64.1,88.5,48.7,1.32\n64.4,88.7,58.5,1.32\n64.6,88.7,66.5,1.32\n",
    )
    .unwrap();
    let o = pearl(&["pes", "--rows", rows.to_str().unwrap()]);
    assert!(o.status.success());
    let got: Vec<f64> = String::from_utf8(o.stdout).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    for (g, want) in got.iter().zip([0.50, 0.73, 0.80, 0.79, 0.75]) {
        assert!((g - want).abs() <= 0.01, "{g} vs {want}");
    }
}
