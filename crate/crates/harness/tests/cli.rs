mod common;

use std::path::Path;
use std::process::{Command, Output};

fn ppm(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, common::TINY_TOML).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ppm"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn manifest(run: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let run = |name: &str, extra: &[&str]| {
        let dir = t.join(name);
        let mut args = vec![name, "--seed", "3", "--run-dir", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = ppm(t, &args);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(manifest(&dir)["status"], "ok");
        dir
    };
    let data = run("gen-data", &[]).join("data");
    let data = data.to_str().unwrap();
    let enc = run("train-modenc", &["--data", data]).join("encoders.ckpt");
    let feats = run("export-features", &["--data", data, "--encoders", enc.to_str().unwrap()]).join("features.jsonl");
    let cache = run("build-cache", &["--features", feats.to_str().unwrap()]).join("features.cache");
    let cache = cache.to_str().unwrap();
    let ppm_ckpt = run("pretrain-ppm", &["--data", data, "--cache", cache]).join("ppm.ckpt");
    let urm = run(
        "train-urm",
        &["--data", data, "--cache", cache, "--ppm", ppm_ckpt.to_str().unwrap(), "--ppm-mode", "frozen"],
    )
    .join("urm.ckpt");
    let eval = run("eval", &["--data", data, "--cache", cache, "--urm", urm.to_str().unwrap()]);
    let m = manifest(&eval);
    assert!(!m["outputs"].as_array().unwrap().is_empty());
    assert!(m["inputs"].as_array().unwrap().iter().all(|f| f["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let dir = t.join("eval");
    let out = ppm(t, &["eval", "--data", t.join("nowhere").to_str().unwrap(), "--urm", "x.ckpt", "--run-dir", dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error in stage"), "{err}");
    assert_eq!(manifest(&dir)["status"], "failed");

    std::fs::write(t.join("bad.toml"), "[urm]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ppm"))
        .args(["gen-data", "--config", t.join("bad.toml").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error in stage config"));
}
