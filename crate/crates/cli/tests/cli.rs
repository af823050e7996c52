use std::path::Path;
use std::process::{Command, Output};

use bugscope::pipeline::{smoke_config, Manifest};

fn bugscope(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bugscope"))
        .args(args)
        .arg("--config")
        .arg(dir.join("config.json"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), serde_json::to_vec(&smoke_config()).unwrap()).unwrap();
    dir
}

fn manifest(dir: &Path) -> Manifest {
    let exp = std::fs::read_dir(dir.join("out")).unwrap().next().unwrap().unwrap().path();
    serde_json::from_slice(&std::fs::read(exp.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn analyze_without_attack_exits_3_and_names_attack() {
    let dir = setup();
    let out = bugscope(dir.path(), &["analyze", "--recipe", "sgd"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`attack`"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = setup();
    let mut c = smoke_config();
    c.attack.grids.sgd = vec![0.02, 0.01];
    std::fs::write(dir.path().join("config.json"), serde_json::to_vec(&c).unwrap()).unwrap();
    assert_eq!(bugscope(dir.path(), &["validate"]).status.code(), Some(2));
    assert_eq!(bugscope(dir.path(), &["gen-data"]).status.code(), Some(2));
    let out = bugscope(dir.path(), &["train", "--recipe", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn second_train_skips_recorded_checkpoints() {
    let dir = setup();
    assert!(bugscope(dir.path(), &["gen-data"]).status.success());
    assert!(bugscope(dir.path(), &["train", "--recipe", "sgd"]).status.success());
    let first = manifest(dir.path());
    let model = dir.path().join("out").join(
        std::fs::read_dir(dir.path().join("out")).unwrap().next().unwrap().unwrap().file_name(),
    );
    let mtime = |m: &Manifest| {
        std::fs::metadata(model.join(&m.artifacts["models/sgd/f0"].path)).unwrap().modified().unwrap()
    };
    let before = mtime(&first);
    assert!(bugscope(dir.path(), &["train", "--recipe", "sgd"]).status.success());
    let second = manifest(dir.path());
    assert_eq!(first, second);
    assert_eq!(mtime(&second), before);
    assert!(bugscope(dir.path(), &["validate"]).status.success());
}

#[test]
fn seed_override_changes_the_experiment_directory() {
    let dir = setup();
    assert!(bugscope(dir.path(), &["gen-data"]).status.success());
    assert!(bugscope(dir.path(), &["gen-data", "--seed", "7"]).status.success());
    assert_eq!(std::fs::read_dir(dir.path().join("out")).unwrap().count(), 2);
}
