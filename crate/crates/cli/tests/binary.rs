mod common;

use std::process::Command;

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_backeisnn"));
    c.env_remove("BACKEISNN_DATA_ROOT").env("RUST_LOG", "warn");
    c
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = bin()
        .args(["--preset", "imagenet", "show-config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_file_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "time_steps = \"many\"\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&path)
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&path)
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .arg("--data-root")
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("run"))
        .arg("train")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn show_config_prints_loadable_toml() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .args(["--preset", "cifar10", "show-config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let path = tmp.path().join("cifar.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let again = bin()
        .arg("--config")
        .arg(&path)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(again.status.success());
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn train_then_eval_through_the_binary() {
    let tmp = TempDir::new().unwrap();
    let root = common::synthetic_mnist(tmp.path(), 40, 20);
    let cfg = common::tiny_config(&root, &tmp.path().join("run"));
    let cfg_path = tmp.path().join("tiny.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg_path)
        .arg("train")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "config.toml",
        "metrics.csv",
        "last.ckpt",
        "best.ckpt",
        "confusion_test.txt",
        "activity_test.csv",
    ] {
        assert!(cfg.out_dir.join(f).exists(), "{f} missing");
    }
    let out = bin()
        .arg("--config")
        .arg(&cfg_path)
        .arg("eval")
        .arg("--checkpoint")
        .arg(cfg.out_dir.join("best.ckpt"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = bin()
        .arg("--config")
        .arg(&cfg_path)
        .arg("eval")
        .arg("--checkpoint")
        .arg(tmp.path().join("nope.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}
