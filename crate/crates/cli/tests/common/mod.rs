#![allow(dead_code)]

use std::path::{Path, PathBuf};

use backeisnn_cli::RunConfig;
use backeisnn_data::{cifar, idx};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a small MNIST-format dataset whose classes are distinguishable
/// blob patterns, and returns the data root.
pub fn synthetic_mnist(root: &Path, train: usize, test: usize) -> PathBuf {
    let side = 28;
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let templates: Vec<Vec<u8>> = (0..10)
        .map(|_| {
            (0..side * side)
                .map(|_| if rng.random_bool(0.2) { 230 } else { 0 })
                .collect()
        })
        .collect();
    for ((images, labels), n) in [idx::TRAIN_FILES, idx::TEST_FILES]
        .into_iter()
        .zip([train, test])
    {
        let mut px = Vec::with_capacity(n * side * side);
        let mut lb = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            lb.push(label);
            px.extend(
                templates[label as usize]
                    .iter()
                    .map(|&v| v.saturating_add(rng.random_range(0..25))),
            );
        }
        std::fs::write(dir.join(images), idx::encode_images(side, side, &px)).unwrap();
        std::fs::write(dir.join(labels), idx::encode_labels(&lb)).unwrap();
    }
    root.to_path_buf()
}

pub fn synthetic_cifar(root: &Path, per_train_file: usize, test: usize) -> PathBuf {
    let dir = root.join("cifar10");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut write = |name: &str, n: usize| {
        let px: Vec<u8> = (0..n * cifar::IMAGE_BYTES).map(|_| rng.random()).collect();
        let lb: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        std::fs::write(dir.join(name), cifar::encode_batch(&px, &lb).unwrap()).unwrap();
    };
    for name in cifar::TRAIN_FILES {
        write(name, per_train_file);
    }
    write(cifar::TEST_FILE, test);
    root.to_path_buf()
}

/// A fast config on the synthetic MNIST-format data.
pub fn tiny_config(data_root: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::preset("mnist").unwrap();
    cfg.structure = "4C5-P2-16".into();
    cfg.gate_kernel = 3;
    cfg.time_steps = 4;
    cfg.batch_size = 20;
    cfg.epochs = 1;
    cfg.data_root = Some(data_root.to_path_buf());
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Metrics rows with the wall-time column removed.
pub fn metrics_without_time(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let time_col = r
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "wall_time_s")
        .unwrap();
    r.records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != time_col)
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}
