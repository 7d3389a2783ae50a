#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) {
    let n = pixels.len() / (rows * cols);
    let mut b = Vec::new();
    for v in [0x803u32, n as u32, rows as u32, cols as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    fs::write(path, b).unwrap();
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut b = Vec::new();
    for v in [0x801u32, labels.len() as u32] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    fs::write(path, b).unwrap();
}

/// 8×8 images of three classes: a bright bar at rows `2c..2c+2` on noise.
pub fn bars(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut px, mut labels) = (Vec::new(), Vec::new());
    for i in 0..n {
        let c = i % 3;
        labels.push(c as u8);
        for r in 0..8 {
            for _ in 0..8 {
                let on = r / 2 == c + 1;
                px.push(if on { rng.gen_range(180..=255) } else { rng.gen_range(0..60) });
            }
        }
    }
    (px, labels)
}

/// A synthetic MNIST-format directory of bar images.
pub fn bar_dataset(dir: &Path, n_train: usize, n_test: usize) -> PathBuf {
    let d = dir.join("bars");
    fs::create_dir_all(&d).unwrap();
    for (prefix, n, seed) in [("train", n_train, 1), ("t10k", n_test, 2)] {
        let (px, labels) = bars(n, seed);
        write_idx_images(&d.join(format!("{prefix}-images-idx3-ubyte")), 8, 8, &px);
        write_idx_labels(&d.join(format!("{prefix}-labels-idx1-ubyte")), &labels);
    }
    d
}

/// A small conv net over 8×8 bars with every phase configured.
pub fn tiny_config(data: &Path, out: &Path, seed: u64, lambda: f64) -> String {
    format!(
        r#"
version = 1
seed = {seed}
output_dir = "{out}"
phases = ["baseline", "ssl", "compact", "finetune"]

[network]
input_shape = [1, 8, 8]

[[network.layers]]
kind = "conv"
name = "conv1"
filters = 4
kernel = [3, 3]
pad = [1, 1]

[[network.layers]]
kind = "relu"

[[network.layers]]
kind = "max_pool"
size = [2, 2]
stride = [2, 2]

[[network.layers]]
kind = "conv"
name = "conv2"
filters = 6
kernel = [3, 3]
pad = [1, 1]

[[network.layers]]
kind = "relu"

[[network.layers]]
kind = "fc"
name = "fc1"
outputs = 3

[dataset]
format = "mnist"
path = "{data}"

[train]
learning_rate = 0.05
momentum = 0.9
weight_decay = 0.0005
batch_size = 16
epochs = 2

[ssl_train]
learning_rate = 0.02
momentum = 0.9
weight_decay = 0.0005
batch_size = 16
epochs = 8
lr_schedule = [[3, 0.1], [5, 0.01], [7, 0.001]]

[finetune]
learning_rate = 0.005
momentum = 0.9
weight_decay = 0.0005
batch_size = 16
epochs = 1

[ssl]
zero_threshold = 1e-4

[[ssl.schemes]]
kind = "filter_wise"
strength = {lambda:?}
"#,
        out = out.display(),
        data = data.display(),
    )
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}
