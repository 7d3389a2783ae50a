//! MNIST IDX and CIFAR-10 binary readers.

use std::fs;
use std::path::Path;

use sslkit_core::network::Dataset;

use crate::error::{CliError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| {
        CliError::parse(
            path,
            bytes.len() as u64,
            format!("truncated header: expected {} bytes, found {}", offset + 4, bytes.len()),
        )
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != want {
        return Err(CliError::parse(path, 0, format!("magic: expected {want:#010x}, found {found:#010x}")));
    }
    Ok(())
}

fn check_len(bytes: &[u8], want: usize, path: &Path) -> Result<()> {
    if bytes.len() != want {
        return Err(CliError::parse(
            path,
            bytes.len().min(want) as u64,
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    Ok(())
}

/// Images as `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    check_len(&bytes, 16 + n * rows * cols, path)?;
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    check_len(&bytes, 8 + n, path)?;
    Ok(bytes[8..].to_vec())
}

fn mnist_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(&lbl_path)?;
    if labels.len() != n {
        return Err(CliError::parse(
            &lbl_path,
            4,
            format!("expected {n} labels to match the images, found {}", labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(CliError::parse(&lbl_path, 8 + pos as u64, format!("label {} out of range", labels[pos])));
    }
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = labels.iter().map(|&l| usize::from(l)).collect();
    Ok(Dataset::new(inputs, [1, rows, cols], labels, 10)?)
}

/// `(train, test)` from the four uncompressed IDX files in `dir`, pixels
/// scaled to [0, 1].
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((mnist_split(dir, "train")?, mnist_split(dir, "t10k")?))
}

fn cifar_records(path: &Path, labels: &mut Vec<usize>, pixels: &mut Vec<f64>) -> Result<()> {
    let bytes = read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(CliError::parse(
            path,
            whole as u64,
            format!(
                "expected a multiple of {CIFAR_RECORD} bytes, found {} ({} trailing)",
                bytes.len(),
                bytes.len() - whole
            ),
        ));
    }
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(CliError::parse(path, (r * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        pixels.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok(())
}

/// `(train, test)` from the CIFAR-10 binary batches in `dir`. Pixels are
/// scaled to [0, 1] and the training set's per-channel mean is subtracted
/// from both splits.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (mut tl, mut tp) = (Vec::new(), Vec::new());
    for b in 1..=5 {
        cifar_records(&dir.join(format!("data_batch_{b}.bin")), &mut tl, &mut tp)?;
    }
    let (mut el, mut ep) = (Vec::new(), Vec::new());
    cifar_records(&dir.join("test_batch.bin"), &mut el, &mut ep)?;
    let plane = 1024;
    let mut mean = [0.0; 3];
    for img in tp.chunks(3 * plane) {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += img[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
    }
    let count = (tl.len() * plane).max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    for px in [&mut tp, &mut ep] {
        for img in px.chunks_mut(3 * plane) {
            for (c, m) in mean.iter().enumerate() {
                img[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= m);
            }
        }
    }
    Ok((Dataset::new(tp, [3, 32, 32], tl, 10)?, Dataset::new(ep, [3, 32, 32], el, 10)?))
}
