//! IDX image/label files (the MNIST container format).
//!
//! Images: big-endian magic 0x00000803 (u8 payload, 3 dims) for [n, h, w],
//! or 0x00000804 for [n, h, w, c]. Labels: magic 0x00000801 for [n].
//! Pixels map u8 -> f64 as v/255 on load and round(v*255) on save, so
//! save(load(file)) reproduces the file byte for byte.

use std::path::Path;

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const U8_DTYPE: u8 = 0x08;

#[derive(Debug)]
struct IdxPayload {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn read_idx_file(path: &Path, want_dims: &[usize]) -> Result<IdxPayload> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Parse {
            code: "idx/truncated",
            message: format!("{}: file shorter than its magic", path.display()),
        });
    }
    let (zero0, zero1, dtype, ndims) = (bytes[0], bytes[1], bytes[2], bytes[3] as usize);
    if zero0 != 0 || zero1 != 0 || dtype != U8_DTYPE || !want_dims.contains(&ndims) {
        return Err(Error::Parse {
            code: "idx/bad-magic",
            message: format!(
                "{}: magic {:02x}{:02x}{:02x}{:02x}, want unsigned-byte data with {:?} dims",
                path.display(),
                zero0,
                zero1,
                dtype,
                ndims,
                want_dims
            ),
        });
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Parse {
            code: "idx/truncated",
            message: format!("{}: header cut off after {} bytes", path.display(), bytes.len()),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let data = bytes[header..].to_vec();
    if data.len() != expected {
        return Err(Error::Parse {
            code: "idx/truncated",
            message: format!(
                "{}: dims {:?} want {} payload bytes, found {}",
                path.display(),
                dims,
                expected,
                data.len()
            ),
        });
    }
    Ok(IdxPayload { dims, data })
}

/// Load an images/labels file pair into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path, class_count: usize) -> Result<ImageDataset> {
    let images = read_idx_file(images_path, &[3, 4])?;
    let labels = read_idx_file(labels_path, &[1])?;
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Parse {
            code: "idx/count-mismatch",
            message: format!(
                "{} holds {} images but {} holds {} labels",
                images_path.display(),
                images.dims[0],
                labels_path.display(),
                labels.dims[0]
            ),
        });
    }
    let mut shape = images.dims.clone();
    if shape.len() == 3 {
        shape.push(1);
    }
    let data: Vec<f64> = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let tensor = Tensor::from_vec(&shape, data)?;
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    ImageDataset::new(name, tensor, labels, class_count)
}

/// Write a dataset as an IDX images/labels file pair. Single-channel data
/// uses the 3-dim layout, multi-channel the 4-dim one.
pub fn write_idx(dataset: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    dataset.validate()?;
    if dataset.class_count > 256 {
        return Err(Error::input(format!(
            "IDX labels are bytes; {} classes do not fit",
            dataset.class_count
        )));
    }
    let shape = dataset.images.shape();
    let dims: Vec<usize> = if shape[3] == 1 { shape[..3].to_vec() } else { shape.to_vec() };
    for d in &dims {
        if *d > u32::MAX as usize {
            return Err(Error::input(format!("dimension {d} exceeds the IDX u32 header")));
        }
    }

    let mut img_bytes = Vec::with_capacity(4 + 4 * dims.len() + dataset.images.len());
    img_bytes.extend_from_slice(&[0, 0, U8_DTYPE, dims.len() as u8]);
    for &d in &dims {
        img_bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img_bytes.extend(dataset.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    std::fs::write(images_path, img_bytes).map_err(|e| Error::io(images_path, e))?;

    let mut lbl_bytes = Vec::with_capacity(8 + dataset.len());
    lbl_bytes.extend_from_slice(&[0, 0, U8_DTYPE, 1]);
    lbl_bytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lbl_bytes.extend(dataset.labels.iter().map(|&l| l as u8));
    std::fs::write(labels_path, lbl_bytes).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
