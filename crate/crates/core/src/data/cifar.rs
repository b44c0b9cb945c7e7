use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const CHANNELS: usize = 3;
const PIXELS: usize = SIDE * SIDE * CHANNELS;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + PIXELS;
const CLASSES: usize = 10;

fn ingestion(offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Decodes a concatenation of CIFAR-10 records held in memory.
pub fn decode_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(ingestion(
            whole,
            format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD_BYTES}",
                bytes.len() - whole
            ),
        ));
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(records * PIXELS);
    let mut labels = Vec::with_capacity(records);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(ingestion(r * CIFAR_RECORD_BYTES, format!("label byte {label} exceeds 9")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Reads one or more CIFAR-10 batch files, preserving record order.
pub fn read_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let (p, l) = decode_cifar10(&bytes).map_err(|e| match e {
            Error::Ingestion { offset, reason } => Error::Ingestion {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(ingestion(0, "no records"));
    }
    let images = Tensor::new(vec![labels.len(), CHANNELS, SIDE, SIDE], pixels)?;
    LabeledImageSet::new("cifar10", CLASSES, images, labels)
}

/// Encodes a 3x32x32, 10-class set; pixels are rounded to the nearest
/// 1/255 step.
pub fn encode_cifar10(set: &LabeledImageSet) -> Result<Vec<u8>> {
    if set.image_shape() != [CHANNELS, SIDE, SIDE] || set.classes > CLASSES {
        return Err(Error::Usage(format!(
            "CIFAR-10 records hold 3x32x32 images with at most 10 classes, got {:?} / {}",
            set.image_shape(),
            set.classes
        )));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD_BYTES);
    for (i, &label) in set.labels().iter().enumerate() {
        out.push(label as u8);
        let img = &set.images().data()[i * PIXELS..(i + 1) * PIXELS];
        out.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar10(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cifar10(set)?)?;
    Ok(())
}
