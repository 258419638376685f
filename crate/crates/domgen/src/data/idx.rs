//! IDX image/label files (the classic big-endian format used by digit
//! benchmarks). Pixels are stored as bytes; loading maps them to [0, 1]
//! by dividing by 255, and writing rounds back, so a load → write cycle
//! preserves the byte stream exactly.

use std::io::{Read, Write};

use super::corpus::{LabeledImage, IMG_SIDE};
use crate::error::{Result, RunError};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, offset: &mut usize, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| {
        RunError::data(format!("truncated {} at byte offset {}", what, offset))
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image file: (images, rows, cols). Malformed input is
/// reported with the byte offset where parsing failed.
pub fn load_idx_images(mut r: impl Read) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let mut off = 0usize;
    let magic = read_u32_be(&mut r, &mut off, "image header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(RunError::data(format!(
            "bad image magic {:#010x} at byte offset 0 (want {:#010x})",
            magic, IDX_IMAGE_MAGIC
        )));
    }
    let n = read_u32_be(&mut r, &mut off, "image count")? as usize;
    let rows = read_u32_be(&mut r, &mut off, "row count")? as usize;
    let cols = read_u32_be(&mut r, &mut off, "col count")? as usize;
    let per = rows
        .checked_mul(cols)
        .filter(|&p| p > 0 && p <= 1 << 20)
        .ok_or_else(|| {
            RunError::data(format!("implausible image dims {}×{} at byte offset 8", rows, cols))
        })?;
    if n > 1 << 24 {
        return Err(RunError::data(format!(
            "implausible image count {} at byte offset 4",
            n
        )));
    }

    let mut images = Vec::with_capacity(n);
    let mut buf = vec![0u8; per];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|_| {
            RunError::data(format!("truncated image data at byte offset {}", off))
        })?;
        off += per;
        images.push(buf.iter().map(|&b| b as f32 / 255.0).collect());
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).unwrap_or(0) != 0 {
        return Err(RunError::data(format!(
            "trailing bytes after image data at byte offset {}",
            off
        )));
    }
    Ok((images, rows, cols))
}

/// Loads an IDX label file.
pub fn load_idx_labels(mut r: impl Read) -> Result<Vec<u8>> {
    let mut off = 0usize;
    let magic = read_u32_be(&mut r, &mut off, "label header")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(RunError::data(format!(
            "bad label magic {:#010x} at byte offset 0 (want {:#010x})",
            magic, IDX_LABEL_MAGIC
        )));
    }
    let n = read_u32_be(&mut r, &mut off, "label count")? as usize;
    if n > 1 << 24 {
        return Err(RunError::data(format!(
            "implausible label count {} at byte offset 4",
            n
        )));
    }
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels).map_err(|_| {
        RunError::data(format!("truncated label data at byte offset {}", off))
    })?;
    off += n;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).unwrap_or(0) != 0 {
        return Err(RunError::data(format!(
            "trailing bytes after label data at byte offset {}",
            off
        )));
    }
    Ok(labels)
}

/// Loads a paired image/label IDX file set into labeled 28×28 images.
pub fn load_idx(images: impl Read, labels: impl Read) -> Result<Vec<LabeledImage>> {
    let (imgs, rows, cols) = load_idx_images(images)?;
    if rows != IMG_SIDE || cols != IMG_SIDE {
        return Err(RunError::data(format!(
            "expected {}x{} images, file holds {}x{}",
            IMG_SIDE, IMG_SIDE, rows, cols
        )));
    }
    let lbls = load_idx_labels(labels)?;
    if imgs.len() != lbls.len() {
        return Err(RunError::data(format!(
            "{} image(s) but {} label(s)",
            imgs.len(),
            lbls.len()
        )));
    }
    Ok(imgs
        .into_iter()
        .zip(lbls)
        .map(|(pixels, label)| LabeledImage { pixels, label: label as usize })
        .collect())
}

/// Writes images (intensities in [0, 1]) as an IDX image file.
pub fn write_idx_images(
    mut w: impl Write,
    images: &[Vec<f32>],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let per = rows * cols;
    for (i, img) in images.iter().enumerate() {
        if img.len() != per {
            return Err(RunError::data(format!(
                "image {} has {} pixels, expected {}",
                i,
                img.len(),
                per
            )));
        }
    }
    w.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    w.write_all(&(images.len() as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    let mut buf = Vec::with_capacity(per);
    for img in images {
        buf.clear();
        buf.extend(img.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Writes labels as an IDX label file.
pub fn write_idx_labels(mut w: impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}
