use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::modulation::TaskId;
use crate::numerics::Tensor;

/// One line of a dataset manifest: enough to regenerate a [`SamplePair`](super::SamplePair).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub seed: u64,
    pub task: TaskId,
    /// `[height, width]`.
    pub size: [usize; 2],
}

pub fn write_manifest(path: &Path, entries: &[DatasetEntry]) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(entries)?;
    json.push(b'\n');
    fsutil::write_atomic(path, &json)
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    Ok(serde_json::from_slice(&fsutil::read(path)?)?)
}

/// Loads an 8-bit image as a `3 × H × W` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fsutil::read(path)?;
    let img = image::load_from_memory(&bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Writes a `3 × H × W` tensor as 8-bit RGB PNG (values clamped and rounded).
pub fn write_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = *x.shape() else {
        return Err(Error::Dimension(format!(
            "PNG output needs a 3×H×W image, got {:?}",
            x.shape()
        )));
    };
    let n = h * w;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px[c] = (x.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    fsutil::write_atomic(path, &bytes)
}
