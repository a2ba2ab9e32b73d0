use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::gradcore::Tensor;

use super::DatasetError;

/// Loads an 8-bit image as `H×W×3` values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 3], data).expect("rgb buffer matches its dimensions")
}

/// Quantizes an `H×W×3` image in `[0, 1]` to 8 bits (clamped, rounded).
pub fn to_rgb8(image: &Tensor<f32>) -> Result<RgbImage, DatasetError> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(DatasetError::Image(format!("expected 3 channels, got {c}")));
    }
    let raw = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer"))
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<(), DatasetError> {
    to_rgb8(image)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))
}

/// PNG bytes of an `H×W×3` image.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>, DatasetError> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(image)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| DatasetError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>, DatasetError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| DatasetError::Image(e.to_string()))?
        .to_rgb8();
    Ok(from_rgb8(&img))
}
