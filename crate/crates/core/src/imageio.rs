//! 8-bit RGB images: decoding, encoding, tensor conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decode a PNG or JPEG file.
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| {
            Error::Data(format!("cannot decode image {}: {e}", path.display()))
        })?;
        let rgb = decoded.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Image::new(w, h, rgb.into_raw())
    }

    /// Encode to the format implied by the file extension (PNG expected).
    pub fn save(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Data(format!("cannot encode image {}: {e}", path.display())))
    }

    /// Convert to a `[3, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = (y * w + x) * 3;
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] = self.data[px + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("sized above")
    }

    /// Clamp and quantize a `[3, H, W]` tensor in `[0, 1]` back to an image.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Dimension(format!(
                "expected [3, H, W] tensor, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut data = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = t.data()[ch * h * w + y * w + x];
                    data[(y * w + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Image::new(w, h, data)
    }
}

/// Stack per-image `[3, H, W]` tensors into a `[N, 3, H, W]` batch.
pub fn stack_batch(tensors: &[Tensor]) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        if t.shape() != first {
            return Err(Error::Dimension(format!(
                "batch images disagree: {:?} vs {first:?}",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(&first);
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_preserves_bytes() {
        let mut img = Image::filled(4, 3, [10, 20, 30]);
        img.set_pixel(2, 1, [200, 100, 50]);
        let back = Image::from_tensor(&img.to_tensor()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn white_image_scales_to_ones() {
        let img = Image::filled(2, 2, [255, 255, 255]);
        assert!(img.to_tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stack_builds_nchw() {
        let t = Image::filled(5, 4, [0, 0, 0]).to_tensor();
        let batch = stack_batch(&[t.clone(), t.clone(), t]).unwrap();
        assert_eq!(batch.shape(), &[3, 3, 4, 5]);
    }
}
