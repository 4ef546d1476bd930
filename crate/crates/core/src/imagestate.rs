//! Pixel tensor with value bounds, stored in `[0, 255]` units.
//!
//! Pixels live in the attack's units; the model scales by 1/255 inside its
//! image encoder. Patch extraction and its inverse are exact index maps, so
//! gradients flow back to pixel coordinates without loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 255.0;

/// Image pixels, row-major `H x W x C`, every value within `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageState {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageState {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::BadDimension {
                op: "ImageState::new",
                expected: format!("{} pixels", height * width * channels),
                actual: pixels.len().to_string(),
            });
        }
        if let Some(&bad) = pixels
            .iter()
            .find(|p| !p.is_finite() || **p < PIXEL_MIN || **p > PIXEL_MAX)
        {
            return Err(Error::BadDimension {
                op: "ImageState::new",
                expected: "pixel in [0, 255]".to_string(),
                actual: bad.to_string(),
            });
        }
        Ok(ImageState {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Mid-gray clean image, the attack's starting point.
    pub fn clean(height: usize, width: usize, channels: usize) -> Self {
        ImageState {
            height,
            width,
            channels,
            pixels: vec![128.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    /// Dimensionality d = H * W * C.
    pub fn dim(&self) -> usize {
        self.pixels.len()
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn clip_in_place(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(PIXEL_MIN, PIXEL_MAX);
        }
    }

    /// Add an offset tensor (same extents) and clip back to the valid range.
    pub fn offset_clipped(&self, offsets: &[f64]) -> Self {
        debug_assert_eq!(offsets.len(), self.pixels.len());
        let pixels = self
            .pixels
            .iter()
            .zip(offsets)
            .map(|(&p, &o)| (p + o).clamp(PIXEL_MIN, PIXEL_MAX))
            .collect();
        ImageState {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }
    }

    pub fn in_range(&self) -> bool {
        self.pixels
            .iter()
            .all(|&p| (PIXEL_MIN..=PIXEL_MAX).contains(&p))
    }

    /// Extract non-overlapping square patches as a `[n_patches, patch*patch*C]`
    /// tensor, patches ordered row-major over the patch grid.
    pub fn patches<E: Element>(&self, patch: usize) -> Result<Tensor<E>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::BadDimension {
                op: "ImageState::patches",
                expected: format!("patch size dividing {}x{}", self.height, self.width),
                actual: patch.to_string(),
            });
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let pdim = patch * patch * self.channels;
        let mut data = Vec::with_capacity(gh * gw * pdim);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        for c in 0..self.channels {
                            let idx = (y * self.width + x) * self.channels + c;
                            data.push(E::from_f64_lossy(self.pixels[idx]));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, pdim], data)
    }

    /// Inverse of [`ImageState::patches`] for gradient tensors: scatter a
    /// `[n_patches, patch*patch*C]` tensor back into image layout.
    pub fn unpatchify<E: Element>(&self, grad: &Tensor<E>, patch: usize) -> Result<Vec<f64>> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let pdim = patch * patch * self.channels;
        if grad.shape() != [gh * gw, pdim] {
            return Err(Error::BadDimension {
                op: "ImageState::unpatchify",
                expected: format!("[{}, {}]", gh * gw, pdim),
                actual: format!("{:?}", grad.shape()),
            });
        }
        let mut out = vec![0.0; self.pixels.len()];
        for py in 0..gh {
            for px in 0..gw {
                let row = grad.row(py * gw + px);
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        for c in 0..self.channels {
                            let idx = (y * self.width + x) * self.channels + c;
                            out[idx] = row[k].as_f64();
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encode as a lossless 8-bit PNG (grayscale for 1 channel, RGB for 3).
    /// Pixels are rounded to the nearest integer on write.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| to_u8(p)).collect();
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        let color = match self.channels {
            1 => image::ColorType::L8,
            3 => image::ColorType::Rgb8,
            c => {
                return Err(Error::BadDimension {
                    op: "ImageState::to_png_bytes",
                    expected: "1 or 3 channels".to_string(),
                    actual: c.to_string(),
                })
            }
        };
        image::ImageEncoder::write_image(
            encoder,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Artifact {
            path: "<png>".into(),
            message: e.to_string(),
        })?;
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
            |e| Error::Artifact {
                path: "<png>".into(),
                message: e.to_string(),
            },
        )?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let pixels = g.into_raw().into_iter().map(f64::from).collect();
                ImageState::new(h, w, 1, pixels)
            }
            image::DynamicImage::ImageRgb8(g) => {
                let pixels = g.into_raw().into_iter().map(f64::from).collect();
                ImageState::new(h, w, 3, pixels)
            }
            other => {
                let g = other.to_luma8();
                let pixels = g.into_raw().into_iter().map(f64::from).collect();
                ImageState::new(h, w, 1, pixels)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_roundtrip_is_exact() {
        let pixels: Vec<f64> = (0..64).map(|i| f64::from(i as u8)).collect();
        let img = ImageState::new(8, 8, 1, pixels.clone()).unwrap();
        let patches = img.patches::<f64>(4).unwrap();
        assert_eq!(patches.shape(), &[4, 16]);
        let back = img.unpatchify(&patches, 4).unwrap();
        assert_eq!(back, pixels);
    }

    #[test]
    fn eight_by_eight_has_four_patches() {
        let img = ImageState::clean(8, 8, 1);
        assert_eq!(img.patches::<f64>(4).unwrap().rows(), 4);
    }

    #[test]
    fn png_roundtrip_on_integral_pixels() {
        let pixels: Vec<f64> = (0..64).map(|i| f64::from((i * 3 % 256) as u8)).collect();
        let img = ImageState::new(8, 8, 1, pixels).unwrap();
        let bytes = img.to_png_bytes().unwrap();
        let back = ImageState::from_png_bytes(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageState::new(1, 1, 1, vec![256.0]).is_err());
        assert!(ImageState::new(1, 1, 1, vec![-0.5]).is_err());
        assert!(ImageState::new(1, 1, 1, vec![f64::NAN]).is_err());
    }
}
