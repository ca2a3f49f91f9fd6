// SPDX-License-Identifier: MIT OR Apache-2.0

//! Upload decoding and patch tokenization.
//!
//! `decode_image → center_crop_square → resize_bilinear → normalize → patchify`.
//! Patches are ordered row-major over the grid and each patch is flattened
//! in (row, col, channel) order; projection weights depend on this order.

use image::{GenericImageView, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("unsupported image format (expected PNG or JPEG)")]
    UnsupportedFormat,
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("image side {side} is not divisible by patch size {patch}")]
    IndivisibleSide { side: usize, patch: usize },
    #[error("expected a square image, got {width}×{height}")]
    NotSquare { width: usize, height: usize },
    #[error("invalid image size {width}×{height}")]
    InvalidSize { width: usize, height: usize },
}

/// 8-bit RGB pixels, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height * 3 || width == 0 || height == 0 {
            return Err(ImageError::InvalidSize { width, height });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn uniform(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Decodes PNG or JPEG into RGB. Alpha is composited over white.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let format = image::guess_format(bytes).map_err(|_| ImageError::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ImageError::UnsupportedFormat);
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImageError::CorruptImage(e.to_string()))?;
    let (width, height) = decoded.dimensions();
    let rgba = decoded.to_rgba8();
    let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
    for px in rgba.pixels() {
        let alpha = u32::from(px[3]);
        for &c in &px.0[..3] {
            let blended = (u32::from(c) * alpha + 255 * (255 - alpha) + 127) / 255;
            pixels.push(blended as u8);
        }
    }
    ImageBuffer::new(width as usize, height as usize, pixels)
}

/// Crops the largest centered square.
pub fn center_crop_square(img: &ImageBuffer) -> ImageBuffer {
    let side = img.width.min(img.height);
    if img.width == img.height {
        return img.clone();
    }
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut pixels = Vec::with_capacity(side * side * 3);
    for y in y0..y0 + side {
        let start = (y * img.width + x0) * 3;
        pixels.extend_from_slice(&img.pixels[start..start + side * 3]);
    }
    ImageBuffer {
        width: side,
        height: side,
        pixels,
    }
}

/// Bilinear resize to `side × side` with half-pixel-centered sampling and
/// edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, side: usize) -> ImageBuffer {
    assert!(side >= 1, "resize target must be at least one pixel");
    if img.width == side && img.height == side {
        return img.clone();
    }
    let taps = |src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / side as f32;
        (0..side)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let xs = taps(img.width);
    let ys = taps(img.height);
    let mut pixels = Vec::with_capacity(side * side * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..3 {
                let top = f32::from(p00[c]) * (1.0 - fx) + f32::from(p01[c]) * fx;
                let bottom = f32::from(p10[c]) * (1.0 - fx) + f32::from(p11[c]) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer {
        width: side,
        height: side,
        pixels,
    }
}

/// Per-channel normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Float image with one row per pixel (`width·height × 3`).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Matrix,
}

pub fn normalize(img: &ImageBuffer, norm: &Normalization) -> NormalizedImage {
    assert!(norm.std.iter().all(|&s| s > 0.0), "normalization std must be positive");
    let data = img
        .pixels
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| (f32::from(px[c]) / 255.0 - norm.mean[c]) / norm.std[c]))
        .collect();
    NormalizedImage {
        width: img.width,
        height: img.height,
        pixels: Matrix::from_vec(img.width * img.height, 3, data).expect("3 channels per pixel"),
    }
}

/// Flattened patch vectors plus grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub grid_side: usize,
    pub patch_size: usize,
    /// `N × 3P²`, one row per patch.
    pub vectors: Matrix,
    /// Top-left pixel `(row, col)` of each patch.
    pub patch_origins: Vec<(usize, usize)>,
}

/// Grid geometry without the patch data, carried on traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_side: usize,
    pub patch_size: usize,
}

impl PatchMatrix {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            grid_side: self.grid_side,
            patch_size: self.patch_size,
        }
    }

    /// Inverse of [`patchify`].
    pub fn to_image(&self) -> NormalizedImage {
        let side = self.grid_side * self.patch_size;
        let p = self.patch_size;
        let mut pixels = Matrix::zeros(side * side, 3);
        for (idx, &(r0, c0)) in self.patch_origins.iter().enumerate() {
            let v = self.vectors.row(idx);
            for r in 0..p {
                for c in 0..p {
                    let dst = pixels.row_mut((r0 + r) * side + c0 + c);
                    dst.copy_from_slice(&v[(r * p + c) * 3..(r * p + c) * 3 + 3]);
                }
            }
        }
        NormalizedImage {
            width: side,
            height: side,
            pixels,
        }
    }
}

pub fn patchify(img: &NormalizedImage, patch_size: usize) -> Result<PatchMatrix, ImageError> {
    if img.width != img.height {
        return Err(ImageError::NotSquare {
            width: img.width,
            height: img.height,
        });
    }
    let side = img.width;
    if patch_size == 0 || side % patch_size != 0 {
        return Err(ImageError::IndivisibleSide {
            side,
            patch: patch_size,
        });
    }
    let p = patch_size;
    let grid = side / p;
    let mut data = Vec::with_capacity(side * side * 3);
    let mut origins = Vec::with_capacity(grid * grid);
    for gr in 0..grid {
        for gc in 0..grid {
            let (r0, c0) = (gr * p, gc * p);
            origins.push((r0, c0));
            for r in r0..r0 + p {
                for c in c0..c0 + p {
                    data.extend_from_slice(img.pixels.row(r * side + c));
                }
            }
        }
    }
    Ok(PatchMatrix {
        grid_side: grid,
        patch_size: p,
        vectors: Matrix::from_vec(grid * grid, 3 * p * p, data).expect("tiling covers the image"),
        patch_origins: origins,
    })
}

/// Full upload path: decode, center-crop, resize to `side`, normalize, patchify.
pub fn preprocess(
    bytes: &[u8],
    side: usize,
    patch_size: usize,
    norm: &Normalization,
) -> Result<PatchMatrix, ImageError> {
    let img = decode_image(bytes)?;
    let square = resize_bilinear(&center_crop_square(&img), side);
    patchify(&normalize(&square, norm), patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::ImageEncoder;

    fn png(width: u32, height: u32, rgba: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(rgba, width, height, image::ExtendedColorType::Rgba8)
            .unwrap();
        out
    }

    #[test]
    fn single_red_pixel() {
        let img = decode_image(&png(1, 1, &[255, 0, 0, 255])).unwrap();
        assert_eq!(img.pixels, vec![255, 0, 0]);
    }

    #[test]
    fn alpha_composites_over_white() {
        let img = decode_image(&png(2, 1, &[0, 0, 0, 0, 0, 0, 0, 128])).unwrap();
        assert_eq!(img.pixel(0, 0), [255, 255, 255]);
        // 255·127/255 = 127
        assert_eq!(img.pixel(1, 0), [127, 127, 127]);
    }

    #[test]
    fn grayscale_is_replicated() {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&[42], 1, 1, image::ExtendedColorType::L8)
            .unwrap();
        assert_eq!(decode_image(&out).unwrap().pixels, vec![42, 42, 42]);
    }

    #[test]
    fn truncated_and_foreign_streams() {
        let bytes = png(4, 4, &[9; 64]);
        assert!(matches!(
            decode_image(&bytes[..bytes.len() / 2]),
            Err(ImageError::CorruptImage(_))
        ));
        assert_eq!(decode_image(b"GIF89a......"), Err(ImageError::UnsupportedFormat));
        assert_eq!(decode_image(&[]), Err(ImageError::UnsupportedFormat));
    }

    #[test]
    fn resize_identity_and_checkerboard() {
        let img = ImageBuffer::new(2, 2, vec![0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0]).unwrap();
        assert_eq!(resize_bilinear(&img, 2), img);
        let one = resize_bilinear(&img, 1);
        // Bilinear at the center averages the four pixels: 127.5.
        for &v in &one.pixels {
            assert!((f32::from(v) - 127.5).abs() <= 0.5, "{v}");
        }
    }

    #[test]
    fn resize_uniform_stays_uniform() {
        let img = ImageBuffer::uniform(7, 5, [10, 200, 33]);
        let out = resize_bilinear(&img, 12);
        assert_eq!(out, ImageBuffer::uniform(12, 12, [10, 200, 33]));
    }

    #[test]
    fn center_crop_keeps_middle() {
        let mut pixels = Vec::new();
        for x in 0..4u8 {
            pixels.extend_from_slice(&[x, x, x]);
        }
        let img = ImageBuffer::new(4, 1, pixels).unwrap();
        let c = center_crop_square(&img);
        assert_eq!((c.width, c.height), (1, 1));
        assert_eq!(c.pixels, vec![1, 1, 1]);
    }

    #[test]
    fn normalize_endpoints() {
        let img = ImageBuffer::new(2, 1, vec![0, 255, 0, 255, 255, 255]).unwrap();
        let n = normalize(&img, &Normalization::default());
        assert_eq!(n.pixels.data(), &[-1.0, 1.0, -1.0, 1.0, 1.0, 1.0]);
        let centered = Normalization {
            mean: [51.0 / 255.0; 3],
            std: [0.25; 3],
        };
        let img = ImageBuffer::uniform(1, 1, [51, 51, 51]);
        assert!(normalize(&img, &centered).pixels.data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn default_grid_has_nine_patches() {
        let img = ImageBuffer::uniform(96, 96, [1, 2, 3]);
        let p = patchify(&normalize(&img, &Normalization::default()), 32).unwrap();
        assert_eq!(p.vectors.shape(), (9, 3072));
        assert_eq!(p.grid_side, 3);
        let first = p.vectors.row(0);
        assert!(p.vectors.iter_rows().all(|r| r == first));
    }

    #[test]
    fn flattening_order_row_col_channel() {
        // 4×4 image, value 10·row + col in channel 0, +100 / +200 in channels 1 and 2.
        let side = 4;
        let mut data = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let v = (10 * r + c) as f32;
                data.extend_from_slice(&[v, v + 100.0, v + 200.0]);
            }
        }
        let img = NormalizedImage {
            width: side,
            height: side,
            pixels: Matrix::from_vec(side * side, 3, data).unwrap(),
        };
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.patch_origins, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        assert_eq!(
            p.vectors.row(1),
            &[2., 102., 202., 3., 103., 203., 12., 112., 212., 13., 113., 213.]
        );
        assert_eq!(
            p.vectors.row(2),
            &[20., 120., 220., 21., 121., 221., 30., 130., 230., 31., 131., 231.]
        );
    }

    #[test]
    fn indivisible_side() {
        let img = normalize(&ImageBuffer::uniform(5, 5, [0, 0, 0]), &Normalization::default());
        assert_eq!(
            patchify(&img, 2),
            Err(ImageError::IndivisibleSide { side: 5, patch: 2 })
        );
    }
}
