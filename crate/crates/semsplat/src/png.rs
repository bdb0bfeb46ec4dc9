//! 8-bit PNG images (sRGB) and instance masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use semsplat_core::{IdMask, Image};

use crate::error::{IoError, Result};

pub fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> u8 {
    let c = v.clamp(0.0, 1.0);
    let s = if c <= 0.003_130_8 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 };
    (s * 255.0).round() as u8
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => IoError::io(path, io),
        other => IoError::format(path, other.to_string()),
    })
}

fn save(path: &Path, img: &DynamicImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| IoError::format(path, e.to_string()))
}

/// Reads an sRGB image and removes the transfer curve.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let rgb = match open(path)? {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(i) => DynamicImage::ImageRgba8(i).to_rgb8(),
        DynamicImage::ImageLuma8(i) => DynamicImage::ImageLuma8(i).to_rgb8(),
        other => return Err(IoError::format(path, format!("expected 8-bit color, found {:?}", other.color()))),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(srgb_to_linear).collect();
    Ok(Image::from_vec(w, h, 3, data).expect("decoded buffer matches its size"))
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(IoError::format(path, "color images have three channels"));
    }
    let raw = img.data().iter().map(|v| linear_to_srgb(*v)).collect();
    let buf: RgbImage = ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("sized");
    save(path, &DynamicImage::ImageRgb8(buf))
}

/// Writes three channels in [0, 1] without a transfer curve (visualizations).
pub fn write_rgb_raw(path: &Path, img: &Image) -> Result<()> {
    let raw = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("sized");
    save(path, &DynamicImage::ImageRgb8(buf))
}

/// Reads a single-channel 8-bit mask; the pixel value is the instance id.
pub fn read_mask(path: &Path) -> Result<IdMask> {
    match open(path)? {
        DynamicImage::ImageLuma8(i) => {
            let (w, h) = (i.width() as usize, i.height() as usize);
            Ok(IdMask::from_vec(w, h, 1, i.into_raw()).expect("decoded buffer matches its size"))
        }
        other => Err(IoError::format(path, format!("masks must be 8-bit single channel, found {:?}", other.color()))),
    }
}

pub fn write_mask(path: &Path, mask: &IdMask) -> Result<()> {
    let buf: GrayImage =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec()).expect("sized");
    save(path, &DynamicImage::ImageLuma8(buf))
}

/// Writes a single channel in [0, 1] as 8-bit gray.
pub fn write_gray(path: &Path, img: &Image) -> Result<()> {
    let raw = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("sized");
    save(path, &DynamicImage::ImageLuma8(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_curve_inverts_every_code() {
        for v in 0..=255u8 {
            assert_eq!(linear_to_srgb(srgb_to_linear(v)), v);
        }
        assert_eq!(srgb_to_linear(0), 0.0);
        assert_eq!(srgb_to_linear(255), 1.0);
    }
}
