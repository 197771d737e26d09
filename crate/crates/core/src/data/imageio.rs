use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, Luma};

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

/// Loads an 8-bit grayscale image as `1×H×W` in `[0, 1]`, resampling to
/// `size` (height, width) when the stored image differs.
pub fn read_gray_png(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let mut img = open(path)?.to_luma8();
    if let Some((h, w)) = size {
        if img.height() as usize != h || img.width() as usize != w {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Loads a mask PNG; pixels `>= 128` are foreground.
pub fn read_mask_png(path: &Path, size: Option<(usize, usize)>) -> Result<Mask> {
    let mut img = open(path)?.to_luma8();
    if let Some((h, w)) = size {
        if img.height() as usize != h || img.width() as usize != w {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Mask::from_fn(h, w, |y, x| {
        img.get_pixel(x as u32, y as u32).0[0] >= 128
    }))
}

pub fn write_gray_png(path: &Path, image: &Tensor) -> Result<()> {
    let (_, h, w) = image.dims3()?;
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (image.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let mut img = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            img.put_pixel(
                x as u32,
                y as u32,
                Luma([if mask.get(y, x) { 255 } else { 0 }]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}
