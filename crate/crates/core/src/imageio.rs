//! 8-bit PNG input and output. Pixel values map linearly between `0..=255`
//! and `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    reader
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn to_unit<T: Real>(v: u8) -> T {
    T::lit(v as f64 / 255.0)
}

/// Quantizes `[0, 1]` to `0..=255` by rounding; out-of-range values clamp.
pub fn to_byte<T: Real>(v: T) -> u8 {
    let v = v.to_f64_lossy();
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a colour image as `(3, H, W)`; grayscale files are replicated.
pub fn read_rgb<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(Shape::new(3, h as usize, w as usize), |c, y, x| {
        to_unit(img.get_pixel(x as u32, y as u32)[c])
    }))
}

/// Reads an infrared image as `(1, H, W)`. Colour files are accepted only
/// when every pixel has equal channels.
pub fn read_gray<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?;
    let gray = if img.color().has_color() {
        let rgb = img.to_rgb8();
        if let Some((x, y, _)) = rgb.enumerate_pixels().find(|(_, _, p)| p[0] != p[1] || p[1] != p[2]) {
            return Err(Error::Image(format!(
                "{}: infrared image has unequal colour channels at ({x}, {y})",
                path.display()
            )));
        }
        DynamicImage::ImageRgb8(rgb).to_luma8()
    } else {
        img.to_luma8()
    };
    let (w, h) = gray.dimensions();
    Ok(Tensor::from_fn(Shape::new(1, h as usize, w as usize), |_, y, x| {
        to_unit(gray.get_pixel(x as u32, y as u32)[0])
    }))
}

/// Writes a 1-channel tensor as grayscale or a 3-channel tensor as RGB.
pub fn write_png<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    let (w, h) = (s.w as u32, s.h as u32);
    let result = match s.c {
        1 => GrayImage::from_fn(w, h, |x, y| image::Luma([to_byte(t.at(0, y as usize, x as usize))])).save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            image::Rgb(std::array::from_fn(|c| to_byte(t.at(c, y as usize, x as usize))))
        })
        .save(path),
        c => return Err(Error::dim("image channels", 3, c)),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        e => Error::Image(format!("{}: {e}", path.display())),
    })
}
