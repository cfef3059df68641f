//! 8-bit RGB PNG reading and writing for `H × W × 3` arrays.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::rasterizer::quantize_u8;

pub fn to_u8(img: ArrayView3<'_, f32>) -> Array3<u8> {
    img.mapv(quantize_u8)
}

pub fn to_f32(img: ArrayView3<'_, u8>) -> Array3<f32> {
    img.mapv(|v| f32::from(v) / 255.0)
}

pub fn write_png(path: &Path, img: ArrayView3<'_, u8>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::shape("image channels", 3, c));
    }
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([img[[r, c, 0]], img[[r, c, 1]], img[[r, c, 2]]])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        img.get_pixel(c as u32, r as u32)[k]
    }))
}
