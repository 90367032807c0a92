//! 8-bit image files to and from `[0, 1]` tensors. PNG and binary PPM/PGM
//! are supported; gray files give one channel, color files three.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use nasdip::archgraph::Shape;
use nasdip::autodiff::Tensor;

use crate::CliError;

fn open(path: &Path) -> Result<DynamicImage, CliError> {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?
        .decode()
        .map_err(|e| CliError::Usage(format!("cannot decode {}: {e}", path.display())))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>, CliError> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = if img.color().has_color() {
        (3, img.into_rgb8().into_raw())
    } else {
        (1, img.into_luma8().into_raw())
    };
    Ok(from_interleaved(channels, h, w, &bytes))
}

/// Reads a mask as one channel: 1 where any channel is nonzero, else 0.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>, CliError> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgba = img.into_rgba8();
    let data = rgba
        .pixels()
        .map(|p| if p.0[..3].iter().any(|&v| v != 0) { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(Shape::new(1, h, w), data))
}

fn from_interleaved(channels: usize, h: usize, w: usize, bytes: &[u8]) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(channels, h, w), |c, y, x| {
        f32::from(bytes[(y * w + x) * channels + c]) / 255.0
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a one- or three-channel tensor. The format follows the file
/// extension: `.png`, or `.ppm`/`.pgm`/`.pnm` for binary netpbm.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), CliError> {
    let s = image.shape;
    let color = match s.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(CliError::Run(format!("cannot write a {c}-channel image"))),
    };
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "png" => ImageFormat::Png,
        Some(e) if e == "ppm" || e == "pgm" || e == "pnm" => ImageFormat::Pnm,
        _ => {
            return Err(CliError::Usage(format!(
                "{}: output must end in .png, .ppm, .pgm or .pnm",
                path.display()
            )))
        }
    };
    let mut bytes = Vec::with_capacity(s.numel());
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                bytes.push(quantize(image.at(c, y, x)));
            }
        }
    }
    image::save_buffer_with_format(path, &bytes, s.width as u32, s.height as u32, color, format)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}
