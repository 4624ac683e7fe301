//! 8-bit grayscale PNG input and output for `S x S` images in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Quantise to 8 bits (values are clamped to `[0, 1]` first).
pub fn to_gray8(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank(2)?;
    Ok(image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image.matrix_dims()?;
    let pixels = to_gray8(image)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&pixels).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Read a PNG as an `H x W` image in `[0, 1]`; colour images are reduced to
/// luminance and alpha is ignored.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let data = bytes
        .chunks_exact(channels)
        .map(|px| {
            let v = match channels {
                1 | 2 => px[0] as f32,
                _ => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
            };
            v / 255.0
        })
        .collect();
    Tensor::new(vec![h, w], data)
}
