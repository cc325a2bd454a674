//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Result, ScdError};

fn png_err(path: &Path, e: impl std::fmt::Display) -> ScdError {
    ScdError::Png(format!("{}: {e}", path.display()))
}

fn write(path: &Path, width: usize, height: usize, color: ColorType, palette: Option<&[[u8; 3]]>, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p.iter().flatten().copied().collect::<Vec<u8>>());
    }
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(data).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write(path, width, height, ColorType::Rgb, None, rgb)
}

pub fn write_gray(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write(path, width, height, ColorType::Grayscale, None, gray)
}

/// Palette image whose pixel values are indices into `palette`.
pub fn write_indexed(path: &Path, width: usize, height: usize, palette: &[[u8; 3]], indices: &[u8]) -> Result<()> {
    write(path, width, height, ColorType::Indexed, Some(palette), indices)
}

/// Decoded 8-bit image.
pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn read(path: &Path, transform: Transformations) -> Result<(Decoded, ColorType)> {
    let file = File::open(path)?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(png_err(path, format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((Decoded { width: info.width as usize, height: info.height as usize, channels, data: buf }, info.color_type))
}

/// RGB samples of any 8-bit colour or grey image (alpha dropped).
pub fn read_rgb(path: &Path) -> Result<Decoded> {
    let (d, color) = read(path, Transformations::EXPAND)?;
    let n = d.width * d.height;
    let data = match color {
        ColorType::Rgb => d.data,
        ColorType::Rgba => d.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ColorType::Grayscale => d.data.iter().flat_map(|&v| [v, v, v]).collect(),
        ColorType::GrayscaleAlpha => d.data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        ColorType::Indexed => return Err(png_err(path, "palette not expanded")),
    };
    debug_assert_eq!(data.len(), 3 * n);
    Ok(Decoded { channels: 3, data, ..d })
}

/// Raw single-channel values of an 8-bit greyscale or palette image
/// (palette indices are not expanded).
pub fn read_indices(path: &Path) -> Result<Decoded> {
    let (d, color) = read(path, Transformations::IDENTITY)?;
    match color {
        ColorType::Grayscale | ColorType::Indexed => Ok(d),
        other => Err(png_err(path, format!("label images must be single-channel, got {other:?}"))),
    }
}
