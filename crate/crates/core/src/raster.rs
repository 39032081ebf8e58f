//! PNG reading and writing for label maps, layouts and generated images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported raster: {0}")]
    Unsupported(String),
}

/// A single-channel raster with 8- or 16-bit samples widened to `u16`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

pub fn read_gray(path: &Path) -> Result<GrayImage, RasterError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| {
        RasterError::Unsupported("image too large".into())
    })?];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(RasterError::Unsupported(format!(
            "{}: expected single-channel image, got {:?}",
            path.display(),
            info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&v| v as u16).collect(),
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        d => {
            return Err(RasterError::Unsupported(format!(
                "{}: bit depth {d:?}",
                path.display()
            )))
        }
    };
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

pub fn write_gray16(path: &Path, img: &GrayImage) -> Result<(), RasterError> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header()?;
    w.write_image_data(&bytes)?;
    Ok(())
}

pub fn write_gray8(path: &Path, img: &GrayImage) -> Result<(), RasterError> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| v.min(255) as u8).collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&bytes)?;
    Ok(())
}

/// Encodes interleaved 8-bit RGB as PNG bytes.
pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>, RasterError> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(rgb)?;
    }
    Ok(out)
}

/// Encodes an 8-bit indexed image with an RGB palette as PNG bytes.
pub fn encode_indexed(
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
) -> Result<Vec<u8>, RasterError> {
    assert_eq!(indices.len(), width * height);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
        let mut w = enc.write_header()?;
        w.write_image_data(indices)?;
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RasterError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Decodes an RGB or indexed PNG to interleaved RGB (used by tests and the
/// service client side).
pub fn decode_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), RasterError> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|c| [c[0], c[1], c[2]])
            .collect(),
        other => return Err(RasterError::Unsupported(format!("{other:?}"))),
    };
    Ok((w, h, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img = GrayImage {
            width: 3,
            height: 2,
            data: vec![0, 1, 300, 65535, 7, 8],
        };
        write_gray16(&p, &img).unwrap();
        assert_eq!(read_gray(&p).unwrap(), img);
        let p8 = dir.path().join("m8.png");
        let small = GrayImage {
            width: 2,
            height: 1,
            data: vec![3, 250],
        };
        write_gray8(&p8, &small).unwrap();
        assert_eq!(read_gray(&p8).unwrap(), small);
    }

    #[test]
    fn indexed_png_decodes_to_palette_colors() {
        let palette = [[10, 20, 30], [200, 100, 0]];
        let bytes = encode_indexed(2, 1, &[1, 0], &palette).unwrap();
        let (w, h, rgb) = decode_rgb(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(rgb, vec![200, 100, 0, 10, 20, 30]);
    }
}
