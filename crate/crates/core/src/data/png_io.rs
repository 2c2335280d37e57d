use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

/// Single-channel pixels as read from disk, before normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// 255 for 8-bit files, 65535 for 16-bit files.
    pub max_value: u16,
    pub data: Vec<u16>,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a PNG as grayscale. Color images are averaged over RGB; alpha is dropped.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(image_err(path, "unexpanded palette image")),
    };
    let wide = info.bit_depth == BitDepth::Sixteen;
    let sample = |row: &[u8], i: usize| -> u32 {
        if wide {
            u16::from_be_bytes([row[2 * i], row[2 * i + 1]]) as u32
        } else {
            row[i] as u32
        }
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let base = x * channels;
            let v = if channels >= 3 {
                (sample(row, base) + sample(row, base + 1) + sample(row, base + 2) + 1) / 3
            } else {
                sample(row, base)
            };
            data.push(v as u16);
        }
    }
    let max_value = match info.bit_depth {
        BitDepth::Sixteen => u16::MAX,
        _ => 255,
    };
    Ok(GrayImage {
        height: h,
        width: w,
        max_value,
        data,
    })
}

fn write_png(path: &Path, width: usize, height: usize, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, BitDepth::Eight, data)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, BitDepth::Sixteen, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.png");
        write_gray8(&p8, 3, 2, &[0, 1, 2, 253, 254, 255]).unwrap();
        let g = read_gray(&p8).unwrap();
        assert_eq!((g.height, g.width, g.max_value), (2, 3, 255));
        assert_eq!(g.data, vec![0, 1, 2, 253, 254, 255]);

        let p16 = dir.path().join("b.png");
        write_gray16(&p16, 2, 1, &[0, 65535]).unwrap();
        let g = read_gray(&p16).unwrap();
        assert_eq!((g.max_value, g.data.clone()), (65535, vec![0, 65535]));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_gray(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
