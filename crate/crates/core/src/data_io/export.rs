//! Grayscale image export. Inputs are unit-range images; dB images are
//! normalised with [`super::normalize_db`] by the caller.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm8,
    Pgm16,
    Png8,
}

impl ImageFormat {
    /// Guesses the format from a file extension (`.pgm` is 8-bit).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(Self::Pgm8),
            "png" => Some(Self::Png8),
            _ => None,
        }
    }
}

/// `[0, 1] -> 0..=255`, rounding half to even.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round_ties_even() as u16
}

/// Writes a `[0, 1]` image; returns the file size in bytes.
pub fn export_image<T: Real>(image: &DenseArray<T>, path: impl AsRef<Path>, format: ImageFormat) -> Result<usize> {
    let (h, w) = image.dims2("export_image")?;
    let mut out = Vec::new();
    match format {
        ImageFormat::Pgm8 => {
            out.extend_from_slice(format!("P5 {w} {h} 255\n").as_bytes());
            out.extend(image.data().iter().map(|v| quantize_u8(v.as_f64())));
        }
        ImageFormat::Pgm16 => {
            out.extend_from_slice(format!("P5 {w} {h} 65535\n").as_bytes());
            for v in image.data() {
                out.extend_from_slice(&quantize_u16(v.as_f64()).to_be_bytes());
            }
        }
        ImageFormat::Png8 => {
            let pixels: Vec<u8> = image.data().iter().map(|v| quantize_u8(v.as_f64())).collect();
            let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder
                .write_header()
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writer
                .write_image_data(&pixels)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&out)?;
    file.flush()?;
    Ok(out.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm8_thirds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = DenseArray::new([2, 2], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let n = export_image(&img, &path, ImageFormat::Pgm8).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(n, bytes.len());
        let header = b"P5 2 2 255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 85, 170, 255]);
    }

    #[test]
    fn zero_image_is_zero_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        export_image(&DenseArray::<f32>::zeros([3, 4]), &path, ImageFormat::Pgm8).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[b"P5 4 3 255\n".len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 11 + 12);
    }

    #[test]
    fn round_half_even() {
        assert_eq!(quantize_u8(0.5), 128); // 127.5 -> 128
        assert_eq!(quantize_u8(0.5 / 255.0 * 3.0), 2); // 1.5 -> 2
        assert_eq!(quantize_u8(2.5 / 255.0), 2);
        assert_eq!(quantize_u8(-1.0), 0);
        assert_eq!(quantize_u8(7.0), 255);
    }

    #[test]
    fn pgm16_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = DenseArray::new([1, 2], vec![0.0f64, 1.0]).unwrap();
        let p16 = dir.path().join("a16.pgm");
        export_image(&img, &p16, ImageFormat::Pgm16).unwrap();
        let bytes = std::fs::read(&p16).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 255, 255]);

        let png_path = dir.path().join("a.png");
        export_image(&img, &png_path, ImageFormat::Png8).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&png_path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (2, 1));
        assert_eq!(&buf[..2], &[0, 255]);
    }
}
