//! Grayscale PGM (P2/P5) through the `image` crate. Reading maps 8-bit
//! values by `v / 255` (16-bit by `v / 65535`); writing emits 8-bit binary
//! P5 with `round(255 x)`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageError, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn convert(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::file(path, io),
        other => Error::format("PGM file", format!("{}: {other}", path.display())),
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut reader = ImageReader::open(path).map_err(|e| Error::file(path, e))?;
    reader.set_format(ImageFormat::Pnm);
    let img = reader.decode().map_err(|e| convert(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        _ => {
            return Err(Error::format(
                "PGM file",
                format!("{}: not a grayscale image", path.display()),
            ))
        }
    };
    Matrix::new(h, w, data)
}

/// 8-bit quantization used on export.
pub fn to_u8_pixels(x: &Matrix) -> Vec<u8> {
    x.as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_pgm(path: impl AsRef<Path>, x: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &to_u8_pixels(x),
            x.cols() as u32,
            x.rows() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| convert(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let x = Matrix::from_rows(&[[0.0, 1.0, 0.5], [0.2, 0.4, 0.6]]).unwrap();
        write_pgm(&p, &x).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let y = read_pgm(&p).unwrap();
        assert_eq!(y.shape(), (2, 3));
        assert_eq!(y.get(0, 1), 1.0);
        assert_eq!(y.get(0, 2), 128.0 / 255.0);
    }

    #[test]
    fn ascii_pgm_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        std::fs::write(&p, "P2\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(read_pgm(&p).unwrap().as_slice(), &[0.0, 1.0]);
        std::fs::write(&p, "not a pgm").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
        assert!(read_pgm(dir.path().join("missing.pgm"))
            .unwrap_err()
            .is_io());
    }
}
