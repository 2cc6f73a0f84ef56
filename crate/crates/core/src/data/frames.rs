//! Binary PPM (P6, 8-bit RGB) frames named `frame_000001.ppm`, ... .

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{Error, Result};

/// Interleaved RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3, "frame buffer size");
        Frame {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Frame::new(width, height, pixels)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, ch: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + ch]
    }
}

/// Path of the frame with zero-based index `index` (files are numbered from 1).
pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{:06}.ppm", index + 1))
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let err = |msg: String| Error::Frame {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| err(e.to_string()))?;
    if decoder.subtype() != PnmSubtype::Pixmap(SampleEncoding::Binary) {
        return Err(err("not a binary PPM (P6) file".into()));
    }
    if decoder.color_type() != ColorType::Rgb8 {
        return Err(err(format!("expected 8-bit RGB, found {:?}", decoder.color_type())));
    }
    let (w, h) = decoder.dimensions();
    let mut pixels = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut pixels).map_err(|e| err(e.to_string()))?;
    Ok(Frame::new(w as usize, h as usize, pixels))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            &frame.pixels,
            frame.width as u32,
            frame.height as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Frame {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Number of consecutive frames `frame_000001.ppm`, `frame_000002.ppm`, ...
/// present in `dir`.
pub fn count_frames(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut n = 0;
    while frame_path(dir, n).is_file() {
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_naming() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::new(3, 2, (0..18).collect());
        let p = frame_path(dir.path(), 0);
        assert!(p.ends_with("frame_000001.ppm"));
        write_frame(&p, &f).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..2], b"P6");
        assert_eq!(read_frame(&p).unwrap(), f);
        assert_eq!(count_frames(dir.path()).unwrap(), 1);
        assert_eq!(f.at(2, 1, 0), 15);
    }

    #[test]
    fn corrupt_frame_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("frame_000001.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\nabc").unwrap();
        let e = read_frame(&p).unwrap_err().to_string();
        assert!(e.contains("frame_000001.ppm"), "{e}");
        let missing = read_frame(&dir.path().join("nope.ppm")).unwrap_err().to_string();
        assert!(missing.contains("nope.ppm"));
    }
}
