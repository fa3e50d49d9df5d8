//! Binary PGM (P5, 8-bit) reader/writer and the in-memory grayscale image
//! types shared across the pipeline.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        GrayImage { height, width, data: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }

    /// 256-bin intensity histogram.
    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        hist
    }

    /// Normalize to floats in [0,1].
    pub fn to_f32(&self) -> ImageF {
        ImageF {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }
}

/// Float grayscale image used for resizing and network input.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageF {
    pub fn new(height: usize, width: usize) -> Self {
        ImageF { height, width, data: vec![0.0; height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", image.width, image.height)?;
    file.write_all(&image.data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<Vec<u8>, String> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(bytes[start..*pos].to_vec())
    };

    if token(&mut pos)? != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let parse_num = |t: Vec<u8>| -> std::result::Result<usize, String> {
        std::str::from_utf8(&t)
            .map_err(|_| "bad header token".to_string())?
            .parse::<usize>()
            .map_err(|_| "bad header number".to_string())
    };
    let width = parse_num(token(&mut pos)?)?;
    let height = parse_num(token(&mut pos)?)?;
    let maxval = parse_num(token(&mut pos)?)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (expected 255)"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(format!("truncated pixel data: want {need}, have {}", bytes.len() - pos));
    }
    Ok(GrayImage { height, width, data: bytes[pos..pos + need].to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_exact() {
        let mut img = GrayImage::new(3, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 17 % 256) as u8;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_truncated_and_wrong_magic() {
        assert!(parse_pgm(b"P5\n4 4\n255\n123").is_err());
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn skips_comments() {
        let img = parse_pgm(b"P5\n# comment\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.data, vec![1, 2]);
    }
}
