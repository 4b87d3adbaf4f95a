//! RGB raster images and the binary netpbm formats used on disk: PPM (P6)
//! for frames, PGM (P5) for exported attention maps. Maxval is fixed at 255.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::DataError;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        assert!(width > 0 && height > 0, "image extents must be positive");
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Image {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills the intersection of the given rectangle with the image.
    /// Coordinates may lie outside; the rectangle is clipped.
    pub fn fill_rect(&mut self, x0: isize, y0: isize, x1: isize, y1: isize, rgb: [u8; 3]) {
        let xs = x0.max(0) as usize;
        let ys = y0.max(0) as usize;
        let xe = (x1.min(self.width as isize)).max(0) as usize;
        let ye = (y1.min(self.height as isize)).max(0) as usize;
        for y in ys..ye {
            for x in xs..xe {
                self.set(x, y, rgb);
            }
        }
    }

    /// Mean of one channel over a clipped rectangle; `None` if empty.
    pub fn region_mean(&self, channel: usize, x0: isize, y0: isize, x1: isize, y1: isize) -> Option<f64> {
        let xs = x0.max(0) as usize;
        let ys = y0.max(0) as usize;
        let xe = (x1.min(self.width as isize)).max(0) as usize;
        let ye = (y1.min(self.height as isize)).max(0) as usize;
        if xs >= xe || ys >= ye {
            return None;
        }
        let mut sum = 0.0;
        for y in ys..ye {
            for x in xs..xe {
                sum += self.get(x, y)[channel] as f64;
            }
        }
        Some(sum / ((xe - xs) * (ye - ys)) as f64)
    }

    /// Converts to planar float layout `[3, H, W]`, values in [0, 1].
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0f32; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

const MAXVAL: u32 = 255;

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), DataError> {
    let mut bytes = format!("P6\n{} {}\n{}\n", img.width, img.height, MAXVAL).into_bytes();
    bytes.extend_from_slice(&img.data);
    write_file(path, &bytes)
}

/// Writes a grayscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), DataError> {
    assert_eq!(gray.len(), width * height, "pgm buffer size");
    let mut bytes = format!("P5\n{width} {height}\n{MAXVAL}\n").into_bytes();
    bytes.extend_from_slice(gray);
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingFrame { path: path.into() })
        }
        Err(e) => return Err(DataError::io(path, e)),
    };
    parse_ppm(&bytes).map_err(|e| match e {
        PpmError::Header(detail) => DataError::BadImage {
            path: path.into(),
            detail,
        },
        PpmError::Truncated { offset, expected } => DataError::TruncatedImage {
            path: path.into(),
            offset,
            expected,
        },
    })
}

enum PpmError {
    Header(String),
    Truncated { offset: usize, expected: usize },
}

/// Parses binary PPM: magic, three header integers (whitespace separated,
/// `#` comments allowed), one whitespace byte, then raw samples.
fn parse_ppm(bytes: &[u8]) -> Result<Image, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::Header("expected magic 'P6'".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        skip_space_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(PpmError::Header(format!(
                "expected integer at byte {start}"
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| PpmError::Header(format!("integer out of range at byte {start}")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PpmError::Header(format!(
            "image extents must be positive, got {width}x{height}"
        )));
    }
    if maxval != MAXVAL {
        return Err(PpmError::Header(format!(
            "unsupported maxval {maxval}, expected {MAXVAL}"
        )));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PpmError::Header(format!(
            "expected whitespace after header at byte {pos}"
        )));
    }
    pos += 1;
    let need = width as usize * height as usize * 3;
    let expected = pos + need;
    if bytes.len() < expected {
        return Err(PpmError::Truncated {
            offset: bytes.len(),
            expected,
        });
    }
    Ok(Image {
        width: width as usize,
        height: height as usize,
        data: bytes[pos..pos + need].to_vec(),
    })
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}
