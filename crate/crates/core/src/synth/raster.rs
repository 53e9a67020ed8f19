use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

/// 8-bit RGB raster, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Fills `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        let cx0 = x0.max(0) as usize;
        let cy0 = y0.max(0) as usize;
        let cx1 = x1.min(self.width as i64).max(0) as usize;
        let cy1 = y1.min(self.height as i64).max(0) as usize;
        for y in cy0..cy1 {
            for x in cx0..cx1 {
                self.set(x, y, c);
            }
        }
    }

    /// `3 x H x W` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * w * h + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, h, w], out).expect("consistent raster")
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("malformed PPM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not P6"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("no pixel data"))?;
        if data.len() != width * height * 3 {
            return Err(bad("pixel data length"));
        }
        Ok(RgbImage {
            width,
            height,
            data: data.to_vec(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// Pixels that differ, as `(x, y)`.
    pub fn diff_pixels(&self, other: &RgbImage) -> Vec<(usize, usize)> {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != other.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Tightest box around the pixels where `pred` holds, if any.
    pub fn bounding_box_where(&self, pred: impl Fn(usize, usize) -> bool) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if pred(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}
