use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in full-image pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Midpoint `(x + w/2, y + h/2)`.
    pub fn midpoint(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BoundingBox {
            x,
            y,
            w: self.right().max(other.right()) - x,
            h: self.bottom().max(other.bottom()) - y,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        if self.right() > width || self.bottom() > height {
            return Err(Error::Input(format!(
                "box {self:?} exceeds {width}x{height} image"
            )));
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(
            "prepare_inputs",
            format!("image must be C x H x W, got {:?}", image.shape()),
        )),
    }
}

/// Copies the pixels under `bbox` out of a `C x H x W` image.
pub fn crop(image: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    bbox.validate(w, h)?;
    let mut out = Vec::with_capacity(c * bbox.area());
    for ch in 0..c {
        for y in bbox.y..bbox.bottom() {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&image.data()[row + bbox.x..row + bbox.right()]);
        }
    }
    Tensor::new(&[c, bbox.h, bbox.w], out)
}

/// Bilinear resampling with half-pixel centers: output pixel `i` samples
/// source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Target input (box crop) and context input (whole image), both resized to
/// `side x side`. `image` holds values in `[0, 1]`.
pub fn prepare_inputs(image: &Tensor, bbox: &BoundingBox, side: usize) -> Result<(Tensor, Tensor)> {
    let target = resize_bilinear(&crop(image, bbox)?, side, side)?;
    let context = resize_bilinear(image, side, side)?;
    Ok((target, context))
}
