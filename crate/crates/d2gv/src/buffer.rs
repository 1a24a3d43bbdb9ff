//! Pixel buffers shared by the rasterizer, the loss, and the metrics.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("image dimensions must be non-zero (got {width}x{height})")]
    ZeroDim { width: usize, height: usize },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// H x W x 3 row-major pixel grid in linear RGB. Values are unbounded floats;
/// clamping to [0,1] happens only at 8-bit export time.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(width: usize, height: usize) -> Result<Self, BufferError> {
        if width == 0 || height == 0 {
            return Err(BufferError::ZeroDim { width, height });
        }
        Ok(Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        })
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self, BufferError> {
        let mut buf = Self::zeros(width, height)?;
        for px in buf.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Ok(buf)
    }

    /// Build from a per-pixel closure `(x, y) -> rgb`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self, BufferError> {
        let mut buf = Self::zeros(width, height)?;
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                buf.set(x, y, v);
            }
        }
        Ok(buf)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), BufferError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(BufferError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// Box (area) downsample by integer factor `r` to ceil(dims / r).
    /// Boundary blocks that hang past the edge average only the covered pixels.
    pub fn area_downsample(&self, r: usize) -> ImageBuffer {
        assert!(r >= 1);
        if r == 1 {
            return self.clone();
        }
        let ow = self.width.div_ceil(r);
        let oh = self.height.div_ceil(r);
        let mut out = ImageBuffer::zeros(ow, oh).expect("nonzero dims");
        for oy in 0..oh {
            for ox in 0..ow {
                let x0 = ox * r;
                let y0 = oy * r;
                let x1 = (x0 + r).min(self.width);
                let y1 = (y0 + r).min(self.height);
                let mut acc = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = self.get(x, y);
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[2];
                    }
                }
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                out.set(ox, oy, [acc[0] / n, acc[1] / n, acc[2] / n]);
            }
        }
        out
    }

    /// Mean squared error across all channels.
    pub fn mse(&self, other: &Self) -> Result<f64, BufferError> {
        self.check_same_shape(other)?;
        let n = self.pixels.len() as f64;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        Ok(sum / n)
    }
}
