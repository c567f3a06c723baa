use crate::error::{Error, Result};

/// Square grayscale raster, row-major, values in `[0, 1]`.
///
/// Background is 0 and strokes are bright.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    side: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::dim(format!(
                "{} pixels for a {side}x{side} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(GrayImage { side, pixels })
    }

    pub fn blank(side: usize) -> Self {
        GrayImage {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn constant(side: usize, v: f64) -> Self {
        GrayImage {
            side,
            pixels: vec![v.clamp(0.0, 1.0); side * side],
        }
    }

    /// Clamp arbitrary values into range.
    pub fn from_unclamped(side: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        GrayImage::new(side, pixels)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.side + col] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample at fractional pixel coordinates; outside is background.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let px = |r: f64, c: f64| -> f64 {
            if r < 0.0 || c < 0.0 || r >= self.side as f64 || c >= self.side as f64 {
                0.0
            } else {
                self.get(r as usize, c as usize)
            }
        };
        let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx;
        let bottom = px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Fraction of pixels at or above one half.
    pub fn foreground_fraction(&self) -> f64 {
        self.pixels.iter().filter(|&&v| v >= 0.5).count() as f64 / self.pixels.len() as f64
    }

    pub fn mse(&self, other: &GrayImage) -> f64 {
        assert_eq!(self.side, other.side);
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    /// Resize to `side × side` by bilinear interpolation over pixel centers.
    pub fn resize(&self, side: usize) -> GrayImage {
        if side == self.side {
            return self.clone();
        }
        let scale = self.side as f64 / side as f64;
        let max = (self.side - 1) as f64;
        let mut out = vec![0.0; side * side];
        for r in 0..side {
            for c in 0..side {
                let y = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let x = ((c as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(self.side - 1), (x0 + 1).min(self.side - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let v = self.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + self.get(y0, x1) * (1.0 - fy) * fx
                    + self.get(y1, x0) * fy * (1.0 - fx)
                    + self.get(y1, x1) * fy * fx;
                out[r * side + c] = v.clamp(0.0, 1.0);
            }
        }
        GrayImage { side, pixels: out }
    }
}
