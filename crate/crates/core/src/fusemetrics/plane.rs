use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::imgops::YCbCrStandard;

/// Single-channel f64 image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid("plane", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Replicate-clamped access.
    pub fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    pub fn same_shape(&self, other: &Plane, op: &'static str) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::shape(op, &[self.h, self.w], &[other.h, other.w]));
        }
        Ok(())
    }

    /// 8-bit bin index of each pixel: `round(255 v)` clamped to [0, 255].
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Y channel of sample `b` of an N x 3 x H x W tensor (or the only
    /// channel of an N x 1 x H x W tensor).
    pub fn luma_of(t: &Tensor<f32>, b: usize, std: YCbCrStandard) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || !(s[1] == 1 || s[1] == 3) || b >= s[0] {
            return Err(Error::invalid("luma_of", format!("expected N x 3 x H x W, got {s:?} (sample {b})")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let hw = h * w;
        let base = &t.data()[b * c * hw..(b + 1) * c * hw];
        let data = if c == 1 {
            base.iter().map(|&v| v as f64).collect()
        } else {
            let k = std.forward_matrix()[0];
            (0..hw)
                .map(|i| k[0] * base[i] as f64 + k[1] * base[hw + i] as f64 + k[2] * base[2 * hw + i] as f64)
                .collect()
        };
        Ok(Self { h, w, data })
    }
}
