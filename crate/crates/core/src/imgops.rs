//! Differentiable image primitives: YCbCr conversion, Sobel magnitude,
//! gaussian-window SSIM and multi-scale SSIM. Inputs are N x C x H x W with
//! values nominally in [0, 1].

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Luma coefficients of the RGB <-> YCbCr transform (full range).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YCbCrStandard {
    #[default]
    Bt601,
    Bt709,
}

impl YCbCrStandard {
    fn kr_kb(self) -> (f64, f64) {
        match self {
            YCbCrStandard::Bt601 => (0.299, 0.114),
            YCbCrStandard::Bt709 => (0.2126, 0.0722),
        }
    }

    /// Forward matrix, rows (Y, Cb, Cr); the chroma rows get a +0.5 offset.
    pub fn forward_matrix(self) -> [[f64; 3]; 3] {
        let (kr, kb) = self.kr_kb();
        let kg = 1.0 - kr - kb;
        let cb = 0.5 / (1.0 - kb);
        let cr = 0.5 / (1.0 - kr);
        [[kr, kg, kb], [-kr * cb, -kg * cb, (1.0 - kb) * cb], [(1.0 - kr) * cr, -kg * cr, -kb * cr]]
    }

    pub fn inverse_matrix(self) -> [[f64; 3]; 3] {
        invert3(self.forward_matrix())
    }
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn require_channels<T: Real>(img: &Var<'_, T>, c: usize, op: &'static str) -> Result<Vec<usize>> {
    let s = img.shape();
    if s.len() != 4 || s[1] != c {
        return Err(Error::invalid(op, format!("expected N x {c} x H x W, got {s:?}")));
    }
    Ok(s)
}

fn color_transform<'t, T: Real>(img: Var<'t, T>, m: [[f64; 3]; 3], bias: [f64; 3]) -> Result<Var<'t, T>> {
    let tape = img.tape();
    let w = Tensor::from_f64(&[3, 3, 1, 1], &m.concat())?;
    let b = Tensor::from_f64(&[3], &bias)?;
    img.conv2d(tape.constant(w), Some(tape.constant(b)), 1, 0)
}

pub fn rgb_to_ycbcr<'t, T: Real>(img: Var<'t, T>, std: YCbCrStandard) -> Result<Var<'t, T>> {
    require_channels(&img, 3, "rgb_to_ycbcr")?;
    color_transform(img, std.forward_matrix(), [0.0, 0.5, 0.5])
}

pub fn ycbcr_to_rgb<'t, T: Real>(img: Var<'t, T>, std: YCbCrStandard) -> Result<Var<'t, T>> {
    require_channels(&img, 3, "ycbcr_to_rgb")?;
    let inv = std.inverse_matrix();
    // rgb = inv * (ycc - (0, .5, .5))
    let bias: [f64; 3] = std::array::from_fn(|i| -0.5 * (inv[i][1] + inv[i][2]));
    color_transform(img, inv, bias)
}

/// Luma plane (N x 1 x H x W) of an RGB batch.
pub fn luma<'t, T: Real>(img: Var<'t, T>, std: YCbCrStandard) -> Result<Var<'t, T>> {
    rgb_to_ycbcr(img, std)?.narrow(1, 0, 1)
}

/// RGB image from a fused luma plane and the chroma of `reference`.
pub fn recompose_with_chroma<'t, T: Real>(
    y: Var<'t, T>,
    reference: Var<'t, T>,
    std: YCbCrStandard,
) -> Result<Var<'t, T>> {
    require_channels(&y, 1, "recompose_with_chroma")?;
    let chroma = rgb_to_ycbcr(reference, std)?.narrow(1, 1, 2)?;
    ycbcr_to_rgb(Var::concat(&[y, chroma], 1)?, std)
}

/// `|G_x| + |G_y|` of a single-channel batch with the standard 3x3 Sobel
/// kernels and replicate padding; output has the input shape. Evaluated as
/// differences of shifted planes so flat regions give exactly zero.
pub fn sobel_magnitude<'t, T: Real>(ch: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = require_channels(&ch, 1, "sobel_magnitude")?;
    let (h, w) = (s[2], s[3]);
    if h < 3 || w < 3 {
        return Err(Error::invalid("sobel_magnitude", format!("needs H, W >= 3, got {s:?}")));
    }
    let p = ch.pad_replicate(1)?;
    let two = T::lit(2.0);
    // Horizontal difference, then [1, 2, 1] smoothing down the rows.
    let dx = p.narrow(3, 2, w)?.sub(p.narrow(3, 0, w)?)?;
    let gx = dx.narrow(2, 0, h)?.add(dx.narrow(2, 1, h)?.mul_scalar(two))?.add(dx.narrow(2, 2, h)?)?;
    let dy = p.narrow(2, 2, h)?.sub(p.narrow(2, 0, h)?)?;
    let gy = dy.narrow(3, 0, w)?.add(dy.narrow(3, 1, w)?.mul_scalar(two))?.add(dy.narrow(3, 2, w)?)?;
    gx.abs().add(gy.abs())
}

/// Sobel magnitude of every channel independently.
pub fn sobel_per_channel<'t, T: Real>(img: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = img.shape();
    if s.len() != 4 {
        return Err(Error::invalid("sobel_per_channel", format!("expected N x C x H x W, got {s:?}")));
    }
    sobel_magnitude(img.reshape(&[s[0] * s[1], 1, s[2], s[3]])?)?.reshape(&s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 0.01f64.powi(2), c2: 0.03f64.powi(2) }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid("ssim", format!("window {} must be odd", self.window)));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.sigma > 0.0) {
            return Err(Error::invalid("ssim", "c1, c2 and sigma must be positive"));
        }
        Ok(())
    }

    /// Normalized 1-D gaussian taps.
    pub fn gaussian(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Mean SSIM and mean contrast-structure term.
pub struct SsimParts<'t, T: Real> {
    pub ssim: Var<'t, T>,
    pub cs: Var<'t, T>,
}

/// Gaussian-weighted SSIM over valid window positions. Channels are scored
/// independently and averaged along with the batch.
pub fn ssim_parts<'t, T: Real>(x: Var<'t, T>, y: Var<'t, T>, p: &SsimParams) -> Result<SsimParts<'t, T>> {
    p.validate()?;
    let s = x.shape();
    if s != y.shape() {
        return Err(Error::shape("ssim", &s, &y.shape()));
    }
    if s.len() != 4 {
        return Err(Error::invalid("ssim", format!("expected N x C x H x W, got {s:?}")));
    }
    if p.window > s[2].min(s[3]) {
        return Err(Error::invalid("ssim", format!("window {} does not fit {}x{}", p.window, s[2], s[3])));
    }
    let tape = x.tape();
    let planes = s[0] * s[1];
    let flat = |v: Var<'t, T>| v.reshape(&[planes, 1, s[2], s[3]]);
    let (x, y) = (flat(x)?, flat(y)?);
    let stacked = Var::concat(&[x, y, x.square(), y.square(), x.mul(y)?], 0)?;
    let g = p.gaussian();
    let gh = tape.constant(Tensor::from_f64(&[1, 1, 1, p.window], &g)?);
    let gv = tape.constant(Tensor::from_f64(&[1, 1, p.window, 1], &g)?);
    let f = stacked.conv2d(gh, None, 1, 0)?.conv2d(gv, None, 1, 0)?;
    let part = |i: usize| f.narrow(0, i * planes, planes);
    let (mx, my, exx, eyy, exy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mx2 = mx.square();
    let my2 = my.square();
    let mxy = mx.mul(my)?;
    let vx = exx.sub(mx2)?;
    let vy = eyy.sub(my2)?;
    let cxy = exy.sub(mxy)?;
    let c1 = T::lit(p.c1);
    let c2 = T::lit(p.c2);
    let two = T::lit(2.0);
    let lum = mxy.mul_scalar(two).add_scalar(c1).div(mx2.add(my2)?.add_scalar(c1))?;
    let cs = cxy.mul_scalar(two).add_scalar(c2).div(vx.add(vy)?.add_scalar(c2))?;
    Ok(SsimParts { ssim: lum.mul(cs)?.mean(), cs: cs.mean() })
}

pub fn ssim<'t, T: Real>(x: Var<'t, T>, y: Var<'t, T>, p: &SsimParams) -> Result<Var<'t, T>> {
    Ok(ssim_parts(x, y, p)?.ssim)
}

/// Canonical five-scale exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest image side that supports `levels` scales with window `window`.
pub fn ms_ssim_min_size(levels: usize, window: usize) -> usize {
    window << levels.saturating_sub(1)
}

/// Multi-scale SSIM: contrast-structure terms at the finer scales, full SSIM
/// at the coarsest, combined as a weighted geometric product. Scales are
/// produced by 2x2 mean pooling; terms are clamped at zero before the power.
pub fn ms_ssim<'t, T: Real>(x: Var<'t, T>, y: Var<'t, T>, weights: &[f64], p: &SsimParams) -> Result<Var<'t, T>> {
    let levels = weights.len();
    if levels == 0 {
        return Err(Error::invalid("ms_ssim", "at least one level required"));
    }
    let s = x.shape();
    let min = ms_ssim_min_size(levels, p.window);
    if s.len() != 4 || s[2].min(s[3]) < min {
        return Err(Error::invalid(
            "ms_ssim",
            format!("{levels} levels with window {} need images of at least {min}x{min}, got {s:?}", p.window),
        ));
    }
    let (mut x, mut y) = (x, y);
    let mut acc: Option<Var<'t, T>> = None;
    for (l, &w) in weights.iter().enumerate() {
        let parts = ssim_parts(x, y, p)?;
        let term = if l + 1 == levels { parts.ssim } else { parts.cs };
        let term = term.relu().powf(T::lit(w));
        acc = Some(match acc {
            None => term,
            Some(a) => a.mul(term)?,
        });
        if l + 1 < levels {
            x = x.avg_pool2d(2)?;
            y = y.avg_pool2d(2)?;
        }
    }
    Ok(acc.expect("levels > 0"))
}

/// Largest level count (up to the weight vector's length) that fits an
/// image of side `side`, with the leading weights renormalized to sum to 1.
pub fn fitting_ms_ssim_weights(side: usize, window: usize, weights: &[f64]) -> Vec<f64> {
    let mut levels = weights.len();
    while levels > 1 && side < ms_ssim_min_size(levels, window) {
        levels -= 1;
    }
    let w = &weights[..levels];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}
