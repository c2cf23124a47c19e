use serde::{Deserialize, Serialize};

use super::Plane;
use crate::error::Result;

/// Edge-preservation sigmoid constants and edge-strength exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QabfConstants {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    pub l: f64,
}

impl Default for QabfConstants {
    fn default() -> Self {
        Self { gamma_g: 0.9994, kappa_g: -15.0, sigma_g: 0.5, gamma_a: 0.9879, kappa_a: -22.0, sigma_a: 0.8, l: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QabfResult {
    pub value: f64,
    /// Neither source has any edge strength.
    pub degenerate: bool,
}

/// Sobel responses below this are rounding residue of an exactly flat
/// direction; snapping them keeps the orientation of a vertical edge from
/// flipping sign with summation order.
const FLAT: f64 = 1e-10;

/// Sobel strength and orientation per pixel (replicate border).
pub(crate) fn sobel_polar(img: &Plane) -> (Vec<f64>, Vec<f64>) {
    let snap = |v: f64| if v.abs() < FLAT { 0.0 } else { v };
    let mut g = Vec::with_capacity(img.data.len());
    let mut a = Vec::with_capacity(img.data.len());
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let p = |dy: isize, dx: isize| img.clamped(y + dy, x + dx);
            let gx = snap((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1)));
            let gy = snap((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1)));
            g.push((gx * gx + gy * gy).sqrt());
            a.push(if gx == 0.0 { std::f64::consts::FRAC_PI_2 } else { (gy / gx).atan() });
        }
    }
    (g, a)
}

fn preservation(gs: f64, as_: f64, gf: f64, af: f64, k: &QabfConstants) -> f64 {
    let g = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let alpha = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
    let qg = k.gamma_g / (1.0 + (k.kappa_g * (g - k.sigma_g)).exp());
    let qa = k.gamma_a / (1.0 + (k.kappa_a * (alpha - k.sigma_a)).exp());
    qg * qa
}

/// Edge-information transfer from sources `a`, `b` into `f`.
pub fn qabf(f: &Plane, a: &Plane, b: &Plane, k: &QabfConstants) -> Result<QabfResult> {
    f.same_shape(a, "qabf")?;
    f.same_shape(b, "qabf")?;
    let (gf, af) = sobel_polar(f);
    let (ga, aa) = sobel_polar(a);
    let (gb, ab) = sobel_polar(b);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.len() {
        let (wa, wb) = (ga[i].powf(k.l), gb[i].powf(k.l));
        num += preservation(ga[i], aa[i], gf[i], af[i], k) * wa + preservation(gb[i], ab[i], gf[i], af[i], k) * wb;
        den += wa + wb;
    }
    if den == 0.0 {
        return Ok(QabfResult { value: 0.0, degenerate: true });
    }
    Ok(QabfResult { value: num / den, degenerate: false })
}
