use serde::{Deserialize, Serialize};

use super::Plane;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VifParams {
    pub scales: usize,
    /// Visual noise variance on the 0..255 pixel scale.
    pub sigma_n2: f64,
}

impl Default for VifParams {
    fn default() -> Self {
        Self { scales: 4, sigma_n2: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VifResult {
    pub value: f64,
    /// Some band was skipped (window larger than the image, or a source band
    /// without variance).
    pub degenerate: bool,
}

/// Normalized n x n gaussian with sigma n / 5.
fn window(n: usize) -> Vec<f64> {
    let s = n as f64 / 5.0;
    let r = (n / 2) as f64;
    let mut w: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - r, (i % n) as f64 - r);
            (-(x * x + y * y) / (2.0 * s * s)).exp()
        })
        .collect();
    let t: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= t);
    w
}

fn filter_valid(img: &Plane, win: &[f64], n: usize) -> Plane {
    let (h, w) = (img.h + 1 - n, img.w + 1 - n);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..n {
                for dx in 0..n {
                    acc += win[dy * n + dx] * img.at(y + dy, x + dx);
                }
            }
            out.push(acc);
        }
    }
    Plane { h, w, data: out }
}

fn decimate(p: &Plane) -> Plane {
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let data = (0..h * w).map(|i| p.at(2 * (i / w), 2 * (i % w))).collect();
    Plane { h, w, data }
}

fn zip(a: &Plane, b: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
    Plane { h: a.h, w: a.w, data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect() }
}

/// Information terms of one band with an n x n window: (distorted-channel
/// information, reference-channel information), in log10 units. Inputs are on
/// the 0..255 scale.
pub fn vif_band(reference: &Plane, distorted: &Plane, n: usize, sigma_n2: f64) -> (f64, f64) {
    let win = window(n);
    let mu1 = filter_valid(reference, &win, n);
    let mu2 = filter_valid(distorted, &win, n);
    let e11 = filter_valid(&zip(reference, reference, |a, b| a * b), &win, n);
    let e22 = filter_valid(&zip(distorted, distorted, |a, b| a * b), &win, n);
    let e12 = filter_valid(&zip(reference, distorted, |a, b| a * b), &win, n);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..mu1.data.len() {
        let (m1, m2) = (mu1.data[i], mu2.data[i]);
        let mut s1 = (e11.data[i] - m1 * m1).max(0.0);
        let s2 = (e22.data[i] - m2 * m2).max(0.0);
        let s12 = e12.data[i] - m1 * m2;
        let mut g = s12 / (s1 + 1e-10);
        let mut sv = s2 - g * s12;
        if s1 < 1e-10 {
            g = 0.0;
            sv = s2;
            s1 = 0.0;
        }
        if s2 < 1e-10 {
            g = 0.0;
            sv = 0.0;
        }
        if g < 0.0 {
            sv = s2;
            g = 0.0;
        }
        let sv = sv.max(1e-10);
        num += (1.0 + g * g * s1 / (sv + sigma_n2)).log10();
        den += (1.0 + s1 / sigma_n2).log10();
    }
    (num, den)
}

/// Multi-scale pixel-domain VIF for fusion: information about each source
/// preserved in `f`, pooled as `sum(num_a + num_b) / sum(den_a + den_b)` over
/// scales. Scale s (from 1) uses a window of side `2^(S - s + 1) + 1`; coarser
/// scales are smoothed and decimated by 2.
pub fn vif_fusion(f: &Plane, a: &Plane, b: &Plane, p: &VifParams) -> Result<VifResult> {
    f.same_shape(a, "vif_fusion")?;
    f.same_shape(b, "vif_fusion")?;
    let scale255 = |x: &Plane| Plane { h: x.h, w: x.w, data: x.data.iter().map(|v| v * 255.0).collect() };
    let (mut f, mut a, mut b) = (scale255(f), scale255(a), scale255(b));
    let (mut num, mut den) = (0.0, 0.0);
    let mut degenerate = false;
    for s in 1..=p.scales {
        let n = (1usize << (p.scales - s + 1)) + 1;
        if s > 1 {
            let win = window(n);
            if f.h < n || f.w < n {
                degenerate = true;
                break;
            }
            f = decimate(&filter_valid(&f, &win, n));
            a = decimate(&filter_valid(&a, &win, n));
            b = decimate(&filter_valid(&b, &win, n));
        }
        if f.h < n || f.w < n {
            degenerate = true;
            break;
        }
        for src in [&a, &b] {
            let (nu, de) = vif_band(src, &f, n, p.sigma_n2);
            if de <= 0.0 {
                degenerate = true;
                continue;
            }
            num += nu;
            den += de;
        }
    }
    if den == 0.0 {
        return Ok(VifResult { value: 0.0, degenerate: true });
    }
    Ok(VifResult { value: num / den, degenerate })
}
