//! Brute-force reference implementations used to cross-check the library.
//! Everything here works on plain row-major `f64` slices and loops; none of
//! it calls into the code under test except for parameter lookup.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use mtvif::diffcore::{ModelParams, Tensor};

/// 8-bit bin of a [0, 1] intensity.
pub fn bin(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Shannon entropy in bits, counting each of the 256 levels by a full scan.
pub fn entropy(img: &[f64]) -> f64 {
    let n = img.len() as f64;
    let mut h = 0.0;
    for level in 0..256 {
        let c = img.iter().filter(|&&v| bin(v) == level).count();
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

/// `sum p(a,b) log2(p(a,b) / (p(a) p(b)))` over occupied joint bins.
pub fn mutual_info(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((bin(a), bin(b))).or_default() += 1;
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let pa = x.iter().filter(|&&v| bin(v) == a).count() as f64 / n;
        let pb = y.iter().filter(|&&v| bin(v) == b).count() as f64 / n;
        let pab = c as f64 / n;
        mi += pab * (pab / (pa * pb)).log2();
    }
    mi
}

/// Per-class IoU (None when a class is absent from both maps) and the mean
/// over present classes.
pub fn iou(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> (Vec<Option<f64>>, Option<f64>) {
    let mut per = Vec::new();
    for c in 0..classes as u8 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            if p == c && g == c {
                inter += 1;
            }
            if p == c || g == c {
                union += 1;
            }
        }
        per.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per, mean)
}

#[derive(Clone, Copy, Debug)]
pub struct SsimSettings {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Mean SSIM and mean contrast-structure over every valid window position,
/// using a 2-D gaussian built from explicit `exp` evaluations.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, s: SsimSettings) -> (f64, f64) {
    let k = s.window;
    let r = (k / 2) as f64;
    let mut g2 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            g2[i * k + j] = (-(di * di + dj * dj) / (2.0 * s.sigma * s.sigma)).exp();
        }
    }
    let total: f64 = g2.iter().sum();
    g2.iter_mut().for_each(|v| *v /= total);

    let (mut ssim_sum, mut cs_sum, mut count) = (0.0, 0.0, 0usize);
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = g2[i * k + j];
                    mx += wt * x[(oy + i) * w + ox + j];
                    my += wt * y[(oy + i) * w + ox + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = g2[i * k + j];
                    let dx = x[(oy + i) * w + ox + j] - mx;
                    let dy = y[(oy + i) * w + ox + j] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            let l = (2.0 * mx * my + s.c1) / (mx * mx + my * my + s.c1);
            let cs = (2.0 * cxy + s.c2) / (vx + vy + s.c2);
            ssim_sum += l * cs;
            cs_sum += cs;
            count += 1;
        }
    }
    (ssim_sum / count as f64, cs_sum / count as f64)
}

/// 2x2 block mean, dropping a trailing odd row/column.
pub fn halve(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for i in 0..h2 {
        for j in 0..w2 {
            out[i * w2 + j] = (x[2 * i * w + 2 * j]
                + x[2 * i * w + 2 * j + 1]
                + x[(2 * i + 1) * w + 2 * j]
                + x[(2 * i + 1) * w + 2 * j + 1])
                / 4.0;
        }
    }
    (out, h2, w2)
}

/// Product over levels of cs (finer levels) or ssim (coarsest), each raised
/// to its weight after clamping at zero.
pub fn ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize, weights: &[f64], s: SsimSettings) -> f64 {
    let (mut x, mut y, mut h, mut w) = (x.to_vec(), y.to_vec(), h, w);
    let mut out = 1.0;
    for (l, &wt) in weights.iter().enumerate() {
        let (ss, cs) = ssim(&x, &y, h, w, s);
        let term = if l + 1 == weights.len() { ss } else { cs };
        out *= term.max(0.0).powf(wt);
        let (nx, nh, nw) = halve(&x, h, w);
        let (ny, _, _) = halve(&y, h, w);
        (x, y, h, w) = (nx, ny, nh, nw);
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses with edge-replicated borders.
pub fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| img[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let (mut gx, mut gy) = (vec![0.0; h * w], vec![0.0; h * w]);
    for y in 0..h {
        for x in 0..w {
            for i in 0..3 {
                for j in 0..3 {
                    let v = at(y as isize + i as isize - 1, x as isize + j as isize - 1);
                    gx[y * w + x] += SOBEL_X[i][j] * v;
                    gy[y * w + x] += SOBEL_Y[i][j] * v;
                }
            }
        }
    }
    (gx, gy)
}

/// Xydeas-Petrovic edge transfer with the canonical sigmoid constants and
/// edge-strength weights (exponent 1).
pub fn qabf(f: &[f64], a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (gg, kg, sg) = (0.9994, -15.0, 0.5);
    let (ga, ka, sa) = (0.9879, -22.0, 0.8);
    let polar = |img: &[f64]| {
        // Responses at rounding level are exact zeros of the true gradient.
        let snap = |v: Vec<f64>| v.into_iter().map(|g| if g.abs() < 1e-10 { 0.0 } else { g }).collect::<Vec<f64>>();
        let (gx, gy) = sobel(img, h, w);
        let (gx, gy) = (snap(gx), snap(gy));
        let strength: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
        let angle: Vec<f64> =
            gx.iter().zip(&gy).map(|(x, y)| if *x == 0.0 { FRAC_PI_2 } else { (y / x).atan() }).collect();
        (strength, angle)
    };
    let (sf, af) = polar(f);
    let transfer = |src: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let (ss, asrc) = polar(src);
        let q = (0..h * w)
            .map(|i| {
                let g = if ss[i] == sf[i] { 1.0 } else { ss[i].min(sf[i]) / ss[i].max(sf[i]) };
                let alpha = 1.0 - (asrc[i] - af[i]).abs() / FRAC_PI_2;
                let qg = gg / (1.0 + (kg * (g - sg)).exp());
                let qa = ga / (1.0 + (ka * (alpha - sa)).exp());
                qg * qa
            })
            .collect();
        (q, ss)
    };
    let (qa, wa) = transfer(a);
    let (qb, wb) = transfer(b);
    let num: f64 = (0..h * w).map(|i| qa[i] * wa[i] + qb[i] * wb[i]).sum();
    let den: f64 = (0..h * w).map(|i| wa[i] + wb[i]).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Full-range BT.601 chroma of one RGB pixel.
pub fn cbcr_601(r: f64, g: f64, b: f64) -> (f64, f64) {
    (
        0.5 - 0.168_735_891_647_856 * r - 0.331_264_108_352_144 * g + 0.5 * b,
        0.5 + 0.5 * r - 0.418_687_589_158_345 * g - 0.081_312_410_841_655 * b,
    )
}

/// Mean |f - max(ir, vis)| over all elements.
pub fn intensity_loss(f: &[f64], ir: &[f64], vis: &[f64]) -> f64 {
    f.iter().zip(ir).zip(vis).map(|((f, i), v)| (f - i.max(*v)).abs()).sum::<f64>() / f.len() as f64
}

/// Mean | S(f) - max(S(ir), S(vis)) | with `S = |Gx| + |Gy|` per channel;
/// inputs are stacks of H x W planes.
pub fn gradient_loss(f: &[f64], ir: &[f64], vis: &[f64], h: usize, w: usize) -> f64 {
    let planes = f.len() / (h * w);
    let mut acc = 0.0;
    for c in 0..planes {
        let s = |img: &[f64]| {
            let (gx, gy) = sobel(&img[c * h * w..(c + 1) * h * w], h, w);
            gx.iter().zip(&gy).map(|(x, y)| x.abs() + y.abs()).collect::<Vec<f64>>()
        };
        let (sf, si, sv) = (s(f), s(ir), s(vis));
        acc += (0..h * w).map(|i| (sf[i] - si[i].max(sv[i])).abs()).sum::<f64>();
    }
    acc / f.len() as f64
}

/// `sum_j 0.5 (1 - mean_c ssim(f_c, j_c))` over j in {ir, vis}.
pub fn ssim_loss(f: &[f64], ir: &[f64], vis: &[f64], h: usize, w: usize, s: SsimSettings) -> f64 {
    let planes = f.len() / (h * w);
    let mean = |src: &[f64]| {
        (0..planes)
            .map(|c| ssim(&f[c * h * w..(c + 1) * h * w], &src[c * h * w..(c + 1) * h * w], h, w, s).0)
            .sum::<f64>()
            / planes as f64
    };
    0.5 * (1.0 - mean(ir)) + 0.5 * (1.0 - mean(vis))
}

/// Mean |Cb/Cr(f) - Cb/Cr(vis)| for N x 3 x H x W data.
pub fn color_loss(f: &[f64], vis: &[f64], n: usize, hw: usize) -> f64 {
    let mut acc = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let px =
                |img: &[f64]| cbcr_601(img[(b * 3) * hw + p], img[(b * 3 + 1) * hw + p], img[(b * 3 + 2) * hw + p]);
            let ((cbf, crf), (cbv, crv)) = (px(f), px(vis));
            acc += (cbf - cbv).abs() + (crf - crv).abs();
        }
    }
    acc / (2 * n * hw) as f64
}

/// Softmax cross-entropy per pixel, averaged over labelled pixels.
pub fn cross_entropy(logits: &[f64], labels: &[u8], n: usize, c: usize, hw: usize, ignore: u8) -> f64 {
    let (mut acc, mut count) = (0.0, 0usize);
    for b in 0..n {
        for p in 0..hw {
            let y = labels[b * hw + p];
            if y == ignore {
                continue;
            }
            let z: Vec<f64> = (0..c).map(|k| logits[(b * c + k) * hw + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - z[y as usize];
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

/// Soft dice on softmax probabilities: `1 - mean_c (2I + s) / (P + Y + s)`.
pub fn dice(logits: &[f64], labels: &[u8], n: usize, c: usize, hw: usize, smooth: f64, ignore: u8) -> f64 {
    let (mut inter, mut psum, mut ysum) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for b in 0..n {
        for p in 0..hw {
            let y = labels[b * hw + p];
            if y == ignore {
                continue;
            }
            let z: Vec<f64> = (0..c).map(|k| logits[(b * c + k) * hw + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let prob = e[k] / s;
                psum[k] += prob;
                if k == y as usize {
                    inter[k] += prob;
                    ysum[k] += 1.0;
                }
            }
        }
    }
    1.0 - (0..c).map(|k| (2.0 * inter[k] + smooth) / (psum[k] + ysum[k] + smooth)).sum::<f64>() / c as f64
}

fn project(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|j| b.map_or(0.0, |b| b.data()[j]) + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>())
        .collect()
}

/// Multi-head scaled dot-product cross-attention evaluated one query, one
/// head and one key at a time. `q` is N x Lq x D, `kv` is N x Lk x D; the
/// projections are read from `{name}.{q,k,v,o}.{weight,bias}`.
pub fn attention(p: &ModelParams<f64>, name: &str, q: &Tensor<f64>, kv: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (n, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = kv.shape()[1];
    let dh = d / heads;
    let lin = |proj: &str, x: &[f64]| {
        let w = p.tensor(&format!("{name}.{proj}.weight")).expect("projection weight");
        project(x, w, p.tensor(&format!("{name}.{proj}.bias")).ok())
    };
    let mut out = Vec::with_capacity(n * lq * d);
    for b in 0..n {
        let keys: Vec<Vec<f64>> = (0..lk).map(|j| lin("k", &kv.data()[(b * lk + j) * d..][..d])).collect();
        let vals: Vec<Vec<f64>> = (0..lk).map(|j| lin("v", &kv.data()[(b * lk + j) * d..][..d])).collect();
        for i in 0..lq {
            let qi = lin("q", &q.data()[(b * lq + i) * d..][..d]);
            let mut ctx = vec![0.0; d];
            for h in 0..heads {
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| (h * dh..(h + 1) * dh).map(|c| qi[c] * k[c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, v) in vals.iter().enumerate() {
                    for c in h * dh..(h + 1) * dh {
                        ctx[c] += e[j] / z * v[c];
                    }
                }
            }
            out.extend(lin("o", &ctx));
        }
    }
    out
}

/// Largest central-difference disagreement, `|a - n| / max(|a|, |n|, 1e-12)`,
/// over every scalar of `params`.
#[allow(clippy::needless_range_loop)]
pub fn finite_difference<F>(
    f: F,
    analytic: &BTreeMap<String, Vec<f64>>,
    params: &ModelParams<f64>,
    eps: f64,
) -> (f64, String, usize)
where
    F: Fn(&ModelParams<f64>) -> f64,
{
    let mut work = params.clone();
    let mut worst = (0.0, String::new(), 0usize);
    let paths: Vec<String> = params.paths().map(str::to_owned).collect();
    for path in paths {
        let a = &analytic[&path];
        for i in 0..a.len() {
            let orig = work.tensor(&path).unwrap().data()[i];
            work.get_mut(&path).unwrap().tensor.data_mut()[i] = orig + eps;
            let up = f(&work);
            work.get_mut(&path).unwrap().tensor.data_mut()[i] = orig - eps;
            let down = f(&work);
            work.get_mut(&path).unwrap().tensor.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let err = (a[i] - num).abs() / a[i].abs().max(num.abs()).max(1e-12);
            worst.2 += 1;
            if err > worst.0 {
                worst.0 = err;
                worst.1 = format!("{path}[{i}] analytic {:.6e} numeric {num:.6e}", a[i]);
            }
        }
    }
    worst
}
