use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Version of the scene generator. Recorded baselines are only valid for
/// data produced under the same tag.
pub const GENERATOR_TAG: &str = "synth-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    /// Including background (class 0).
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Infrared level of class 1 ("hot object"); never below 0.9 after noise.
    pub hot_ir: f64,
    /// Visible offset of hot objects from the background behind them.
    pub hot_vis_contrast: f64,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Standard deviation of per-modality gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 5,
            objects_min: 2,
            objects_max: 5,
            hot_ir: 0.95,
            hot_vis_contrast: 0.02,
            texture: 0.03,
            noise: 0.01,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!("synth classes {} outside [2, 255]", self.classes)));
        }
        if self.size < 32 {
            return Err(Error::Config(format!("synth size {} below 32", self.size)));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty or zero",
                self.objects_min, self.objects_max
            )));
        }
        if !(self.hot_ir >= 0.9 && self.hot_ir <= 1.0) || self.hot_vis_contrast.abs() >= 0.05 {
            return Err(Error::Config("hot objects need ir >= 0.9 and visible contrast < 0.05".into()));
        }
        if self.noise < 0.0 || self.texture < 0.0 {
            return Err(Error::Config("noise and texture must be non-negative".into()));
        }
        Ok(())
    }
}

/// Appearance of one class in both modalities.
#[derive(Clone, Copy, Debug)]
struct ClassLook {
    /// None = follow the background (plus the hot-object offset).
    vis: Option<[f64; 3]>,
    /// Secondary visible color for striped classes.
    stripe: Option<[f64; 3]>,
    /// None = follow the infrared background.
    ir: Option<f64>,
}

fn looks(cfg: &SynthConfig) -> Vec<ClassLook> {
    let mut out = vec![ClassLook { vis: None, stripe: None, ir: None }];
    for k in 1..cfg.classes {
        let look = match k {
            1 => ClassLook { vis: None, stripe: None, ir: Some(cfg.hot_ir) },
            2 => ClassLook { vis: Some([0.85, 0.2, 0.18]), stripe: None, ir: None },
            3 => ClassLook { vis: Some([0.2, 0.3, 0.85]), stripe: None, ir: Some(0.65) },
            4 => ClassLook { vis: Some([0.9, 0.82, 0.2]), stripe: Some([0.55, 0.5, 0.1]), ir: Some(0.45) },
            _ => {
                let hue = (k as f64 * 0.618_034).fract() * std::f64::consts::TAU;
                let c = |o: f64| 0.5 + 0.35 * (hue + o).cos();
                let ir = 0.4 + 0.4 * ((k as f64 * 0.414_214).fract());
                ClassLook { vis: Some([c(0.0), c(2.094), c(4.189)]), stripe: None, ir: Some(ir) }
            }
        };
        out.push(look);
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, h: f64, w: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }

    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        match rng.random_range(0..3) {
            0 => {
                let (h, w) = (rng.random_range(10.0..24.0), rng.random_range(10.0..24.0));
                Shape::Rect {
                    y0: rng.random_range(-4.0..size - h + 4.0),
                    x0: rng.random_range(-4.0..size - w + 4.0),
                    h,
                    w,
                }
            }
            1 => {
                let (ry, rx) = (rng.random_range(6.0..12.0), rng.random_range(6.0..12.0));
                Shape::Ellipse { cy: rng.random_range(0.0..size), cx: rng.random_range(0.0..size), ry, rx }
            }
            _ => {
                let long = rng.random_range(20.0..40.0);
                let thick = rng.random_range(5.0..8.0);
                let (h, w) = if rng.random_bool(0.5) { (long, thick) } else { (thick, long) };
                Shape::Rect {
                    y0: rng.random_range(-4.0..size - h + 4.0),
                    x0: rng.random_range(-4.0..size - w + 4.0),
                    h,
                    w,
                }
            }
        }
    }
}

pub(crate) struct Layers {
    pub pair: SamplePair,
    /// Noise-free visible background (3 x H x W) behind all objects.
    #[cfg_attr(not(test), allow(dead_code))]
    pub vis_background: Vec<f64>,
}

pub(crate) fn render(cfg: &SynthConfig, index: u64) -> Result<Layers> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.size;
    let hw = n * n;
    let looks = looks(cfg);

    // Smooth background texture: two random plane waves per modality.
    let mut wave = |amp: f64| {
        let params: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.08..0.25);
                (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        move |y: f64, x: f64| amp * 0.5 * params.iter().map(|(fy, fx, ph)| (fy * y + fx * x + ph).sin()).sum::<f64>()
    };
    let vis_tex = wave(cfg.texture);
    let ir_tex = wave(cfg.texture * 1.5);
    let vis_base = [0.36, 0.44, 0.34];
    let mut vis_bg = vec![0.0; 3 * hw];
    let mut ir = vec![0.0; hw];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let t = vis_tex(fy, fx);
            for c in 0..3 {
                vis_bg[c * hw + y * n + x] = vis_base[c] + t;
            }
            ir[y * n + x] = 0.2 + ir_tex(fy, fx);
        }
    }
    let mut vis = vis_bg.clone();
    let mut labels = vec![0u8; hw];

    let k = rng.random_range(cfg.objects_min..=cfg.objects_max);
    for _ in 0..k {
        let class = rng.random_range(1..cfg.classes);
        let shape = Shape::random(&mut rng, n as f64);
        let look = looks[class];
        let period = rng.random_range(3..5);
        for y in 0..n {
            for x in 0..n {
                if !shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                let p = y * n + x;
                labels[p] = class as u8;
                let color = match (look.vis, look.stripe) {
                    (Some(a), Some(b)) => Some(if (x + y) / period % 2 == 0 { a } else { b }),
                    (v, _) => v,
                };
                for c in 0..3 {
                    vis[c * hw + p] = match color {
                        Some(col) => col[c],
                        None => vis_bg[c * hw + p] + cfg.hot_vis_contrast,
                    };
                }
                if let Some(level) = look.ir {
                    ir[p] = level;
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut vis_out = Vec::with_capacity(3 * hw);
    for v in &vis {
        vis_out.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
    }
    let mut ir_plane = Vec::with_capacity(hw);
    for (p, v) in ir.iter().enumerate() {
        let mut s = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        if labels[p] == 1 {
            s = s.max(0.9);
        }
        ir_plane.push(s as f32);
    }
    let ir_out: Vec<f32> = (0..3).flat_map(|_| ir_plane.iter().copied()).collect();
    let pair = SamplePair::new(
        format!("{index:05}"),
        Tensor::new(&[1, 3, n, n], vis_out)?,
        Tensor::new(&[1, 3, n, n], ir_out)?,
        labels,
    )?;
    Ok(Layers { pair, vis_background: vis_bg })
}

/// Deterministic synthetic triple for `(cfg.seed, index)`. Class 1 is bright
/// in infrared and blends into the visible background; class 2 is colored in
/// the visible image and absent from infrared; further classes differ in both.
pub fn synth_scene(cfg: &SynthConfig, index: u64) -> Result<SamplePair> {
    Ok(render(cfg, index)?.pair)
}

pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<SamplePair>> {
    (0..count as u64).map(|i| synth_scene(cfg, i)).collect()
}
