use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, RgbImage};

use super::SamplePair;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn open8(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img),
        other => Err(Error::Image {
            path: path.into(),
            msg: format!("unsupported pixel format {other:?}: only 8-bit PNG is supported"),
        }),
    }
}

/// 8-bit gray or RGB PNG as a 1 x 3 x H x W tensor in [0, 1]. Gray inputs are
/// replicated to three channels.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let rgb = open8(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Single-channel 8-bit class-index PNG; returns (labels, H, W).
pub fn read_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = open8(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("label maps must be 8-bit single-channel, got {:?}", img.color()),
        });
    }
    let g = img.into_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.into_raw(), h, w))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1 x 3 x H x W (or 1 x 1 x H x W) tensor as 8-bit RGB.
pub fn write_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 4 || s[0] != 1 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::invalid("write_rgb", format!("expected 1x3xHxW or 1x1xHxW, got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| to_u8(d[(if c == 1 { 0 } else { ch }) * h * w + i]);
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
}

pub fn write_labels(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let g = GrayImage::from_raw(w as u32, h as u32, labels.to_vec())
        .ok_or_else(|| Error::invalid("write_labels", format!("{} labels for {h}x{w}", labels.len())))?;
    g.save(path).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
}

/// Writes one triple into `root/{vis,ir,labels}/<id>.png`.
pub fn save_pair(root: &Path, pair: &SamplePair) -> Result<()> {
    for sub in ["vis", "ir", "labels"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let file = format!("{}.png", pair.id);
    write_rgb(&root.join("vis").join(&file), &pair.vis)?;
    write_rgb(&root.join("ir").join(&file), &pair.ir)?;
    write_labels(&root.join("labels").join(&file), &pair.labels, pair.height(), pair.width())
}
