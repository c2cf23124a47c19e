//! Paired visible/infrared samples: PNG loading, splitting, cropping,
//! batching, the synthetic scene generator, and checkpoint files.

mod checkpoint;
mod png;
mod synth;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use png::{read_labels, read_rgb, save_pair, write_labels, write_rgb};
pub use synth::{synth_dataset, synth_scene, SynthConfig, GENERATOR_TAG};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::lossbank::LabelBatch;

/// One co-registered triple. Images are 1 x 3 x H x W in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub vis: Tensor<f32>,
    pub ir: Tensor<f32>,
    /// H x W class indices, 255 = ignore.
    pub labels: Vec<u8>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, vis: Tensor<f32>, ir: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        let s = vis.shape().to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::Dataset(format!("{id}: visible image must be 1x3xHxW, got {s:?}")));
        }
        if ir.shape() != s.as_slice() {
            return Err(Error::Dataset(format!("{id}: infrared {:?} does not match visible {s:?}", ir.shape())));
        }
        if labels.len() != s[2] * s[3] {
            return Err(Error::Dataset(format!("{id}: {} labels for {}x{} image", labels.len(), s[2], s[3])));
        }
        Ok(Self { id, vis, ir, labels })
    }

    pub fn height(&self) -> usize {
        self.vis.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.vis.shape()[3]
    }
}

/// Reads `root/{vis,ir,labels}/<stem>.png`, sorted by stem.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let stems = |sub: &str| -> Result<BTreeSet<String>> {
        let dir = root.join(sub);
        let rd = std::fs::read_dir(&dir).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
        let mut out = BTreeSet::new();
        for entry in rd {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                    out.insert(s.to_owned());
                }
            }
        }
        Ok(out)
    };
    let (vis, ir, lab) = (stems("vis")?, stems("ir")?, stems("labels")?);
    let all: BTreeSet<&String> = vis.iter().chain(&ir).chain(&lab).collect();
    let incomplete: Vec<String> = all
        .iter()
        .filter(|s| !(vis.contains(**s) && ir.contains(**s) && lab.contains(**s)))
        .map(|s| {
            let missing: Vec<&str> = [("vis", &vis), ("ir", &ir), ("labels", &lab)]
                .into_iter()
                .filter(|(_, set)| !set.contains(s.as_str()))
                .map(|(n, _)| n)
                .collect();
            format!("{s} (missing {})", missing.join(", "))
        })
        .collect();
    if !incomplete.is_empty() {
        return Err(Error::Dataset(format!("incomplete triples: {}", incomplete.join("; "))));
    }
    vis.iter()
        .map(|stem| {
            let file = format!("{stem}.png");
            let v = read_rgb(&root.join("vis").join(&file))?;
            let i = read_rgb(&root.join("ir").join(&file))?;
            let (l, h, w) = read_labels(&root.join("labels").join(&file))?;
            if v.shape()[2..] != i.shape()[2..] || v.shape()[2..] != [h, w] {
                return Err(Error::Dataset(format!(
                    "{stem}: size mismatch vis {:?}, ir {:?}, labels {h}x{w}",
                    &v.shape()[2..],
                    &i.shape()[2..]
                )));
            }
            SamplePair::new(stem.clone(), v, i, l)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub ratio: f64,
    pub seed: u64,
}

/// Seeded shuffle, then the first `floor(ratio * N)` samples train.
pub fn split(pairs: Vec<SamplePair>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Dataset(format!("need at least 2 pairs to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Dataset(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
    let mut slots: Vec<Option<SamplePair>> = pairs.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("index used once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let val = order[n_train..].iter().map(&mut take).collect();
    Ok(DatasetSplit { train, val, ratio, seed })
}

fn crop_image(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&t.data()[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(&[1, c, size, size], data).expect("crop shape")
}

/// Square crop at a uniformly drawn offset, shared by all three maps.
pub fn random_crop_pair<R: Rng + ?Sized>(pair: &SamplePair, size: usize, rng: &mut R) -> Result<SamplePair> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::Dataset(format!("crop {size} does not fit {}: {h}x{w}", pair.id)));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    let mut labels = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        labels.extend_from_slice(&pair.labels[y * w + x0..y * w + x0 + size]);
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        vis: crop_image(&pair.vis, y0, x0, size),
        ir: crop_image(&pair.ir, y0, x0, size),
        labels,
    })
}

/// Stacked network inputs for a group of same-sized samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub vis: Tensor<f32>,
    pub ir: Tensor<f32>,
    pub labels: LabelBatch,
}

pub fn make_batch(items: &[&SamplePair]) -> Result<Batch> {
    let first = items.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let vis = Tensor::cat_batch(&items.iter().map(|p| &p.vis).collect::<Vec<_>>())?;
    let ir = Tensor::cat_batch(&items.iter().map(|p| &p.ir).collect::<Vec<_>>())?;
    let labels = items.iter().flat_map(|p| p.labels.iter().copied()).collect();
    Ok(Batch { vis, ir, labels: LabelBatch::new(items.len(), h, w, labels)? })
}
