use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts `counts[gt * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Adds a prediction/ground-truth pair; `ignore` pixels in either map are
    /// skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == ignore || g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::invalid(
                    "iou",
                    format!("class {} out of range for {} classes", p.max(g), self.classes),
                ));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (`None` when the class is in `ignored` or absent from
    /// both maps) and the mean over the remaining classes.
    pub fn iou(&self, ignored: &[u8]) -> IouReport {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                if ignored.contains(&(k as u8)) {
                    return None;
                }
                let tp = self.counts[k * c + k];
                let gt: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
                let pred: u64 = (0..c).map(|j| self.counts[j * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { None } else { Some(present.iter().sum::<f64>() / present.len() as f64) };
        IouReport { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

pub fn iou(pred: &[u8], gt: &[u8], classes: usize, ignored: &[u8], ignore_index: u8) -> Result<IouReport> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt, ignore_index)?;
    Ok(c.iou(ignored))
}
