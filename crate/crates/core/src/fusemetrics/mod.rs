//! Evaluation metrics for fused images (EN, MI, VIF, Qabf, SSIM, MS-SSIM,
//! CIEDE2000) and segmentation IoU, plus directory-level reports.
//!
//! Scalar metrics work on the BT.601 luma of fused and source images.

mod color;
mod info;
mod plane;
mod qabf;
mod seg;
mod vif;

pub use color::{ciede2000, delta_e, srgb_to_lab, Lab};
pub use info::{entropy, mutual_info_pair, mutual_information};
pub use plane::Plane;
pub use qabf::{qabf, QabfConstants, QabfResult};
pub use seg::{iou, Confusion, IouReport};
pub use vif::{vif_band, vif_fusion, VifParams, VifResult};

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::{read_labels, read_rgb};
use crate::diffcore::{ModelParams, Tape, Tensor};
use crate::error::{Error, Result};
use crate::imgops::{self, SsimParams, YCbCrStandard, MS_SSIM_WEIGHTS};
use crate::lossbank::IGNORE_INDEX;
use crate::mthnet::{Backbone, MultiTaskNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub ssim: SsimParams,
    pub qabf: QabfConstants,
    pub vif: VifParams,
    pub ycbcr: YCbCrStandard,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            qabf: QabfConstants::default(),
            vif: VifParams::default(),
            ycbcr: YCbCrStandard::Bt601,
        }
    }
}

impl MetricParams {
    /// SSIM parameters with the window shrunk (to the largest odd size) when
    /// the image is smaller than the configured window.
    fn ssim_for(&self, h: usize, w: usize) -> SsimParams {
        let side = h.min(w);
        let fit = if side % 2 == 1 { side } else { side - 1 };
        SsimParams { window: self.ssim.window.min(fit.max(1)), ..self.ssim }
    }
}

fn plane_tensor(p: &Plane) -> Result<Tensor<f64>> {
    Tensor::new(&[1, 1, p.h, p.w], p.data.clone())
}

/// Gaussian-window SSIM between two planes (no gradient).
pub fn ssim_metric(x: &Plane, y: &Plane, p: &SsimParams) -> Result<f64> {
    x.same_shape(y, "ssim_metric")?;
    let tape = Tape::new();
    let v = imgops::ssim(tape.constant(plane_tensor(x)?), tape.constant(plane_tensor(y)?), p)?;
    Ok(v.item())
}

/// MS-SSIM with as many of the standard scales as fit the image.
pub fn ms_ssim_metric(x: &Plane, y: &Plane, p: &SsimParams) -> Result<f64> {
    x.same_shape(y, "ms_ssim_metric")?;
    let weights = imgops::fitting_ms_ssim_weights(x.h.min(x.w), p.window, &MS_SSIM_WEIGHTS);
    let tape = Tape::new();
    let v = imgops::ms_ssim(tape.constant(plane_tensor(x)?), tape.constant(plane_tensor(y)?), &weights, p)?;
    Ok(v.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub en: f64,
    pub mi: f64,
    pub vif: f64,
    pub qabf: f64,
    pub ssim: f64,
    pub mss: f64,
    pub delta_e: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    /// Metrics that fell back to a degenerate definition.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub degenerate: Vec<String>,
}

/// Fusion metrics for one RGB triple (each 1 x 3 x H x W). SSIM and MSS are
/// averaged over the two sources; ΔE compares against the visible image.
pub fn image_metrics(
    id: &str,
    fused: &Tensor<f32>,
    vis: &Tensor<f32>,
    ir: &Tensor<f32>,
    p: &MetricParams,
) -> Result<ImageMetrics> {
    if fused.shape() != vis.shape() || fused.shape() != ir.shape() {
        return Err(Error::shape("image_metrics", fused.shape(), vis.shape()));
    }
    let f = Plane::luma_of(fused, 0, p.ycbcr)?;
    let a = Plane::luma_of(vis, 0, p.ycbcr)?;
    let b = Plane::luma_of(ir, 0, p.ycbcr)?;
    let sp = p.ssim_for(f.h, f.w);
    let q = qabf(&f, &a, &b, &p.qabf)?;
    let v = vif_fusion(&f, &a, &b, &p.vif)?;
    let mut degenerate = Vec::new();
    if q.degenerate {
        degenerate.push("Qabf".to_owned());
    }
    if v.degenerate {
        degenerate.push("VIF".to_owned());
    }
    Ok(ImageMetrics {
        id: id.to_owned(),
        en: entropy(&f)?,
        mi: mutual_information(&f, &a, &b)?,
        vif: v.value,
        qabf: q.value,
        ssim: 0.5 * (ssim_metric(&f, &a, &sp)? + ssim_metric(&f, &b, &sp)?),
        mss: 0.5 * (ms_ssim_metric(&f, &a, &sp)? + ms_ssim_metric(&f, &b, &sp)?),
        delta_e: delta_e(fused, vis, 0)?,
        iou: None,
        miou: None,
        degenerate,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub en: f64,
    pub mi: f64,
    pub vif: f64,
    pub qabf: f64,
    pub ssim: f64,
    pub mss: f64,
    pub delta_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean: MetricMeans,
    /// Dataset-level IoU from the pooled confusion matrix.
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub miou: Option<f64>,
    pub classes: usize,
    pub ignored_classes: Vec<u8>,
}

impl MetricsReport {
    pub fn from_images(images: Vec<ImageMetrics>, confusion: Option<&Confusion>, ignored: &[u8]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("no images to report".into()));
        }
        let n = images.len() as f64;
        let mean_of = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        let mean = MetricMeans {
            en: mean_of(|m| m.en),
            mi: mean_of(|m| m.mi),
            vif: mean_of(|m| m.vif),
            qabf: mean_of(|m| m.qabf),
            ssim: mean_of(|m| m.ssim),
            mss: mean_of(|m| m.mss),
            delta_e: mean_of(|m| m.delta_e),
        };
        let pooled = confusion.map(|c| c.iou(ignored));
        Ok(Self {
            classes: confusion.map_or(0, |c| c.classes),
            per_class_iou: pooled.as_ref().map(|r| r.per_class.clone()),
            miou: pooled.and_then(|r| r.miou),
            images,
            mean,
            ignored_classes: ignored.to_vec(),
        })
    }

    /// One JSON object per image, then one aggregate object.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for m in &self.images {
            let mut v = serde_json::to_value(m)?;
            v["kind"] = "image".into();
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
        let agg = serde_json::json!({
            "kind": "aggregate",
            "count": self.images.len(),
            "mean": self.mean,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "ignored_classes": self.ignored_classes,
        });
        writeln!(w, "{}", serde_json::to_string(&agg)?)?;
        Ok(())
    }

    /// `id,EN,MI,VIF,Qabf,SSIM,MSS,dE,mIoU`, one row per image and a final
    /// `mean` row. Per-class IoU is only in the JSON lines output.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "id,EN,MI,VIF,Qabf,SSIM,MSS,dE,mIoU")?;
        let row = |id: &str, m: [f64; 7], miou: Option<f64>| {
            let mut cells = vec![id.to_owned()];
            cells.extend(m.iter().map(|v| format!("{v:.6}")));
            cells.push(miou.map(|x| format!("{x:.6}")).unwrap_or_default());
            cells.join(",")
        };
        for m in &self.images {
            writeln!(w, "{}", row(&m.id, [m.en, m.mi, m.vif, m.qabf, m.ssim, m.mss, m.delta_e], m.miou))?;
        }
        let a = &self.mean;
        writeln!(w, "{}", row("mean", [a.en, a.mi, a.vif, a.qabf, a.ssim, a.mss, a.delta_e], self.miou))?;
        Ok(())
    }
}

/// Segmentation side of a directory evaluation: the kit's own model, run on
/// the source pair, scored against ground-truth label maps.
pub struct SegEval<'a, B: Backbone> {
    pub net: &'a MultiTaskNet<B>,
    pub params: &'a ModelParams<f32>,
    pub labels_dir: &'a Path,
    pub ignored: &'a [u8],
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
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
}

/// Scores every `<stem>.png` of `fused_dir` against the same-named visible and
/// infrared sources, in stem order.
pub fn evaluate_directory<B: Backbone>(
    fused_dir: &Path,
    vis_dir: &Path,
    ir_dir: &Path,
    seg: Option<SegEval<'_, B>>,
    p: &MetricParams,
) -> Result<MetricsReport> {
    let stems = png_stems(fused_dir)?;
    if stems.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", fused_dir.display())));
    }
    let mut dirs = vec![vis_dir, ir_dir];
    if let Some(s) = &seg {
        dirs.push(s.labels_dir);
    }
    let mut missing = Vec::new();
    for d in &dirs {
        let have = png_stems(d)?;
        for s in stems.iter().filter(|s| !have.contains(*s)) {
            missing.push(format!("{s} (not in {})", d.display()));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("missing counterparts: {}", missing.join("; "))));
    }
    let mut confusion = seg.as_ref().map(|s| Confusion::new(s.net.cfg.mth.classes));
    let mut images = Vec::with_capacity(stems.len());
    for stem in &stems {
        let file = format!("{stem}.png");
        let fused = read_rgb(&fused_dir.join(&file))?;
        let vis = read_rgb(&vis_dir.join(&file))?;
        let ir = read_rgb(&ir_dir.join(&file))?;
        let mut m = image_metrics(stem, &fused, &vis, &ir, p)?;
        if let (Some(s), Some(conf)) = (&seg, confusion.as_mut()) {
            let (gt, h, w) = read_labels(&s.labels_dir.join(&file))?;
            if [h, w] != vis.shape()[2..] {
                return Err(Error::Dataset(format!(
                    "{stem}: labels {h}x{w} do not match image {:?}",
                    &vis.shape()[2..]
                )));
            }
            let pred = s.net.infer(s.params, &vis, &ir)?.labels;
            let r = iou(&pred, &gt, conf.classes, s.ignored, IGNORE_INDEX)?;
            conf.add(&pred, &gt, IGNORE_INDEX)?;
            m.iou = Some(r.per_class);
            m.miou = r.miou;
        }
        images.push(m);
    }
    let ignored = seg.as_ref().map(|s| s.ignored.to_vec()).unwrap_or_default();
    MetricsReport::from_images(images, confusion.as_ref(), &ignored)
}
