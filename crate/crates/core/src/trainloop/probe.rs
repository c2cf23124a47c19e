use serde::{Deserialize, Serialize};

use crate::datakit::Batch;
use crate::diffcore::{ModelParams, ParamGroup, Tape};
use crate::error::Result;
use crate::lossbank::{total_loss, LossConfig};
use crate::mthnet::{Backbone, MultiTaskNet};

/// Interaction between the fusion and segmentation gradients on the shared
/// (backbone) parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProjectionRecord {
    pub step: u64,
    /// `g_fus . g_seg / |g_seg|`.
    pub proj_fus_on_seg: f64,
    /// `g_fus . g_seg / |g_fus|`.
    pub proj_seg_on_fus: f64,
    pub cosine: f64,
    pub dot: f64,
    pub norm_fus: f64,
    pub norm_seg: f64,
    /// One of the gradients vanished; affected projections are reported as 0.
    pub degenerate: bool,
}

/// Scalar projections and cosine of two flattened gradients.
pub fn projection(step: u64, g_fus: &[f64], g_seg: &[f64]) -> GradProjectionRecord {
    let dot: f64 = g_fus.iter().zip(g_seg).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nf, ns) = (norm(g_fus), norm(g_seg));
    let div = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    GradProjectionRecord {
        step,
        proj_fus_on_seg: div(dot, ns),
        proj_seg_on_fus: div(dot, nf),
        cosine: div(dot, nf * ns).clamp(-1.0, 1.0),
        dot,
        norm_fus: nf,
        norm_seg: ns,
        degenerate: nf == 0.0 || ns == 0.0,
    }
}

/// Gradients of the weighted fusion loss and of the segmentation loss (the
/// task weights beta are not applied) with respect to backbone parameters,
/// from two separate passes.
pub fn grad_projection_probe<B: Backbone>(
    net: &MultiTaskNet<B>,
    params: &ModelParams<f32>,
    batch: &Batch,
    loss: &LossConfig,
    step: u64,
) -> Result<GradProjectionRecord> {
    let grad_of = |fusion: bool| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let vis = tape.constant(batch.vis.clone());
        let ir = tape.constant(batch.ir.clone());
        let out = net.forward(&p, vis, ir)?;
        let fused = net.fused_rgb(out.fused, vis)?;
        let b = total_loss(fused, ir, vis, out.logits, &batch.labels, loss)?;
        tape.backward(if fusion { b.fusion } else { b.seg })?;
        Ok(p.grads().flatten_group(params, ParamGroup::Backbone).into_iter().map(f64::from).collect())
    };
    let g_fus = grad_of(true)?;
    let g_seg = grad_of(false)?;
    Ok(projection(step, &g_fus, &g_seg))
}
