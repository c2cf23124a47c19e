//! Training objective: fusion terms (intensity, gradient, SSIM, color),
//! segmentation terms (cross-entropy, dice) and their weighted total.
//!
//! Images are N x 3 x H x W. Every L1 term is a mean absolute difference,
//! i.e. the per-channel L1 norm divided by HW and averaged over channels.

use serde::{Deserialize, Serialize};

use crate::diffcore::{one_hot, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::imgops::{self, SsimParams, YCbCrStandard};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub w_ir: f64,
    pub w_vis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            lambda1: 20.0,
            lambda2: 20.0,
            lambda3: 10.0,
            lambda4: 20.0,
            w_ir: 0.5,
            w_vis: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all =
            [self.beta1, self.beta2, self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.w_ir, self.w_vis];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Loss weights plus the knobs the individual terms need.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub dice_smooth: f64,
    pub ignore_index: u8,
    pub ycbcr: YCbCrStandard,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            dice_smooth: 1.0,
            ignore_index: IGNORE_INDEX,
            ycbcr: YCbCrStandard::Bt601,
        }
    }
}

/// Class indices for a batch, laid out N x H x W.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::invalid("labels", format!("{} labels for {n}x{h}x{w}", data.len())));
        }
        Ok(Self { n, h, w, data })
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown<'t, T: Real> {
    pub l_int: f64,
    pub l_grad: f64,
    pub l_ssim: f64,
    pub l_color: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_fusion: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub total: Var<'t, T>,
    pub fusion: Var<'t, T>,
    pub seg: Var<'t, T>,
}

fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

fn rgb_triple<T: Real>(op: &'static str, f: &Var<'_, T>, ir: &Var<'_, T>, vis: &Var<'_, T>) -> Result<()> {
    same_shape(op, f, ir)?;
    same_shape(op, f, vis)?;
    let s = f.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::invalid(op, format!("expected N x 3 x H x W, got {s:?}")));
    }
    Ok(())
}

/// Mean |f - max(ir, vis)|; sources act as constants.
pub fn intensity_loss<'t, T: Real>(f: Var<'t, T>, ir: Var<'t, T>, vis: Var<'t, T>) -> Result<Var<'t, T>> {
    rgb_triple("intensity_loss", &f, &ir, &vis)?;
    let target = ir.detach().maximum(vis.detach())?;
    Ok(f.sub(target)?.abs().mean())
}

/// Mean | |grad f| - max(|grad ir|, |grad vis|) | with Sobel magnitudes per channel.
pub fn gradient_loss<'t, T: Real>(f: Var<'t, T>, ir: Var<'t, T>, vis: Var<'t, T>) -> Result<Var<'t, T>> {
    rgb_triple("gradient_loss", &f, &ir, &vis)?;
    let target = imgops::sobel_per_channel(ir.detach())?.maximum(imgops::sobel_per_channel(vis.detach())?)?;
    Ok(imgops::sobel_per_channel(f)?.sub(target)?.abs().mean())
}

/// `sum_j w_j (1 - mean_c ssim(f_c, j_c))` over j in {ir, vis}.
pub fn ssim_loss<'t, T: Real>(
    f: Var<'t, T>,
    ir: Var<'t, T>,
    vis: Var<'t, T>,
    w: &LossWeights,
    p: &SsimParams,
) -> Result<Var<'t, T>> {
    rgb_triple("ssim_loss", &f, &ir, &vis)?;
    let s_ir = imgops::ssim(f, ir.detach(), p)?;
    let s_vis = imgops::ssim(f, vis.detach(), p)?;
    let t_ir = s_ir.neg().add_scalar(T::one()).mul_scalar(T::lit(w.w_ir));
    let t_vis = s_vis.neg().add_scalar(T::one()).mul_scalar(T::lit(w.w_vis));
    t_ir.add(t_vis)
}

/// Mean |f - vis| over the Cb and Cr planes.
pub fn color_loss<'t, T: Real>(f: Var<'t, T>, vis: Var<'t, T>, std: YCbCrStandard) -> Result<Var<'t, T>> {
    same_shape("color_loss", &f, &vis)?;
    let cf = imgops::rgb_to_ycbcr(f, std)?.narrow(1, 1, 2)?;
    let cv = imgops::rgb_to_ycbcr(vis.detach(), std)?.narrow(1, 1, 2)?;
    Ok(cf.sub(cv)?.abs().mean())
}

fn check_logits<T: Real>(op: &'static str, logits: &Var<'_, T>, labels: &LabelBatch) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 4 || s[0] != labels.n || s[2] != labels.h || s[3] != labels.w {
        return Err(Error::shape(op, &s, &[labels.n, labels.h, labels.w]));
    }
    if s[1] < 2 {
        return Err(Error::invalid(op, "at least two classes required"));
    }
    Ok(s[1])
}

fn encode<T: Real>(labels: &LabelBatch, classes: usize, ignore: u8) -> Result<(Tensor<T>, usize)> {
    let target = one_hot(&labels.data, labels.n, labels.h, labels.w, classes, ignore)?;
    let valid = labels.data.iter().filter(|&&l| l != ignore).count();
    Ok((target, valid))
}

/// Softmax cross-entropy averaged over non-ignored pixels.
pub fn ce_loss<'t, T: Real>(logits: Var<'t, T>, labels: &LabelBatch, ignore: u8) -> Result<Var<'t, T>> {
    let classes = check_logits("ce_loss", &logits, labels)?;
    let (target, valid) = encode::<T>(labels, classes, ignore)?;
    let tape = logits.tape();
    let nll = logits.log_softmax(1)?.mul(tape.constant(target))?.sum().neg();
    Ok(nll.mul_scalar(T::one() / T::lit(valid.max(1) as f64)))
}

/// `1 - mean_c (2 sum p y + s) / (sum p + sum y + s)` with softmax
/// probabilities when `from_logits`. Ignored pixels drop out of every sum.
pub fn dice_loss<'t, T: Real>(
    input: Var<'t, T>,
    labels: &LabelBatch,
    from_logits: bool,
    smooth: f64,
    ignore: u8,
) -> Result<Var<'t, T>> {
    let classes = check_logits("dice_loss", &input, labels)?;
    let (target, _) = encode::<T>(labels, classes, ignore)?;
    let tape = input.tape();
    let probs = if from_logits { input.softmax(1)? } else { input };
    let mask: Vec<T> = labels.data.iter().map(|&l| if l == ignore { T::zero() } else { T::one() }).collect();
    let mask = tape.constant(Tensor::new(&[labels.n, 1, labels.h, labels.w], mask)?);
    let probs = probs.mul(mask)?;
    let target = tape.constant(target);
    // Sum over batch and pixels, keep classes.
    let per_class = |v: Var<'t, T>| -> Result<Var<'t, T>> {
        let (n, h, w) = (labels.n, labels.h, labels.w);
        v.permute(&[1, 0, 2, 3])?.reshape(&[classes, n * h * w])?.sum_axis(1, false)
    };
    let inter = per_class(probs.mul(target)?)?;
    let psum = per_class(probs)?;
    let ysum = per_class(target)?;
    let s = T::lit(smooth);
    let dice = inter.mul_scalar(T::lit(2.0)).add_scalar(s).div(psum.add(ysum)?.add_scalar(s))?;
    Ok(dice.mean().neg().add_scalar(T::one()))
}

fn weighted<'t, T: Real>(acc: Option<Var<'t, T>>, term: Var<'t, T>, w: f64) -> Result<Option<Var<'t, T>>> {
    // A zero weight leaves the term off the graph so its inputs get no gradient.
    if w == 0.0 {
        return Ok(acc);
    }
    let t = term.mul_scalar(T::lit(w));
    Ok(Some(match acc {
        None => t,
        Some(a) => a.add(t)?,
    }))
}

/// Evaluates every term and composes
/// `total = beta1 (l1 int + l2 grad + l3 ssim + l4 color) + beta2 (ce + dice)`.
pub fn total_loss<'t, T: Real>(
    f: Var<'t, T>,
    ir: Var<'t, T>,
    vis: Var<'t, T>,
    logits: Var<'t, T>,
    labels: &LabelBatch,
    cfg: &LossConfig,
) -> Result<LossBreakdown<'t, T>> {
    let w = &cfg.weights;
    w.validate()?;
    let tape = f.tape();
    let l_int = intensity_loss(f, ir, vis)?;
    let l_grad = gradient_loss(f, ir, vis)?;
    let l_ssim = ssim_loss(f, ir, vis, w, &cfg.ssim)?;
    let l_color = color_loss(f, vis, cfg.ycbcr)?;
    let l_ce = ce_loss(logits, labels, cfg.ignore_index)?;
    let l_dice = dice_loss(logits, labels, true, cfg.dice_smooth, cfg.ignore_index)?;

    let mut fusion = None;
    fusion = weighted(fusion, l_int, w.lambda1)?;
    fusion = weighted(fusion, l_grad, w.lambda2)?;
    fusion = weighted(fusion, l_ssim, w.lambda3)?;
    fusion = weighted(fusion, l_color, w.lambda4)?;
    let fusion = fusion.unwrap_or_else(|| tape.scalar(T::zero()));
    let seg = l_ce.add(l_dice)?;
    let mut total = None;
    total = weighted(total, fusion, w.beta1)?;
    total = weighted(total, seg, w.beta2)?;
    let total = total.unwrap_or_else(|| tape.scalar(T::zero()));

    let v = |x: Var<'t, T>| x.item().as_f64();
    Ok(LossBreakdown {
        l_int: v(l_int),
        l_grad: v(l_grad),
        l_ssim: v(l_ssim),
        l_color: v(l_color),
        l_ce: v(l_ce),
        l_dice: v(l_dice),
        l_fusion: v(fusion),
        l_seg: v(seg),
        l_total: v(total),
        total,
        fusion,
        seg,
    })
}
