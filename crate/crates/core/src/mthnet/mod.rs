//! The fusion network: a pluggable backbone producing fused features, and a
//! multi-task head whose reconstruction and segmentation branches exchange
//! information through hierarchical cross-attention (HIA-F).

mod config;
pub mod layers;

pub use config::{BackboneConfig, ChannelMode, HiaKvSource, ModelConfig, MthConfig};
pub use layers::{conv, conv_block, cross_attention, linear, AttentionOut, Init, ParamSpec, SpecBuilder};

use crate::diffcore::{BoundParams, ModelParams, ParamGroup, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imgops;

/// Feature extractor shared by both task branches.
pub trait Backbone {
    fn declare(&self, specs: &mut SpecBuilder);

    /// `vis` and `ir` are N x planes x H x W; returns N x C_feat x H x W.
    fn forward<'t, T: Real>(&self, p: &BoundParams<'t, T>, vis: Var<'t, T>, ir: Var<'t, T>) -> Result<Var<'t, T>>;
}

/// Per-modality conv stems, channel concat, two fusion conv blocks. Stride 1
/// throughout, so features keep the input resolution.
#[derive(Clone, Debug)]
pub struct ReferenceBackbone {
    pub cfg: BackboneConfig,
    pub in_planes: usize,
}

impl Backbone for ReferenceBackbone {
    fn declare(&self, s: &mut SpecBuilder) {
        let (w, c) = (self.cfg.base_width, self.cfg.feat_channels);
        for stem in ["vis", "ir"] {
            for i in 0..self.cfg.stages {
                let cin = if i == 0 { self.in_planes } else { w };
                s.conv(&format!("backbone.{stem}_stem.{i}"), ParamGroup::Backbone, cin, w, 3);
            }
        }
        s.conv("backbone.fuse.0", ParamGroup::Backbone, 2 * w, c, 3);
        s.conv("backbone.fuse.1", ParamGroup::Backbone, c, c, 3);
    }

    fn forward<'t, T: Real>(&self, p: &BoundParams<'t, T>, vis: Var<'t, T>, ir: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sv, si) = (vis.shape(), ir.shape());
        if sv != si {
            return Err(Error::shape("backbone", &sv, &si));
        }
        let stem = |name: &str, mut x: Var<'t, T>| -> Result<Var<'t, T>> {
            for i in 0..self.cfg.stages {
                x = conv_block(p, &format!("backbone.{name}_stem.{i}"), x)?;
            }
            Ok(x)
        };
        let joint = Var::concat(&[stem("vis", vis)?, stem("ir", ir)?], 1)?;
        let f = conv_block(p, "backbone.fuse.0", joint)?;
        conv_block(p, "backbone.fuse.1", f)
    }
}

/// High- and low-level token matrices (N x L x d) of one branch.
pub struct TokenPair<'t, T: Real> {
    pub high: Var<'t, T>,
    pub low: Var<'t, T>,
}

pub struct HiaOutput<'t, T: Real> {
    /// Reconstruction features after aggregation (f_RE).
    pub f_agg: Var<'t, T>,
    pub seg_tokens: TokenPair<'t, T>,
    pub re_tokens: TokenPair<'t, T>,
    pub f_high: AttentionOut<'t, T>,
    pub f_low: AttentionOut<'t, T>,
    /// Residual added to f_re, before upsampling (N x C x H' x W').
    pub delta: Var<'t, T>,
}

pub struct ForwardOutput<'t, T: Real> {
    /// N x planes x H x W in (0, 1).
    pub fused: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub features: Var<'t, T>,
    pub f_re: Var<'t, T>,
    pub f_seg: Var<'t, T>,
    pub f_agg: Var<'t, T>,
    pub hia: Option<HiaOutput<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct MultiTaskNet<B = ReferenceBackbone> {
    pub cfg: ModelConfig,
    pub backbone: B,
}

impl MultiTaskNet<ReferenceBackbone> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = ReferenceBackbone { cfg: cfg.backbone, in_planes: cfg.mth.channel_mode.planes() };
        Ok(Self { cfg, backbone })
    }
}

impl<B: Backbone> MultiTaskNet<B> {
    pub fn with_backbone(cfg: ModelConfig, backbone: B) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, backbone })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = SpecBuilder::default();
        self.backbone.declare(&mut s);
        let c = self.cfg.backbone.feat_channels;
        let m = &self.cfg.mth;
        s.conv("mth.re_stem", ParamGroup::FusionHead, c, c, 3);
        s.conv("mth.seg_stem", ParamGroup::SegHead, c, c, 3);
        if m.hia_f_enabled {
            let g = ParamGroup::FusionHead;
            let d = m.embed_dim;
            s.conv("mth.hia.align", g, c, c, 1);
            for e in ["seg_high", "seg_low", "re_high", "re_low"] {
                s.conv(&format!("mth.hia.embed_{e}"), g, c, d, 1);
            }
            s.attention("mth.hia.c_high", g, d);
            s.attention("mth.hia.c_low", g, d);
            s.linear(
                "mth.hia.mlp.0",
                g,
                2 * d,
                m.mlp_hidden,
                Init::XavierUniform { fan_in: 2 * d, fan_out: m.mlp_hidden },
            );
            s.linear("mth.hia.mlp.1", g, m.mlp_hidden, c, Init::Zeros);
        }
        s.conv("mth.fusion_head.0", ParamGroup::FusionHead, c, c, 3);
        s.conv("mth.fusion_head.1", ParamGroup::FusionHead, c, m.channel_mode.planes(), 3);
        s.conv("mth.seg_head.0", ParamGroup::SegHead, c, c, 3);
        s.conv("mth.seg_head.1", ParamGroup::SegHead, c, m.classes, 3);
        s.specs
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        SpecBuilder { specs: self.specs() }.init(seed)
    }

    /// Reconstruction and segmentation features from the shared features.
    pub fn branch_stems<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        features: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((conv_block(p, "mth.re_stem", features)?, conv_block(p, "mth.seg_stem", features)?))
    }

    /// Two 1x1 projections of a feature map, flattened to N x (H'W') x d.
    pub fn channel_embed<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        prefix: &str,
        feat: Var<'t, T>,
    ) -> Result<TokenPair<'t, T>> {
        let s = feat.shape();
        let (n, l, d) = (s[0], s[2] * s[3], self.cfg.mth.embed_dim);
        let tok = |name: &str| -> Result<Var<'t, T>> {
            conv(p, &format!("mth.hia.embed_{prefix}_{name}"), feat, 0)?.reshape(&[n, d, l])?.transpose(1, 2)
        };
        Ok(TokenPair { high: tok("high")?, low: tok("low")? })
    }

    /// Hierarchical interactive attention for reconstruction. Returns f_RE
    /// (f_re plus the aggregated cross-attention residual).
    pub fn hia_f<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        f_seg: Var<'t, T>,
        f_re: Var<'t, T>,
    ) -> Result<HiaOutput<'t, T>> {
        let m = &self.cfg.mth;
        let s = f_re.shape();
        if f_seg.shape() != s {
            return Err(Error::shape("hia_f", &f_seg.shape(), &s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let k = m.token_stride;
        if h % k != 0 || w % k != 0 {
            return Err(Error::invalid("hia_f", format!("{h}x{w} features not divisible by token stride {k}")));
        }
        let (th, tw) = (h / k, w / k);
        let pool = |x: Var<'t, T>| if k > 1 { x.avg_pool2d(k) } else { Ok(x) };
        let aligned = conv(p, "mth.hia.align", f_seg, 0)?;
        let seg_tokens = self.channel_embed(p, "seg", pool(aligned)?)?;
        let re_tokens = self.channel_embed(p, "re", pool(f_re)?)?;
        let kv_high = match m.hia_ch_kv {
            HiaKvSource::FromRe => re_tokens.high,
            HiaKvSource::FromSeg => seg_tokens.low,
        };
        let f_high = cross_attention(p, "mth.hia.c_high", seg_tokens.high, kv_high, m.heads)?;
        let f_low = cross_attention(p, "mth.hia.c_low", re_tokens.low, seg_tokens.low, m.heads)?;
        let cat = Var::concat(&[f_high.output, f_low.output], 2)?;
        let hidden = linear(p, "mth.hia.mlp.0", cat)?.gelu();
        let delta = linear(p, "mth.hia.mlp.1", hidden)?.transpose(1, 2)?.reshape(&[n, c, th, tw])?;
        let up = if k > 1 { delta.upsample_nearest(k)? } else { delta };
        Ok(HiaOutput { f_agg: f_re.add(up)?, seg_tokens, re_tokens, f_high, f_low, delta })
    }

    /// Two conv blocks, sigmoid output.
    pub fn fusion_head<'t, T: Real>(&self, p: &BoundParams<'t, T>, f_agg: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = conv_block(p, "mth.fusion_head.0", f_agg)?;
        Ok(conv(p, "mth.fusion_head.1", x, 1)?.sigmoid())
    }

    pub fn seg_head<'t, T: Real>(&self, p: &BoundParams<'t, T>, f_seg: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = conv_block(p, "mth.seg_head.0", f_seg)?;
        conv(p, "mth.seg_head.1", x, 1)
    }

    /// Backbone input planes for the configured channel mode.
    pub fn inputs<'t, T: Real>(&self, vis: Var<'t, T>, ir: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        match self.cfg.mth.channel_mode {
            ChannelMode::ThreeChannel => Ok((vis, ir)),
            ChannelMode::OneChannel => Ok((imgops::luma(vis, self.cfg.ycbcr)?, imgops::luma(ir, self.cfg.ycbcr)?)),
        }
    }

    /// Full forward pass on RGB inputs (N x 3 x H x W).
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        vis: Var<'t, T>,
        ir: Var<'t, T>,
    ) -> Result<ForwardOutput<'t, T>> {
        let (sv, si) = (vis.shape(), ir.shape());
        if sv != si {
            return Err(Error::shape("model_forward", &sv, &si));
        }
        if sv.len() != 4 || sv[1] != 3 {
            return Err(Error::invalid("model_forward", format!("expected N x 3 x H x W inputs, got {sv:?}")));
        }
        let (bv, bi) = self.inputs(vis, ir)?;
        let features = self.backbone.forward(p, bv, bi)?;
        let (f_re, f_seg) = self.branch_stems(p, features)?;
        let (f_agg, hia) = if self.cfg.mth.hia_f_enabled {
            let h = self.hia_f(p, f_seg, f_re)?;
            (h.f_agg, Some(h))
        } else {
            (f_re, None)
        };
        let fused = self.fusion_head(p, f_agg)?;
        let logits = self.seg_head(p, f_seg)?;
        Ok(ForwardOutput { fused, logits, features, f_re, f_seg, f_agg, hia })
    }

    /// RGB fused image: the network output itself, or in one-channel mode the
    /// fused luma recombined with the visible image's chroma.
    pub fn fused_rgb<'t, T: Real>(&self, fused: Var<'t, T>, vis: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.cfg.mth.channel_mode {
            ChannelMode::ThreeChannel => Ok(fused),
            ChannelMode::OneChannel => imgops::recompose_with_chroma(fused, vis.detach(), self.cfg.ycbcr),
        }
    }
}

/// Per-pixel argmax over the class axis of N x C x H x W logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, classes, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * classes * hw;
        for p in 0..hw {
            let mut best = 0;
            for k in 1..classes {
                if d[base + k * hw + p] > d[base + best * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Gradient-free outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    /// RGB fused image, N x 3 x H x W.
    pub fused: Tensor<T>,
    pub logits: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<B: Backbone> MultiTaskNet<B> {
    pub fn infer<T: Real>(&self, params: &ModelParams<T>, vis: &Tensor<T>, ir: &Tensor<T>) -> Result<Inference<T>> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let vis = tape.constant(vis.clone());
        let out = self.forward(&p, vis, tape.constant(ir.clone()))?;
        let fused = self.fused_rgb(out.fused, vis)?.value();
        let logits = out.logits.value();
        let labels = argmax_labels(&logits);
        Ok(Inference { fused, logits, labels })
    }
}

#[cfg(test)]
mod tests;
