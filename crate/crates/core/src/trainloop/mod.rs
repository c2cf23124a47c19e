//! Single-stage training of the multi-task model: Adam on the composite loss,
//! early stopping on validation loss, ablation switches, and the
//! fusion/segmentation gradient-projection probe.

mod adam;
mod probe;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use probe::{grad_projection_probe, projection, GradProjectionRecord};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{make_batch, random_crop_pair, Batch, DatasetSplit, SamplePair};
use crate::diffcore::{ModelParams, Tape};
use crate::error::{Error, Result};
use crate::fusemetrics::{image_metrics, Confusion, MetricParams, MetricsReport};
use crate::lossbank::{total_loss, LossBreakdown, LossConfig, IGNORE_INDEX};
use crate::mthnet::{Backbone, ChannelMode, ModelConfig, MultiTaskNet};

/// Switches for the component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub hia_f_enabled: bool,
    pub use_seg_loss: bool,
    pub use_color_loss: bool,
    pub channel_mode: ChannelMode,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { hia_f_enabled: true, use_seg_loss: true, use_color_loss: true, channel_mode: ChannelMode::ThreeChannel }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoHiaF,
    NoSegLoss,
    NoColorLoss,
    OneChannel,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoHiaF,
        AblationVariant::NoSegLoss,
        AblationVariant::NoColorLoss,
        AblationVariant::OneChannel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoHiaF => "w/o HIA-F",
            AblationVariant::NoSegLoss => "w/o L_seg",
            AblationVariant::NoColorLoss => "w/o L_color",
            AblationVariant::OneChannel => "channel 3->1",
        }
    }

    /// Parses the CLI spelling (`hia_f`, `seg_loss`, `color_loss`, `one_channel`, `full`).
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => AblationVariant::Full,
            "hia_f" => AblationVariant::NoHiaF,
            "seg_loss" => AblationVariant::NoSegLoss,
            "color_loss" => AblationVariant::NoColorLoss,
            "one_channel" => AblationVariant::OneChannel,
            _ => return None,
        })
    }

    pub fn apply(self, flags: &mut AblationFlags) {
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoHiaF => flags.hia_f_enabled = false,
            AblationVariant::NoSegLoss => flags.use_seg_loss = false,
            AblationVariant::NoColorLoss => flags.use_color_loss = false,
            AblationVariant::OneChannel => flags.channel_mode = ChannelMode::OneChannel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of pairs used for training; the rest validates.
    pub split_ratio: f64,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    pub log_grad_projection: bool,
    /// Steps between projection probes when logging is on.
    pub grad_projection_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// CPU-sized settings for 64 x 64 synthetic data.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            patience: 10,
            batch_size: 8,
            crop: 64,
            adam: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
            seed: 1,
            split_ratio: 0.9,
            loss: LossConfig::default(),
            ablation: AblationFlags::default(),
            log_grad_projection: false,
            grad_projection_interval: 10,
        }
    }

    /// The published protocol: 256 x 256 crops, batch 16, lr 5e-5, 100 epochs.
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            crop: 256,
            adam: AdamConfig { lr: 5e-5, ..AdamConfig::default() },
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("epochs, batch size and crop must be positive".into()));
        }
        if self.patience >= self.epochs {
            return Err(Error::Config(format!("patience {} must be below epochs {}", self.patience, self.epochs)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.split_ratio)));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        let bad_lr = !(self.adam.lr > 0.0);
        if bad_lr || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam needs lr > 0 and betas in [0, 1)".into()));
        }
        if self.log_grad_projection && self.grad_projection_interval == 0 {
            return Err(Error::Config("grad projection interval must be positive".into()));
        }
        self.loss.weights.validate()
    }

    /// Loss settings after the ablation switches: no segmentation loss sets
    /// beta2 to 0, no color loss sets lambda4 to 0.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss;
        if !self.ablation.use_seg_loss {
            l.weights.beta2 = 0.0;
        }
        if !self.ablation.use_color_loss {
            l.weights.lambda4 = 0.0;
        }
        l
    }

    /// `base` with the architectural ablation switches applied. A switch
    /// takes effect when either the flags or `base` request it.
    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        let mut m = base;
        m.mth.hia_f_enabled &= self.ablation.hia_f_enabled;
        if self.ablation.channel_mode == ChannelMode::OneChannel {
            m.mth.channel_mode = ChannelMode::OneChannel;
        }
        m
    }

    /// Resolves the architecture against `base` and copies the outcome back
    /// into the ablation flags, so that the two agree.
    pub fn reconcile(&mut self, base: ModelConfig) -> ModelConfig {
        let m = self.model_config(base);
        self.ablation.hia_f_enabled = m.mth.hia_f_enabled;
        self.ablation.channel_mode = m.mth.channel_mode;
        m
    }
}

/// Mean loss terms over an epoch, weighted by samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub l_int: f64,
    pub l_grad: f64,
    pub l_ssim: f64,
    pub l_color: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_fusion: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

#[derive(Default)]
struct LossAccum {
    sum: LossMeans,
    weight: f64,
}

impl LossAccum {
    fn add<T: crate::diffcore::Real>(&mut self, b: &LossBreakdown<'_, T>, w: usize) {
        let w = w as f64;
        let s = &mut self.sum;
        s.l_int += w * b.l_int;
        s.l_grad += w * b.l_grad;
        s.l_ssim += w * b.l_ssim;
        s.l_color += w * b.l_color;
        s.l_ce += w * b.l_ce;
        s.l_dice += w * b.l_dice;
        s.l_fusion += w * b.l_fusion;
        s.l_seg += w * b.l_seg;
        s.l_total += w * b.l_total;
        self.weight += w;
    }

    fn mean(&self) -> LossMeans {
        let k = if self.weight > 0.0 { 1.0 / self.weight } else { 0.0 };
        let s = &self.sum;
        LossMeans {
            l_int: s.l_int * k,
            l_grad: s.l_grad * k,
            l_ssim: s.l_ssim * k,
            l_color: s.l_color * k,
            l_ce: s.l_ce * k,
            l_dice: s.l_dice * k,
            l_fusion: s.l_fusion * k,
            l_seg: s.l_seg * k,
            l_total: s.l_total * k,
        }
    }
}

/// One completed epoch. Timing is kept out so that records of a replayed run
/// compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train: LossMeans,
    pub val: LossMeans,
    pub val_miou: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Epoch after which early stopping ended the run, if it did.
    pub stopped_at: Option<usize>,
    pub projections: Vec<GradProjectionRecord>,
    /// Wall-clock seconds per epoch, training and validation together.
    pub epoch_secs: Vec<f64>,
}

impl TrainHistory {
    /// One JSON object per epoch, followed by one summary object.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            let mut v = serde_json::to_value(e)?;
            v["kind"] = "epoch".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "kind": "summary",
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_at": self.stopped_at,
            "epochs_completed": self.epochs.len(),
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }
}

/// Stop once `patience` consecutive epochs fail to lower the best value.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, bad: 0 }
    }

    /// Records `value` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.bad >= self.patience)
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: ModelParams<f32>,
    pub last: ModelParams<f32>,
    pub history: TrainHistory,
}

/// Validation loss means and pooled mIoU of the segmentation branch.
pub fn validate<B: Backbone>(
    net: &MultiTaskNet<B>,
    params: &ModelParams<f32>,
    pairs: &[SamplePair],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<(LossMeans, Option<f64>)> {
    let mut acc = LossAccum::default();
    let mut conf = Confusion::new(net.cfg.mth.classes);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let batch = make_batch(&chunk.iter().collect::<Vec<_>>())?;
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let b = step_losses(net, &p, &tape, &batch, loss)?;
        acc.add(&b.0, chunk.len());
        let pred = crate::mthnet::argmax_labels(&b.1);
        conf.add(&pred, &batch.labels.data, loss.ignore_index)?;
    }
    Ok((acc.mean(), conf.iou(&[]).miou))
}

fn step_losses<'t, B: Backbone>(
    net: &MultiTaskNet<B>,
    p: &crate::diffcore::BoundParams<'t, f32>,
    tape: &'t Tape<f32>,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(LossBreakdown<'t, f32>, crate::diffcore::Tensor<f32>)> {
    let vis = tape.constant(batch.vis.clone());
    let ir = tape.constant(batch.ir.clone());
    let out = net.forward(p, vis, ir)?;
    let fused = net.fused_rgb(out.fused, vis)?;
    let b = total_loss(fused, ir, vis, out.logits, &batch.labels, loss)?;
    Ok((b, out.logits.value()))
}

/// Trains `init` in place of a fresh model. `net` must already carry the
/// architectural ablation switches of `cfg`.
pub fn train<B: Backbone>(
    cfg: &TrainConfig,
    net: &MultiTaskNet<B>,
    data: &DatasetSplit,
    init: ModelParams<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset(format!(
            "empty split: {} training and {} validation pairs",
            data.train.len(),
            data.val.len()
        )));
    }
    let m = &net.cfg.mth;
    if m.hia_f_enabled != cfg.ablation.hia_f_enabled || m.channel_mode != cfg.ablation.channel_mode {
        return Err(Error::Config("model architecture does not match the ablation switches".into()));
    }
    let min_side = data.train.iter().map(|p| p.height().min(p.width())).min().unwrap_or(0);
    if cfg.crop > min_side {
        return Err(Error::Config(format!("crop {} exceeds smallest training image side {min_side}", cfg.crop)));
    }
    let loss = cfg.effective_loss();
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = params.clone();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_at: None,
        projections: Vec::new(),
        epoch_secs: Vec::new(),
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = LossAccum::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let crops = idx
                .iter()
                .map(|&i| random_crop_pair(&data.train[i], cfg.crop, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&crops.iter().collect::<Vec<_>>())?;
            if cfg.log_grad_projection && state.step.is_multiple_of(cfg.grad_projection_interval as u64) {
                history.projections.push(grad_projection_probe(net, &params, &batch, &loss, state.step)?);
            }
            let tape = Tape::new();
            let p = params.bind(&tape);
            let (b, _) = step_losses(net, &p, &tape, &batch, &loss)?;
            if !b.l_total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {} (int {}, grad {}, ssim {}, color {}, ce {}, dice {})",
                    steps + 1,
                    b.l_int,
                    b.l_grad,
                    b.l_ssim,
                    b.l_color,
                    b.l_ce,
                    b.l_dice
                )));
            }
            acc.add(&b, idx.len());
            tape.backward(b.total)?;
            let grads = p.grads();
            drop(p);
            adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
            steps += 1;
        }
        let (val, val_miou) = validate(net, &params, &data.val, cfg.batch_size, &loss)?;
        if !val.l_total.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let (improved, stop) = stopper.observe(epoch, val.l_total);
        if improved {
            best = params.clone();
        }
        history.epochs.push(EpochRecord { epoch, steps, train: acc.mean(), val, val_miou, improved });
        history.epoch_secs.push(started.elapsed().as_secs_f64());
        if stop {
            history.stopped_at = Some(epoch);
            break;
        }
    }
    history.best_epoch = stopper.best_epoch;
    history.best_val_loss = stopper.best;
    Ok(TrainOutcome { best, last: params, history })
}

/// Fusion metrics of the model's fused output and pooled mIoU of its
/// segmentation branch over `pairs`.
pub fn evaluate_model<B: Backbone>(
    net: &MultiTaskNet<B>,
    params: &ModelParams<f32>,
    pairs: &[SamplePair],
    metrics: &MetricParams,
) -> Result<MetricsReport> {
    let mut conf = Confusion::new(net.cfg.mth.classes);
    let mut images = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let out = net.infer(params, &pair.vis, &pair.ir)?;
        let fused = out.fused.map(|v| v.clamp(0.0, 1.0));
        let mut m = image_metrics(&pair.id, &fused, &pair.vis, &pair.ir, metrics)?;
        let r = crate::fusemetrics::iou(&out.labels, &pair.labels, conf.classes, &[], IGNORE_INDEX)?;
        conf.add(&out.labels, &pair.labels, IGNORE_INDEX)?;
        m.iou = Some(r.per_class);
        m.miou = r.miou;
        images.push(m);
    }
    MetricsReport::from_images(images, Some(&conf), &[])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub seed: u64,
    /// Effective task and color weights the variant trained with.
    pub beta2: f64,
    pub lambda4: f64,
    pub flags: AblationFlags,
    pub best_epoch: usize,
    pub mi: f64,
    pub qabf: f64,
    pub ssim: f64,
    pub delta_e: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean mIoU of a variant over its seeds.
    pub fn mean_miou(&self, variant: AblationVariant) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).filter_map(|r| r.miou).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("variant,seed,MI,Qabf,SSIM,dE,mIoU\n");
        for r in &self.rows {
            let miou = r.miou.map(|v| format!("{v:.4}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{miou}\n",
                r.label, r.seed, r.mi, r.qabf, r.ssim, r.delta_e
            ));
        }
        s
    }
}

/// Trains and scores each variant on the same data for every seed. `base`
/// supplies the shared settings; its seed is replaced by each entry of `seeds`.
pub fn run_ablation(
    base: &TrainConfig,
    model: ModelConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    data: &DatasetSplit,
    metrics: &MetricParams,
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut report = AblationReport::default();
    for &seed in seeds {
        for &variant in variants {
            let mut cfg = base.clone();
            cfg.seed = seed;
            variant.apply(&mut cfg.ablation);
            let net = MultiTaskNet::new(cfg.reconcile(model))?;
            let init = net.init_params::<f32>(seed)?;
            let out = train(&cfg, &net, data, init)?;
            let r = evaluate_model(&net, &out.best, &data.val, metrics)?;
            let loss = cfg.effective_loss();
            report.rows.push(AblationRow {
                variant,
                label: variant.label().to_owned(),
                seed,
                beta2: loss.weights.beta2,
                lambda4: loss.weights.lambda4,
                flags: cfg.ablation,
                best_epoch: out.history.best_epoch,
                mi: r.mean.mi,
                qabf: r.mean.qabf,
                ssim: r.mean.ssim,
                delta_e: r.mean.delta_e,
                miou: r.miou,
            });
        }
    }
    Ok(report)
}
