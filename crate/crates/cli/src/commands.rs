use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mtvif::datakit::{
    load_checkpoint, load_dataset, make_batch, random_crop_pair, read_rgb, save_checkpoint, save_pair, split,
    synth_dataset, write_labels, write_rgb, SamplePair, GENERATOR_TAG,
};
use mtvif::diffcore::{ModelParams, Tape, Tensor};
use mtvif::fusemetrics::{evaluate_directory, MetricParams, SegEval};
use mtvif::mthnet::{ModelConfig, MultiTaskNet, ReferenceBackbone};
use mtvif::trainloop::{grad_projection_probe, run_ablation, train as run_training, AblationVariant};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::{CliError, ConfigArgs};

fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut rc = RunConfig::load(&args.profile, args.config.as_deref())?;
    if let Some(s) = args.seed {
        rc.train.seed = s;
        rc.synth.seed = s;
    }
    Ok(rc)
}

fn parse_size(s: &str) -> Result<usize, CliError> {
    let bad = || CliError::Usage(format!("size `{s}` is not HxW or a single side"));
    let parts: Vec<usize> =
        s.split(['x', 'X']).map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [side] => Ok(*side),
        [h, w] if h == w => Ok(*h),
        [h, w] => Err(CliError::Usage(format!("only square scenes are generated, got {h}x{w}"))),
        _ => Err(bad()),
    }
}

fn ensure_empty_or_forced(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(CliError::Usage(format!("{} exists and is not empty (use --force)", dir.display())));
    }
    Ok(())
}

pub fn synth(
    out: &Path,
    count: usize,
    size: Option<&str>,
    classes: Option<usize>,
    force: bool,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut rc = resolve(args)?;
    if let Some(s) = size {
        rc.synth.size = parse_size(s)?;
    }
    if let Some(c) = classes {
        rc.synth.classes = c;
    }
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    rc.synth.validate()?;
    ensure_empty_or_forced(out, force)?;
    let pairs = synth_dataset(&rc.synth, count)?;
    for p in &pairs {
        save_pair(out, p)?;
    }
    let manifest = json!({
        "generator": GENERATOR_TAG,
        "count": count,
        "synth": rc.synth,
        "ids": pairs.iter().map(|p| &p.id).collect::<Vec<_>>(),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    rc.write_resolved(out)?;
    eprintln!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn checkpoint_json(rc: &RunConfig) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::to_value(rc)?)
}

fn load_model(ckpt: &Path) -> Result<(RunConfig, MultiTaskNet<ReferenceBackbone>, ModelParams<f32>), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let rc: RunConfig = serde_json::from_value(ck.config)
        .map_err(|e| CliError::Runtime(format!("checkpoint {} has no usable run config: {e}", ckpt.display())))?;
    let net = MultiTaskNet::new(rc.model)?;
    let mut params = net.init_params::<f32>(0)?;
    params.assign_from(&ck.params)?;
    Ok((rc, net, params))
}

pub fn train(
    data: &Path,
    out: &Path,
    ablate: &[String],
    epochs: Option<usize>,
    log_projection: bool,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut rc = resolve(args)?;
    if let Some(e) = epochs {
        rc.train.epochs = e;
        rc.train.patience = rc.train.patience.min(e.saturating_sub(1));
    }
    for a in ablate {
        let v = AblationVariant::parse(a).ok_or_else(|| {
            CliError::Usage(format!("unknown ablation `{a}` (hia_f, seg_loss, color_loss, one_channel)"))
        })?;
        v.apply(&mut rc.train.ablation);
    }
    rc.train.log_grad_projection |= log_projection;
    rc.train.loss = rc.train.effective_loss();
    rc.model = rc.train.reconcile(rc.model);
    rc.train.validate()?;
    rc.model.validate()?;

    let pairs = load_dataset(data)?;
    let min_side = pairs.iter().map(|p| p.height().min(p.width())).min().unwrap_or(0);
    if rc.train.crop > min_side {
        return Err(CliError::Usage(format!("crop {} exceeds smallest image side {min_side}", rc.train.crop)));
    }
    let split = split(pairs, rc.train.split_ratio, rc.train.seed)?;
    let net = MultiTaskNet::new(rc.model)?;
    let init = net.init_params::<f32>(rc.train.seed)?;
    eprintln!(
        "training on {} pairs ({} validation), {} parameters",
        split.train.len(),
        split.val.len(),
        init.count(None)
    );
    let outcome = run_training(&rc.train, &net, &split, init)?;
    fs::create_dir_all(out)?;
    let cj = checkpoint_json(&rc)?;
    save_checkpoint(&out.join("best.ckpt"), &outcome.best, &cj)?;
    save_checkpoint(&out.join("last.ckpt"), &outcome.last, &cj)?;
    fs::write(out.join("history.jsonl"), outcome.history.to_jsonl()?)?;
    fs::write(
        out.join("timing.json"),
        serde_json::to_string(&json!({ "epoch_secs": outcome.history.epoch_secs }))? + "\n",
    )?;
    if !outcome.history.projections.is_empty() {
        let mut s = String::new();
        for r in &outcome.history.projections {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        fs::write(out.join("projections.jsonl"), s)?;
    }
    rc.write_resolved(out)?;
    let h = &outcome.history;
    eprintln!(
        "done: {} epochs, best epoch {} (val loss {:.4}){}",
        h.epochs.len(),
        h.best_epoch,
        h.best_val_loss,
        h.stopped_at.map(|e| format!(", stopped early at {e}")).unwrap_or_default()
    );
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", dir.display())))? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_owned());
            }
        }
    }
    Ok(out)
}

/// Channels of a 1 x C x H x W map tiled row-major into one gray image, each
/// channel min-max scaled to [0, 1].
fn mosaic(feat: &Tensor<f32>) -> Tensor<f32> {
    let s = feat.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let mut data = vec![0.0f32; rows * h * cols * w];
    for ch in 0..c {
        let plane = &feat.data()[ch * h * w..(ch + 1) * h * w];
        let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (ty, tx) = (ch / cols, ch % cols);
        for y in 0..h {
            for x in 0..w {
                data[(ty * h + y) * cols * w + tx * w + x] = (plane[y * w + x] - lo) / span;
            }
        }
    }
    Tensor::new(&[1, 1, rows * h, cols * w], data).expect("mosaic shape")
}

fn describe_mismatch(a: &ModelConfig, b: &ModelConfig) -> String {
    if a.mth.channel_mode != b.mth.channel_mode {
        format!("channel mode {:?} in checkpoint, {:?} in config", a.mth.channel_mode, b.mth.channel_mode)
    } else {
        "model settings differ between checkpoint and config".into()
    }
}

pub fn fuse(
    ckpt: &Path,
    vis_dir: &Path,
    ir_dir: &Path,
    out: &Path,
    dump_features: bool,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let (rc, net, params) = load_model(ckpt)?;
    if let Some(c) = config {
        let want = RunConfig::load("desk", Some(c))?;
        let want_model = want.train.clone().reconcile(want.model);
        if want_model != rc.model {
            return Err(CliError::Usage(format!(
                "checkpoint does not match config: {}",
                describe_mismatch(&rc.model, &want_model)
            )));
        }
    }
    let stems = png_stems(vis_dir)?;
    if stems.is_empty() {
        return Err(CliError::Runtime(format!("no PNG images in {}", vis_dir.display())));
    }
    let have_ir = png_stems(ir_dir)?;
    let missing: Vec<&String> = stems.iter().filter(|s| !have_ir.contains(*s)).collect();
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!("no infrared counterpart for {missing:?}")));
    }
    for sub in ["fused", "seg"] {
        fs::create_dir_all(out.join(sub))?;
    }
    if dump_features {
        fs::create_dir_all(out.join("features"))?;
    }
    for stem in &stems {
        let file = format!("{stem}.png");
        let vis = read_rgb(&vis_dir.join(&file))?;
        let ir = read_rgb(&ir_dir.join(&file))?;
        let r = net.infer(&params, &vis, &ir)?;
        write_rgb(&out.join("fused").join(&file), &r.fused.map(|v| v.clamp(0.0, 1.0)))?;
        write_labels(&out.join("seg").join(&file), &r.labels, vis.shape()[2], vis.shape()[3])?;
        if dump_features {
            let tape = Tape::new();
            let p = params.bind_frozen(&tape);
            let f = net.forward(&p, tape.constant(vis.clone()), tape.constant(ir.clone()))?;
            write_rgb(&out.join("features").join(format!("{stem}_re.png")), &mosaic(&f.f_re.value()))?;
            write_rgb(&out.join("features").join(format!("{stem}_seg.png")), &mosaic(&f.f_seg.value()))?;
        }
    }
    rc.write_resolved(out)?;
    eprintln!("fused {} pairs into {}", stems.len(), out.display());
    Ok(())
}

pub fn eval(
    fused: &Path,
    vis: &Path,
    ir: &Path,
    labels: Option<&Path>,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let metrics = MetricParams::default();
    let model = ckpt.map(load_model).transpose()?;
    let seg = match (&model, labels) {
        (Some((_, net, params)), Some(l)) => Some(SegEval { net, params, labels_dir: l, ignored: &[] }),
        _ => None,
    };
    let report = evaluate_directory(fused, vis, ir, seg, &metrics)?;
    fs::create_dir_all(out)?;
    let mut jsonl = Vec::new();
    report.write_jsonl(&mut jsonl)?;
    fs::write(out.join("metrics.jsonl"), jsonl)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(out.join("metrics.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv).lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    Ok(())
}

pub fn grad_analyze(ckpt: &Path, data: &Path, steps: usize, out: &Path) -> Result<(), CliError> {
    if steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let (rc, net, params) = load_model(ckpt)?;
    let pairs = load_dataset(data)?;
    let split = split(pairs, rc.train.split_ratio, rc.train.seed)?;
    let records = probe_batches(&rc, &net, &params, &split.train, steps)?;
    let mut s = String::new();
    for r in &records {
        let mut v = serde_json::to_value(r)?;
        v["kind"] = "step".into();
        s.push_str(&serde_json::to_string(&v)?);
        s.push('\n');
    }
    let n = records.len() as f64;
    let summary = json!({
        "kind": "summary",
        "steps": records.len(),
        "mean_proj_fus_on_seg": records.iter().map(|r| r.proj_fus_on_seg).sum::<f64>() / n,
        "mean_proj_seg_on_fus": records.iter().map(|r| r.proj_seg_on_fus).sum::<f64>() / n,
        "mean_cosine": records.iter().map(|r| r.cosine).sum::<f64>() / n,
        "degenerate_steps": records.iter().filter(|r| r.degenerate).count(),
    });
    s.push_str(&serde_json::to_string(&summary)?);
    s.push('\n');
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, s)?;
    println!("{summary}");
    Ok(())
}

/// `steps` training-style batches (seeded shuffle, random crops), cycling
/// through the pairs as often as needed.
fn probe_batches(
    rc: &RunConfig,
    net: &MultiTaskNet<ReferenceBackbone>,
    params: &ModelParams<f32>,
    pairs: &[SamplePair],
    steps: usize,
) -> Result<Vec<mtvif::trainloop::GradProjectionRecord>, CliError> {
    let t = &rc.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(u64::MAX);
    let crop = t.crop.min(pairs.iter().map(|p| p.height().min(p.width())).min().unwrap_or(0));
    let loss = t.effective_loss();
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut idx = Vec::with_capacity(t.batch_size);
        while idx.len() < t.batch_size.min(pairs.len()) {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled above"));
        }
        let crops = idx.iter().map(|&i| random_crop_pair(&pairs[i], crop, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        let batch = make_batch(&crops.iter().collect::<Vec<_>>())?;
        out.push(grad_projection_probe(net, params, &batch, &loss, step as u64)?);
    }
    Ok(out)
}

pub fn ablation(
    data: &Path,
    out: &Path,
    variants: &[String],
    seeds: &[u64],
    epochs: Option<usize>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let mut rc = resolve(args)?;
    if let Some(e) = epochs {
        rc.train.epochs = e;
        rc.train.patience = rc.train.patience.min(e.saturating_sub(1));
    }
    let vs = variants
        .iter()
        .map(|v| AblationVariant::parse(v.trim()).ok_or_else(|| CliError::Usage(format!("unknown variant `{v}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    rc.train.validate()?;
    let pairs = load_dataset(data)?;
    let split = split(pairs, rc.train.split_ratio, rc.train.seed)?;
    let report = run_ablation(&rc.train, rc.model, &vs, seeds, &split, &MetricParams::default())?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), report.to_table())?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    rc.write_resolved(out)?;
    print!("{}", report.to_table());
    Ok(())
}
