use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{finite_diff_check, numel, Tape, Tensor};
use crate::lossbank::{total_loss, LabelBatch, LossConfig};

fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape, (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Fills the zero-initialized tensors (biases, final aggregation layer) with
/// small random values and keeps the scaled init elsewhere, so every
/// parameter has a live gradient without saturating the attention softmax.
pub(crate) fn liven(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, prm) in p.iter_mut() {
        if prm.tensor.data().iter().all(|&v| v == 0.0) {
            for v in prm.tensor.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

/// Overwrites every parameter (biases and zero-init layers included) with
/// random values so no pathway is trivially dead.
fn randomize(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, prm) in p.iter_mut() {
        for v in prm.tensor.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn cfg(hia: bool) -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.mth.hia_f_enabled = hia;
    c
}

fn pair(n: usize, side: usize) -> (Tensor<f64>, Tensor<f64>) {
    (rand_tensor(100, &[n, 3, side, side], 0.0, 1.0), rand_tensor(101, &[n, 3, side, side], 0.0, 1.0))
}

#[test]
fn backbone_shape_and_zero_input() {
    let mut c = ModelConfig::default();
    c.backbone.feat_channels = 32;
    let net = MultiTaskNet::new(c).unwrap();
    let params = net.init_params::<f32>(1).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let z = tape.constant(Tensor::<f32>::zeros(&[1, 3, 64, 64]));
    let f = net.backbone.forward(&p, z, z).unwrap();
    assert_eq!(f.shape(), vec![1, 32, 64, 64]);
    assert!(f.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_stems_not_shared() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let mut params = net.init_params::<f64>(2).unwrap();
    randomize(&mut params, 3);
    let (a, b) = pair(1, 8);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let f1 = net.backbone.forward(&p, va, vb).unwrap().value();
    let f2 = net.backbone.forward(&p, vb, va).unwrap().value();
    assert!(f1.max_abs_diff(&f2) > 0.0);
}

#[test]
fn modality_shape_mismatch_errors() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let params = net.init_params::<f64>(2).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let a = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let b = tape.constant(Tensor::zeros(&[1, 3, 8, 6]));
    assert!(matches!(net.forward(&p, a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn branch_stems_shape_and_distinct() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let params = net.init_params::<f64>(4).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let feat = tape.constant(rand_tensor(5, &[1, 4, 6, 6], -1.0, 1.0));
    let (re, seg) = net.branch_stems(&p, feat).unwrap();
    assert_eq!(re.shape(), feat.shape());
    assert_eq!(seg.shape(), feat.shape());
    assert!(re.value().max_abs_diff(&seg.value()) > 0.0);
}

fn seg_stem_grad_from_fusion(hia: bool) -> f64 {
    let net = MultiTaskNet::new(cfg(hia)).unwrap();
    let mut params = net.init_params::<f64>(6).unwrap();
    randomize(&mut params, 7);
    let (a, b) = pair(1, 8);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = net.forward(&p, tape.constant(a), tape.constant(b)).unwrap();
    tape.backward(out.fused.sum()).unwrap();
    let g = p.grads();
    ["mth.seg_stem.weight", "mth.seg_stem.bias"]
        .iter()
        .map(|k| g.get(k).unwrap().data().iter().map(|v| v.abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[test]
fn seg_stem_reached_only_through_hia() {
    assert_eq!(seg_stem_grad_from_fusion(false), 0.0);
    assert!(seg_stem_grad_from_fusion(true) > 0.0);
}

#[test]
fn channel_embed_token_contract() {
    let mut c = ModelConfig::toy();
    c.mth.embed_dim = 8;
    c.mth.token_stride = 1;
    let net = MultiTaskNet::new(c).unwrap();
    let params = net.init_params::<f64>(8).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let feat = tape.constant(rand_tensor(9, &[1, 4, 4, 4], -1.0, 1.0));
    let t = net.channel_embed(&p, "seg", feat).unwrap();
    assert_eq!(t.high.shape(), vec![1, 16, 8]);
    assert_eq!(t.low.shape(), vec![1, 16, 8]);
    let zero = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let t = net.channel_embed(&p, "re", zero).unwrap();
    assert!(t.high.value().data().iter().chain(t.low.value().data()).all(|&v| v == 0.0));
}

/// Attention parameters for `name` with random values.
fn attn_params(name: &str, d: usize, seed: u64) -> ModelParams<f64> {
    let mut s = SpecBuilder::default();
    s.attention(name, ParamGroup::FusionHead, d);
    let mut p = s.init::<f64>(seed).unwrap();
    randomize(&mut p, seed + 1);
    p
}

fn row_times(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout).map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>()).collect()
}

/// Brute-force multi-head attention, one query at a time.
fn attention_oracle(p: &ModelParams<f64>, q: &Tensor<f64>, kv: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (n, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = kv.shape()[1];
    let dh = d / heads;
    let lin = |proj: &str, x: &[f64]| {
        let w = p.tensor(&format!("a.{proj}.weight")).unwrap();
        let zero = Tensor::zeros(&[w.shape()[1]]);
        row_times(x, w, p.tensor(&format!("a.{proj}.bias")).unwrap_or(&zero))
    };
    let mut out = Vec::new();
    for b in 0..n {
        let keys: Vec<Vec<f64>> = (0..lk).map(|j| lin("k", &kv.data()[(b * lk + j) * d..][..d])).collect();
        let vals: Vec<Vec<f64>> = (0..lk).map(|j| lin("v", &kv.data()[(b * lk + j) * d..][..d])).collect();
        for i in 0..lq {
            let qi = lin("q", &q.data()[(b * lq + i) * d..][..d]);
            let mut ctx = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| {
                        qi[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, v) in vals.iter().enumerate() {
                    for c in r.clone() {
                        ctx[c] += e[j] / z * v[c];
                    }
                }
            }
            out.extend(lin("o", &ctx));
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    let (d, heads) = (8, 2);
    let p = attn_params("a", d, 10);
    let q = rand_tensor(11, &[2, 4, d], -1.0, 1.0);
    let kv = rand_tensor(12, &[2, 4, d], -1.0, 1.0);
    let tape = Tape::new();
    let b = p.bind(&tape);
    let out = cross_attention(&b, "a", tape.constant(q.clone()), tape.constant(kv.clone()), heads).unwrap();
    let oracle = attention_oracle(&p, &q, &kv, heads);
    let got = out.output.value();
    let err = got.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
    let w = out.weights.value();
    for row in w.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_single_and_duplicate_kv() {
    let d = 4;
    let p = attn_params("a", d, 20);
    let q = rand_tensor(21, &[1, 3, d], -1.0, 1.0);
    let one = rand_tensor(22, &[1, 1, d], -1.0, 1.0);
    let mut dup = one.data().to_vec();
    dup.extend_from_slice(one.data());
    dup.extend_from_slice(one.data());
    let dup = Tensor::new(&[1, 3, d], dup).unwrap();
    let tape = Tape::new();
    let b = p.bind(&tape);
    let single = cross_attention(&b, "a", tape.constant(q.clone()), tape.constant(one.clone()), 2).unwrap();
    let triple = cross_attention(&b, "a", tape.constant(q), tape.constant(dup), 2).unwrap();
    let v = row_times(one.data(), p.tensor("a.v.weight").unwrap(), p.tensor("a.v.bias").unwrap());
    let expect = row_times(&v, p.tensor("a.o.weight").unwrap(), p.tensor("a.o.bias").unwrap());
    for row in single.output.value().data().chunks(d) {
        for (a, e) in row.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
    assert!(single.output.value().max_abs_diff(&triple.output.value()) < 1e-12);
}

#[test]
fn attention_dim_mismatch_errors() {
    let p = attn_params("a", 4, 30);
    let tape = Tape::new();
    let b = p.bind(&tape);
    let q = tape.constant(Tensor::zeros(&[1, 2, 4]));
    let kv = tape.constant(Tensor::zeros(&[1, 2, 6]));
    assert!(cross_attention(&b, "a", q, kv, 2).is_err());
}

#[test]
fn residual_identity_with_zero_mlp() {
    let net_on = MultiTaskNet::new(cfg(true)).unwrap();
    let net_off = MultiTaskNet::new(cfg(false)).unwrap();
    let mut params = net_on.init_params::<f64>(40).unwrap();
    randomize(&mut params, 41);
    for k in ["mth.hia.mlp.1.weight", "mth.hia.mlp.1.bias"] {
        params.get_mut(k).unwrap().tensor.data_mut().fill(0.0);
    }
    let (a, b) = pair(1, 8);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let on = net_on.forward(&p, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
    let off = net_off.forward(&p, tape.constant(a), tape.constant(b)).unwrap();
    assert_eq!(on.f_agg.value().data(), on.f_re.value().data());
    assert_eq!(on.fused.value().data(), off.fused.value().data());
    assert_eq!(off.f_agg.value().data(), off.f_re.value().data());
}

#[test]
fn residual_identity_at_init() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let params = net.init_params::<f64>(42).unwrap();
    let (a, b) = pair(1, 8);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = net.forward(&p, tape.constant(a), tape.constant(b)).unwrap();
    assert_eq!(out.f_agg.value().data(), out.f_re.value().data());
}

#[test]
fn hia_residual_matches_recomposition() {
    let mut c = ModelConfig::toy();
    c.mth.token_stride = 1;
    let net = MultiTaskNet::new(c).unwrap();
    let mut params = net.init_params::<f64>(50).unwrap();
    randomize(&mut params, 51);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let f_seg = tape.constant(rand_tensor(52, &[1, 4, 3, 3], -1.0, 1.0));
    let f_re = tape.constant(rand_tensor(53, &[1, 4, 3, 3], -1.0, 1.0));
    let h = net.hia_f(&p, f_seg, f_re).unwrap();

    // Independent recomposition: concat the attention outputs token by token,
    // run the MLP row by row, scatter back to channels.
    let fh = h.f_high.output.value();
    let fl = h.f_low.output.value();
    let d = 4;
    let tokens = 9;
    let mut expect = vec![0.0; 4 * tokens];
    for t in 0..tokens {
        let mut x = fh.data()[t * d..][..d].to_vec();
        x.extend_from_slice(&fl.data()[t * d..][..d]);
        let hid: Vec<f64> =
            row_times(&x, params.tensor("mth.hia.mlp.0.weight").unwrap(), params.tensor("mth.hia.mlp.0.bias").unwrap())
                .into_iter()
                .map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
                .collect();
        let y = row_times(
            &hid,
            params.tensor("mth.hia.mlp.1.weight").unwrap(),
            params.tensor("mth.hia.mlp.1.bias").unwrap(),
        );
        for ch in 0..4 {
            expect[ch * tokens + t] = y[ch];
        }
    }
    let (agg, re) = (h.f_agg.value(), f_re.value());
    for ((a, r), e) in agg.data().iter().zip(re.data()).zip(&expect) {
        assert!((a - r - e).abs() < 1e-6);
    }
}

#[test]
fn hia_kv_source_switch_changes_output() {
    let mut c = cfg(true);
    let net_re = MultiTaskNet::new(c).unwrap();
    c.mth.hia_ch_kv = HiaKvSource::FromSeg;
    let net_seg = MultiTaskNet::new(c).unwrap();
    let mut params = net_re.init_params::<f64>(55).unwrap();
    randomize(&mut params, 56);
    let (a, b) = pair(1, 8);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = net_re.forward(&p, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
    let y = net_seg.forward(&p, tape.constant(a), tape.constant(b)).unwrap();
    assert!(x.fused.value().max_abs_diff(&y.fused.value()) > 0.0);
}

#[test]
fn heads_shapes_ranges_and_softmax() {
    let c = ModelConfig { mth: MthConfig { token_stride: 8, ..MthConfig::default() }, ..ModelConfig::default() };
    let net = MultiTaskNet::new(c).unwrap();
    let params = net.init_params::<f32>(60).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let vis = tape.constant(rand_tensor(61, &[1, 3, 64, 64], 0.0, 1.0).cast());
    let ir = tape.constant(rand_tensor(62, &[1, 3, 64, 64], 0.0, 1.0).cast());
    let out = net.forward(&p, vis, ir).unwrap();
    assert_eq!(out.fused.shape(), vec![1, 3, 64, 64]);
    assert_eq!(out.logits.shape(), vec![1, 5, 64, 64]);
    assert!(out.fused.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    let sm = out.logits.softmax(1).unwrap().sum_axis(1, false).unwrap().value();
    assert!(sm.data().iter().all(|&s| (s - 1.0).abs() < 1e-6));
}

#[test]
fn one_channel_mode_output() {
    let mut c = cfg(true);
    c.mth.channel_mode = ChannelMode::OneChannel;
    let net = MultiTaskNet::new(c).unwrap();
    let params = net.init_params::<f64>(70).unwrap();
    let (a, b) = pair(2, 8);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let vis = tape.constant(a);
    let out = net.forward(&p, vis, tape.constant(b)).unwrap();
    assert_eq!(out.fused.shape(), vec![2, 1, 8, 8]);
    let rgb = net.fused_rgb(out.fused, vis).unwrap();
    assert_eq!(rgb.shape(), vec![2, 3, 8, 8]);
    // Chroma of the recomposed image equals the visible image's chroma.
    let ycc_rgb = crate::imgops::rgb_to_ycbcr(rgb, c.ycbcr).unwrap().value();
    let ycc_vis = crate::imgops::rgb_to_ycbcr(vis, c.ycbcr).unwrap().value();
    let chroma = |t: &Tensor<f64>| {
        let s = t.shape().to_vec();
        let plane = s[2] * s[3];
        (0..s[0]).flat_map(|b| t.data()[(b * 3 + 1) * plane..(b * 3 + 3) * plane].to_vec()).collect::<Vec<_>>()
    };
    let err = chroma(&ycc_rgb).iter().zip(chroma(&ycc_vis)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn seg_loss_reaches_backbone() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let params = net.init_params::<f64>(80).unwrap();
    let (a, b) = pair(1, 8);
    let labels = LabelBatch::new(1, 8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = net.forward(&p, tape.constant(a), tape.constant(b)).unwrap();
    let l = crate::lossbank::ce_loss(out.logits, &labels, 255).unwrap();
    tape.backward(l).unwrap();
    let g = p.grads();
    let any = params
        .iter()
        .filter(|(_, prm)| prm.group == ParamGroup::Backbone)
        .any(|(k, _)| g.get(k).unwrap().data().iter().any(|v| v.abs() > 0.0));
    assert!(any);
}

#[test]
fn batch_of_two_and_determinism() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let params = net.init_params::<f64>(90).unwrap();
    let (a, b) = pair(2, 8);
    let run = || {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let o = net.forward(&p, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        (o.fused.value(), o.logits.value())
    };
    let (f1, l1) = run();
    let (f2, l2) = run();
    assert_eq!(f1.shape(), &[2, 3, 8, 8]);
    assert_eq!(l1.shape(), &[2, 3, 8, 8]);
    assert_eq!(f1.data(), f2.data());
    assert_eq!(l1.data(), l2.data());
}

#[test]
fn parameter_groups_partition() {
    let net = MultiTaskNet::new(ModelConfig::default()).unwrap();
    let params = net.init_params::<f32>(0).unwrap();
    let total = params.len();
    let sum: usize = ParamGroup::ALL.iter().map(|g| params.iter().filter(|(_, p)| p.group == *g).count()).sum();
    assert_eq!(sum, total);
    for (path, prm) in params.iter() {
        let expect = if path.starts_with("backbone.") {
            ParamGroup::Backbone
        } else if path.starts_with("mth.seg") {
            ParamGroup::SegHead
        } else {
            ParamGroup::FusionHead
        };
        assert_eq!(prm.group, expect, "{path}");
    }
    assert!(params.paths().any(|p| p.starts_with("mth.hia.")));
    let n = params.count(None);
    assert!((50_000..=500_000).contains(&n), "{n}");
}

#[test]
fn invalid_config_rejected() {
    let mut c = ModelConfig::default();
    c.backbone.feat_channels = 15;
    assert!(MultiTaskNet::new(c).is_err());
    let mut c = ModelConfig::default();
    c.mth.heads = 3;
    assert!(MultiTaskNet::new(c).is_err());
    let mut c = ModelConfig::default();
    c.mth.classes = 1;
    assert!(MultiTaskNet::new(c).is_err());
}

#[test]
fn full_model_finite_difference() {
    let net = MultiTaskNet::new(cfg(true)).unwrap();
    let mut params = net.init_params::<f64>(100).unwrap();
    liven(&mut params, 101);
    let (a, b) = pair(1, 8);
    let labels = LabelBatch::new(1, 8, 8, (0..64).map(|i| ((i / 7) % 3) as u8).collect()).unwrap();
    let lc = LossConfig { ssim: crate::imgops::SsimParams { window: 3, ..Default::default() }, ..Default::default() };
    let r = finite_diff_check(
        |tape, p| {
            let o = net.forward(p, tape.constant(a.clone()), tape.constant(b.clone()))?;
            let vis = tape.constant(a.clone());
            let ir = tape.constant(b.clone());
            Ok(total_loss(o.fused, ir, vis, o.logits, &labels, &lc)?.total)
        },
        &params,
        1e-4,
    )
    .unwrap();
    assert_eq!(r.checked, params.count(None));
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
