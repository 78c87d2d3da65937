#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use icam::cam::{self, BiasMode, ChannelBiasForm, SmoothKind};
use icam::heatmap::{Heatmap, Resolution};
use icam::layer_score::{filter_layers, layer_importance, layer_weights, perturbed_traces};
use icam::model::{build_fixture_model, random_model, ForwardTrace, LayerSpec, ModelSpec, ScalarKind};
use icam::perturb::PerturbationConfig;
use icam::pipeline::synthetic_image;
use icam::render::normalize_minmax;
use icam::rng::Prng;

fn naive_ssim(x: &[f64], y: &[f64], channels: usize) -> f64 {
    let per = x.len() / channels;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..channels {
        let xs = &x[c * per..(c + 1) * per];
        let ys = &y[c * per..(c + 1) * per];
        let n = per as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..per {
            mx += xs[i];
            my += ys[i];
        }
        mx /= n;
        my /= n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in 0..per {
            vx += (xs[i] - mx).powi(2);
            vy += (ys[i] - my).powi(2);
            cxy += (xs[i] - mx) * (ys[i] - my);
        }
        vx /= n;
        vy /= n;
        cxy /= n;
        total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / channels as f64
}

fn naive_weight(orig: &[f64], pert: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let s = naive_ssim(orig, pert, 3);
    let svim = (-(s - 0.5).powi(2) / (2.0 * 0.15 * 0.15)).exp();
    let mut mdd = 0.0;
    for k in 0..p.len() {
        let a = p[k].clamp(1e-12, 1.0);
        let b = q[k].clamp(1e-12, 1.0);
        mdd += (a - b) / 2.0 * (a / b).ln();
    }
    let mds = (1.0 - mdd).clamp(0.0, 1.0);
    (svim * mds).sqrt()
}

#[test]
fn layer_importance_matches_naive_pipeline() {
    let model = build_fixture_model(42);
    let image = synthetic_image(3, 32, 32, 42);
    let config = PerturbationConfig {
        n: 2,
        alpha: 0.4,
        seed: 42,
    };
    let traces = perturbed_traces(&model, &image, &config, None).unwrap();
    let scores = layer_importance(&traces.original, &traces.perturbed, &traces.weights).unwrap();

    let orig = &traces.original;
    let weights: Vec<f64> = traces
        .perturbed
        .iter()
        .map(|t| {
            naive_weight(
                image.data(),
                t.input.data(),
                orig.probabilities.data(),
                t.probabilities.data(),
            )
        })
        .collect();
    for (a, b) in weights.iter().zip(&traces.weights) {
        assert!(rel_error(*a, *b) < 1e-12);
    }
    let saliency: Vec<f64> = image.data().iter().zip(orig.input_gradient.data()).map(|(i, g)| i * g).collect();
    let r = naive_channel_norm(&saliency, 3, 32, 32);
    for (name, score) in &scores {
        let mut expected = 0.0;
        for (t, w) in traces.perturbed.iter().zip(&weights) {
            let pt = t.point(name).unwrap();
            let (c, h, wd) = (pt.activation.shape()[0], pt.activation.shape()[1], pt.activation.shape()[2]);
            let mut phi = vec![0.0; c * h * wd];
            for i in 0..phi.len() {
                phi[i] = (pt.activation.data()[i] * pt.gradient.data()[i]).max(0.0);
            }
            let p = naive_resize(&naive_channel_norm(&phi, c, h, wd), h, wd, 32, 32);
            let mut sq = 0.0;
            for i in 0..p.len() {
                sq += (r[i] - p[i]).powi(2);
            }
            expected += w * sq.sqrt();
        }
        assert!(rel_error(*score, expected) < 1e-10, "{name}: {score} vs {expected}");
        assert!(*score >= 0.0);
    }
}

fn logit_trace(seed: u64) -> ForwardTrace {
    let model = build_fixture_model(42);
    model
        .forward_trace(&synthetic_image(3, 32, 32, seed), None, ScalarKind::Logit)
        .unwrap()
}

fn assert_maps_close(got: &Heatmap, want: &[f64], tol: f64) {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for (g, w) in got.values().iter().zip(want) {
        assert!((g - w).abs() <= tol * scale, "{g} vs {w}");
    }
}

struct Layer<'a> {
    a: &'a [f64],
    g: &'a [f64],
    c: usize,
    n: usize,
}

fn layer<'a>(trace: &'a ForwardTrace, name: &str) -> Layer<'a> {
    let pt = trace.point(name).unwrap();
    let s = pt.activation.shape();
    Layer {
        a: pt.activation.data(),
        g: pt.gradient.data(),
        c: s[0],
        n: s[1] * s[2],
    }
}

fn naive_alpha(l: &Layer, d2: f64, d3: f64) -> Vec<f64> {
    let mut alpha = vec![0.0; l.a.len()];
    for k in 0..l.c {
        let mut cubic = 0.0;
        for p in 0..l.n {
            let i = k * l.n + p;
            cubic += l.a[i] * d3 * l.g[i].powi(3);
        }
        for p in 0..l.n {
            let i = k * l.n + p;
            let num = d2 * l.g[i] * l.g[i];
            let den = 2.0 * num + cubic;
            alpha[i] = if den.abs() <= 1e-8 * ((2.0 * num).abs() + cubic.abs()) {
                0.0
            } else {
                num / den
            };
        }
    }
    alpha
}

fn softmax_derivs(trace: &ForwardTrace) -> (f64, f64, f64) {
    let logits = trace.logits.data();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let y = (logits[trace.class_index] - m).exp() / z;
    (
        y * (1.0 - y),
        y * (1.0 - 3.0 * y + 2.0 * y * y),
        y * (1.0 - 7.0 * y + 12.0 * y * y - 6.0 * y * y * y),
    )
}

#[test]
fn gradcam_matches_loop_reference() {
    for seed in 0..3 {
        let trace = logit_trace(seed);
        for name in ["block1", "block2", "block3"] {
            let l = layer(&trace, name);
            let mut map = vec![0.0; l.n];
            for k in 0..l.c {
                let mut w = 0.0;
                for p in 0..l.n {
                    w += l.g[k * l.n + p];
                }
                w /= l.n as f64;
                for p in 0..l.n {
                    map[p] += w * l.a[k * l.n + p];
                }
            }
            let map: Vec<f64> = map.into_iter().map(|v| v.max(0.0)).collect();
            assert_maps_close(&cam::gradcam_map(&trace, name, SmoothKind::Identity).unwrap(), &map, 1e-12);
        }
    }
}

#[test]
fn layercam_matches_loop_reference() {
    for seed in 0..3 {
        let trace = logit_trace(seed);
        for name in ["block1", "block2", "block3"] {
            let l = layer(&trace, name);
            let mut map = vec![0.0; l.n];
            for k in 0..l.c {
                for p in 0..l.n {
                    map[p] += l.g[k * l.n + p].max(0.0) * l.a[k * l.n + p];
                }
            }
            let map: Vec<f64> = map.into_iter().map(|v| v.max(0.0)).collect();
            assert_maps_close(&cam::layercam_map(&trace, name, SmoothKind::Identity).unwrap(), &map, 1e-12);
        }
    }
}

#[test]
fn gradcampp_matches_loop_reference() {
    let trace = logit_trace(5);
    let e = trace.class_logit().exp();
    for name in ["block1", "block2", "block3"] {
        let l = layer(&trace, name);
        let alpha = naive_alpha(&l, e, e);
        let mut map = vec![0.0; l.n];
        for k in 0..l.c {
            let mut w = 0.0;
            for p in 0..l.n {
                w += alpha[k * l.n + p] * (e * l.g[k * l.n + p]).max(0.0);
            }
            for p in 0..l.n {
                map[p] += w * l.a[k * l.n + p];
            }
        }
        let map: Vec<f64> = map.into_iter().map(|v| v.max(0.0)).collect();
        assert_maps_close(&cam::gradcampp_map(&trace, name, SmoothKind::Exp).unwrap(), &map, 1e-10);
    }
}

fn naive_icam(trace: &ForwardTrace, name: &str, bias: BiasMode, form: ChannelBiasForm) -> Vec<f64> {
    let l = layer(trace, name);
    let (d1, d2, d3) = softmax_derivs(trace);
    let alpha = naive_alpha(&l, d2, d3);
    let s = trace.class_logit();
    let w: Vec<f64> = (0..l.a.len()).map(|i| alpha[i].tanh() * (d1 * l.g[i]).max(0.0)).collect();
    let mut map = vec![0.0; l.n];
    for k in 0..l.c {
        let (mut sw, mut sa, mut swa) = (0.0, 0.0, 0.0);
        for p in 0..l.n {
            let i = k * l.n + p;
            sw += w[i];
            sa += l.a[i];
            swa += w[i] * l.a[i];
        }
        for p in 0..l.n {
            let i = k * l.n + p;
            map[p] += w[i] * l.a[i];
            map[p] += match (bias, form) {
                (BiasMode::None, _) => 0.0,
                (BiasMode::Channel, ChannelBiasForm::ProductOfSums) => s - sw * sa,
                (BiasMode::Channel, ChannelBiasForm::SumOfProducts) => s - swa,
                (BiasMode::Spatial, _) => s - w[i] * sa,
            };
        }
    }
    map.into_iter().map(|v| v.max(0.0)).collect()
}

#[test]
fn icam_layer_map_matches_naive_reimplementation() {
    for seed in [0, 11] {
        let trace = logit_trace(seed);
        for name in ["block1", "block2", "block3"] {
            for bias in [BiasMode::None, BiasMode::Channel, BiasMode::Spatial] {
                for form in [ChannelBiasForm::ProductOfSums, ChannelBiasForm::SumOfProducts] {
                    let got = cam::icam_layer_map(&trace, name, SmoothKind::Softmax, bias, form).unwrap();
                    assert_maps_close(&got, &naive_icam(&trace, name, bias, form), 1e-10);
                }
            }
        }
    }
}

#[test]
fn channel_bias_changes_map_when_pre_relu_signs_are_mixed() {
    let trace = logit_trace(0);
    let raw = cam::icam_layer_raw(&trace, "block2", SmoothKind::Softmax, BiasMode::None, ChannelBiasForm::ProductOfSums)
        .unwrap();
    assert!(raw.data().iter().any(|&v| v < 0.0) && raw.data().iter().any(|&v| v > 0.0));
    let none = cam::icam_layer_map(&trace, "block2", SmoothKind::Softmax, BiasMode::None, ChannelBiasForm::ProductOfSums)
        .unwrap();
    let channel =
        cam::icam_layer_map(&trace, "block2", SmoothKind::Softmax, BiasMode::Channel, ChannelBiasForm::ProductOfSums)
            .unwrap();
    assert_ne!(normalize_minmax(&none).values(), normalize_minmax(&channel).values());
}

#[test]
fn fuse_matches_weighted_sum_oracle() {
    let mut rng = Prng::new(3);
    let dims = [(8, 8), (4, 4), (16, 16)];
    let maps: Vec<(String, Heatmap)> = dims
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| {
            let v = (0..h * w).map(|_| rng.next_f64() * 3.0).collect();
            (format!("l{i}"), Heatmap::new(h, w, v, Resolution::Layer).unwrap())
        })
        .collect();
    let weights = vec![("l0".to_string(), 0.5), ("l1".to_string(), 0.3), ("l2".to_string(), 0.2)];
    let got = cam::fuse(&maps, &weights, 16, 16).unwrap();
    let mut acc = vec![0.0; 256];
    for ((_, m), (_, w)) in maps.iter().zip(&weights) {
        let up = naive_minmax(&naive_resize(m.values(), m.height(), m.width(), 16, 16));
        for (a, v) in acc.iter_mut().zip(up) {
            *a += w * v;
        }
    }
    let want = naive_minmax(&acc);
    for (g, w) in got.values().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn fused_map_invariant_under_score_rescaling() {
    let trace = logit_trace(2);
    let scores = [("block1".to_string(), 0.2), ("block2".to_string(), 0.5), ("block3".to_string(), 0.3)];
    let maps: Vec<(String, Heatmap)> = scores
        .iter()
        .map(|(n, _)| (n.clone(), cam::layercam_map(&trace, n, SmoothKind::Identity).unwrap()))
        .collect();
    let fused = |factor: f64| {
        let scaled: Vec<(String, f64)> = scores.iter().map(|(n, s)| (n.clone(), s * factor)).collect();
        let sel = filter_layers(&scaled, 0.95).unwrap();
        let w = layer_weights(&scaled, &sel).unwrap();
        cam::fuse(&maps, &w, 32, 32).unwrap()
    };
    let base = fused(1.0);
    for factor in [1e-3, 7.0, 1e4] {
        for (a, b) in base.values().iter().zip(fused(factor).values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gradcam_weights_on_gap_linear_head_are_analytic() {
    let spec = ModelSpec {
        input_shape: [3, 8, 8],
        num_classes: 4,
        layers: vec![
            LayerSpec::ConvRelu {
                name: "feat".into(),
                in_channels: 3,
                out_channels: 6,
                kernel_size: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                name: "head".into(),
                in_features: 6,
                out_features: 4,
            },
        ],
        scoring_points: vec!["feat".into()],
    };
    let model = random_model(spec, 9).unwrap();
    let mut rng = Prng::new(4);
    let image = uniform_tensor(&mut rng, &[3, 8, 8]);
    let trace = model.forward_trace(&image, None, ScalarKind::Logit).unwrap();
    let head = model.param("head.weight").unwrap();
    let pt = trace.point("feat").unwrap();
    let weights = cam::gradcam_weights(&pt.gradient, 1.0).unwrap();
    for (k, w) in weights.iter().enumerate() {
        let omega = head.data()[trace.class_index * 6 + k];
        assert!((w - omega / 64.0).abs() < 1e-10);
        for p in 0..64 {
            assert!((pt.gradient.data()[k * 64 + p] - omega / 64.0).abs() < 1e-15);
        }
    }
}

#[test]
fn cam_maps_are_deterministic() {
    let a = logit_trace(4);
    let b = logit_trace(4);
    for name in ["block1", "block2", "block3"] {
        let x = cam::icam_layer_map(&a, name, SmoothKind::Softmax, BiasMode::Spatial, ChannelBiasForm::ProductOfSums);
        let y = cam::icam_layer_map(&b, name, SmoothKind::Softmax, BiasMode::Spatial, ChannelBiasForm::ProductOfSums);
        assert_eq!(x.unwrap(), y.unwrap());
    }
}
