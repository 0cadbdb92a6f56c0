mod common;

use common::oracles::*;

use common::*;
use sosp::arch::{self, count, Granularity, PrunedArch};
use sosp::autodiff;
use sosp::engine::Network;
use sosp::model::{Layer, ModelSpec, ResidualKind};
use sosp::params::ParamVector;
use sosp::selection::{MaskEntry, PruningMask};
use sosp::structures::{segment, Segmentation};
use sosp::zoo::{mlp_toy, ConvNetToy, ResToy};

fn mask_of(seg: &Segmentation, ids: &[usize]) -> PruningMask {
    PruningMask {
        method: "manual".into(),
        ratio: 0.0,
        seed: None,
        entries: ids
            .iter()
            .map(|&s| MaskEntry { structure: s, layer: seg.structures[s].layer, score: 0.0 })
            .collect(),
        shortfall: 0,
    }
}

#[test]
fn compact_network_matches_zeroed_network() {
    let mut r = rng(1);
    for model in [small_convnet(true, true), small_restoy(true), small_mlp(true), ResToy::default().build()] {
        let net = Network::new(&model).unwrap();
        let seg = segment(&model).unwrap();
        for trial in 0..6 {
            let p = random_params(&net, trial);
            let mask = random_mask(&seg, &mut r);
            let applied = arch::apply_mask(&model, &p, &mask, &seg).unwrap();
            let cnet = Network::new(&applied.compact).unwrap();
            let n = 100;
            let x = random_inputs(n, net.input_size(), trial + 50);
            let a = autodiff::forward(&net, &applied.zeroed, &x, n).unwrap();
            let b = autodiff::forward(&cnet, &applied.compact_params, &x, n).unwrap();
            assert!(rel_err(&b, &a) <= 1e-10 || a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-12),
                "{} trial {trial} ratio {}", model.name, mask.ratio);
        }
    }
}

#[test]
fn empty_mask_changes_nothing() {
    let model = small_restoy(true);
    let net = Network::new(&model).unwrap();
    let seg = segment(&model).unwrap();
    let p = random_params(&net, 3);
    let applied = arch::apply_mask(&model, &p, &PruningMask::empty("none"), &seg).unwrap();
    assert_eq!(applied.zeroed, p);
    assert_eq!(applied.compact, model);
    assert_eq!(applied.compact_params, p);
}

#[test]
fn foreign_mask_entries_are_rejected() {
    let model = small_mlp(true);
    let seg = segment(&model).unwrap();
    let p = ParamVector::init(&model, 0).unwrap();
    let mut bad = mask_of(&seg, &[0]);
    bad.entries[0].layer = model.classifier().unwrap();
    assert_eq!(arch::apply_mask(&model, &p, &bad, &seg).unwrap_err().category(), "input");
    let bad = PruningMask { entries: vec![MaskEntry { structure: 999, layer: 0, score: 0.0 }], ..bad };
    assert_eq!(arch::apply_mask(&model, &p, &bad, &seg).unwrap_err().category(), "index");
}

#[test]
fn exact_counts_match_traced_survivors_on_restoy() {
    let model = ResToy::default().build();
    let seg = segment(&model).unwrap();
    let mut r = rng(11);
    for trial in 0..1000 {
        let mask = random_mask(&seg, &mut r);
        let arch = PrunedArch::from_mask(&model, &seg, &mask).unwrap();
        let rep = count(&arch).unwrap();
        assert_eq!((rep.exact_params, rep.exact_macs), traced_counts(&model, &seg, &mask), "trial {trial}");
        assert!(rep.exact_params >= rep.approx_params && rep.exact_macs >= rep.approx_macs);
    }
}

#[test]
fn plain_chains_count_identically_both_ways() {
    let model = ConvNetToy::default().build();
    let seg = segment(&model).unwrap();
    let mut r = rng(12);
    for _ in 0..200 {
        let mask = random_mask(&seg, &mut r);
        let rep = count(&PrunedArch::from_mask(&model, &seg, &mask).unwrap()).unwrap();
        assert_eq!(rep.exact_params, rep.approx_params);
        assert_eq!(rep.exact_macs, rep.approx_macs);
        assert_eq!((rep.exact_params, rep.exact_macs), traced_counts(&model, &seg, &mask));
    }
}

/// Hand-derived closed forms for the unpruned zoo models (default sizes).
#[test]
fn unpruned_counts_match_closed_forms() {
    // ConvNet-toy: widths 8,8 | 16,16 | 32,32 on 8x8, 4x4, 2x2, 3 input channels
    let w = [3u64, 8, 8, 16, 16, 32, 32];
    let hw = [64u64, 64, 16, 16, 4, 4];
    let mut params = 0;
    let mut macs = 0;
    for i in 0..6 {
        params += w[i] * w[i + 1] * 9 + 2 * w[i + 1];
        macs += w[i] * w[i + 1] * 9 * hw[i];
    }
    params += 32 * 10 + 10;
    macs += 32 * 10;
    let rep = count(&PrunedArch::unpruned(&ConvNetToy::default().build())).unwrap();
    assert_eq!((rep.exact_params, rep.exact_macs), (params, macs));
    assert_eq!((rep.approx_params, rep.approx_macs), (params, macs));

    // ResToy: stem 3->8 on 8x8; stage1 two blocks 8->8 (8x8); stage2 8->16 stride 2 (4x4)
    // + 16->16, downsample 8->16; stage3 16->32 (2x2) + 32->32, downsample 16->32.
    let conv = |i: u64, o: u64, hw: u64| (i * o * 9 + 2 * o, i * o * 9 * hw);
    let parts = [
        conv(3, 8, 64),
        conv(8, 8, 64), conv(8, 8, 64), conv(8, 8, 64), conv(8, 8, 64),
        conv(8, 16, 16), conv(16, 16, 16), conv(16, 16, 16), conv(16, 16, 16),
        conv(16, 32, 4), conv(32, 32, 4), conv(32, 32, 4), conv(32, 32, 4),
        (8 * 16 + 2 * 16, 8 * 16 * 16),
        (16 * 32 + 2 * 32, 16 * 32 * 4),
        (32 * 10 + 10, 32 * 10),
    ];
    let (p, m) = parts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let rep = count(&PrunedArch::unpruned(&ResToy::default().build())).unwrap();
    assert_eq!((rep.exact_params, rep.exact_macs), (p, m));
    assert_eq!((rep.approx_params, rep.approx_macs), (p, m));

    // MLP d -> 64 -> 64 -> D with biases
    let rep = count(&PrunedArch::unpruned(&mlp_toy(20, &[64, 64], 10, true))).unwrap();
    assert_eq!(rep.exact_params, 20 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
    assert_eq!(rep.exact_macs, 20 * 64 + 64 * 64 + 64 * 10);
}

fn restoy_layers() -> (ModelSpec, Segmentation, Vec<usize>) {
    let model = ResToy::default().build();
    let seg = segment(&model).unwrap();
    let convs: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.layer, Layer::Conv2d { .. }))
        .map(|(i, _)| i)
        .collect();
    (model, seg, convs)
}

#[test]
fn union_rule_keeps_channels_alive_through_skips() {
    // prune channel 3 of the first block's second conv; the skip still carries it
    let (model, seg, convs) = restoy_layers();
    let second = convs[2];
    let s = seg.in_layer(second)[3];
    let mask = mask_of(&seg, &[s]);
    let rep = count(&PrunedArch::from_mask(&model, &seg, &mask).unwrap()).unwrap();
    let next = rep.layers.iter().find(|l| l.name == convs[3].to_string()).unwrap();
    assert_eq!(next.f_in, 8);
    assert_eq!(next.approx_f_in, 7);
}

#[test]
fn disjoint_survivors_make_approx_strictly_smaller() {
    // stem keeps channels 0..4, first block's second conv keeps 4..8: union is all 8
    let (model, seg, convs) = restoy_layers();
    let mut ids: Vec<usize> = seg.in_layer(convs[0])[4..].to_vec();
    ids.extend_from_slice(&seg.in_layer(convs[2])[..4]);
    let mask = mask_of(&seg, &ids);
    let rep = count(&PrunedArch::from_mask(&model, &seg, &mask).unwrap()).unwrap();
    assert!(rep.approx_params < rep.exact_params);
    assert!(rep.approx_macs < rep.exact_macs);
    let next = rep.layers.iter().find(|l| l.name == convs[3].to_string()).unwrap();
    assert_eq!(next.f_in, 8);
}

#[test]
fn downsample_adds_restore_full_width() {
    let (model, seg, _) = restoy_layers();
    let mut r = rng(4);
    let ds_targets: Vec<usize> = model
        .residuals
        .iter()
        .filter(|res| matches!(res.kind, ResidualKind::Downsample { .. }))
        .map(|res| res.to)
        .collect();
    for _ in 0..100 {
        let mask = random_mask(&seg, &mut r);
        let rep = count(&PrunedArch::from_mask(&model, &seg, &mask).unwrap()).unwrap();
        for &to in &ds_targets {
            // the relu after the add feeds the next conv
            let consumer = (to + 2..model.layers.len())
                .find(|&i| model.layers[i].layer.is_weighted())
                .unwrap();
            let full = model.shapes().unwrap().outputs[to].channels();
            let lc = rep.layers.iter().find(|l| l.name == consumer.to_string()).unwrap();
            assert_eq!(lc.f_in, full);
        }
    }
}

#[test]
fn compact_model_count_equals_exact_count() {
    let (model, seg, _) = restoy_layers();
    let net = Network::new(&model).unwrap();
    let mut r = rng(6);
    for _ in 0..50 {
        let mask = random_mask(&seg, &mut r);
        let p = random_params(&net, 1);
        let applied = arch::apply_mask(&model, &p, &mask, &seg).unwrap();
        let exact = count(&applied.arch).unwrap();
        let compact = count(&PrunedArch::unpruned(&applied.compact)).unwrap();
        assert_eq!(exact.exact_params, compact.exact_params);
        assert_eq!(exact.exact_macs, compact.exact_macs);
        let trainable = applied.compact_params.layout.trainable_count() as u64;
        assert_eq!(trainable, exact.exact_params);
        let again = arch::apply_mask(&applied.compact, &applied.compact_params, &PruningMask::empty("x"), &segment(&applied.compact).unwrap());
        assert!(applied.compact.residuals.iter().all(|r| r.remap.is_none()) || again.unwrap_err().category() == "structural");
    }
}

#[test]
fn layer_ratio_examples() {
    let model = ConvNetToy::default().build();
    let seg = segment(&model).unwrap();
    let empty = arch::layer_ratios(&PruningMask::empty("x"), &seg, &model).unwrap();
    assert!(empty.ratios().iter().all(|&v| v == 0.0));
    let all: Vec<usize> = (0..seg.len()).collect();
    let full = arch::layer_ratios(&mask_of(&seg, &all), &seg, &model).unwrap();
    assert!(full.ratios().iter().all(|&v| v == 1.0));
    let layer = seg.layers()[0];
    let ids = &seg.in_layer(layer)[..2];
    let h = arch::layer_ratios(&mask_of(&seg, ids), &seg, &model).unwrap();
    assert_eq!(h.layers[0].ratio, 0.25);
}

#[test]
fn residual_expansion_needs_whole_blocks() {
    let (model, _, convs) = restoy_layers();
    let e = arch::expand(&model, &[convs[2]], Granularity::Layer, 2.0).unwrap_err();
    assert_eq!(e.category(), "structural");
    assert!(e.to_string().contains("expand the whole block"));
    for block in 0..3 {
        let big = arch::expand(&model, &[block], Granularity::Block, 2.0).unwrap();
        let net = Network::new(&big).unwrap();
        let p = ParamVector::init(&big, 0).unwrap();
        autodiff::forward(&net, &p, &random_inputs(1, net.input_size(), 0), 1).unwrap();
        assert!(count(&PrunedArch::unpruned(&big)).unwrap().exact_params > count(&PrunedArch::unpruned(&model)).unwrap().exact_params);
    }
}

#[test]
fn expansion_rounds_up_by_at_least_one() {
    let model = ConvNetToy { widths: vec![3, 8, 8, 8, 8, 8], ..ConvNetToy::default() }.build();
    let e = arch::expand(&model, &[0], Granularity::Layer, 1.1).unwrap();
    assert_eq!(e.layers[0].layer.out_width(), Some(4));
    assert_eq!(arch::expand(&model, &[0], Granularity::Layer, 0.5).unwrap_err().category(), "config");
}

fn params_of(m: &ModelSpec) -> u64 {
    count(&PrunedArch::unpruned(m)).unwrap().exact_params
}

#[test]
fn widen_hits_the_closest_reachable_count() {
    let model = ConvNetToy::default().build();
    let layer = segment(&model).unwrap().layers()[2];
    let target = params_of(&arch::expand(&model, &[layer], Granularity::Layer, 2.0).unwrap());
    let (wide, m) = arch::widen_uniform(&model, target).unwrap();
    assert!(m > 1.0 && m < 2.0, "multiplier {m}");
    let got = params_of(&wide);
    // exhaustive scan over a fine multiplier grid
    let mut best = u64::MAX;
    let mut k = 1.0;
    while k <= 2.5 {
        let mut spec = model.clone();
        for (i, l) in model.layers.iter().enumerate() {
            if let Layer::Conv2d { out_channels, .. } = l.layer {
                let w = ((out_channels as f64 * k).round() as usize).max(1);
                if let Layer::Conv2d { out_channels, .. } = &mut spec.layers[i].layer {
                    *out_channels = w;
                }
            }
        }
        // rewire by hand: each conv/BN input follows the previous width
        let mut c = 3;
        for l in &mut spec.layers {
            match &mut l.layer {
                Layer::Conv2d { in_channels, out_channels, .. } => {
                    *in_channels = c;
                    c = *out_channels;
                }
                Layer::BatchNorm { channels } => *channels = c,
                Layer::Dense { inputs, .. } => *inputs = c,
                _ => {}
            }
        }
        best = best.min(params_of(&spec).abs_diff(target));
        k += 1e-4;
    }
    assert_eq!(got.abs_diff(target), best);
}

#[test]
fn widen_is_monotone_in_target() {
    let model = small_restoy(true);
    let base = params_of(&model);
    let mut last = 1.0;
    for t in (0..40).map(|i| base + i * base / 10) {
        let (_, m) = arch::widen_uniform(&model, t).unwrap();
        assert!(m >= last);
        last = m;
    }
}

