mod common;

use common::oracles::*;

use proptest::prelude::*;
use rand::Rng;
use sosp::saliency::{QMatrix, SaliencyVector};
use sosp::selection::*;
use sosp::structures::segment;

#[test]
fn greedy_matches_literal_recomputation() {
    let mut r = common::rng(2024);
    for trial in 0..1000 {
        let size = r.gen_range(1..=12);
        let q = random_q(size, &mut r, trial % 2 == 0);
        let seg = seg_of(&[size]);
        let ratio = r.gen_range(0.0..=1.0);
        let m = target_count(ratio, size).unwrap();
        let mask = select_sosp_i(&q, &seg, &SelectionPolicy::new(Method::SospI), ratio).unwrap();
        assert_eq!(mask.ids(), literal_greedy(&q, m), "trial {trial}");
    }
}

#[test]
fn diagonal_q_reduces_to_sorting() {
    let mut r = common::rng(5);
    for _ in 0..100 {
        let size = r.gen_range(1..=12);
        let diag: Vec<f64> = (0..size).map(|_| r.gen_range(0..16) as f64).collect();
        let mut v = vec![0.0; size * size];
        for i in 0..size {
            v[i * size + i] = diag[i];
        }
        let q = QMatrix::new(size, v).unwrap();
        let seg = seg_of(&[size]);
        let a = select_sosp_i(&q, &seg, &SelectionPolicy::new(Method::SospI), 0.6).unwrap();
        let b = select_sosp_i_diag(&q, &seg, &SelectionPolicy::new(Method::SospIDiag), 0.6).unwrap();
        assert_eq!(a.ids(), b.ids());
    }
}

#[test]
fn off_diagonal_mass_changes_the_second_pick() {
    let q = QMatrix::new(3, vec![1.0, 5.0, 0.0, 5.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
    let seg = seg_of(&[3]);
    let ratio = 2.0 / 3.0;
    let greedy = select_sosp_i(&q, &seg, &SelectionPolicy::new(Method::SospI), ratio).unwrap();
    let diag = select_sosp_i_diag(&q, &seg, &SelectionPolicy::new(Method::SospIDiag), ratio).unwrap();
    assert_eq!(greedy.ids(), vec![0, 2]);
    assert_eq!(diag.ids(), vec![0, 1]);
}

#[test]
fn first_order_reduction_coincides_across_selectors() {
    let mut r = common::rng(8);
    for _ in 0..200 {
        let widths = [r.gen_range(1..6), r.gen_range(1..6)];
        let seg = seg_of(&widths);
        let size = seg.len();
        let first: Vec<f64> = (0..size).map(|_| r.gen_range(0..10) as f64 * 0.25).collect();
        let ratio = r.gen_range(0.0..=1.0);
        let policy = SelectionPolicy::new(Method::FirstOrder);
        let fo = select_first_order(&first, &seg, &policy, ratio).unwrap();
        let h = select_sosp_h(&SaliencyVector::from_parts("sosp_h", first.clone(), vec![0.0; size]), &seg, &policy, ratio).unwrap();
        let mut v = vec![0.0; size * size];
        for i in 0..size {
            v[i * size + i] = first[i];
        }
        let q = QMatrix::new(size, v).unwrap();
        let i = select_sosp_i(&q, &seg, &policy, ratio).unwrap();
        assert_eq!(fo.ids(), h.ids());
        assert_eq!(fo.ids(), i.ids());
    }
}

#[test]
fn zero_gradient_gives_tie_break_order() {
    let seg = seg_of(&[4, 3]);
    let m = select_first_order(&[0.0; 7], &seg, &SelectionPolicy::new(Method::FirstOrder), 4.0 / 7.0).unwrap();
    assert_eq!(m.ids(), vec![0, 1, 2, 3]);
}

#[test]
fn kernel_scaling_divides_by_linear_kernel_size() {
    use sosp::model::{Layer, ModelSpec, Shape};
    let model = ModelSpec {
        name: "k".into(),
        input: Shape::image(1, 4, 4),
        layers: vec![
            Layer::Conv2d { in_channels: 1, out_channels: 1, kernel: 1, stride: 1, padding: 0, bias: false }.into(),
            Layer::Conv2d { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, padding: 1, bias: false }.into(),
            Layer::GlobalAvgPool.into(),
            Layer::Flatten.into(),
            Layer::Dense { inputs: 1, outputs: 2, bias: true }.into(),
        ],
        residuals: vec![],
        outputs: 2,
    };
    let seg = segment(&model).unwrap();
    assert_eq!(seg.kernels(), vec![1, 3]);
    let sal = SaliencyVector::from_parts("sosp_h", vec![2.0, 3.0], vec![0.0, 0.0]);
    let mut p = SelectionPolicy::new(Method::SospH);
    assert_eq!(select_sosp_h(&sal, &seg, &p, 0.5).unwrap().ids(), vec![0]);
    p.kernel_scaling = true;
    let m = select_sosp_h(&sal, &seg, &p, 0.5).unwrap();
    assert_eq!(m.ids(), vec![1]);
    assert_eq!(m.entries[0].score, 1.0);
}

#[test]
fn random_selection_frequencies_are_binomial() {
    let seg = seg_of(&[5, 5]);
    let ratio = 0.4;
    let trials = 10_000;
    let mut hits = vec![0usize; seg.len()];
    let policy = SelectionPolicy::new(Method::Random);
    for seed in 0..trials {
        for s in select_random(&seg, &policy, ratio, seed).unwrap().ids() {
            hits[s] += 1;
        }
    }
    let sd = (trials as f64 * ratio * (1.0 - ratio)).sqrt();
    for h in hits {
        assert!((h as f64 - trials as f64 * ratio).abs() <= 3.0 * sd, "{h}");
    }
    let all = select_random(&seg, &policy, 1.0, 3).unwrap();
    assert_eq!(all.len(), seg.len());
    assert_eq!(select_random(&seg, &policy, 0.4, 9).unwrap(), select_random(&seg, &policy, 0.4, 9).unwrap());
}

#[test]
fn shuffle_preserves_counts_and_is_uniform() {
    let seg = seg_of(&[4, 3]);
    let base = select_first_order(&[0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 0.0], &seg, &SelectionPolicy::new(Method::FirstOrder), 5.0 / 7.0).unwrap();
    // layer 0: {0,1}, layer 1 fully pruned
    let mut freq = std::collections::BTreeMap::new();
    for seed in 0..6000 {
        let sh = shuffle_within_layers(&base, &seg, seed).unwrap();
        let l0: Vec<usize> = sh.entries.iter().filter(|e| e.layer == seg.layers()[0]).map(|e| e.structure).collect();
        let l1: Vec<usize> = sh.entries.iter().filter(|e| e.layer == seg.layers()[1]).map(|e| e.structure).collect();
        assert_eq!(l0.len(), 2);
        assert_eq!(l1, vec![4, 5, 6]);
        *freq.entry(l0).or_insert(0usize) += 1;
    }
    assert_eq!(freq.len(), 6);
    let sd = (6000.0 * (1.0 / 6.0) * (5.0 / 6.0f64)).sqrt();
    for (_, c) in freq {
        assert!((c as f64 - 1000.0).abs() <= 4.0 * sd);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn positive_scaling_leaves_masks_unchanged(
        scores in prop::collection::vec(0.0f64..100.0, 2..20),
        k in 0.01f64..100.0,
        ratio in 0.0f64..=1.0,
    ) {
        let seg = seg_of(&[scores.len()]);
        let p = SelectionPolicy::new(Method::SospH);
        let a = select_sosp_h(&SaliencyVector::from_parts("sosp_h", scores.clone(), vec![0.0; scores.len()]), &seg, &p, ratio).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|v| v * k).collect();
        let b = select_sosp_h(&SaliencyVector::from_parts("sosp_h", scaled, vec![0.0; scores.len()]), &seg, &p, ratio).unwrap();
        // scaling may merge distinct floats into ties only at the ulp level
        prop_assume!(scores.iter().all(|x| scores.iter().filter(|y| (*y - x).abs() < 1e-9).count() == 1));
        prop_assert_eq!(a.ids(), b.ids());
    }

    #[test]
    fn equal_kernels_make_scaling_irrelevant(
        scores in prop::collection::vec(0.0f64..10.0, 6),
        ratio in 0.0f64..=1.0,
    ) {
        let seg = seg_of(&[3, 3]);
        let sal = SaliencyVector::from_parts("sosp_h", scores.clone(), vec![0.0; 6]);
        let mut p = SelectionPolicy::new(Method::SospH);
        let a = select_sosp_h(&sal, &seg, &p, ratio).unwrap();
        p.kernel_scaling = true;
        let b = select_sosp_h(&sal, &seg, &p, ratio).unwrap();
        prop_assert_eq!(a.ids(), b.ids());
    }

    #[test]
    fn caps_are_never_exceeded(
        w1 in 1usize..8, w2 in 1usize..8, cap in 0.05f64..=1.0, ratio in 0.0f64..=1.0, seed in 0u64..1000,
    ) {
        let seg = seg_of(&[w1, w2]);
        let mut p = SelectionPolicy::new(Method::SospH);
        p.layer_cap = Some(cap);
        let mut r = common::rng(seed);
        let scores: Vec<f64> = (0..seg.len()).map(|_| r.gen_range(0.0..1.0)).collect();
        let q = random_q(seg.len(), &mut r, false);
        let masks = [
            select_sosp_h(&SaliencyVector::from_parts("sosp_h", scores.clone(), vec![0.0; seg.len()]), &seg, &p, ratio).unwrap(),
            select_sosp_i(&q, &seg, &p, ratio).unwrap(),
            select_random(&seg, &p, ratio, seed).unwrap(),
        ];
        for m in masks {
            for layer in seg.layers() {
                let n = seg.in_layer(layer).len();
                let k = m.entries.iter().filter(|e| e.layer == layer).count();
                prop_assert!(k as f64 <= cap * n as f64 + 1e-9);
            }
            prop_assert_eq!(m.len() + m.shortfall, target_count(ratio, seg.len()).unwrap());
        }
    }

    #[test]
    fn sort_scores_are_non_decreasing(scores in prop::collection::vec(0.0f64..10.0, 1..30), ratio in 0.0f64..=1.0) {
        let seg = seg_of(&[scores.len()]);
        let m = select_sosp_h(&SaliencyVector::from_parts("sosp_h", scores.clone(), vec![0.0; scores.len()]), &seg, &SelectionPolicy::new(Method::SospH), ratio).unwrap();
        prop_assert!(m.entries.windows(2).all(|w| w[0].score <= w[1].score));
        let mut ids = m.ids();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), m.len());
    }
}
