use brainscl_core::prototype::{node_attention, prototype_values, sample_attention, top_regions, AttentionMode, RoiInfo};
use brainscl_core::rng::{normal, stage_rng, uniform};
use brainscl_core::subtype::{knn_graph, spectral_cluster};
use brainscl_core::synth::ari;
use brainscl_core::Matrix;
use proptest::prelude::*;

fn sym_random(n: usize, seed: u64) -> Matrix {
    let mut rng = stage_rng(seed, "sym");
    let mut m = Matrix::filled(n, n, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = uniform(&mut rng, 0.0, 1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn knn_graph_matches_sort_and_mask(seed in 0u64..1000, n in 4usize..15, k in 1usize..4) {
        let f = sym_random(n, seed);
        let g = knn_graph(&f, k).unwrap();
        let mut mask = vec![vec![false; n]; n];
        for (i, row) in mask.iter_mut().enumerate() {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| f[(i, b)].partial_cmp(&f[(i, a)]).unwrap().then(a.cmp(&b)));
            for &j in order.iter().take(k) {
                row[j] = true;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let want = if mask[i][j] || mask[j][i] { f[(i, j)] } else { 0.0 };
                prop_assert_eq!(g[(i, j)], want);
            }
        }
    }
}

#[test]
fn spectral_separates_disconnected_components() {
    let n = 10;
    let block = |i: usize| usize::from(i >= 4);
    let mut rng = stage_rng(3, "blocks");
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if block(i) == block(j) {
                let v = uniform(&mut rng, 0.5, 1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    let res = spectral_cluster(&w, 2, 0).unwrap();
    let truth: Vec<usize> = (0..n).map(block).collect();
    assert_eq!(ari(&res.labels, &truth).unwrap(), 1.0);
    assert!(res.eigenvalues[0].abs() < 1e-9 && res.eigenvalues[1].abs() < 1e-9);
    assert!(res.eigenvalues[2] > 1e-3);
}

#[test]
fn ari_hand_cases() {
    // Contingency counts 2,1,2,1,2; row pairs 7, column pairs 7, total 28.
    let got = ari(&[0, 0, 0, 1, 1, 1, 2, 2], &[0, 0, 1, 1, 1, 2, 2, 2]).unwrap();
    assert!((got - 5.0 / 21.0).abs() < 1e-15);
    assert_eq!(ari(&[0, 1, 2, 0, 1, 2], &[2, 0, 1, 2, 0, 1]).unwrap(), 1.0);
    assert!(ari(&[0, 1], &[0]).is_err());
}

fn stack(n: usize, m: usize, d: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = stage_rng(seed, "stack");
    (0..n).map(|_| Matrix::from_fn(m, d, |_, _| normal(&mut rng) * 0.5)).collect()
}

// Per sample, each node row attends over that sample's node rows with scale 1/√D.
fn naive_node_attention(g: &Matrix) -> Matrix {
    let (m, d) = (g.rows(), g.cols());
    let scale = 1.0 / (d as f64).sqrt();
    Matrix::from_fn(m, d, |i, c| {
        let scores: Vec<f64> = (0..m).map(|j| (0..d).map(|k| g[(i, k)] * g[(j, k)]).sum::<f64>() * scale).collect();
        let a = softmax(&scores);
        (0..m).map(|j| a[j] * g[(j, c)]).sum()
    })
}

// Each sample attends over whole samples with Frobenius scores and scale 1/√(MD).
fn naive_sample_attention(xs: &[Matrix]) -> Vec<Matrix> {
    let (m, d) = (xs[0].rows(), xs[0].cols());
    let scale = 1.0 / ((m * d) as f64).sqrt();
    xs.iter()
        .map(|xi| {
            let scores: Vec<f64> =
                xs.iter().map(|xj| xi.as_slice().iter().zip(xj.as_slice()).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let a = softmax(&scores);
            Matrix::from_fn(m, d, |r, c| xs.iter().zip(&a).map(|(xj, w)| w * xj[(r, c)]).sum())
        })
        .collect()
}

#[test]
fn attention_matches_naive_loops() {
    let xs = stack(5, 6, 4, 1);
    let node = node_attention(&xs, None).unwrap();
    for (got, x) in node.iter().zip(&xs) {
        assert!(got.max_abs_diff(&naive_node_attention(x)) < 1e-12);
    }
    let samp = sample_attention(&node, None).unwrap();
    for (got, want) in samp.iter().zip(naive_sample_attention(&node)) {
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
    let h = prototype_values(&xs, AttentionMode::ParameterFree, None).unwrap();
    let mut mean = Matrix::zeros(6, 4);
    for s in &samp {
        mean = mean.add(s).unwrap();
    }
    assert!(h.max_abs_diff(&mean.scale(1.0 / 5.0)) < 1e-12);
    let plain = prototype_values(&xs, AttentionMode::MeanOnly, None).unwrap();
    let mut mx = Matrix::zeros(6, 4);
    for s in &xs {
        mx = mx.add(s).unwrap();
    }
    assert!(plain.max_abs_diff(&mx.scale(0.2)) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prototype_is_member_order_invariant(seed in 0u64..500, n in 1usize..6) {
        let xs = stack(n, 5, 3, seed);
        let mut rev = xs.clone();
        rev.reverse();
        let a = prototype_values(&xs, AttentionMode::ParameterFree, None).unwrap();
        let b = prototype_values(&rev, AttentionMode::ParameterFree, None).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.is_finite());
    }
}

#[test]
fn top_regions_match_sorted_strengths() {
    let h = Matrix::from_rows(&[
        vec![0.1, -0.1],
        vec![-2.0, 0.5],
        vec![0.3, 0.3],
        vec![1.0, -1.5],
        vec![0.6, 0.0],
    ])
    .unwrap();
    let lookup: Vec<RoiInfo> =
        (0..5).map(|i| RoiInfo { name: format!("roi{i}"), network: (i % 2 == 0).then(|| "dmn".to_string()) }).collect();
    let top = top_regions(&h, 3, Some(&lookup)).unwrap();
    // Strengths 0.2, 2.5, 0.6, 2.5, 0.6: ties go to the lower index.
    let idx: Vec<usize> = top.iter().map(|r| r.roi_index).collect();
    assert_eq!(idx, vec![1, 3, 2]);
    assert_eq!(top[0].rank, 1);
    assert_eq!(top[2].roi_name.as_deref(), Some("roi2"));
    assert_eq!(top[2].network.as_deref(), Some("dmn"));
    assert!((top[0].strength - 2.5).abs() < 1e-15);
    assert!(top_regions(&h, 6, None).is_err());
}
