//! Finite-difference checks of the two hand-written backward passes.

use brainscl_core::cohort::pcc_matrix;
use brainscl_core::contrastive::encoder::ConnectomeEncoder;
use brainscl_core::contrastive::train::{batch_objective, ObjectiveItem};
use brainscl_core::contrastive::{ConnectomeEncoderConfig, TrainConfig};
use brainscl_core::rng::{normal, stage_rng, uniform};
use brainscl_core::structure::{subject_loss_and_grad, EncoderConfig, StructureEncoder};
use brainscl_core::{Label, Matrix};

mod oracles;
use oracles::*;

fn random_graph(m: usize, seed: u64) -> Matrix {
    let mut rng = stage_rng(seed, "graph");
    let mut g = Matrix::identity(m);
    for i in 0..m {
        for j in (i + 1)..m {
            let v = uniform(&mut rng, -0.8, 0.8);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

#[test]
fn full_objective_gradient() {
    let (m, e) = (8, 4);
    let enc_cfg = ConnectomeEncoderConfig { e2e_channels: vec![3], e2n_channels: 4, n2g_dim: 6, embed_dim: e, ..Default::default() };
    let enc = ConnectomeEncoder::init(&enc_cfg, m).unwrap();
    let mut rng = stage_rng(5, "items");
    let mut vec_e = || unit(&(0..e).map(|_| normal(&mut rng)).collect::<Vec<_>>());
    let items: Vec<ObjectiveItem> = (0..4)
        .map(|i| ObjectiveItem {
            graph: random_graph(m, i as u64),
            label: if i % 2 == 0 { Label::Patient } else { Label::Control },
            g_m: Some(vec_e()),
            positive: Some(vec_e()),
            negatives: vec![vec_e(), vec_e(), vec_e()],
        })
        .collect();
    let cfg = TrainConfig { tau: 0.5, lambda_con: 0.7, lambda_cr: 0.4, ..TrainConfig::default() };
    let (_, grad) = batch_objective(&enc_cfg, m, &enc.params, &items, &cfg).unwrap();
    let f = |p: &[f64]| batch_objective(&enc_cfg, m, p, &items, &cfg).unwrap().0.total;
    let n = enc.params.len();
    let worst = fd_worst_rel(f, &enc.params, &grad, (0..n).filter(|&k| grad[k].abs() > 1e-6), 1e-6, 1e-4);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn structure_learner_gradient() {
    let cfg = EncoderConfig {
        n_layers: 2,
        channels: vec![3, 3],
        kernel_sizes: vec![3, 3],
        embed_dim: 4,
        pool_bins: 4,
        ..Default::default()
    };
    let enc = StructureEncoder::init(&cfg).unwrap();
    let mut rng = stage_rng(9, "series");
    let (t, m) = (30, 5);
    let series = Matrix::from_fn(t, m, |_, _| normal(&mut rng));
    let pcc = pcc_matrix(&series, "s").unwrap();
    let (_, grad, _) = subject_loss_and_grad(&cfg, &enc.params, &series, &pcc, 0.7).unwrap();
    let f = |p: &[f64]| subject_loss_and_grad(&cfg, p, &series, &pcc, 0.7).unwrap().0;
    let worst = fd_worst_rel(f, &enc.params, &grad, 0..enc.params.len(), 1e-6, 1e-4);
    assert!(worst < 1e-3, "worst relative error {worst}");
}
