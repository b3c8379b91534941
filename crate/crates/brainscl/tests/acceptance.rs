//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any gating criterion fails. Run with `--nocapture` to see the lines.

use std::collections::VecDeque;
use std::fs;
use std::time::Instant;

use brainscl::stages::{ablation_grid, ablation_rows, cmd_pipeline, Context};
use brainscl::RunConfig;
use brainscl_core::contrastive::encoder::ConnectomeEncoder;
use brainscl_core::contrastive::loss::{info_nce, total_loss, BatchSample, Weights};
use brainscl_core::contrastive::train::{batch_objective, ObjectiveItem};
use brainscl_core::contrastive::{momentum_update, ConnectomeEncoderConfig, LabelQueue, TrainConfig};
use brainscl_core::eval::{mann_whitney_auc, VariantName, VariantSpec};
use brainscl_core::exec::Sequential;
use brainscl_core::pipeline::{build_views, fit_structures, fuse_views, stage_seed, FusionSource};
use brainscl_core::rng::{stage_rng, uniform};
use brainscl_core::snf::{affinity_matrix, snf_fuse, SnfConfig};
use brainscl_core::structure::{fit_structure_learner, EncoderConfig, FitOptions};
use brainscl_core::subtype::{discover_subtypes, spectral_cluster};
use brainscl_core::synth::{ari, generate, SynthSpec};
use brainscl_core::text::StubProvider;
use brainscl_core::{Label, Matrix};
use rand::Rng;
use tempfile::TempDir;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;
use oracles::*;

/// Pipeline settings shared by the cohort-level criteria.
const PINNED: &str = r#"
seed = 0

[structure]
n_layers = 2
channels = [8, 8]
kernel_sizes = [5, 3]
embed_dim = 16

[fit]
steps = 100

[trainer]
epochs = 30
"#;

/// ACC points (on a 0-100 scale) within which two means count as tied.
const TIE: f64 = 0.5;

fn pinned() -> RunConfig {
    toml::from_str(PINNED).unwrap()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn timed(budget_s: f64, f: impl FnOnce() -> Verdict) -> Verdict {
    let t = Instant::now();
    let v = f();
    let s = t.elapsed().as_secs_f64();
    let in_time = s < budget_s;
    Verdict { pass: v.pass && in_time, detail: format!("{} [{s:.1}s / {budget_s:.0}s budget]", v.detail) }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn snf_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for (n, seed) in [(6usize, 1u64), (10, 2), (15, 3), (20, 4)] {
        let cfg = SnfConfig { k_neighbors: Some(3), ..SnfConfig::default() };
        let w1 = affinity_matrix(&random_similarity(n, seed), &cfg).unwrap();
        let w2 = affinity_matrix(&random_similarity(n, seed + 50), &cfg).unwrap();
        let fused = snf_fuse(&[w1.clone(), w2.clone()], &cfg, &ids(n)).unwrap().values;
        let want = ref_snf(&[nested(&w1), nested(&w2)], 3, cfg.iterations, cfg.renormalize);
        worst = worst.max(max_diff(&fused, &want));
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let mut sorted = perm.clone();
        sorted.sort();
        if sorted != (0..n).collect::<Vec<_>>() {
            continue;
        }
        let p = |m: &Matrix| Matrix::from_fn(n, n, |i, j| m[(perm[i], perm[j])]);
        let fp = snf_fuse(&[p(&w1), p(&w2)], &cfg, &ids(n)).unwrap().values;
        worst_perm = worst_perm.max(fp.max_abs_diff(&p(&fused)));
    }
    verdict(worst <= 1e-10 && worst_perm <= 1e-10, format!("max |Δ| vs loop reference {worst:.2e}, permutation {worst_perm:.2e}"))
}

fn subtype_recovery() -> Verdict {
    let cfg = pinned();
    let pcfg = cfg.pipeline();
    let provider = StubProvider::new(cfg.text.dim, cfg.text.seed);
    let mut per_source = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let (cohort, truth) = generate(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        let all: Vec<String> = cohort.subjects().iter().map(|s| s.id.clone()).collect();
        let st = fit_structures(&cohort, &all, &pcfg, stage_seed(seed, 0, "structure"), &Sequential).unwrap();
        let views = build_views(&cohort, &all, &st.all, Some(&provider)).unwrap();
        for (slot, src) in [FusionSource::Both, FusionSource::TextOnly, FusionSource::StructureOnly].into_iter().enumerate() {
            let fused = fuse_views(&views, &pcfg.snf, src).unwrap();
            let asg = discover_subtypes(&fused, &pcfg.subtype, stage_seed(seed, 0, "subtype")).unwrap();
            let mut scores = Vec::new();
            for a in asg.values() {
                let ids: Vec<String> = a.assignment.keys().cloned().collect();
                let pred: Vec<usize> = ids.iter().map(|i| a.assignment[i]).collect();
                scores.push(ari(&pred, &truth.labels_for(&ids).unwrap()).unwrap());
            }
            per_source[slot].push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    let [both, text, structure] = per_source.map(median);
    verdict(
        both >= 0.9 && text <= both && structure <= both,
        format!("median ARI multi-view {both:.3}, text-only {text:.3}, structure-only {structure:.3}"),
    )
}

fn structure_fit() -> Verdict {
    let spec = SynthSpec { n_per_class: 5, ..SynthSpec::default() };
    let (cohort, _) = generate(&spec).unwrap();
    let enc = EncoderConfig::default();
    let base = fit_structure_learner(&cohort, &enc, &FitOptions { steps: 200, ..FitOptions::default() }, &Sequential).unwrap();
    let ratio = base.final_loss() / base.loss_trace[0];
    let gap = |lambda_vc: f64| {
        let fit = fit_structure_learner(&cohort, &enc, &FitOptions { steps: 200, lambda_vc, ..FitOptions::default() }, &Sequential)
            .unwrap();
        let mut total = 0.0;
        for s in cohort.subjects() {
            let a = brainscl_core::cohort::compute_pcc(s).unwrap().values;
            total += fit.structures[&s.id].values.sub(&a).unwrap().frobenius_sq().sqrt();
        }
        total / cohort.len() as f64
    };
    let (hi, lo) = (gap(1e4), gap(0.0));
    verdict(
        ratio <= 0.5 && hi < lo,
        format!("final/initial loss {ratio:.3}; mean ‖S−A‖_F {hi:.3} at λ_VC = 1e4 vs {lo:.3} at 0"),
    )
}

fn objective_oracle() -> Verdict {
    let g = vecs(11, 4, 3);
    let gm = vecs(12, 4, 3);
    let logits = [0.4, -1.1, 2.3, 0.0];
    let labels = [1.0, 0.0, 1.0, 0.0];
    let pos_of = [2, 3, 0, 1];
    let negs_of = [[1, 3], [0, 2], [1, 3], [0, 2]];
    let w = Weights { tau: 0.5, lambda_con: 0.7, lambda_cr: 0.3 };
    let negs: Vec<Vec<&[f64]>> = negs_of.iter().map(|n| n.iter().map(|&j| g[j].as_slice()).collect()).collect();
    let batch: Vec<BatchSample<'_>> = (0..4)
        .map(|i| BatchSample {
            z: &g[i],
            g: &g[i],
            logit: logits[i],
            label: labels[i],
            g_m: Some(&gm[i]),
            positive: Some(&g[pos_of[i]]),
            negatives: negs[i].clone(),
        })
        .collect();
    let (br, _) = total_loss(&batch, w).unwrap();
    let mut want = 0.0;
    for i in 0..4 {
        let cr: f64 = g[i].iter().zip(&gm[i]).map(|(a, b)| (a - b) * (a - b)).sum();
        let nv: Vec<Vec<f64>> = negs_of[i].iter().map(|&j| g[j].clone()).collect();
        want += naive_bce(logits[i], labels[i]) + w.lambda_cr * cr + w.lambda_con * naive_info_nce(&g[i], &g[pos_of[i]], &nv, w.tau);
    }
    want /= 4.0;
    let d_total = (br.total - want).abs();

    let e = unit(&[1.0, 1.0, 0.0]);
    let ln2_err = (info_nce(&e, &unit(&[1.0, 0.0, 0.0]), &[&unit(&[0.0, 1.0, 0.0])], 0.2).unwrap() - std::f64::consts::LN_2).abs();

    let (off, _) = total_loss(&batch, Weights { lambda_con: 0.0, lambda_cr: 0.0, ..w }).unwrap();
    let mut stripped = batch.clone();
    for s in &mut stripped {
        s.g_m = None;
        s.positive = None;
    }
    let (none, _) = total_loss(&stripped, w).unwrap();
    let switch_ok = off.total == off.bce && none.total == none.bce && none.bce == br.bce;
    verdict(
        d_total <= 1e-10 && ln2_err <= 1e-9 && switch_ok,
        format!("|Δ total| {d_total:.2e}, |InfoNCE − ln 2| {ln2_err:.2e}, switch-offs exact: {switch_ok}"),
    )
}

fn gradient_fidelity() -> Verdict {
    let (m, e) = (8, 4);
    let enc_cfg = ConnectomeEncoderConfig { embed_dim: e, ..ConnectomeEncoderConfig::default() };
    let enc = ConnectomeEncoder::init(&enc_cfg, m).unwrap();
    let v = vecs(21, 4 * 5, e);
    let items: Vec<ObjectiveItem> = (0..4)
        .map(|i| {
            let mut rng = stage_rng(i as u64, "graph");
            let graph = Matrix::from_fn(m, m, |_, _| 0.0);
            let mut graph = graph;
            for a in 0..m {
                graph[(a, a)] = 1.0;
                for b in (a + 1)..m {
                    let x = uniform(&mut rng, -0.8, 0.8);
                    graph[(a, b)] = x;
                    graph[(b, a)] = x;
                }
            }
            ObjectiveItem {
                graph,
                label: if i % 2 == 0 { Label::Patient } else { Label::Control },
                g_m: Some(v[5 * i].clone()),
                positive: Some(v[5 * i + 1].clone()),
                negatives: v[5 * i + 2..5 * i + 5].to_vec(),
            }
        })
        .collect();
    let cfg = TrainConfig { tau: 0.5, ..TrainConfig::default() };
    let (_, grad) = batch_objective(&enc_cfg, m, &enc.params, &items, &cfg).unwrap();
    let f = |p: &[f64]| batch_objective(&enc_cfg, m, p, &items, &cfg).unwrap().0.total;
    let coords: Vec<usize> = (0..grad.len()).filter(|&k| grad[k].abs() > 1e-6).collect();
    let worst = fd_worst_rel(f, &enc.params, &grad, coords.iter().copied(), 1e-6, 0.0);
    verdict(worst <= 1e-4, format!("worst relative error {worst:.2e} over {} of {} parameters", coords.len(), grad.len()))
}

fn ablation_ordering() -> Verdict {
    let cfg = pinned();
    let pcfg = cfg.pipeline();
    let provider = StubProvider::new(cfg.text.dim, cfg.text.seed);
    let (cohort, _) = generate(&SynthSpec::default()).unwrap();
    let specs = [
        VariantSpec::new(VariantName::S, None).unwrap(),
        VariantSpec::new(VariantName::Cl, None).unwrap(),
        VariantSpec::new(VariantName::Full, Some(2)).unwrap(),
        VariantSpec::new(VariantName::Full, Some(3)).unwrap(),
        VariantSpec::new(VariantName::Full, Some(4)).unwrap(),
    ];
    let seeds: Vec<u64> = (0..10).collect();
    let cells = ablation_grid(&cohort, &specs, &seeds, &pcfg, Some(&provider), &Sequential).unwrap();
    let rows = ablation_rows(&specs, &cells);
    let acc: Vec<f64> = rows
        .iter()
        .map(|r| r.report.as_ref().map(|rep| 100.0 * rep.mean.acc).unwrap_or(f64::NAN))
        .collect();
    let (s, cl, k2, k3, k4) = (acc[0], acc[1], acc[2], acc[3], acc[4]);
    let order = k3 + TIE >= cl && cl + TIE >= s;
    let k_best = k3 + TIE >= k2 && k3 + TIE >= k4;
    verdict(
        order && k_best,
        format!("mean ACC s {s:.2}, cl {cl:.2}, full K=2 {k2:.2}, K=3 {k3:.2}, K=4 {k4:.2} (ties within {TIE} points)"),
    )
}

fn mechanics() -> Verdict {
    let theta = [0.3, -1.5, 2.0];
    let mut a = [9.0, 8.0, 7.0];
    momentum_update(&mut a, &theta, 1.0);
    let keep = a == [9.0, 8.0, 7.0];
    momentum_update(&mut a, &theta, 0.0);
    let copy = a == theta;

    let mut rng = stage_rng(1, "queue");
    let mut fifo_ok = true;
    for capacity in [0usize, 1, 5, 16] {
        let mut q = LabelQueue::new(Label::Patient, capacity);
        let mut model = VecDeque::new();
        let mut next = 0usize;
        for _ in 0..40 {
            let size = rng.random_range(0..7);
            let batch: Vec<(Vec<f64>, String)> = (0..size)
                .map(|_| {
                    next += 1;
                    let t = next as f64;
                    (vec![t.cos(), t.sin()], format!("s{next}"))
                })
                .collect();
            for (_, id) in &batch {
                model.push_back(id.clone());
                if model.len() > capacity {
                    model.pop_front();
                }
            }
            q.enqueue(Label::Patient, batch).unwrap();
            fifo_ok &= q.entries().map(|(_, id)| id.clone()).eq(model.iter().cloned());
        }
    }

    let mut auc_ok = true;
    for trial in 0..200 {
        let n = 2 + trial % 199;
        let y: Vec<Label> = (0..n).map(|i| if (i * 7 + trial) % 3 == 0 { Label::Patient } else { Label::Control }).collect();
        if !y.contains(&Label::Patient) || !y.contains(&Label::Control) {
            continue;
        }
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 19.0).collect();
        auc_ok &= mann_whitney_auc(&y, &s).unwrap() == brute_auc(&y, &s);
    }

    let n = 12;
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if (i < 5) == (j < 5) {
                let v = uniform(&mut rng, 0.2, 1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    let labels = spectral_cluster(&w, 2, 0).unwrap().labels;
    let truth: Vec<usize> = (0..n).map(|i| usize::from(i >= 5)).collect();
    let spectral_ok = ari(&labels, &truth).unwrap() == 1.0;
    verdict(
        keep && copy && fifo_ok && auc_ok && spectral_ok,
        format!("momentum m=1 {keep}, m=0 {copy}; FIFO {fifo_ok}; AUC brute force {auc_ok}; two components {spectral_ok}"),
    )
}

const SMALL_RUN: &str = r#"
seed = 5

[structure]
n_layers = 1
channels = [4]
kernel_sizes = [3]
embed_dim = 6
pool_bins = 4

[fit]
steps = 10

[subtype]
k = 2

[trainer]
epochs = 5
batch_size = 8
queue_capacity = 32

[eval]
folds = 3

[synth]
n_per_class = 15
k_true = 2
m_rois = 8
t_len = 40
"#;

fn determinism() -> Verdict {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let cfg: RunConfig = toml::from_str(SMALL_RUN).unwrap();
        let mut ctx = Context::new(cfg, Some(tmp.path().join(name)), false, true).unwrap();
        ctx.quiet = true;
        fs::read(cmd_pipeline(&ctx).unwrap()).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    verdict(!a.is_empty() && a == b, format!("metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

#[test]
fn acceptance() {
    let criteria: Vec<(u8, &str, Box<dyn FnOnce() -> Verdict>)> = vec![
        (1, "SNF oracle equivalence", Box::new(|| timed(5.0, snf_oracle))),
        (2, "planted-subtype recovery", Box::new(|| timed(120.0, subtype_recovery))),
        (3, "structure learner optimisation", Box::new(|| timed(60.0, structure_fit))),
        (4, "objective correctness", Box::new(objective_oracle)),
        (5, "gradient fidelity", Box::new(|| timed(60.0, gradient_fidelity))),
        (6, "ablation ordering", Box::new(|| timed(900.0, ablation_ordering))),
        (7, "mechanics exactness", Box::new(mechanics)),
        (8, "determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let v = f();
        println!("{} criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    println!("SKIP criterion 9 (public-cohort accuracy): non-gating, needs externally supplied ROI series");
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
