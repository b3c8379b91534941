use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{backward, forward, ConnectomeEncoder, ConnectomeEncoderConfig, ForwardCache};
use super::loss::{hard_negative_select, total_loss, BatchSample, LossBreakdown, Weights};
use super::queue::LabelQueue;
use crate::cohort::Label;
use crate::error::{config, Error, Result};
use crate::linalg::Matrix;
use crate::optim::{Optimizer, OptimizerKind};
use crate::prototype::{prototype_param_grad, prototype_values, AttentionMode, AttentionParams, PrototypeGraph};
use crate::rng::{derive_seed, shuffle, stage_rng};

/// Which contrastive objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Classifier only.
    None,
    /// One same-label queue entry is the positive.
    SupervisedQueue,
    /// The subtype prototype is the positive.
    #[default]
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ContrastMode,
    pub tau: f64,
    pub lambda_con: f64,
    pub lambda_cr: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub hard_ratio: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Step size for the learned attention projections.
    pub attention_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ContrastMode::Prototype,
            tau: 0.07,
            lambda_con: 0.5,
            lambda_cr: 0.1,
            momentum: 0.999,
            queue_capacity: 256,
            hard_ratio: 0.5,
            batch_size: 16,
            lr: 1e-3,
            epochs: 100,
            optimizer: OptimizerKind::Adam,
            attention_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if !(self.hard_ratio > 0.0 && self.hard_ratio <= 1.0) {
            return Err(config(format!("hard_ratio must lie in (0, 1], got {}", self.hard_ratio)));
        }
        if self.lambda_con < 0.0 || self.lambda_cr < 0.0 {
            return Err(config("loss weights must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config("batch_size and epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.attention_lr >= 0.0) {
            return Err(config("learning rates must be positive"));
        }
        Ok(())
    }

    fn weights(&self) -> Weights {
        Weights { tau: self.tau, lambda_con: self.lambda_con, lambda_cr: self.lambda_cr }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub graph: Matrix,
    pub label: Label,
    pub subtype: Option<usize>,
}

/// Everything training needs besides the config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInputs {
    pub samples: Vec<TrainSample>,
    pub prototypes: Vec<PrototypeGraph>,
    /// Member graphs per prototype, required for learned attention.
    pub prototype_stacks: Vec<Vec<Matrix>>,
    pub attention: Option<AttentionParams>,
}

impl TrainInputs {
    pub fn new(samples: Vec<TrainSample>) -> Self {
        Self { samples, prototypes: Vec::new(), prototype_stacks: Vec::new(), attention: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEmbedding {
    pub label: Label,
    pub subtype: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub bce: f64,
    pub consistency: f64,
    pub contrastive: f64,
    pub contrastive_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub encoder: ConnectomeEncoder,
    pub momentum_params: Vec<f64>,
    pub queues: Vec<LabelQueue>,
    pub prototype_embeddings: Vec<PrototypeEmbedding>,
    pub prototype_values: Vec<Matrix>,
    pub attention: Option<AttentionParams>,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn init(enc_cfg: &ConnectomeEncoderConfig, m: usize, cfg: &TrainConfig, inputs: &TrainInputs) -> Result<Self> {
        cfg.validate()?;
        let encoder = ConnectomeEncoder::init(enc_cfg, m)?;
        let n = encoder.params.len();
        let mut st = Self {
            momentum_params: encoder.params.clone(),
            encoder,
            queues: Label::BOTH.iter().map(|&l| LabelQueue::new(l, cfg.queue_capacity)).collect(),
            prototype_embeddings: Vec::new(),
            prototype_values: inputs.prototypes.iter().map(|p| p.values.clone()).collect(),
            attention: inputs.attention.clone(),
            optimizer: Optimizer::new(cfg.optimizer, n),
            config: cfg.clone(),
            epochs_done: 0,
            steps_done: 0,
            history: Vec::new(),
        };
        if cfg.mode == ContrastMode::Prototype {
            st.refresh_prototypes(inputs)?;
        }
        Ok(st)
    }

    pub fn queue(&self, label: Label) -> &LabelQueue {
        &self.queues[label.index()]
    }

    pub fn prototype_embedding(&self, label: Label, subtype: usize) -> Option<&[f64]> {
        self.prototype_embeddings
            .iter()
            .find(|p| p.label == label && p.subtype == subtype)
            .map(|p| p.embedding.as_slice())
    }

    fn m(&self) -> usize {
        self.encoder.m
    }

    /// Passes each prototype graph through the momentum encoder.
    pub fn refresh_prototypes(&mut self, inputs: &TrainInputs) -> Result<()> {
        let cfg = &self.encoder.config;
        let mut out = Vec::with_capacity(inputs.prototypes.len());
        for (p, values) in inputs.prototypes.iter().zip(&self.prototype_values) {
            let g = forward(cfg, self.m(), &self.momentum_params, values)?.out.g;
            out.push(PrototypeEmbedding { label: p.class_label, subtype: p.subtype, embedding: g });
        }
        self.prototype_embeddings = out;
        Ok(())
    }

    pub fn predict(&self, graph: &Matrix) -> Result<f64> {
        self.encoder.predict(graph)
    }
}

/// `θ_m ← m·θ_m + (1 − m)·θ`.
pub fn momentum_update(theta_m: &mut [f64], theta: &[f64], m: f64) {
    for (a, b) in theta_m.iter_mut().zip(theta) {
        *a = m * *a + (1.0 - m) * b;
    }
}

/// Non-finite loss during training, with the state as of the last good step.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: Error,
    pub snapshot: Box<TrainState>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

/// Fixed inputs to the objective for one sample, as used by one train step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveItem {
    pub graph: Matrix,
    pub label: Label,
    pub g_m: Option<Vec<f64>>,
    pub positive: Option<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Batch objective and its gradient w.r.t. the encoder parameters, holding
/// momentum embeddings, positives and negatives fixed.
pub fn batch_objective(
    enc_cfg: &ConnectomeEncoderConfig,
    m: usize,
    params: &[f64],
    items: &[ObjectiveItem],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let caches: Vec<ForwardCache> = items.iter().map(|it| forward(enc_cfg, m, params, &it.graph)).collect::<Result<_>>()?;
    let batch: Vec<BatchSample<'_>> = items
        .iter()
        .zip(&caches)
        .map(|(it, c)| BatchSample {
            z: &c.out.z,
            g: &c.out.g,
            logit: c.out.logit,
            label: it.label.as_f64(),
            g_m: it.g_m.as_deref(),
            positive: it.positive.as_deref(),
            negatives: it.negatives.iter().map(|v| v.as_slice()).collect(),
        })
        .collect();
    let (br, sgrads) = total_loss(&batch, cfg.weights())?;
    let mut grad = vec![0.0; params.len()];
    for (c, sg) in caches.iter().zip(&sgrads) {
        let (g, _) = backward(enc_cfg, m, params, c, &sg.d_g, sg.d_logit, false);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((br, grad))
}

fn check_inputs(inputs: &TrainInputs, cfg: &TrainConfig) -> Result<usize> {
    let first = inputs.samples.first().ok_or_else(|| config("no training samples"))?;
    let m = first.graph.rows();
    if inputs.samples.iter().any(|s| s.graph.rows() != m || s.graph.cols() != m) {
        return Err(config("training graphs must share one square shape"));
    }
    if cfg.mode == ContrastMode::Prototype {
        for s in &inputs.samples {
            if let Some(k) = s.subtype {
                if !inputs.prototypes.iter().any(|p| p.class_label == s.label && p.subtype == k) {
                    return Err(config(format!(
                        "sample {} has subtype {k} of class {} but no such prototype exists",
                        s.id,
                        s.label.as_u8()
                    )));
                }
            }
        }
        let learned = inputs.prototypes.iter().any(|p| p.attention_mode == AttentionMode::Learned);
        if learned && (inputs.attention.is_none() || inputs.prototype_stacks.len() != inputs.prototypes.len()) {
            return Err(config("learned prototypes need attention parameters and member stacks"));
        }
    }
    Ok(m)
}

/// Trains from a fresh state for `cfg.epochs` epochs.
pub fn train(
    inputs: &TrainInputs,
    enc_cfg: &ConnectomeEncoderConfig,
    cfg: &TrainConfig,
) -> core::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error: Error| TrainFailure { error, snapshot: Box::new(empty_snapshot(enc_cfg, cfg)) };
    let m = check_inputs(inputs, cfg).map_err(fail)?;
    let state = TrainState::init(enc_cfg, m, cfg, inputs).map_err(fail)?;
    continue_training(state, inputs, cfg.epochs)
}

fn empty_snapshot(enc_cfg: &ConnectomeEncoderConfig, cfg: &TrainConfig) -> TrainState {
    TrainState {
        encoder: ConnectomeEncoder { config: enc_cfg.clone(), m: 0, params: Vec::new() },
        momentum_params: Vec::new(),
        queues: Vec::new(),
        prototype_embeddings: Vec::new(),
        prototype_values: Vec::new(),
        attention: None,
        optimizer: Optimizer::Sgd,
        config: cfg.clone(),
        epochs_done: 0,
        steps_done: 0,
        history: Vec::new(),
    }
}

/// Runs `epochs` more epochs on an existing state. Each epoch draws its
/// shuffle from a seed derived from the epoch index, so resuming a saved
/// state reproduces an uninterrupted run.
pub fn continue_training(
    mut state: TrainState,
    inputs: &TrainInputs,
    epochs: usize,
) -> core::result::Result<TrainOutcome, TrainFailure> {
    let cfg = state.config.clone();
    if let Err(error) = check_inputs(inputs, &cfg) {
        return Err(TrainFailure { error, snapshot: Box::new(state) });
    }
    for _ in 0..epochs {
        let last_good = state.clone();
        match run_epoch(&mut state, inputs, &cfg) {
            Ok(rec) => state.history.push(rec),
            Err(error) => return Err(TrainFailure { error, snapshot: Box::new(last_good) }),
        }
    }
    Ok(TrainOutcome { state })
}

fn run_epoch(st: &mut TrainState, inputs: &TrainInputs, cfg: &TrainConfig) -> Result<EpochRecord> {
    let epoch = st.epochs_done;
    let n = inputs.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stage_rng(derive_seed(cfg.seed, "train/shuffle"), &format!("epoch-{epoch}"));
    shuffle(&mut rng, &mut order);
    let mut pos_rng = stage_rng(derive_seed(cfg.seed, "train/positives"), &format!("epoch-{epoch}"));
    let mut rec = EpochRecord { epoch, ..EpochRecord::default() };
    for batch in order.chunks(cfg.batch_size) {
        let br = train_step(st, inputs, cfg, batch, &mut pos_rng)?;
        let w = batch.len() as f64;
        rec.total += br.0.total * w;
        rec.bce += br.0.bce * w;
        rec.consistency += br.0.consistency * w;
        rec.contrastive += br.0.contrastive * w;
        rec.contrastive_steps += br.1 as usize;
    }
    let nf = n as f64;
    rec.total /= nf;
    rec.bce /= nf;
    rec.consistency /= nf;
    rec.contrastive /= nf;
    if cfg.mode == ContrastMode::Prototype {
        st.refresh_prototypes(inputs)?;
    }
    st.epochs_done += 1;
    Ok(rec)
}

fn train_step(
    st: &mut TrainState,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    batch: &[usize],
    pos_rng: &mut impl Rng,
) -> Result<(LossBreakdown, bool)> {
    let enc_cfg = st.encoder.config.clone();
    let m = st.m();
    let step = st.steps_done;
    let caches: Vec<ForwardCache> =
        batch.iter().map(|&i| forward(&enc_cfg, m, &st.encoder.params, &inputs.samples[i].graph)).collect::<Result<_>>()?;
    let contrast = cfg.mode != ContrastMode::None;
    let g_m: Vec<Vec<f64>> = if contrast {
        batch
            .iter()
            .map(|&i| Ok(forward(&enc_cfg, m, &st.momentum_params, &inputs.samples[i].graph)?.out.g))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let active = contrast && st.queues.iter().all(|q| q.len() >= cfg.batch_size);

    struct Resolved {
        positive: Option<Vec<f64>>,
        positive_proto: Option<usize>,
        negatives: Vec<Vec<f64>>,
        negative_protos: Vec<usize>,
    }
    let mut resolved = Vec::with_capacity(batch.len());
    for (b, &i) in batch.iter().enumerate() {
        let s = &inputs.samples[i];
        let mut r = Resolved { positive: None, positive_proto: None, negatives: Vec::new(), negative_protos: Vec::new() };
        let eligible = match cfg.mode {
            ContrastMode::None => false,
            ContrastMode::SupervisedQueue => true,
            ContrastMode::Prototype => s.subtype.is_some(),
        };
        if active && eligible {
            let g = &caches[b].out.g;
            let neg_q = st.queue(s.label.opposite());
            let pool: Vec<&[f64]> = neg_q.embeddings().map(|v| v.as_slice()).collect();
            for j in hard_negative_select(g, &pool, cfg.hard_ratio)? {
                r.negatives.push(pool[j].to_vec());
            }
            match cfg.mode {
                ContrastMode::SupervisedQueue => {
                    let own = st.queue(s.label);
                    let j = pos_rng.random_range(0..own.len());
                    r.positive = own.get(j).cloned();
                }
                ContrastMode::Prototype => {
                    let k = s.subtype.expect("eligible");
                    let idx = inputs
                        .prototypes
                        .iter()
                        .position(|p| p.class_label == s.label && p.subtype == k)
                        .ok_or_else(|| config(format!("no prototype for subtype {k} of class {}", s.label.as_u8())))?;
                    r.positive = Some(st.prototype_embeddings[idx].embedding.clone());
                    r.positive_proto = Some(idx);
                    for (pi, p) in st.prototype_embeddings.iter().enumerate() {
                        if p.label == s.label.opposite() {
                            r.negatives.push(p.embedding.clone());
                            r.negative_protos.push(pi);
                        }
                    }
                }
                ContrastMode::None => unreachable!(),
            }
        }
        resolved.push(r);
    }

    let w = cfg.weights();
    let consistency_on = contrast && cfg.lambda_cr > 0.0;
    let samples: Vec<BatchSample<'_>> = batch
        .iter()
        .enumerate()
        .map(|(b, &i)| {
            let s = &inputs.samples[i];
            let c = &caches[b].out;
            let gm_on = consistency_on && (cfg.mode == ContrastMode::SupervisedQueue || s.subtype.is_some());
            BatchSample {
                z: &c.z,
                g: &c.g,
                logit: c.logit,
                label: s.label.as_f64(),
                g_m: if gm_on { Some(g_m[b].as_slice()) } else { None },
                positive: resolved[b].positive.as_deref(),
                negatives: resolved[b].negatives.iter().map(|v| v.as_slice()).collect(),
            }
        })
        .collect();
    let (br, sgrads) = total_loss(&samples, w)?;
    if !br.total.is_finite() {
        return Err(Error::NonFinite { step, message: format!("epoch {} loss {}", st.epochs_done, br.total) });
    }

    let mut grad = vec![0.0; st.encoder.params.len()];
    for (c, sg) in caches.iter().zip(&sgrads) {
        let (g, _) = backward(&enc_cfg, m, &st.encoder.params, c, &sg.d_g, sg.d_logit, false);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { step, message: format!("epoch {} gradient", st.epochs_done) });
    }

    if active && cfg.mode == ContrastMode::Prototype && st.attention.is_some() && cfg.attention_lr > 0.0 {
        let learned = inputs.prototypes.iter().any(|p| p.attention_mode == AttentionMode::Learned);
        if learned {
            update_attention(st, inputs, cfg, &samples, &resolved.iter().map(|r| (r.positive_proto, r.negative_protos.clone())).collect::<Vec<_>>())?;
        }
    }

    let lr = cfg.lr;
    st.optimizer.step(&mut st.encoder.params, &grad, lr);
    if contrast {
        momentum_update(&mut st.momentum_params, &st.encoder.params, cfg.momentum);
        for label in Label::BOTH {
            let items: Vec<(Vec<f64>, String)> = batch
                .iter()
                .enumerate()
                .filter(|(_, &i)| inputs.samples[i].label == label)
                .map(|(b, &i)| (g_m[b].clone(), inputs.samples[i].id.clone()))
                .collect();
            st.queues[label.index()].enqueue(label, items)?;
        }
    }
    st.steps_done += 1;
    Ok((br, active))
}

/// Gradient of the contrastive term w.r.t. the prototype embeddings, pushed
/// through the momentum encoder into the learned attention projections.
fn update_attention(
    st: &mut TrainState,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    samples: &[BatchSample<'_>],
    protos: &[(Option<usize>, Vec<usize>)],
) -> Result<()> {
    let n_proto = inputs.prototypes.len();
    let e = st.encoder.config.embed_dim;
    let mut d_h: Vec<Vec<f64>> = vec![vec![0.0; e]; n_proto];
    let mut touched = vec![false; n_proto];
    let nb = samples.len() as f64;
    for (s, (pos, negs)) in samples.iter().zip(protos) {
        let Some(pos_idx) = pos else { continue };
        let Some(positive) = s.positive else { continue };
        let mut logits = Vec::with_capacity(s.negatives.len() + 1);
        logits.push(crate::math::dot(s.g, positive) / cfg.tau);
        logits.extend(s.negatives.iter().map(|v| crate::math::dot(s.g, v) / cfg.tau));
        let lse = crate::math::log_sum_exp(&logits);
        let scale = cfg.lambda_con / (nb * cfg.tau);
        let p0 = crate::math::exp(logits[0] - lse);
        for (d, x) in d_h[*pos_idx].iter_mut().zip(s.g) {
            *d += scale * (p0 - 1.0) * x;
        }
        touched[*pos_idx] = true;
        let offset = s.negatives.len() - negs.len();
        for (j, &pi) in negs.iter().enumerate() {
            let pj = crate::math::exp(logits[1 + offset + j] - lse);
            for (d, x) in d_h[pi].iter_mut().zip(s.g) {
                *d += scale * pj * x;
            }
            touched[pi] = true;
        }
    }
    let enc_cfg = st.encoder.config.clone();
    let m = st.m();
    let Some(params) = st.attention.clone() else { return Ok(()) };
    let mut total: Option<AttentionParams> = None;
    for pi in 0..n_proto {
        if !touched[pi] {
            continue;
        }
        let cache = forward(&enc_cfg, m, &st.momentum_params, &st.prototype_values[pi])?;
        let (_, d_in) = backward(&enc_cfg, m, &st.momentum_params, &cache, &d_h[pi], 0.0, true);
        let d_in = d_in.expect("input gradient requested");
        let g = prototype_param_grad(&inputs.prototype_stacks[pi], &params, &d_in)?;
        total = Some(match total {
            None => g,
            Some(mut t) => {
                for (a, b) in [
                    (&mut t.node.wq, &g.node.wq),
                    (&mut t.node.wk, &g.node.wk),
                    (&mut t.node.wv, &g.node.wv),
                    (&mut t.sample.wq, &g.sample.wq),
                    (&mut t.sample.wk, &g.sample.wk),
                    (&mut t.sample.wv, &g.sample.wv),
                ] {
                    *a = a.add(b)?;
                }
                t
            }
        });
    }
    let Some(total) = total else { return Ok(()) };
    let mut params = params;
    params.node.apply_update(&total.node, cfg.attention_lr);
    params.sample.apply_update(&total.sample, cfg.attention_lr);
    for (pi, p) in inputs.prototypes.iter().enumerate() {
        if p.attention_mode == AttentionMode::Learned {
            st.prototype_values[pi] = prototype_values(&inputs.prototype_stacks[pi], AttentionMode::Learned, Some(&params))?;
        }
    }
    st.attention = Some(params);
    Ok(())
}

/// Prototype embedding lookup keyed by `(label, subtype)`.
pub fn prototype_map(state: &TrainState) -> BTreeMap<(u8, usize), Vec<f64>> {
    state.prototype_embeddings.iter().map(|p| ((p.label.as_u8(), p.subtype), p.embedding.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;

    fn toy_inputs(n: usize, m: usize, seed: u64) -> TrainInputs {
        let mut rng = stage_rng(seed, "toy");
        let samples = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Control } else { Label::Patient };
                let shift = if label == Label::Patient { 0.4 } else { -0.4 };
                let mut g = Matrix::from_fn(m, m, |_, _| 0.3 * normal(&mut rng) + shift);
                g.symmetrize();
                TrainSample { id: format!("s{i:02}"), graph: g, label, subtype: Some(i / 2 % 2) }
            })
            .collect::<Vec<_>>();
        let mut protos = Vec::new();
        for label in Label::BOTH {
            for k in 0..2 {
                let members: Vec<&TrainSample> = samples.iter().filter(|s| s.label == label && s.subtype == Some(k)).collect();
                let mut acc = Matrix::zeros(m, m);
                for s in &members {
                    acc = acc.add(&s.graph).unwrap();
                }
                protos.push(PrototypeGraph {
                    values: acc.scale(1.0 / members.len() as f64),
                    class_label: label,
                    subtype: k,
                    member_ids: members.iter().map(|s| s.id.clone()).collect(),
                    attention_mode: AttentionMode::MeanOnly,
                });
            }
        }
        TrainInputs { samples, prototypes: protos, prototype_stacks: Vec::new(), attention: None }
    }

    fn small_enc() -> ConnectomeEncoderConfig {
        ConnectomeEncoderConfig { e2e_channels: vec![2], e2n_channels: 3, n2g_dim: 4, embed_dim: 4, ..Default::default() }
    }

    #[test]
    fn one_epoch_fills_queues() {
        let inputs = toy_inputs(12, 6, 3);
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let out = train(&inputs, &small_enc(), &cfg).unwrap();
        assert_eq!(out.history().len(), 1);
        assert!(out.state.queues.iter().all(|q| !q.is_empty()));
        assert!(out.history()[0].contrastive_steps > 0);
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let inputs = toy_inputs(12, 6, 5);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, momentum: 0.9, ..TrainConfig::default() };
        let full = train(&inputs, &small_enc(), &cfg).unwrap();
        let half = train(&inputs, &small_enc(), &TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
        let mut resumed_state = half.state;
        resumed_state.config.epochs = 4;
        let resumed = continue_training(resumed_state, &inputs, 2).unwrap();
        assert_eq!(full.state.encoder.params, resumed.state.encoder.params);
        assert_eq!(full.state.history, resumed.state.history);
    }

    #[test]
    fn missing_prototype_is_config_error() {
        let mut inputs = toy_inputs(8, 5, 1);
        inputs.prototypes.pop();
        let err = train(&inputs, &small_enc(), &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
    }

    #[test]
    fn momentum_extremes() {
        let theta = [1.0, -2.0, 3.5];
        let mut a = [0.25, 0.5, -1.0];
        momentum_update(&mut a, &theta, 1.0);
        assert_eq!(a, [0.25, 0.5, -1.0]);
        momentum_update(&mut a, &theta, 0.0);
        assert_eq!(a, theta);
    }
}
