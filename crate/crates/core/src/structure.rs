//! Learned sparse structure view.
//!
//! Each ROI's BOLD series is encoded by a stack of 1-D convolutions (optional
//! batch normalisation, ReLU between layers), adaptive average pooling over
//! time and a linear projection. The subject's structure is the cosine
//! similarity between ROI embeddings, fitted by gradient descent on
//! `Σ_i ‖S_i‖₁ + λ_VC ‖S_i − A_i‖²_F` against the Pearson matrices `A_i`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cohort::{compute_pcc, Cohort, ConnectivityKind, ConnectivityMatrix, Subject};
use crate::error::{config, shape, Error, Result};
use crate::exec::Executor;
use crate::linalg::Matrix;
use crate::math;
use crate::rng::{stage_rng, uniform};
use crate::view::{cosine_matrix, View, ViewSimilarity};

const BN_EPS: f64 = 1e-5;
/// Entries with smaller magnitude count as zero in the sparsity statistic.
pub const SPARSITY_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub use_batchnorm: bool,
    /// Number of adaptive average-pooling bins over time before the projection.
    pub pool_bins: usize,
    /// z-score each ROI column before the first convolution.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            channels: vec![16, 16, 32],
            kernel_sizes: vec![7, 5, 3],
            embed_dim: 32,
            use_batchnorm: true,
            pool_bins: 16,
            standardize: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(config("structure encoder needs at least one layer"));
        }
        if self.channels.len() != self.n_layers || self.kernel_sizes.len() != self.n_layers {
            return Err(config(format!(
                "n_layers = {} but {} channels and {} kernel sizes given",
                self.n_layers,
                self.channels.len(),
                self.kernel_sizes.len()
            )));
        }
        if self.channels.iter().chain(&self.kernel_sizes).any(|&c| c == 0) {
            return Err(config("channels and kernel sizes must be positive"));
        }
        if self.embed_dim < 1 || self.pool_bins < 1 {
            return Err(config("embed_dim and pool_bins must be positive"));
        }
        Ok(())
    }

    /// Minimum series length accepted by the encoder.
    pub fn receptive_field(&self) -> usize {
        self.kernel_sizes.iter().map(|k| k - 1).sum::<usize>() + self.pool_bins
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.channels[layer - 1]
        }
    }

    fn pooled_dim(&self) -> usize {
        self.channels[self.n_layers - 1] * self.pool_bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    layers: Vec<LayerOffsets>,
    proj_weight: usize,
    proj_bias: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut off = 0;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let (cout, cin, k) = (cfg.channels[l], cfg.in_channels(l), cfg.kernel_sizes[l]);
            let weight = off;
            off += cout * cin * k;
            let bias = off;
            off += cout;
            let (gamma, beta) = if cfg.use_batchnorm {
                let g = off;
                off += 2 * cout;
                (g, g + cout)
            } else {
                (usize::MAX, usize::MAX)
            };
            layers.push(LayerOffsets { weight, bias, gamma, beta });
        }
        let proj_weight = off;
        off += cfg.embed_dim * cfg.pooled_dim();
        let proj_bias = off;
        off += cfg.embed_dim;
        Self { layers, proj_weight, proj_bias, total: off }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Named tensors as `(name, offset, len)`, for checkpoints.
    pub fn tensors(&self, cfg: &EncoderConfig) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (l, o) in self.layers.iter().enumerate() {
            let (cout, cin, k) = (cfg.channels[l], cfg.in_channels(l), cfg.kernel_sizes[l]);
            out.push((format!("conv{l}.weight"), o.weight, cout * cin * k));
            out.push((format!("conv{l}.bias"), o.bias, cout));
            if cfg.use_batchnorm {
                out.push((format!("bn{l}.gamma"), o.gamma, cout));
                out.push((format!("bn{l}.beta"), o.beta, cout));
            }
        }
        out.push(("proj.weight".into(), self.proj_weight, cfg.embed_dim * cfg.pooled_dim()));
        out.push(("proj.bias".into(), self.proj_bias, cfg.embed_dim));
        out
    }
}

/// Per-channel batch-norm statistics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// The ROI encoder `f_θ`: configuration, flat parameters and, once fitting is
/// done, frozen batch-norm statistics for evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEncoder {
    pub config: EncoderConfig,
    pub params: Vec<f64>,
    pub frozen: Option<Vec<BnStats>>,
}

impl StructureEncoder {
    /// Uniform fan-in initialisation; batch-norm scale 1, shift 0.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut rng = stage_rng(cfg.seed, "structure-encoder-init");
        let mut p = vec![0.0; layout.len()];
        for (l, o) in layout.layers.iter().enumerate() {
            let (cout, cin, k) = (cfg.channels[l], cfg.in_channels(l), cfg.kernel_sizes[l]);
            let bound = 1.0 / math::sqrt((cin * k) as f64);
            for w in &mut p[o.weight..o.weight + cout * cin * k] {
                *w = uniform(&mut rng, -bound, bound);
            }
            for b in &mut p[o.bias..o.bias + cout] {
                *b = uniform(&mut rng, -bound, bound);
            }
            if cfg.use_batchnorm {
                p[o.gamma..o.gamma + cout].fill(1.0);
            }
        }
        let fan_in = cfg.pooled_dim();
        let bound = 1.0 / math::sqrt(fan_in as f64);
        for w in &mut p[layout.proj_weight..layout.proj_weight + cfg.embed_dim * fan_in] {
            *w = uniform(&mut rng, -bound, bound);
        }
        for b in &mut p[layout.proj_bias..layout.proj_bias + cfg.embed_dim] {
            *b = uniform(&mut rng, -bound, bound);
        }
        Ok(Self { config: cfg.clone(), params: p, frozen: None })
    }

    pub fn from_params(cfg: &EncoderConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        if params.len() != layout.len() {
            return Err(shape(format!("expected {} encoder parameters, got {}", layout.len(), params.len())));
        }
        Ok(Self { config: cfg.clone(), params, frozen: None })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    /// Evaluation-mode ROI embeddings (`M x embed_dim`). Uses the frozen
    /// batch-norm statistics when present, otherwise the series' own.
    pub fn encode(&self, series: &Matrix) -> Result<Matrix> {
        let stats = self.frozen.as_deref().map(BnSource::Frozen).unwrap_or(BnSource::Batch);
        Ok(forward(&self.config, &self.params, series, stats)?.embeddings)
    }

    /// Evaluation-mode learned structure for one subject.
    pub fn structure(&self, subject: &Subject) -> Result<ConnectivityMatrix> {
        let emb = self.encode(&subject.series)?;
        let values = build_structure(&emb).map_err(|e| name_subject(e, &subject.id))?;
        Ok(ConnectivityMatrix { values, kind: ConnectivityKind::LearnedStructure, subject_id: subject.id.clone() })
    }
}

fn name_subject(e: Error, id: &str) -> Error {
    match e {
        Error::ZeroNorm { index, .. } => Error::ZeroNorm { what: format!("ROI embedding of subject {id}"), index },
        other => other,
    }
}

/// `h_r = f_θ(S_r)` for every ROI column of `series`.
pub fn encode_roi_series(series: &Matrix, config: &EncoderConfig, params: &[f64]) -> Result<Matrix> {
    config.validate()?;
    Ok(forward(config, params, series, BnSource::Batch)?.embeddings)
}

#[derive(Clone, Copy)]
enum BnSource<'a> {
    Batch,
    Frozen(&'a [BnStats]),
}

struct LayerCache {
    input: Vec<f64>,
    in_len: usize,
    out_len: usize,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_act: Vec<f64>,
}

struct Forward {
    embeddings: Matrix,
    pooled: Vec<f64>,
    layers: Vec<LayerCache>,
    final_len: usize,
    stats: Vec<BnStats>,
}

fn standardized(series: &Matrix) -> Matrix {
    let (t, m) = (series.rows(), series.cols());
    let mut out = series.clone();
    for r in 0..m {
        let col = series.column(r);
        let mu = math::mean(&col);
        let sd = math::std_dev(&col);
        let inv = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        for i in 0..t {
            out[(i, r)] = (series[(i, r)] - mu) * inv;
        }
    }
    out
}

fn bin_range(b: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = (b * len) / bins;
    let end = ((b + 1) * len + bins - 1) / bins;
    (start, end.max(start + 1))
}

fn forward(cfg: &EncoderConfig, p: &[f64], series: &Matrix, bn: BnSource<'_>) -> Result<Forward> {
    let layout = ParamLayout::new(cfg);
    if p.len() != layout.len() {
        return Err(shape(format!("expected {} encoder parameters, got {}", layout.len(), p.len())));
    }
    let t_len = series.rows();
    let m = series.cols();
    if t_len < cfg.receptive_field() {
        return Err(config(format!(
            "series length {t_len} is shorter than the encoder's receptive field {}",
            cfg.receptive_field()
        )));
    }
    if !series.is_finite() {
        return Err(Error::Numerical("non-finite series passed to the structure encoder".into()));
    }
    let src = if cfg.standardize { standardized(series) } else { series.clone() };
    // Activation layout: [roi][channel][time].
    let mut act: Vec<f64> = (0..m).flat_map(|r| src.column(r)).collect();
    let mut len = t_len;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut stats_out = Vec::new();
    for (l, o) in layout.layers.iter().enumerate() {
        let (cout, cin, k) = (cfg.channels[l], cfg.in_channels(l), cfg.kernel_sizes[l]);
        let out_len = len + 1 - k;
        let w = &p[o.weight..o.weight + cout * cin * k];
        let bias = &p[o.bias..o.bias + cout];
        let mut u = vec![0.0; m * cout * out_len];
        for r in 0..m {
            for c in 0..cout {
                let dst = &mut u[(r * cout + c) * out_len..(r * cout + c + 1) * out_len];
                dst.fill(bias[c]);
                for ci in 0..cin {
                    let a = &act[(r * cin + ci) * len..(r * cin + ci + 1) * len];
                    for q in 0..k {
                        let wv = w[(c * cin + ci) * k + q];
                        for (d, x) in dst.iter_mut().zip(&a[q..q + out_len]) {
                            *d += wv * x;
                        }
                    }
                }
            }
        }
        let mut x_hat = Vec::new();
        let mut inv_std = Vec::new();
        let pre_act = if cfg.use_batchnorm {
            let count = (m * out_len) as f64;
            let (mean, var) = match bn {
                BnSource::Batch => {
                    let mut mean = vec![0.0; cout];
                    let mut var = vec![0.0; cout];
                    for c in 0..cout {
                        let mut s = 0.0;
                        for r in 0..m {
                            s += u[(r * cout + c) * out_len..(r * cout + c + 1) * out_len].iter().sum::<f64>();
                        }
                        let mu = s / count;
                        let mut ss = 0.0;
                        for r in 0..m {
                            for x in &u[(r * cout + c) * out_len..(r * cout + c + 1) * out_len] {
                                ss += (x - mu) * (x - mu);
                            }
                        }
                        mean[c] = mu;
                        var[c] = ss / count;
                    }
                    (mean, var)
                }
                BnSource::Frozen(st) => {
                    let s = st.get(l).ok_or_else(|| shape("missing frozen batch-norm statistics"))?;
                    (s.mean.clone(), s.var.clone())
                }
            };
            inv_std = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
            let gamma = &p[o.gamma..o.gamma + cout];
            let beta = &p[o.beta..o.beta + cout];
            x_hat = vec![0.0; u.len()];
            let mut v = vec![0.0; u.len()];
            for r in 0..m {
                for c in 0..cout {
                    let base = (r * cout + c) * out_len;
                    for t in 0..out_len {
                        let xh = (u[base + t] - mean[c]) * inv_std[c];
                        x_hat[base + t] = xh;
                        v[base + t] = gamma[c] * xh + beta[c];
                    }
                }
            }
            stats_out.push(BnStats { mean, var });
            v
        } else {
            u
        };
        let next = if l + 1 < cfg.n_layers { pre_act.iter().map(|&x| x.max(0.0)).collect() } else { pre_act.clone() };
        layers.push(LayerCache { input: act, in_len: len, out_len, x_hat, inv_std, pre_act });
        act = next;
        len = out_len;
    }
    let c_last = cfg.channels[cfg.n_layers - 1];
    let bins = cfg.pool_bins;
    let pd = cfg.pooled_dim();
    let mut pooled = vec![0.0; m * pd];
    for r in 0..m {
        for c in 0..c_last {
            let a = &act[(r * c_last + c) * len..(r * c_last + c + 1) * len];
            for b in 0..bins {
                let (s, e) = bin_range(b, bins, len);
                pooled[r * pd + c * bins + b] = a[s..e].iter().sum::<f64>() / (e - s) as f64;
            }
        }
    }
    let e_dim = cfg.embed_dim;
    let pw = &p[layout.proj_weight..layout.proj_weight + e_dim * pd];
    let pb = &p[layout.proj_bias..layout.proj_bias + e_dim];
    let mut emb = Matrix::zeros(m, e_dim);
    for r in 0..m {
        let x = &pooled[r * pd..(r + 1) * pd];
        for e in 0..e_dim {
            emb[(r, e)] = pb[e] + math::dot(&pw[e * pd..(e + 1) * pd], x);
        }
    }
    Ok(Forward { embeddings: emb, pooled, layers, final_len: len, stats: stats_out })
}

/// Backpropagates `d_emb` (gradient w.r.t. the `M x embed_dim` embeddings)
/// through a training-mode forward pass.
fn backward(cfg: &EncoderConfig, p: &[f64], fwd: &Forward, d_emb: &Matrix) -> Vec<f64> {
    let layout = ParamLayout::new(cfg);
    let mut g = vec![0.0; layout.len()];
    let m = d_emb.rows();
    let e_dim = cfg.embed_dim;
    let pd = cfg.pooled_dim();
    let pw = &p[layout.proj_weight..layout.proj_weight + e_dim * pd];
    let mut d_pooled = vec![0.0; m * pd];
    for r in 0..m {
        let x = &fwd.pooled[r * pd..(r + 1) * pd];
        for e in 0..e_dim {
            let de = d_emb[(r, e)];
            if de == 0.0 {
                continue;
            }
            g[layout.proj_bias + e] += de;
            let gw = &mut g[layout.proj_weight + e * pd..layout.proj_weight + (e + 1) * pd];
            for (gv, xv) in gw.iter_mut().zip(x) {
                *gv += de * xv;
            }
            for (dp, w) in d_pooled[r * pd..(r + 1) * pd].iter_mut().zip(&pw[e * pd..(e + 1) * pd]) {
                *dp += de * w;
            }
        }
    }
    let c_last = cfg.channels[cfg.n_layers - 1];
    let bins = cfg.pool_bins;
    let len = fwd.final_len;
    let mut d_act = vec![0.0; m * c_last * len];
    for r in 0..m {
        for c in 0..c_last {
            let da = &mut d_act[(r * c_last + c) * len..(r * c_last + c + 1) * len];
            for b in 0..bins {
                let (s, e) = bin_range(b, bins, len);
                let v = d_pooled[r * pd + c * bins + b] / (e - s) as f64;
                for x in &mut da[s..e] {
                    *x += v;
                }
            }
        }
    }
    for l in (0..cfg.n_layers).rev() {
        let o = layout.layers[l];
        let cache = &fwd.layers[l];
        let (cout, cin, k) = (cfg.channels[l], cfg.in_channels(l), cfg.kernel_sizes[l]);
        let out_len = cache.out_len;
        let in_len = cache.in_len;
        // Through the ReLU (hidden layers only).
        if l + 1 < cfg.n_layers {
            for (d, &v) in d_act.iter_mut().zip(&cache.pre_act) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let du = if cfg.use_batchnorm {
            let count = (m * out_len) as f64;
            let gamma = &p[o.gamma..o.gamma + cout];
            let mut du = vec![0.0; d_act.len()];
            for c in 0..cout {
                let (mut sum_dx, mut sum_dx_xh) = (0.0, 0.0);
                let (mut dgamma, mut dbeta) = (0.0, 0.0);
                for r in 0..m {
                    let base = (r * cout + c) * out_len;
                    for t in 0..out_len {
                        let dv = d_act[base + t];
                        let xh = cache.x_hat[base + t];
                        dgamma += dv * xh;
                        dbeta += dv;
                        let dxh = dv * gamma[c];
                        sum_dx += dxh;
                        sum_dx_xh += dxh * xh;
                    }
                }
                g[o.gamma + c] += dgamma;
                g[o.beta + c] += dbeta;
                let scale = cache.inv_std[c] / count;
                for r in 0..m {
                    let base = (r * cout + c) * out_len;
                    for t in 0..out_len {
                        let dxh = d_act[base + t] * gamma[c];
                        du[base + t] = scale * (count * dxh - sum_dx - cache.x_hat[base + t] * sum_dx_xh);
                    }
                }
            }
            du
        } else {
            core::mem::take(&mut d_act)
        };
        let w = &p[o.weight..o.weight + cout * cin * k];
        let need_input_grad = l > 0;
        let mut d_in = if need_input_grad { vec![0.0; m * cin * in_len] } else { Vec::new() };
        for r in 0..m {
            for c in 0..cout {
                let dsrc = &du[(r * cout + c) * out_len..(r * cout + c + 1) * out_len];
                g[o.bias + c] += dsrc.iter().sum::<f64>();
                for ci in 0..cin {
                    let a = &cache.input[(r * cin + ci) * in_len..(r * cin + ci + 1) * in_len];
                    for q in 0..k {
                        let widx = (c * cin + ci) * k + q;
                        g[o.weight + widx] += math::dot(dsrc, &a[q..q + out_len]);
                        if need_input_grad {
                            let wv = w[widx];
                            let di = &mut d_in[(r * cin + ci) * in_len + q..(r * cin + ci) * in_len + q + out_len];
                            for (x, d) in di.iter_mut().zip(dsrc) {
                                *x += wv * d;
                            }
                        }
                    }
                }
            }
        }
        d_act = d_in;
    }
    g
}

/// Pairwise cosine similarity between ROI embeddings.
pub fn build_structure(embeddings: &Matrix) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (0..embeddings.rows()).map(|r| embeddings.row(r).to_vec()).collect();
    cosine_matrix(&rows, &[]).map_err(|e| match e {
        Error::ZeroNorm { index, .. } => Error::ZeroNorm { what: format!("ROI {index}"), index },
        other => other,
    })
}

/// `Σ_i ( ‖S_i‖₁ + λ_VC ‖S_i − A_i‖²_F )` with the entrywise ℓ₁ norm.
pub fn structure_loss(structures: &[Matrix], pcc: &[Matrix], lambda_vc: f64) -> Result<f64> {
    if structures.len() != pcc.len() {
        return Err(shape(format!("{} structures but {} PCC matrices", structures.len(), pcc.len())));
    }
    let mut total = 0.0;
    for (s, a) in structures.iter().zip(pcc) {
        total += s.l1() + lambda_vc * s.sub(a)?.frobenius_sq();
    }
    Ok(total)
}

/// One subject's loss and gradient w.r.t. the encoder parameters
/// (training-mode batch norm over that subject's ROIs).
pub fn subject_loss_and_grad(
    cfg: &EncoderConfig,
    params: &[f64],
    series: &Matrix,
    pcc: &Matrix,
    lambda_vc: f64,
) -> Result<(f64, Vec<f64>, Vec<BnStats>)> {
    let fwd = forward(cfg, params, series, BnSource::Batch)?;
    let emb = &fwd.embeddings;
    let m = emb.rows();
    let e_dim = emb.cols();
    if pcc.rows() != m || pcc.cols() != m {
        return Err(shape(format!("PCC is {}x{}, expected {m}x{m}", pcc.rows(), pcc.cols())));
    }
    let mut norms = vec![0.0; m];
    let mut unit = Matrix::zeros(m, e_dim);
    for r in 0..m {
        let n = math::norm(emb.row(r));
        if !(n > 0.0) {
            return Err(Error::ZeroNorm { what: format!("ROI {r}"), index: r });
        }
        norms[r] = n;
        for e in 0..e_dim {
            unit[(r, e)] = emb[(r, e)] / n;
        }
    }
    let mut loss = 0.0;
    // dL/dS for off-diagonal entries; the diagonal is identically 1.
    let mut d_s = Matrix::zeros(m, m);
    for r in 0..m {
        loss += 1.0 + lambda_vc * (1.0 - pcc[(r, r)]) * (1.0 - pcc[(r, r)]);
        for s in 0..m {
            if s == r {
                continue;
            }
            let v = math::dot(unit.row(r), unit.row(s)).clamp(-1.0, 1.0);
            let diff = v - pcc[(r, s)];
            loss += v.abs() + lambda_vc * diff * diff;
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            d_s[(r, s)] = sign + 2.0 * lambda_vc * diff;
        }
    }
    let mut d_emb = Matrix::zeros(m, e_dim);
    for r in 0..m {
        let mut du = vec![0.0; e_dim];
        for s in 0..m {
            if s == r {
                continue;
            }
            let w = d_s[(r, s)] + d_s[(s, r)];
            for (d, u) in du.iter_mut().zip(unit.row(s)) {
                *d += w * u;
            }
        }
        let proj = math::dot(&du, unit.row(r));
        for e in 0..e_dim {
            d_emb[(r, e)] = (du[e] - proj * unit[(r, e)]) / norms[r];
        }
    }
    let grad = backward(cfg, params, &fwd, &d_emb);
    Ok((loss, grad, fwd.stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub lambda_vc: f64,
    pub steps: usize,
    pub lr: f64,
    /// Rescale the full gradient to at most this ℓ₂ norm before each step.
    pub max_grad_norm: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { lambda_vc: 1.0, steps: 200, lr: 1e-3, max_grad_norm: Some(10.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureFitResult {
    pub structures: BTreeMap<String, ConnectivityMatrix>,
    pub loss_trace: Vec<f64>,
    pub lambda_vc: f64,
    pub steps: usize,
    pub encoder: StructureEncoder,
    /// Fraction of off-diagonal entries with magnitude below [`SPARSITY_EPS`].
    pub sparsity: f64,
}

impl StructureFitResult {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Structures in the given id order.
    pub fn ordered(&self, ids: &[String]) -> Result<Vec<Matrix>> {
        ids.iter()
            .map(|id| {
                self.structures
                    .get(id)
                    .map(|c| c.values.clone())
                    .ok_or_else(|| Error::Subject { subject: id.clone(), message: "no learned structure".into() })
            })
            .collect()
    }
}

/// Fits `f_θ` on every subject of `cohort` by full-batch gradient descent.
///
/// The loss trace holds the objective evaluated before each update. After the
/// last step, batch-norm statistics are frozen to their cohort average and the
/// returned structures are computed in evaluation mode.
pub fn fit_structure_learner<E: Executor>(
    cohort: &Cohort,
    cfg: &EncoderConfig,
    opts: &FitOptions,
    exec: &E,
) -> Result<StructureFitResult> {
    if opts.steps < 1 {
        return Err(config("structure fitting needs at least one step"));
    }
    if !(opts.lambda_vc >= 0.0) || !(opts.lr > 0.0) {
        return Err(config("lambda_vc must be >= 0 and lr > 0"));
    }
    let mut encoder = StructureEncoder::init(cfg)?;
    let subjects = cohort.subjects();
    let pcc: Vec<Matrix> = subjects.iter().map(|s| compute_pcc(s).map(|c| c.values)).collect::<Result<_>>()?;
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let params = &encoder.params;
        let per_subject = exec.map(subjects.len(), |i| {
            subject_loss_and_grad(cfg, params, &subjects[i].series, &pcc[i], opts.lambda_vc)
                .map_err(|e| name_subject(e, &subjects[i].id))
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; encoder.params.len()];
        for r in per_subject {
            let (l, g, _) = r?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                message: format!("structure loss diverged; last finite loss {:?}", trace.last()),
            });
        }
        trace.push(loss);
        let mut scale = opts.lr;
        if let Some(max) = opts.max_grad_norm {
            let n = math::norm(&grad);
            if n > max {
                scale *= max / n;
            }
        }
        for (p, g) in encoder.params.iter_mut().zip(&grad) {
            *p -= scale * g;
        }
    }
    if cfg.use_batchnorm {
        encoder.frozen = Some(cohort_bn_stats(&encoder, subjects, exec)?);
    }
    let structures = apply_structure_encoder(&encoder, subjects, exec)?;
    let sparsity = sparsity_fraction(structures.values().map(|c| &c.values));
    Ok(StructureFitResult { structures, loss_trace: trace, lambda_vc: opts.lambda_vc, steps: opts.steps, encoder, sparsity })
}

fn cohort_bn_stats<E: Executor>(enc: &StructureEncoder, subjects: &[Subject], exec: &E) -> Result<Vec<BnStats>> {
    let per = exec.map(subjects.len(), |i| forward(&enc.config, &enc.params, &subjects[i].series, BnSource::Batch).map(|f| f.stats));
    let mut acc: Option<Vec<BnStats>> = None;
    for s in per {
        let s = s?;
        match &mut acc {
            None => acc = Some(s),
            Some(a) => {
                for (al, sl) in a.iter_mut().zip(&s) {
                    for (x, y) in al.mean.iter_mut().zip(&sl.mean) {
                        *x += y;
                    }
                    for (x, y) in al.var.iter_mut().zip(&sl.var) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = subjects.len() as f64;
    let mut out = acc.unwrap_or_default();
    for l in &mut out {
        l.mean.iter_mut().for_each(|x| *x /= n);
        l.var.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Evaluation-mode structures for any subjects (e.g. a held-out fold).
pub fn apply_structure_encoder<E: Executor>(
    enc: &StructureEncoder,
    subjects: &[Subject],
    exec: &E,
) -> Result<BTreeMap<String, ConnectivityMatrix>> {
    let out = exec.map(subjects.len(), |i| enc.structure(&subjects[i]));
    let mut map = BTreeMap::new();
    for (s, r) in subjects.iter().zip(out) {
        map.insert(s.id.clone(), r?);
    }
    Ok(map)
}

pub fn sparsity_fraction<'a>(mats: impl Iterator<Item = &'a Matrix>) -> f64 {
    let (mut small, mut total) = (0usize, 0usize);
    for m in mats {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if i != j {
                    total += 1;
                    if m[(i, j)].abs() < SPARSITY_EPS {
                        small += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        small as f64 / total as f64
    }
}

/// Subject-by-subject cosine similarity of the structures' upper triangles.
pub fn structure_similarity(structures: &[Matrix], subject_ids: &[String]) -> Result<ViewSimilarity> {
    if structures.len() < 2 {
        return Err(config("structure similarity needs at least two subjects"));
    }
    if subject_ids.len() != structures.len() {
        return Err(shape("one subject id per structure required"));
    }
    let vecs: Vec<Vec<f64>> = structures.iter().map(Matrix::upper_triangle).collect();
    let values = cosine_matrix(&vecs, subject_ids).map_err(|e| match e {
        Error::ZeroNorm { what, .. } => Error::Subject { subject: what, message: "all-zero structure".into() },
        other => other,
    })?;
    Ok(ViewSimilarity { view: View::Structure, values, subject_ids: subject_ids.to_vec() })
}
