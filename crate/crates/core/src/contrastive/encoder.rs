//! Edge-to-edge / edge-to-node / node-to-graph connectome encoder with a
//! linear classification head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::rng::{stage_rng, uniform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectomeEncoderConfig {
    pub e2e_layers: usize,
    pub e2e_channels: Vec<usize>,
    pub e2n_channels: usize,
    pub n2g_dim: usize,
    /// Dimension `E` of the graph embedding `g`.
    pub embed_dim: usize,
    pub head_bias: bool,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ConnectomeEncoderConfig {
    fn default() -> Self {
        Self {
            e2e_layers: 1,
            e2e_channels: vec![8],
            e2n_channels: 16,
            n2g_dim: 32,
            embed_dim: 16,
            head_bias: true,
            leaky_slope: 0.33,
            seed: 0,
        }
    }
}

impl ConnectomeEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e2e_layers < 1 || self.e2e_channels.len() != self.e2e_layers {
            return Err(config(format!(
                "e2e_layers = {} but {} e2e channel counts given",
                self.e2e_layers,
                self.e2e_channels.len()
            )));
        }
        if self.e2e_channels.contains(&0) || self.e2n_channels == 0 || self.n2g_dim == 0 {
            return Err(config("connectome encoder channel counts must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(config("connectome embedding dimension must be at least 2"));
        }
        Ok(())
    }

    fn e2e_in(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.e2e_channels[l - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct E2eOffsets {
    row: usize,
    col: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayout {
    e2e: Vec<E2eOffsets>,
    e2n_w: usize,
    e2n_b: usize,
    n2g_w: usize,
    n2g_b: usize,
    dense_w: usize,
    dense_b: usize,
    head_w: usize,
    head_b: Option<usize>,
    total: usize,
}

impl EncoderLayout {
    pub fn new(cfg: &ConnectomeEncoderConfig, m: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let e2e = (0..cfg.e2e_layers)
            .map(|l| {
                let (co, ci) = (cfg.e2e_channels[l], cfg.e2e_in(l));
                E2eOffsets { row: take(co * ci * m), col: take(co * ci * m), bias: take(co) }
            })
            .collect();
        let c_last = cfg.e2e_channels[cfg.e2e_layers - 1];
        let e2n_w = take(cfg.e2n_channels * c_last * m);
        let e2n_b = take(cfg.e2n_channels);
        let n2g_w = take(cfg.n2g_dim * cfg.e2n_channels * m);
        let n2g_b = take(cfg.n2g_dim);
        let dense_w = take(cfg.embed_dim * cfg.n2g_dim);
        let dense_b = take(cfg.embed_dim);
        let head_w = take(cfg.embed_dim);
        let head_b = cfg.head_bias.then(|| take(1));
        Self { e2e, e2n_w, e2n_b, n2g_w, n2g_b, dense_w, dense_b, head_w, head_b, total: off }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Parameters belonging to the classification head.
    pub fn head_range(&self) -> core::ops::Range<usize> {
        self.head_w..self.total
    }

    pub fn tensors(&self, cfg: &ConnectomeEncoderConfig, m: usize) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (l, o) in self.e2e.iter().enumerate() {
            let n = cfg.e2e_channels[l] * cfg.e2e_in(l) * m;
            out.push((format!("e2e{l}.row"), o.row, n));
            out.push((format!("e2e{l}.col"), o.col, n));
            out.push((format!("e2e{l}.bias"), o.bias, cfg.e2e_channels[l]));
        }
        let c_last = cfg.e2e_channels[cfg.e2e_layers - 1];
        out.push(("e2n.weight".into(), self.e2n_w, cfg.e2n_channels * c_last * m));
        out.push(("e2n.bias".into(), self.e2n_b, cfg.e2n_channels));
        out.push(("n2g.weight".into(), self.n2g_w, cfg.n2g_dim * cfg.e2n_channels * m));
        out.push(("n2g.bias".into(), self.n2g_b, cfg.n2g_dim));
        out.push(("dense.weight".into(), self.dense_w, cfg.embed_dim * cfg.n2g_dim));
        out.push(("dense.bias".into(), self.dense_b, cfg.embed_dim));
        out.push(("head.weight".into(), self.head_w, cfg.embed_dim));
        if let Some(b) = self.head_b {
            out.push(("head.bias".into(), b, 1));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectomeEncoder {
    pub config: ConnectomeEncoderConfig,
    pub m: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Pre-normalisation embedding; this is what the head sees.
    pub z: Vec<f64>,
    /// `z / ‖z‖`; this is what the contrastive terms see.
    pub g: Vec<f64>,
    pub logit: f64,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    e2e_in: Vec<Vec<f64>>,
    e2e_pre: Vec<Vec<f64>>,
    e2n_in: Vec<f64>,
    e2n_pre: Vec<f64>,
    n2g_in: Vec<f64>,
    n2g_pre: Vec<f64>,
    dense_in: Vec<f64>,
    pub out: EncoderOutput,
}

impl ConnectomeEncoder {
    pub fn init(cfg: &ConnectomeEncoderConfig, m: usize) -> Result<Self> {
        cfg.validate()?;
        if m < 2 {
            return Err(config("connectome encoder needs at least two ROIs"));
        }
        let layout = EncoderLayout::new(cfg, m);
        let mut rng = stage_rng(cfg.seed, "connectome-encoder-init");
        let mut p = vec![0.0; layout.len()];
        let mut fill = |p: &mut [f64], fan_in: usize| {
            let b = 1.0 / math::sqrt(fan_in as f64);
            for x in p {
                *x = uniform(&mut rng, -b, b);
            }
        };
        for (l, o) in layout.e2e.iter().enumerate() {
            let (co, ci) = (cfg.e2e_channels[l], cfg.e2e_in(l));
            let fan = 2 * ci * m;
            fill(&mut p[o.row..o.row + co * ci * m], fan);
            fill(&mut p[o.col..o.col + co * ci * m], fan);
            fill(&mut p[o.bias..o.bias + co], fan);
        }
        let c_last = cfg.e2e_channels[cfg.e2e_layers - 1];
        fill(&mut p[layout.e2n_w..layout.e2n_b + cfg.e2n_channels], c_last * m);
        fill(&mut p[layout.n2g_w..layout.n2g_b + cfg.n2g_dim], cfg.e2n_channels * m);
        fill(&mut p[layout.dense_w..layout.dense_b + cfg.embed_dim], cfg.n2g_dim);
        fill(&mut p[layout.head_w..layout.total], cfg.embed_dim);
        Ok(Self { config: cfg.clone(), m, params: p })
    }

    pub fn from_params(cfg: &ConnectomeEncoderConfig, m: usize, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let n = EncoderLayout::new(cfg, m).len();
        if params.len() != n {
            return Err(shape(format!("expected {n} connectome encoder parameters, got {}", params.len())));
        }
        Ok(Self { config: cfg.clone(), m, params })
    }

    pub fn layout(&self) -> EncoderLayout {
        EncoderLayout::new(&self.config, self.m)
    }

    pub fn encode(&self, graph: &Matrix) -> Result<EncoderOutput> {
        Ok(forward(&self.config, self.m, &self.params, graph)?.out)
    }

    /// Probability of the patient class.
    pub fn predict(&self, graph: &Matrix) -> Result<f64> {
        Ok(math::sigmoid(self.encode(graph)?.logit))
    }
}

#[inline]
fn leaky(x: f64, a: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        a * x
    }
}

#[inline]
fn leaky_grad(x: f64, a: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        a
    }
}

/// Forward pass with explicit parameters, so the momentum copy can share it.
pub fn forward(cfg: &ConnectomeEncoderConfig, m: usize, p: &[f64], graph: &Matrix) -> Result<ForwardCache> {
    if graph.rows() != m || graph.cols() != m {
        return Err(shape(format!("encoder expects a {m}x{m} graph, got {}x{}", graph.rows(), graph.cols())));
    }
    if !graph.is_finite() {
        return Err(shape("graph has non-finite entries"));
    }
    let lay = EncoderLayout::new(cfg, m);
    if p.len() != lay.len() {
        return Err(shape(format!("expected {} parameters, got {}", lay.len(), p.len())));
    }
    let a = cfg.leaky_slope;
    let mm = m * m;
    let mut x = graph.as_slice().to_vec();
    let mut e2e_in = Vec::new();
    let mut e2e_pre = Vec::new();
    for (l, o) in lay.e2e.iter().enumerate() {
        let (co, ci) = (cfg.e2e_channels[l], cfg.e2e_in(l));
        let mut y = vec![0.0; co * mm];
        let mut rowt = vec![0.0; m];
        let mut colt = vec![0.0; m];
        for c in 0..co {
            rowt.fill(0.0);
            colt.fill(0.0);
            for cin in 0..ci {
                let xs = &x[cin * mm..(cin + 1) * mm];
                let rw = &p[o.row + (c * ci + cin) * m..o.row + (c * ci + cin + 1) * m];
                let cw = &p[o.col + (c * ci + cin) * m..o.col + (c * ci + cin + 1) * m];
                for i in 0..m {
                    rowt[i] += math::dot(rw, &xs[i * m..(i + 1) * m]);
                }
                for k in 0..m {
                    let wk = cw[k];
                    for (ct, xv) in colt.iter_mut().zip(&xs[k * m..(k + 1) * m]) {
                        *ct += wk * xv;
                    }
                }
            }
            let b = p[o.bias + c];
            for i in 0..m {
                for j in 0..m {
                    y[c * mm + i * m + j] = rowt[i] + colt[j] + b;
                }
            }
        }
        let act: Vec<f64> = y.iter().map(|&v| leaky(v, a)).collect();
        e2e_in.push(core::mem::replace(&mut x, act));
        e2e_pre.push(y);
    }
    let c_last = cfg.e2e_channels[cfg.e2e_layers - 1];
    let ce = cfg.e2n_channels;
    let mut e2n_pre = vec![0.0; ce * m];
    for c in 0..ce {
        for i in 0..m {
            let mut s = p[lay.e2n_b + c];
            for cin in 0..c_last {
                let w = &p[lay.e2n_w + (c * c_last + cin) * m..lay.e2n_w + (c * c_last + cin + 1) * m];
                s += math::dot(w, &x[cin * mm + i * m..cin * mm + (i + 1) * m]);
            }
            e2n_pre[c * m + i] = s;
        }
    }
    let e2n_out: Vec<f64> = e2n_pre.iter().map(|&v| leaky(v, a)).collect();
    let ng = cfg.n2g_dim;
    let mut n2g_pre = vec![0.0; ng];
    for (c, out) in n2g_pre.iter_mut().enumerate() {
        *out = p[lay.n2g_b + c] + math::dot(&p[lay.n2g_w + c * ce * m..lay.n2g_w + (c + 1) * ce * m], &e2n_out);
    }
    let n2g_out: Vec<f64> = n2g_pre.iter().map(|&v| leaky(v, a)).collect();
    let e = cfg.embed_dim;
    let z: Vec<f64> = (0..e)
        .map(|k| p[lay.dense_b + k] + math::dot(&p[lay.dense_w + k * ng..lay.dense_w + (k + 1) * ng], &n2g_out))
        .collect();
    let nz = math::norm(&z);
    if !(nz > 0.0) {
        return Err(crate::Error::Numerical("connectome embedding has zero norm".into()));
    }
    let g: Vec<f64> = z.iter().map(|v| v / nz).collect();
    let logit = math::dot(&p[lay.head_w..lay.head_w + e], &z) + lay.head_b.map_or(0.0, |b| p[b]);
    Ok(ForwardCache {
        e2e_in,
        e2e_pre,
        e2n_in: x,
        e2n_pre,
        n2g_in: e2n_out,
        n2g_pre,
        dense_in: n2g_out,
        out: EncoderOutput { z, g, logit },
    })
}

/// Backward pass. `d_g` is the gradient w.r.t. the normalised embedding,
/// `d_logit` w.r.t. the head output. Returns the parameter gradient and,
/// when requested, the gradient w.r.t. the input graph.
pub fn backward(
    cfg: &ConnectomeEncoderConfig,
    m: usize,
    p: &[f64],
    cache: &ForwardCache,
    d_g: &[f64],
    d_logit: f64,
    want_input_grad: bool,
) -> (Vec<f64>, Option<Matrix>) {
    let lay = EncoderLayout::new(cfg, m);
    let a = cfg.leaky_slope;
    let mut grad = vec![0.0; lay.len()];
    let e = cfg.embed_dim;
    let z = &cache.out.z;
    let g = &cache.out.g;
    let nz = math::norm(z);
    let proj = math::dot(d_g, g);
    let mut dz: Vec<f64> = (0..e).map(|k| (d_g[k] - proj * g[k]) / nz).collect();
    for k in 0..e {
        grad[lay.head_w + k] += d_logit * z[k];
        dz[k] += d_logit * p[lay.head_w + k];
    }
    if let Some(b) = lay.head_b {
        grad[b] += d_logit;
    }
    let ng = cfg.n2g_dim;
    let mut d_n2g = vec![0.0; ng];
    for k in 0..e {
        let dk = dz[k];
        grad[lay.dense_b + k] += dk;
        for j in 0..ng {
            grad[lay.dense_w + k * ng + j] += dk * cache.dense_in[j];
            d_n2g[j] += dk * p[lay.dense_w + k * ng + j];
        }
    }
    for (d, &pre) in d_n2g.iter_mut().zip(&cache.n2g_pre) {
        *d *= leaky_grad(pre, a);
    }
    let ce = cfg.e2n_channels;
    let mut d_e2n = vec![0.0; ce * m];
    for c in 0..ng {
        let dc = d_n2g[c];
        grad[lay.n2g_b + c] += dc;
        let base = lay.n2g_w + c * ce * m;
        for j in 0..ce * m {
            grad[base + j] += dc * cache.n2g_in[j];
            d_e2n[j] += dc * p[base + j];
        }
    }
    for (d, &pre) in d_e2n.iter_mut().zip(&cache.e2n_pre) {
        *d *= leaky_grad(pre, a);
    }
    let mm = m * m;
    let c_last = cfg.e2e_channels[cfg.e2e_layers - 1];
    let mut dx = vec![0.0; c_last * mm];
    for c in 0..ce {
        for i in 0..m {
            let d = d_e2n[c * m + i];
            grad[lay.e2n_b + c] += d;
            for cin in 0..c_last {
                let wb = lay.e2n_w + (c * c_last + cin) * m;
                let xb = cin * mm + i * m;
                for k in 0..m {
                    grad[wb + k] += d * cache.e2n_in[xb + k];
                    dx[xb + k] += d * p[wb + k];
                }
            }
        }
    }
    for l in (0..cfg.e2e_layers).rev() {
        let o = lay.e2e[l];
        let (co, ci) = (cfg.e2e_channels[l], cfg.e2e_in(l));
        let pre = &cache.e2e_pre[l];
        let xin = &cache.e2e_in[l];
        for (d, &v) in dx.iter_mut().zip(pre) {
            *d *= leaky_grad(v, a);
        }
        let need_dx = l > 0 || want_input_grad;
        let mut dxin = if need_dx { vec![0.0; ci * mm] } else { Vec::new() };
        let mut drow = vec![0.0; m];
        let mut dcol = vec![0.0; m];
        for c in 0..co {
            drow.fill(0.0);
            dcol.fill(0.0);
            for i in 0..m {
                for j in 0..m {
                    let d = dx[c * mm + i * m + j];
                    drow[i] += d;
                    dcol[j] += d;
                }
            }
            grad[o.bias + c] += drow.iter().sum::<f64>();
            for cin in 0..ci {
                let xs = &xin[cin * mm..(cin + 1) * mm];
                let rb = o.row + (c * ci + cin) * m;
                let cb = o.col + (c * ci + cin) * m;
                for i in 0..m {
                    for k in 0..m {
                        grad[rb + k] += drow[i] * xs[i * m + k];
                        grad[cb + k] += dcol[i] * xs[k * m + i];
                    }
                }
                if need_dx {
                    for i in 0..m {
                        for k in 0..m {
                            dxin[cin * mm + i * m + k] += drow[i] * p[rb + k] + dcol[k] * p[cb + i];
                        }
                    }
                }
            }
        }
        dx = dxin;
    }
    let input_grad = if want_input_grad { Some(Matrix::from_vec(m, m, dx).expect("m x m")) } else { None };
    (grad, input_grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ConnectomeEncoderConfig, Matrix) {
        let cfg = ConnectomeEncoderConfig {
            e2e_layers: 2,
            e2e_channels: vec![2, 3],
            e2n_channels: 3,
            n2g_dim: 5,
            embed_dim: 4,
            seed: 3,
            ..Default::default()
        };
        let mut g = Matrix::from_fn(6, 6, |i, j| libm::sin((i * 6 + j) as f64 * 0.7));
        g.symmetrize();
        (cfg, g)
    }

    #[test]
    fn embedding_is_unit_norm() {
        let (cfg, g) = toy();
        let enc = ConnectomeEncoder::init(&cfg, 6).unwrap();
        let out = enc.encode(&g).unwrap();
        assert!((math::norm(&out.g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_half() {
        let (cfg, g) = toy();
        let mut enc = ConnectomeEncoder::init(&cfg, 6).unwrap();
        let r = enc.layout().head_range();
        enc.params[r].fill(0.0);
        let out = enc.encode(&g).unwrap();
        assert_eq!(out.logit, 0.0);
        assert_eq!(enc.predict(&g).unwrap(), 0.5);
    }

    #[test]
    fn wrong_shape_rejected() {
        let (cfg, _) = toy();
        let enc = ConnectomeEncoder::init(&cfg, 6).unwrap();
        assert!(enc.encode(&Matrix::zeros(5, 5)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (cfg, g) = toy();
        let enc = ConnectomeEncoder::init(&cfg, 6).unwrap();
        let dg = [0.3, -0.2, 0.5, 0.1];
        let f = |x: &Matrix| {
            let o = enc.encode(x).unwrap();
            math::dot(&o.g, &dg) + 0.7 * o.logit
        };
        let cache = forward(&cfg, 6, &enc.params, &g).unwrap();
        let (_, dx) = backward(&cfg, 6, &enc.params, &cache, &dg, 0.7, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for i in 0..6 {
            for j in 0..6 {
                let mut p = g.clone();
                p[(i, j)] += h;
                let mut q = g.clone();
                q[(i, j)] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                assert!((fd - dx[(i, j)]).abs() < 1e-6, "({i},{j}) {fd} vs {}", dx[(i, j)]);
            }
        }
    }
}
