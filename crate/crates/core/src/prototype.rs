//! Subtype prototype graphs from dual-level (node, then sample) self-attention
//! followed by mean pooling over samples.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Label;
use crate::error::{config, shape, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::rng::uniform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGraph {
    pub values: Matrix,
    pub subject_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `Q = K = V = input`.
    #[default]
    ParameterFree,
    /// Trainable `D x D` query/key/value projections at both levels.
    Learned,
    /// Plain mean of the members.
    MeanOnly,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::ParameterFree => "parameter_free",
            AttentionMode::Learned => "learned",
            AttentionMode::MeanOnly => "mean_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl Projections {
    pub fn identity(d: usize) -> Self {
        Self { wq: Matrix::identity(d), wk: Matrix::identity(d), wv: Matrix::identity(d) }
    }

    /// Identity plus uniform noise of the given amplitude.
    pub fn near_identity(d: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::identity(d);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv] {
            for x in w.as_mut_slice() {
                *x += uniform(rng, -noise, noise);
            }
        }
        p
    }

    fn zeros_like(&self) -> Self {
        let d = self.wq.rows();
        Self { wq: Matrix::zeros(d, d), wk: Matrix::zeros(d, d), wv: Matrix::zeros(d, d) }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.wq.as_slice().to_vec();
        v.extend_from_slice(self.wk.as_slice());
        v.extend_from_slice(self.wv.as_slice());
        v
    }

    pub fn apply_update(&mut self, grad: &Projections, lr: f64) {
        for (w, g) in [(&mut self.wq, &grad.wq), (&mut self.wk, &grad.wk), (&mut self.wv, &grad.wv)] {
            for (x, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *x -= lr * d;
            }
        }
    }
}

/// Parameters of the learned attention mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub node: Projections,
    pub sample: Projections,
}

impl AttentionParams {
    pub fn identity(d: usize) -> Self {
        Self { node: Projections::identity(d), sample: Projections::identity(d) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeGraph {
    pub values: Matrix,
    pub class_label: Label,
    pub subtype: usize,
    pub member_ids: Vec<String>,
    pub attention_mode: AttentionMode,
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - max);
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn project(x: &Matrix, w: Option<&Matrix>) -> Matrix {
    match w {
        Some(w) => x.matmul(w).expect("projection shape checked by caller"),
        None => x.clone(),
    }
}

fn frob_dot(a: &Matrix, b: &Matrix) -> f64 {
    math::dot(a.as_slice(), b.as_slice())
}

struct AttnCache {
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    weights: Vec<Vec<f64>>,
    scale: f64,
}

/// Scaled dot-product self-attention over `items`, each an `r x D` block.
/// Scores are Frobenius inner products scaled by `1/√(r·D)`.
fn attend(items: &[Matrix], proj: Option<&Projections>) -> (Vec<Matrix>, AttnCache) {
    let n = items.len();
    let (r, d) = (items[0].rows(), items[0].cols());
    let scale = 1.0 / math::sqrt((r * d) as f64);
    let q: Vec<Matrix> = items.iter().map(|x| project(x, proj.map(|p| &p.wq))).collect();
    let k: Vec<Matrix> = items.iter().map(|x| project(x, proj.map(|p| &p.wk))).collect();
    let v: Vec<Matrix> = items.iter().map(|x| project(x, proj.map(|p| &p.wv))).collect();
    let mut weights = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for qi in &q {
        let mut row: Vec<f64> = k.iter().map(|kj| frob_dot(qi, kj) * scale).collect();
        softmax_in_place(&mut row);
        let mut o = Matrix::zeros(r, d);
        for (a, vj) in row.iter().zip(&v) {
            for (x, y) in o.as_mut_slice().iter_mut().zip(vj.as_slice()) {
                *x += a * y;
            }
        }
        weights.push(row);
        out.push(o);
    }
    (out, AttnCache { q, k, v, weights, scale })
}

/// Backward of [`attend`] given the upstream gradients on each output item.
fn attend_backward(
    items: &[Matrix],
    proj: Option<&Projections>,
    cache: &AttnCache,
    d_out: &[Matrix],
) -> (Vec<Matrix>, Option<Projections>) {
    let n = items.len();
    let (r, d) = (items[0].rows(), items[0].cols());
    let mut dq = vec![Matrix::zeros(r, d); n];
    let mut dk = vec![Matrix::zeros(r, d); n];
    let mut dv = vec![Matrix::zeros(r, d); n];
    for i in 0..n {
        let a = &cache.weights[i];
        let da: Vec<f64> = cache.v.iter().map(|vj| frob_dot(&d_out[i], vj)).collect();
        let mix: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for j in 0..n {
            for (x, y) in dv[j].as_mut_slice().iter_mut().zip(d_out[i].as_slice()) {
                *x += a[j] * y;
            }
            let ds = a[j] * (da[j] - mix) * cache.scale;
            for (x, y) in dq[i].as_mut_slice().iter_mut().zip(cache.k[j].as_slice()) {
                *x += ds * y;
            }
            for (x, y) in dk[j].as_mut_slice().iter_mut().zip(cache.q[i].as_slice()) {
                *x += ds * y;
            }
        }
    }
    match proj {
        None => {
            let dx = (0..n).map(|i| dq[i].add(&dk[i]).and_then(|m| m.add(&dv[i])).expect("same shapes")).collect();
            (dx, None)
        }
        Some(p) => {
            let mut g = p.zeros_like();
            let mut dx = Vec::with_capacity(n);
            let (wqt, wkt, wvt) = (p.wq.transpose(), p.wk.transpose(), p.wv.transpose());
            for i in 0..n {
                let xt = items[i].transpose();
                g.wq = g.wq.add(&xt.matmul(&dq[i]).expect("shape")).expect("shape");
                g.wk = g.wk.add(&xt.matmul(&dk[i]).expect("shape")).expect("shape");
                g.wv = g.wv.add(&xt.matmul(&dv[i]).expect("shape")).expect("shape");
                let x = dq[i].matmul(&wqt).expect("shape");
                let x = x.add(&dk[i].matmul(&wkt).expect("shape")).expect("shape");
                dx.push(x.add(&dv[i].matmul(&wvt).expect("shape")).expect("shape"));
            }
            (dx, Some(g))
        }
    }
}

fn check_stack(stack: &[Matrix]) -> Result<(usize, usize)> {
    let first = stack.first().ok_or_else(|| config("attention needs at least one sample"))?;
    let (m, d) = (first.rows(), first.cols());
    if d == 0 {
        return Err(config("node feature dimension D must be positive"));
    }
    if m == 0 {
        return Err(config("graphs need at least one node"));
    }
    for (i, g) in stack.iter().enumerate() {
        if g.rows() != m || g.cols() != d {
            return Err(shape(format!("sample {i} is {}x{}, expected {m}x{d}", g.rows(), g.cols())));
        }
        if !g.is_finite() {
            return Err(shape(format!("sample {i} has non-finite entries")));
        }
    }
    Ok((m, d))
}

fn check_proj(p: Option<&Projections>, d: usize) -> Result<()> {
    if let Some(p) = p {
        for w in [&p.wq, &p.wk, &p.wv] {
            if w.rows() != d || w.cols() != d {
                return Err(shape(format!("attention projection must be {d}x{d}")));
            }
        }
    }
    Ok(())
}

fn rows_of(g: &Matrix) -> Vec<Matrix> {
    (0..g.rows()).map(|r| Matrix::from_vec(1, g.cols(), g.row(r).to_vec()).expect("row")).collect()
}

fn stack_rows(rows: &[Matrix]) -> Matrix {
    let d = rows[0].cols();
    Matrix::from_vec(rows.len(), d, rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect()).expect("rows")
}

/// Node-level self-attention: for each sample, attention across its `M` nodes.
pub fn node_attention(stack: &[Matrix], proj: Option<&Projections>) -> Result<Vec<Matrix>> {
    let (_, d) = check_stack(stack)?;
    check_proj(proj, d)?;
    Ok(stack.iter().map(|g| stack_rows(&attend(&rows_of(g), proj).0)).collect())
}

/// Node-level attention weights (one `M x M` row-stochastic matrix per sample).
pub fn node_attention_weights(stack: &[Matrix], proj: Option<&Projections>) -> Result<Vec<Matrix>> {
    let (m, d) = check_stack(stack)?;
    check_proj(proj, d)?;
    Ok(stack
        .iter()
        .map(|g| {
            let (_, c) = attend(&rows_of(g), proj);
            Matrix::from_vec(m, m, c.weights.concat()).expect("square")
        })
        .collect())
}

/// Sample-level self-attention across the members of a subtype.
pub fn sample_attention(stack: &[Matrix], proj: Option<&Projections>) -> Result<Vec<Matrix>> {
    let (_, d) = check_stack(stack)?;
    check_proj(proj, d)?;
    Ok(attend(stack, proj).0)
}

pub fn sample_attention_weights(stack: &[Matrix], proj: Option<&Projections>) -> Result<Matrix> {
    let (_, d) = check_stack(stack)?;
    check_proj(proj, d)?;
    let (_, c) = attend(stack, proj);
    Matrix::from_vec(stack.len(), stack.len(), c.weights.concat())
}

fn mean_of(stack: &[Matrix]) -> Matrix {
    let mut acc = Matrix::zeros(stack[0].rows(), stack[0].cols());
    for g in stack {
        for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
    acc.scale(1.0 / stack.len() as f64)
}

/// `H = mean_i A_sub(A_node(G))_i`, or the plain mean in `MeanOnly` mode.
pub fn prototype_values(stack: &[Matrix], mode: AttentionMode, params: Option<&AttentionParams>) -> Result<Matrix> {
    check_stack(stack)?;
    match mode {
        AttentionMode::MeanOnly => Ok(mean_of(stack)),
        AttentionMode::ParameterFree => Ok(mean_of(&sample_attention(&node_attention(stack, None)?, None)?)),
        AttentionMode::Learned => {
            let p = params.ok_or_else(|| config("learned attention mode needs attention parameters"))?;
            Ok(mean_of(&sample_attention(&node_attention(stack, Some(&p.node))?, Some(&p.sample))?))
        }
    }
}

/// Gradient of `⟨d_h, H⟩` w.r.t. the learned attention projections.
pub fn prototype_param_grad(stack: &[Matrix], params: &AttentionParams, d_h: &Matrix) -> Result<AttentionParams> {
    let (_, d) = check_stack(stack)?;
    check_proj(Some(&params.node), d)?;
    check_proj(Some(&params.sample), d)?;
    let node_in: Vec<Vec<Matrix>> = stack.iter().map(rows_of).collect();
    let node_fw: Vec<(Vec<Matrix>, AttnCache)> = node_in.iter().map(|rows| attend(rows, Some(&params.node))).collect();
    let node_out: Vec<Matrix> = node_fw.iter().map(|(o, _)| stack_rows(o)).collect();
    let (_, scache) = attend(&node_out, Some(&params.sample));
    let d_sample_out: Vec<Matrix> = (0..stack.len()).map(|_| d_h.scale(1.0 / stack.len() as f64)).collect();
    let (d_node_out, g_sample) = attend_backward(&node_out, Some(&params.sample), &scache, &d_sample_out);
    let mut g_node = params.node.zeros_like();
    for ((rows, (_, cache)), dno) in node_in.iter().zip(&node_fw).zip(&d_node_out) {
        let d_rows = rows_of(dno);
        let (_, g) = attend_backward(rows, Some(&params.node), cache, &d_rows);
        let g = g.expect("projections given");
        g_node.wq = g_node.wq.add(&g.wq)?;
        g_node.wk = g_node.wk.add(&g.wk)?;
        g_node.wv = g_node.wv.add(&g.wv)?;
    }
    Ok(AttentionParams { node: g_node, sample: g_sample.expect("projections given") })
}

pub fn build_prototype(
    members: &[SampleGraph],
    mode: AttentionMode,
    params: Option<&AttentionParams>,
    class_label: Label,
    subtype: usize,
) -> Result<PrototypeGraph> {
    if members.is_empty() {
        return Err(config(format!("subtype {subtype} of class {} has no members", class_label.as_u8())));
    }
    let stack: Vec<Matrix> = members.iter().map(|m| m.values.clone()).collect();
    let values = prototype_values(&stack, mode, params)?;
    Ok(PrototypeGraph {
        values,
        class_label,
        subtype,
        member_ids: members.iter().map(|m| m.subject_id.clone()).collect(),
        attention_mode: mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiInfo {
    pub name: String,
    pub network: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRegion {
    pub rank: usize,
    pub roi_index: usize,
    pub roi_name: Option<String>,
    pub network: Option<String>,
    pub strength: f64,
}

pub const DEFAULT_TOP_REGIONS: usize = 10;

/// Nodes ranked by strength `Σ_d |H[r,d]|`, ties by lower index.
pub fn top_regions(prototype: &Matrix, n: usize, lookup: Option<&[RoiInfo]>) -> Result<Vec<RankedRegion>> {
    let m = prototype.rows();
    if n > m {
        return Err(config(format!("asked for {n} regions but the prototype has {m}")));
    }
    let strength: Vec<f64> = (0..m).map(|r| prototype.row(r).iter().map(|x| x.abs()).sum()).collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| strength[b].total_cmp(&strength[a]).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(rank, r)| {
            let info = lookup.and_then(|l| l.get(r));
            RankedRegion {
                rank: rank + 1,
                roi_index: r,
                roi_name: info.map(|i| i.name.clone()),
                network: info.and_then(|i| i.network.clone()),
                strength: strength[r],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_is_identity() {
        let g = Matrix::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap();
        assert_eq!(node_attention(&[g.clone()], None).unwrap()[0], g);
    }

    #[test]
    fn identical_nodes_and_samples() {
        let g = Matrix::from_fn(4, 3, |_, j| j as f64 - 0.5);
        let out = node_attention(&[g.clone()], None).unwrap();
        assert!(out[0].max_abs_diff(&g) < 1e-15);
        let s = sample_attention(&[g.clone(), g.clone(), g.clone()], None).unwrap();
        for o in s {
            assert!(o.max_abs_diff(&g) < 1e-15);
        }
        assert_eq!(sample_attention(&[g.clone()], None).unwrap()[0], g);
    }

    #[test]
    fn mean_only_prototypes() {
        let g = Matrix::from_fn(3, 3, |i, j| (i as f64) - 2.0 * j as f64 + 0.5);
        let one = [SampleGraph { values: g.clone(), subject_id: "a".into() }];
        assert_eq!(build_prototype(&one, AttentionMode::MeanOnly, None, Label::Patient, 0).unwrap().values, g);
        let pair = [
            SampleGraph { values: g.clone(), subject_id: "a".into() },
            SampleGraph { values: g.scale(-1.0), subject_id: "b".into() },
        ];
        let h = build_prototype(&pair, AttentionMode::MeanOnly, None, Label::Patient, 0).unwrap();
        assert_eq!(h.values, Matrix::zeros(3, 3));
    }

    #[test]
    fn errors() {
        assert!(node_attention(&[Matrix::zeros(3, 0)], None).is_err());
        assert!(sample_attention(&[], None).is_err());
        assert!(build_prototype(&[], AttentionMode::ParameterFree, None, Label::Control, 0).is_err());
        let bad = [
            SampleGraph { values: Matrix::zeros(3, 3), subject_id: "a".into() },
            SampleGraph { values: Matrix::zeros(2, 3), subject_id: "b".into() },
        ];
        assert!(build_prototype(&bad, AttentionMode::MeanOnly, None, Label::Control, 0).is_err());
    }

    #[test]
    fn top_region_single_row() {
        let mut h = Matrix::zeros(6, 6);
        h[(4, 2)] = -0.7;
        let r = top_regions(&h, 3, None).unwrap();
        assert_eq!(r[0].roi_index, 4);
        assert_eq!(r[1].roi_index, 0);
        assert!(top_regions(&h, 7, None).is_err());
    }

    #[test]
    fn learned_identity_matches_parameter_free() {
        let stack: Vec<Matrix> = (0..3).map(|s| Matrix::from_fn(4, 4, |i, j| libm::sin((s * 16 + i * 4 + j) as f64))).collect();
        let a = prototype_values(&stack, AttentionMode::ParameterFree, None).unwrap();
        let b = prototype_values(&stack, AttentionMode::Learned, Some(&AttentionParams::identity(4))).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn learned_gradient_matches_finite_differences() {
        let stack: Vec<Matrix> = (0..3).map(|s| Matrix::from_fn(3, 3, |i, j| 0.5 * libm::cos((s * 9 + i * 3 + j) as f64 * 1.3))).collect();
        let mut rng = crate::rng::stage_rng(5, "t");
        let params = AttentionParams {
            node: Projections::near_identity(3, 0.3, &mut rng),
            sample: Projections::near_identity(3, 0.3, &mut rng),
        };
        let d_h = Matrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.4 + 0.1);
        let f = |p: &AttentionParams| frob_dot(&prototype_values(&stack, AttentionMode::Learned, Some(p)).unwrap(), &d_h);
        let g = prototype_param_grad(&stack, &params, &d_h).unwrap();
        let h = 1e-6;
        for level in 0..2 {
            for w in 0..3 {
                for idx in 0..9 {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    fn entry(p: &mut AttentionParams, level: usize, w: usize, idx: usize) -> &mut f64 {
                        let pr = if level == 0 { &mut p.node } else { &mut p.sample };
                        let m = match w {
                            0 => &mut pr.wq,
                            1 => &mut pr.wk,
                            _ => &mut pr.wv,
                        };
                        &mut m.as_mut_slice()[idx]
                    }
                    *entry(&mut plus, level, w, idx) += h;
                    *entry(&mut minus, level, w, idx) -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let gp = if level == 0 { &g.node } else { &g.sample };
                    let an = [&gp.wq, &gp.wk, &gp.wv][w].as_slice()[idx];
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "level {level} w {w} idx {idx}: {fd} vs {an}");
                }
            }
        }
    }
}
