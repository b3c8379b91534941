//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use brainscl_core::rng::{normal, stage_rng, uniform};
use brainscl_core::{Label, Matrix};

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

pub fn random_similarity(n: usize, seed: u64) -> Matrix {
    let mut rng = stage_rng(seed, "sim");
    let mut m = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = uniform(&mut rng, -0.9, 0.95);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

// Reference implementation on nested vectors, written loop by loop.
pub fn ref_affinity(sim: &[Vec<f64>], k: usize, mu: f64) -> Vec<Vec<f64>> {
    let n = sim.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = 2.0 * (1.0 - sim[i][j]);
                d[i][j] = if x > 0.0 { x.sqrt() } else { 0.0 };
            }
        }
    }
    let mut mean_knn = vec![0.0; n];
    for i in 0..n {
        let mut row = Vec::new();
        for j in 0..n {
            if j != i {
                row.push(d[i][j]);
            }
        }
        row.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut s = 0.0;
        for x in row.iter().take(k) {
            s += x;
        }
        mean_knn[i] = s / k as f64;
    }
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if d[i][j] == 0.0 {
                w[i][j] = 1.0;
            } else {
                let eps = (mean_knn[i] + mean_knn[j] + d[i][j]) / 3.0;
                w[i][j] = (-(d[i][j] * d[i][j]) / (mu * eps)).exp();
            }
        }
    }
    w
}

pub fn ref_full(w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = w.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            if k != i {
                s += w[i][k];
            }
        }
        for j in 0..n {
            p[i][j] = if i == j { 0.5 } else { w[i][j] / (2.0 * s) };
        }
    }
    p
}

pub fn ref_local(w: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = w.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| w[i][b].partial_cmp(&w[i][a]).unwrap().then(a.cmp(&b)));
        let keep = &cand[..k];
        let mut total = 0.0;
        for &j in keep {
            total += w[i][j];
        }
        for &j in keep {
            s[i][j] = w[i][j] / total;
        }
    }
    s
}

pub fn ref_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn ref_transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..a[0].len()).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn ref_sym(a: &mut [Vec<f64>]) {
    let n = a.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[i][j] + a[j][i]) / 2.0;
            a[i][j] = v;
            a[j][i] = v;
        }
    }
}

pub fn ref_snf(ws: &[Vec<Vec<f64>>], k: usize, iterations: usize, renormalize: bool) -> Vec<Vec<f64>> {
    let n = ws[0].len();
    let v = ws.len();
    let s: Vec<_> = ws.iter().map(|w| ref_local(w, k)).collect();
    let mut p: Vec<_> = ws.iter().map(|w| ref_full(w)).collect();
    for _ in 0..iterations {
        let mut next = Vec::new();
        for a in 0..v {
            let mut other = vec![vec![0.0; n]; n];
            for (b, pb) in p.iter().enumerate() {
                if b != a {
                    for i in 0..n {
                        for j in 0..n {
                            other[i][j] += pb[i][j];
                        }
                    }
                }
            }
            for row in other.iter_mut() {
                for x in row.iter_mut() {
                    *x /= (v - 1) as f64;
                }
            }
            let mut upd = ref_matmul(&ref_matmul(&s[a], &other), &ref_transpose(&s[a]));
            ref_sym(&mut upd);
            if renormalize {
                upd = ref_full(&upd);
                ref_sym(&mut upd);
            }
            next.push(upd);
        }
        p = next;
    }
    let mut out = vec![vec![0.0; n]; n];
    for pv in &p {
        for i in 0..n {
            for j in 0..n {
                out[i][j] += pv[i][j];
            }
        }
    }
    for row in out.iter_mut() {
        for x in row.iter_mut() {
            *x /= v as f64;
        }
    }
    out
}

pub fn max_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            m = m.max((a[(i, j)] - x).abs());
        }
    }
    m
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

// Direct softmax form, no log-sum-exp.
pub fn naive_info_nce(g: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let p = (cos(g, pos) / tau).exp();
    let n: f64 = negs.iter().map(|v| (cos(g, v) / tau).exp()).sum();
    -(p / (p + n)).ln()
}

pub fn naive_bce(s: f64, y: f64) -> f64 {
    let p = (1.0 / (1.0 + (-s).exp())).clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn vecs(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = stage_rng(seed, "vecs");
    (0..n).map(|_| unit(&(0..d).map(|_| normal(&mut rng)).collect::<Vec<_>>())).collect()
}

// Pairwise definition: P(score⁺ > score⁻) + ½ P(tie).
pub fn brute_auc(y: &[Label], s: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == Label::Patient && y[j] == Label::Control {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Worst central-difference relative error over `coords`, measured against
/// `max(|fd|, |grad|, floor)`.
pub fn fd_worst_rel(f: impl Fn(&[f64]) -> f64, params: &[f64], grad: &[f64], coords: impl Iterator<Item = usize>, h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in coords {
        let mut a = params.to_vec();
        let mut b = params.to_vec();
        a[k] += h;
        b[k] -= h;
        let fd = (f(&a) - f(&b)) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(floor));
    }
    worst
}
