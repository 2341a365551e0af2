//! Independent dense re-implementation of the decoder for oracle tests.
//!
//! Everything here works on one frame with nested `Vec`s and explicit loops
//! over H; it shares nothing with the library beyond parameter lookup by name.

#![allow(dead_code)]

use mmpd_core::code::CodeSpec;
use mmpd_core::mmpd::ModelParameters;

pub type Mat = Vec<Vec<f64>>;

pub struct Ref<'a> {
    pub p: &'a ModelParameters<f64>,
    pub h: Vec<Vec<bool>>,
}

impl<'a> Ref<'a> {
    pub fn new(spec: &CodeSpec, p: &'a ModelParameters<f64>) -> Self {
        let h = (0..spec.checks())
            .map(|j| (0..spec.n).map(|i| spec.h.get(j, i)).collect())
            .collect();
        Self { p, h }
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.p.get(name).unwrap_or_else(|| panic!("no tensor {name}")).data().to_vec()
    }

    pub fn mat(&self, name: &str) -> Mat {
        let t = self.p.get(name).unwrap_or_else(|| panic!("no tensor {name}"));
        let cols = *t.shape().last().unwrap();
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.vec(name)[0]
    }

    pub fn lin(&self, name: &str, x: &[f64]) -> Vec<f64> {
        matvec(&self.mat(name), x)
    }

    pub fn lin_b(&self, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
        let bias = self.vec(b);
        matvec(&self.mat(w), x).iter().zip(&bias).map(|(a, b)| a + b).collect()
    }

    pub fn ln(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        layer_norm(x, &self.vec(&format!("{prefix}.gain")), &self.vec(&format!("{prefix}.bias")))
    }

    pub fn ffn(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .lin_b(&format!("{prefix}.w1"), &format!("{prefix}.b1"), x)
            .into_iter()
            .map(gelu)
            .collect();
        self.lin_b(&format!("{prefix}.w2"), &format!("{prefix}.b2"), &h)
    }

    pub fn embed(&self, m_y: &[f64], s_y: &[f64]) -> (Mat, Mat) {
        let (ve, vb, ce, cb) = (self.mat("vn_embed"), self.mat("vn_bias"), self.mat("cn_embed"), self.mat("cn_bias"));
        let m = (0..m_y.len())
            .map(|i| ve[i].iter().zip(&vb[i]).map(|(e, b)| m_y[i] * e + b).collect())
            .collect();
        let s = (0..s_y.len())
            .map(|j| ce[j].iter().zip(&cb[j]).map(|(e, b)| s_y[j] * e + b).collect())
            .collect();
        (m, s)
    }

    /// Attention weights and messages of one aggregation direction. With
    /// `to_vn`, targets are variables (`tgt` = M, `src` = S); otherwise checks.
    pub fn aggregate(&self, prefix: &str, to_vn: bool, tgt: &Mat, src: &Mat) -> (Vec<Vec<f64>>, Mat) {
        let (wt, ws) = if to_vn { ("w_m", "w_s") } else { ("w_s", "w_m") };
        let mut alphas = Vec::new();
        let mut msgs = Vec::new();
        for a_idx in 0..tgt.len() {
            let neighbors: Vec<usize> = (0..src.len())
                .filter(|&b_idx| if to_vn { self.h[b_idx][a_idx] } else { self.h[a_idx][b_idx] })
                .collect();
            let pa = self.lin(&format!("{prefix}.{wt}"), &tgt[a_idx]);
            let scores: Vec<f64> = neighbors
                .iter()
                .map(|&b_idx| {
                    let pb = self.lin(&format!("{prefix}.{ws}"), &src[b_idx]);
                    let mut phi: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
                    phi.extend(pa.iter().zip(&pb).map(|(x, y)| x - y));
                    let hidden: Vec<f64> = self.lin(&format!("{prefix}.w_1"), &phi).into_iter().map(silu).collect();
                    self.lin(&format!("{prefix}.w_2"), &hidden)[0]
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let alpha: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
            let mut acc = vec![0.0; tgt[0].len()];
            for (w, &b_idx) in alpha.iter().zip(&neighbors) {
                let v = self.lin(&format!("{prefix}.w_p"), &src[b_idx]);
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += w * x;
                }
            }
            msgs.push(self.lin(&format!("{prefix}.w_o"), &acc));
            alphas.push(alpha);
        }
        (alphas, msgs)
    }

    pub fn gated_update(&self, prefix: &str, xi: &[f64], eta: &[f64]) -> Vec<f64> {
        let mut cat = self.ln(&format!("{prefix}.ln_xi"), xi);
        cat.extend(self.ln(&format!("{prefix}.ln_eta"), eta));
        let h: Vec<f64> = self.lin(&format!("{prefix}.w_h"), &cat).into_iter().map(gelu).collect();
        let g = self.lin(&format!("{prefix}.w_g"), &h);
        let delta = self.lin(&format!("{prefix}.w_delta"), &h);
        let xi2: Vec<f64> = (0..xi.len()).map(|k| xi[k] + sigmoid(g[k]) * delta[k]).collect();
        let f = self.ffn(&format!("{prefix}.ffn"), &self.ln(&format!("{prefix}.ln_ffn"), &xi2));
        xi2.iter().zip(f).map(|(a, b)| a + b).collect()
    }

    /// One selective-SSM direction over the sequence `x` in the given order.
    pub fn direction(&self, prefix: &str, x: &Mat) -> Mat {
        let len = x.len();
        let conv = self.mat(&format!("{prefix}.conv"));
        let kw = conv[0].len();
        let u_in: Mat = x.iter().map(|r| self.lin(&format!("{prefix}.w_in"), r)).collect();
        let z: Mat = x.iter().map(|r| self.lin(&format!("{prefix}.w_gate"), r)).collect();
        let width = u_in[0].len();
        let u: Mat = (0..len)
            .map(|t| {
                (0..width)
                    .map(|c| {
                        let mut acc = 0.0;
                        for k in 0..kw {
                            let src = t as isize - (kw as isize - 1) + k as isize;
                            if src >= 0 {
                                acc += conv[c][k] * u_in[src as usize][c];
                            }
                        }
                        silu(acc)
                    })
                    .collect()
            })
            .collect();
        let a: Mat = self.mat(&format!("{prefix}.a_log")).iter().map(|r| r.iter().map(|v| -v.exp()).collect()).collect();
        let d_skip = self.vec(&format!("{prefix}.d_skip"));
        let ns = a[0].len();
        let mut h = vec![vec![0.0; ns]; width];
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            let dt: Vec<f64> = self
                .lin_b(&format!("{prefix}.w_dt"), &format!("{prefix}.b_dt"), &u[t])
                .into_iter()
                .map(softplus)
                .collect();
            let b = self.lin(&format!("{prefix}.w_b"), &u[t]);
            let c = self.lin(&format!("{prefix}.w_c"), &u[t]);
            let mut y = vec![0.0; width];
            for ch in 0..width {
                for s in 0..ns {
                    h[ch][s] = (dt[ch] * a[ch][s]).exp() * h[ch][s] + dt[ch] * b[s] * u[t][ch];
                    y[ch] += c[s] * h[ch][s];
                }
                y[ch] += d_skip[ch] * u[t][ch];
                y[ch] *= silu(z[t][ch]);
            }
            out.push(self.lin(&format!("{prefix}.w_out"), &y));
        }
        out
    }

    pub fn bimamba(&self, prefix: &str, x: &Mat) -> Mat {
        let fwd = self.direction(&format!("{prefix}.fwd"), x);
        let rev_in: Mat = x.iter().rev().cloned().collect();
        let mut rev = self.direction(&format!("{prefix}.rev"), &rev_in);
        rev.reverse();
        let lambda = self.scalar(&format!("{prefix}.lambda"));
        x.iter()
            .enumerate()
            .map(|(t, row)| {
                let inner: Vec<f64> = (0..row.len()).map(|k| row[k] + lambda * (fwd[t][k] + rev[t][k])).collect();
                let f = self.ffn(&format!("{prefix}.ffn"), &self.ln(&format!("{prefix}.ln"), &inner));
                inner.iter().zip(f).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    pub fn forward(&self, m_y: &[f64], s_y: &[f64]) -> Vec<f64> {
        let (mut m, mut s) = self.embed(m_y, s_y);
        for t in 0..self.p.config().blocks {
            let b = format!("block{t}");
            let (_, msg) = self.aggregate(&format!("{b}.cn_to_vn"), true, &m, &s);
            let upd: Mat = (0..m.len()).map(|i| self.gated_update(&format!("{b}.vn_update"), &m[i], &msg[i])).collect();
            m = self.bimamba(&format!("{b}.vn_mamba"), &upd);
            let (_, msg) = self.aggregate(&format!("{b}.vn_to_cn"), false, &s, &m);
            let upd: Mat = (0..s.len()).map(|j| self.gated_update(&format!("{b}.cn_update"), &s[j], &msg[j])).collect();
            s = self.bimamba(&format!("{b}.cn_mamba"), &upd);
        }
        let w = self.mat("head.w_out");
        let b = self.scalar("head.b_out");
        m.iter().map(|row| matvec(&w, &self.ln("head.ln", row))[0] + b).collect()
    }
}

pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            assert_eq!(row.len(), x.len());
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(k, v)| (v - mean) * inv * g[k] + b[k]).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

/// Parameters with every tensor drawn uniformly from `[-scale, scale]`
/// (gains around 1, `a_log` kept in its initial range), so that no tensor
/// is at a special value such as zero or one.
pub fn randomized(spec: &CodeSpec, cfg: &mmpd_core::mmpd::ModelConfig, seed: u64, scale: f64) -> ModelParameters<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParameters::<f64>::init(spec, cfg, &mut rng).unwrap();
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        for v in t.data_mut() {
            let r: f64 = rng.random_range(-scale..scale);
            *v = if name.ends_with(".gain") || name.ends_with(".d_skip") {
                1.0 + r
            } else if name.ends_with(".a_log") {
                *v + r
            } else {
                r
            };
        }
    }
    p
}
