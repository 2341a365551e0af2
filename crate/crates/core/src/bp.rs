//! Flooding sum-product belief propagation in the LLR domain.

use crate::code::CodeSpec;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpConfig {
    pub max_iterations: usize,
    /// Magnitude cap applied to every message.
    pub llr_clip: f64,
    pub early_stop: bool,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            llr_clip: 20.0,
            early_stop: true,
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<(), BpError> {
        if self.max_iterations == 0 {
            return Err(BpError::Config("max_iterations must be at least 1"));
        }
        if !(self.llr_clip > 0.0) {
            return Err(BpError::Config("llr_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BpError {
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("llr has length {got}, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("llr[{0}] is not finite")]
    NonFinite(usize),
    #[error("invalid BP configuration: {0}")]
    Config(&'static str),
}

/// AWGN channel LLR `2y / sigma^2`; positive favours bit 0.
pub fn channel_llr(y: &[f64], sigma: f64) -> Result<Vec<f64>, BpError> {
    if !(sigma > 0.0) {
        return Err(BpError::Sigma(sigma));
    }
    let s = 2.0 / (sigma * sigma);
    Ok(y.iter().map(|v| s * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpOutput {
    pub c_hat: Vec<u8>,
    pub iterations: usize,
    pub converged: bool,
}

/// Keeps `tanh(x/2)` strictly inside (-1, 1) so `atanh` stays finite.
const TANH_GUARD: f64 = 1.0 - f64::EPSILON;

pub fn bp_decode(spec: &CodeSpec, llr: &[f64], cfg: &BpConfig) -> Result<BpOutput, BpError> {
    cfg.validate()?;
    if llr.len() != spec.n {
        return Err(BpError::Length {
            expected: spec.n,
            got: llr.len(),
        });
    }
    if let Some(i) = llr.iter().position(|v| !v.is_finite()) {
        return Err(BpError::NonFinite(i));
    }

    let g = &spec.graph;
    let clip = cfg.llr_clip;
    let edges = g.edge_count();
    let mut c2v = vec![0.0f64; edges];
    let mut v2c = vec![0.0f64; edges];
    let mut tanh_buf = vec![0.0f64; edges];
    let mut posterior = vec![0.0f64; spec.n];
    let mut c_hat = vec![0u8; spec.n];
    let mut iterations = 0;

    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        variable_update(spec, llr, &c2v, &mut v2c, clip);
        check_update(spec, &v2c, &mut tanh_buf, &mut c2v, clip);
        for (i, nb) in g.vn_neighbors.iter().enumerate() {
            posterior[i] = llr[i] + nb.iter().map(|&e| c2v[e]).sum::<f64>();
            c_hat[i] = (posterior[i] < 0.0) as u8;
        }
        if cfg.early_stop && spec.is_codeword(&c_hat) {
            break;
        }
    }
    let converged = spec.is_codeword(&c_hat);
    Ok(BpOutput {
        c_hat,
        iterations,
        converged,
    })
}

/// Variable-to-check: channel LLR plus all other incoming check messages.
fn variable_update(spec: &CodeSpec, llr: &[f64], c2v: &[f64], v2c: &mut [f64], clip: f64) {
    for (i, nb) in spec.graph.vn_neighbors.iter().enumerate() {
        let total: f64 = llr[i] + nb.iter().map(|&e| c2v[e]).sum::<f64>();
        for &e in nb {
            v2c[e] = (total - c2v[e]).clamp(-clip, clip);
        }
    }
}

/// Check-to-variable: tanh rule over the other neighbours. Products are
/// recomputed per edge so zero messages need no special casing.
fn check_update(spec: &CodeSpec, v2c: &[f64], tanh_buf: &mut [f64], c2v: &mut [f64], clip: f64) {
    for (t, &m) in tanh_buf.iter_mut().zip(v2c) {
        *t = (0.5 * m).tanh();
    }
    for nb in &spec.graph.cn_neighbors {
        for &e in nb {
            let prod: f64 = nb.iter().filter(|&&o| o != e).map(|&o| tanh_buf[o]).product();
            let prod = prod.clamp(-TANH_GUARD, TANH_GUARD);
            c2v[e] = (2.0 * prod.atanh()).clamp(-clip, clip);
        }
    }
}
