//! The learned syndrome decoder: two node streams (variable and check) refined
//! by `T` blocks of edge-local pairwise aggregation, gated residual updates,
//! and bidirectional selective state-space layers over each stream.
//!
//! Frames are batched by stacking: a batch of `B` frames holds `B * n`
//! variable rows and `B * (n - k)` check rows, and every graph index is tiled
//! per frame. Sequence kernels run over each frame's rows independently.

use crate::channel::syndrome_inputs;
use crate::code::CodeSpec;
use crate::numerics::{NumericsError, Real, SegmentIndex, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of decoder blocks `T`. Zero leaves only embedding and head.
    pub blocks: usize,
    pub d: usize,
    /// Projection width of the pairwise edge features.
    pub r: usize,
    pub ssm_state: usize,
    /// Inner width of each state-space direction is `ssm_expand * d`.
    pub ssm_expand: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            d: 24,
            r: 12,
            ssm_state: 4,
            ssm_expand: 2,
            conv_kernel: 4,
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("r", self.r),
            ("ssm_state", self.ssm_state),
            ("ssm_expand", self.ssm_expand),
            ("conv_kernel", self.conv_kernel),
            ("ffn_mult", self.ffn_mult),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(MmpdError::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.r > self.d {
            w.push(format!("r = {} exceeds d = {}", self.r, self.d));
        }
        w
    }

    fn inner(&self) -> usize {
        self.ssm_expand * self.d
    }

    /// Configuration whose parameter count on the (49, 24) code is
    /// 1,214,647, within 2% of 1.2M.
    pub fn preset_1_2m() -> Self {
        Self {
            blocks: 3,
            d: 72,
            r: 36,
            ssm_state: 16,
            ssm_expand: 2,
            conv_kernel: 4,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MmpdError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what} has length {got}, expected {expected}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("parameter {name}: {detail}")]
    Parameter { name: String, detail: String },
    #[error("input embedding: {0}")]
    Embed(NumericsError),
    #[error("block {block}: {source}")]
    Block { block: usize, source: NumericsError },
    #[error("output head: {0}")]
    Head(NumericsError),
}

type Result<T> = std::result::Result<T, MmpdError>;

/// Indices of one pairwise-aggregation direction. `target_proj` projects the
/// stream receiving messages and is the first operand of the edge feature.
#[derive(Debug, Clone, Copy)]
struct AggIdx {
    target_proj: usize,
    source_proj: usize,
    w1: usize,
    w2: usize,
    wp: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct GuIdx {
    ln_xi: LnIdx,
    ln_eta: LnIdx,
    w_h: usize,
    w_g: usize,
    w_delta: usize,
    ln_ffn: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
struct DirIdx {
    w_in: usize,
    w_gate: usize,
    conv: usize,
    w_dt: usize,
    b_dt: usize,
    w_b: usize,
    w_c: usize,
    a_log: usize,
    d_skip: usize,
    w_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct MambaIdx {
    fwd: DirIdx,
    rev: DirIdx,
    lambda: usize,
    ln: LnIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    cn_to_vn: AggIdx,
    vn_update: GuIdx,
    vn_mamba: MambaIdx,
    vn_to_cn: AggIdx,
    cn_update: GuIdx,
    cn_mamba: MambaIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    vn_embed: usize,
    vn_bias: usize,
    cn_embed: usize,
    cn_bias: usize,
    blocks: Vec<BlockIdx>,
    head_ln: LnIdx,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform `+-sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Embedding,
    Constant(f64),
    ALog,
}

/// Collects tensor specifications in a fixed order.
struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    /// `[out, in]` weight.
    fn linear(&mut self, name: String, out: usize, inp: usize) -> usize {
        self.add(name, vec![out, inp], Init::Glorot { fan_in: inp, fan_out: out })
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnIdx {
        FfnIdx {
            w1: self.linear(format!("{prefix}.w1"), hidden, d),
            b1: self.add(format!("{prefix}.b1"), vec![hidden], Init::Zeros),
            w2: self.linear(format!("{prefix}.w2"), d, hidden),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }

    fn agg(&mut self, prefix: &str, target: &str, source: &str, cfg: &ModelConfig) -> AggIdx {
        let (d, r) = (cfg.d, cfg.r);
        AggIdx {
            target_proj: self.linear(format!("{prefix}.w_{target}"), r, d),
            source_proj: self.linear(format!("{prefix}.w_{source}"), r, d),
            w1: self.linear(format!("{prefix}.w_1"), r, 2 * r),
            w2: self.linear(format!("{prefix}.w_2"), 1, r),
            wp: self.linear(format!("{prefix}.w_p"), d, d),
            wo: self.linear(format!("{prefix}.w_o"), d, d),
        }
    }

    fn gupdate(&mut self, prefix: &str, cfg: &ModelConfig) -> GuIdx {
        let d = cfg.d;
        GuIdx {
            ln_xi: self.ln(&format!("{prefix}.ln_xi"), d),
            ln_eta: self.ln(&format!("{prefix}.ln_eta"), d),
            w_h: self.linear(format!("{prefix}.w_h"), d, 2 * d),
            w_g: self.linear(format!("{prefix}.w_g"), d, d),
            w_delta: self.linear(format!("{prefix}.w_delta"), d, d),
            ln_ffn: self.ln(&format!("{prefix}.ln_ffn"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, cfg.ffn_mult * d),
        }
    }

    fn direction(&mut self, prefix: &str, cfg: &ModelConfig) -> DirIdx {
        let (d, e, ns, kw) = (cfg.d, cfg.inner(), cfg.ssm_state, cfg.conv_kernel);
        DirIdx {
            w_in: self.linear(format!("{prefix}.w_in"), e, d),
            w_gate: self.linear(format!("{prefix}.w_gate"), e, d),
            conv: self.add(format!("{prefix}.conv"), vec![e, kw], Init::Glorot { fan_in: kw, fan_out: 1 }),
            w_dt: self.linear(format!("{prefix}.w_dt"), e, e),
            b_dt: self.add(format!("{prefix}.b_dt"), vec![e], Init::Zeros),
            w_b: self.linear(format!("{prefix}.w_b"), ns, e),
            w_c: self.linear(format!("{prefix}.w_c"), ns, e),
            a_log: self.add(format!("{prefix}.a_log"), vec![e, ns], Init::ALog),
            d_skip: self.add(format!("{prefix}.d_skip"), vec![e], Init::Ones),
            w_out: self.linear(format!("{prefix}.w_out"), d, e),
        }
    }

    fn mamba(&mut self, prefix: &str, cfg: &ModelConfig) -> MambaIdx {
        MambaIdx {
            fwd: self.direction(&format!("{prefix}.fwd"), cfg),
            rev: self.direction(&format!("{prefix}.rev"), cfg),
            lambda: self.add(format!("{prefix}.lambda"), vec![1], Init::Constant(0.5)),
            ln: self.ln(&format!("{prefix}.ln"), cfg.d),
            ffn: self.ffn(&format!("{prefix}.ffn"), cfg.d, cfg.ffn_mult * cfg.d),
        }
    }
}

fn build_layout(n: usize, m: usize, cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d;
    let mut b = Builder { specs: Vec::new() };
    let vn_embed = b.add("vn_embed".into(), vec![n, d], Init::Embedding);
    let vn_bias = b.add("vn_bias".into(), vec![n, d], Init::Zeros);
    let cn_embed = b.add("cn_embed".into(), vec![m, d], Init::Embedding);
    let cn_bias = b.add("cn_bias".into(), vec![m, d], Init::Zeros);
    let blocks = (0..cfg.blocks)
        .map(|t| BlockIdx {
            cn_to_vn: b.agg(&format!("block{t}.cn_to_vn"), "m", "s", cfg),
            vn_update: b.gupdate(&format!("block{t}.vn_update"), cfg),
            vn_mamba: b.mamba(&format!("block{t}.vn_mamba"), cfg),
            vn_to_cn: b.agg(&format!("block{t}.vn_to_cn"), "s", "m", cfg),
            cn_update: b.gupdate(&format!("block{t}.cn_update"), cfg),
            cn_mamba: b.mamba(&format!("block{t}.cn_mamba"), cfg),
        })
        .collect();
    let head_ln = b.ln("head.ln", d);
    let head_w = b.linear("head.w_out".into(), 1, d);
    let head_b = b.add("head.b_out".into(), vec![1], Init::Zeros);
    let layout = Layout {
        vn_embed,
        vn_bias,
        cn_embed,
        cn_bias,
        blocks,
        head_ln,
        head_w,
        head_b,
    };
    (layout, b.specs)
}

/// Every trainable tensor of the decoder, in a fixed order with stable names.
#[derive(Debug, Clone)]
pub struct ModelParameters<T> {
    config: ModelConfig,
    n: usize,
    checks: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Real> PartialEq for ModelParameters<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.n == other.n && self.names == other.names && self.tensors == other.tensors
    }
}

impl ModelParameters<f64> {
    /// Initializes every tensor from `rng`, drawing in layout order.
    pub fn init(spec: &CodeSpec, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(spec.n, spec.checks(), config);
        let embed = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Glorot { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
                }
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Constant(c) => vec![c; len],
                Init::Embedding => (0..len).map(|_| embed.sample(rng)).collect(),
                Init::ALog => {
                    let ns = shape[1];
                    let row: Vec<f64> = (0..ns)
                        .map(|s| if ns == 1 { 0.0 } else { (ns as f64).ln() * s as f64 / (ns - 1) as f64 })
                        .collect();
                    row.iter().copied().cycle().take(len).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data).expect("layout shape"));
        }
        Ok(Self {
            config: *config,
            n: spec.n,
            checks: spec.checks(),
            names,
            tensors,
            layout,
        })
    }
}

impl<T: Real> ModelParameters<T> {
    /// Rebuilds parameters from named tensors, which must match the layout
    /// implied by the code size and configuration exactly.
    pub fn from_tensors(
        n: usize,
        checks: usize,
        config: &ModelConfig,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(n, checks, config);
        if named.len() != specs.len() {
            return Err(MmpdError::Parameter {
                name: "<all>".into(),
                detail: format!("expected {} tensors, got {}", specs.len(), named.len()),
            });
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((name, tensor), (want, shape, _)) in named.into_iter().zip(specs) {
            if name != want {
                return Err(MmpdError::Parameter {
                    name,
                    detail: format!("expected tensor {want} at this position"),
                });
            }
            if tensor.shape() != shape.as_slice() {
                return Err(MmpdError::Parameter {
                    name,
                    detail: format!("shape {:?}, expected {shape:?}", tensor.shape()),
                });
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self {
            config: *config,
            n,
            checks,
            names,
            tensors,
            layout,
        })
    }

    /// Names and shapes for a configuration, without allocating values.
    pub fn shapes(n: usize, checks: usize, config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        build_layout(n, checks, config).1.into_iter().map(|(name, shape, _)| (name, shape)).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn checks(&self) -> usize {
        self.checks
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config,
            n: self.n,
            checks: self.checks,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Parameter count implied by a code size and configuration.
pub fn parameter_count(n: usize, checks: usize, config: &ModelConfig) -> usize {
    ModelParameters::<f32>::shapes(n, checks, config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Tanner-graph indices tiled for a batch of frames.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    n: usize,
    checks: usize,
    batch: usize,
    edge_vn: Rc<Vec<usize>>,
    edge_cn: Rc<Vec<usize>>,
    by_vn: Rc<SegmentIndex>,
    by_cn: Rc<SegmentIndex>,
    vn_rows: Rc<Vec<usize>>,
    cn_rows: Rc<Vec<usize>>,
}

impl BatchGraph {
    pub fn new(spec: &CodeSpec, batch: usize) -> Self {
        let (n, m) = (spec.n, spec.checks());
        let mut edge_vn = Vec::with_capacity(batch * spec.graph.edge_count());
        let mut edge_cn = Vec::with_capacity(edge_vn.capacity());
        for b in 0..batch {
            for &(j, i) in &spec.graph.edges {
                edge_vn.push(b * n + i);
                edge_cn.push(b * m + j);
            }
        }
        let by_vn = SegmentIndex::new(edge_vn.clone(), batch * n).expect("indices in range");
        let by_cn = SegmentIndex::new(edge_cn.clone(), batch * m).expect("indices in range");
        Self {
            n,
            checks: m,
            batch,
            edge_vn: Rc::new(edge_vn),
            edge_cn: Rc::new(edge_cn),
            by_vn: Rc::new(by_vn),
            by_cn: Rc::new(by_cn),
            vn_rows: Rc::new((0..batch * n).map(|r| r % n).collect()),
            cn_rows: Rc::new((0..batch * m).map(|r| r % m).collect()),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Variable- and check-stream states on the tape.
#[derive(Debug, Clone, Copy)]
pub struct StreamState {
    pub m: Var,
    pub s: Var,
}

/// The tape and parameter handles for one forward evaluation.
pub struct Graph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub params: &'a ModelParameters<T>,
    pub graph: &'a BatchGraph,
}

impl<T: Real> Graph<'_, T> {
    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn check_inputs(&self, m_y: &[T], s_y: &[T]) -> Result<()> {
        let g = self.graph;
        if self.params.n != g.n || self.params.checks != g.checks {
            return Err(MmpdError::Config(format!(
                "parameters are for a ({}, {} checks) code, graph has ({}, {} checks)",
                self.params.n, self.params.checks, g.n, g.checks
            )));
        }
        if m_y.len() != g.batch * g.n {
            return Err(MmpdError::Length {
                what: "m_y",
                expected: g.batch * g.n,
                got: m_y.len(),
            });
        }
        if s_y.len() != g.batch * g.checks {
            return Err(MmpdError::Length {
                what: "s_y",
                expected: g.batch * g.checks,
                got: s_y.len(),
            });
        }
        Ok(())
    }

    /// `M0_i = m_y[i] e_i + b_i` and `S0_j = s_y[j] e_j + b_j`, per frame.
    pub fn embed_inputs(&mut self, m_y: &[T], s_y: &[T]) -> Result<StreamState> {
        self.check_inputs(m_y, s_y)?;
        let l = &self.params.layout;
        let g = self.graph;
        let (vn_e, vn_b, cn_e, cn_b) = (self.v(l.vn_embed), self.v(l.vn_bias), self.v(l.cn_embed), self.v(l.cn_bias));
        let t = &mut *self.tape;
        let embed = |t: &mut Tape<T>, e: Var, b: Var, rows: &Rc<Vec<usize>>, x: &[T]| {
            let xv = t.constant(Tensor::new(vec![x.len()], x.to_vec())?);
            let er = t.gather(e, rows.clone())?;
            let br = t.gather(b, rows.clone())?;
            let scaled = t.scale_rows(er, xv)?;
            t.add(scaled, br)
        };
        let m = embed(t, vn_e, vn_b, &g.vn_rows, m_y).map_err(MmpdError::Embed)?;
        let s = embed(t, cn_e, cn_b, &g.cn_rows, s_y).map_err(MmpdError::Embed)?;
        Ok(StreamState { m, s })
    }

    fn aggregate(&mut self, idx: &AggIdx, target: Var, source: Var, to_vn: bool) -> crate::numerics::Result<Var> {
        let g = self.graph;
        let (tgt_edges, src_edges, seg, target_rows) = if to_vn {
            (&g.edge_vn, &g.edge_cn, &g.by_vn, g.batch * g.n)
        } else {
            (&g.edge_cn, &g.edge_vn, &g.by_cn, g.batch * g.checks)
        };
        let [wt, ws, w1, w2, wp, wo] =
            [idx.target_proj, idx.source_proj, idx.w1, idx.w2, idx.wp, idx.wo].map(|i| self.v(i));
        let t = &mut *self.tape;
        let pt = t.linear(target, wt, None)?;
        let ps = t.linear(source, ws, None)?;
        let a = t.gather(pt, tgt_edges.clone())?;
        let b = t.gather(ps, src_edges.clone())?;
        let prod = t.mul(a, b)?;
        let diff = t.sub(a, b)?;
        let phi = t.concat(prod, diff)?;
        let hidden = t.linear(phi, w1, None)?;
        let hidden = t.silu(hidden)?;
        let score = t.linear(hidden, w2, None)?;
        let alpha = t.segment_softmax(score, seg.clone())?;
        let values = t.linear(source, wp, None)?;
        let values = t.gather(values, src_edges.clone())?;
        let weighted = t.scale_rows(values, alpha)?;
        let summed = t.scatter_add(weighted, tgt_edges.clone(), target_rows)?;
        t.linear(summed, wo, None)
    }

    /// Messages into the variable stream, one row per variable node.
    pub fn aggregate_cn_to_vn(&mut self, block: usize, state: StreamState) -> Result<Var> {
        let idx = self.params.layout.blocks[block].cn_to_vn;
        self.aggregate(&idx, state.m, state.s, true)
            .map_err(|source| MmpdError::Block { block, source })
    }

    /// Messages into the check stream, one row per check node.
    pub fn aggregate_vn_to_cn(&mut self, block: usize, state: StreamState) -> Result<Var> {
        let idx = self.params.layout.blocks[block].vn_to_cn;
        self.aggregate(&idx, state.s, state.m, false)
            .map_err(|source| MmpdError::Block { block, source })
    }

    fn layer_norm(&mut self, x: Var, ln: LnIdx) -> crate::numerics::Result<Var> {
        let (g, b) = (self.v(ln.gain), self.v(ln.bias));
        self.tape.layer_norm(x, g, b)
    }

    fn ffn(&mut self, x: Var, f: FfnIdx) -> crate::numerics::Result<Var> {
        let [w1, b1, w2, b2] = [f.w1, f.b1, f.w2, f.b2].map(|i| self.v(i));
        let h = self.tape.linear(x, w1, Some(b1))?;
        let h = self.tape.gelu(h)?;
        self.tape.linear(h, w2, Some(b2))
    }

    fn gated_update_idx(&mut self, xi: Var, eta: Var, idx: &GuIdx) -> crate::numerics::Result<Var> {
        let a = self.layer_norm(xi, idx.ln_xi)?;
        let b = self.layer_norm(eta, idx.ln_eta)?;
        let [w_h, w_g, w_delta] = [idx.w_h, idx.w_g, idx.w_delta].map(|i| self.v(i));
        let t = &mut *self.tape;
        let cat = t.concat(a, b)?;
        let h = t.linear(cat, w_h, None)?;
        let h = t.gelu(h)?;
        let gate = t.linear(h, w_g, None)?;
        let gate = t.sigmoid(gate)?;
        let delta = t.linear(h, w_delta, None)?;
        let upd = t.mul(gate, delta)?;
        let xi2 = t.add(xi, upd)?;
        let normed = self.layer_norm(xi2, idx.ln_ffn)?;
        let f = self.ffn(normed, idx.ffn)?;
        self.tape.add(xi2, f)
    }

    /// Gated residual update of a stream given its incoming messages.
    pub fn gated_update(&mut self, block: usize, vn: bool, xi: Var, eta: Var) -> Result<Var> {
        let b = &self.params.layout.blocks[block];
        let idx = if vn { b.vn_update } else { b.cn_update };
        self.gated_update_idx(xi, eta, &idx)
            .map_err(|source| MmpdError::Block { block, source })
    }

    fn direction(&mut self, x: Var, idx: &DirIdx, seq_len: usize) -> crate::numerics::Result<Var> {
        let [w_in, w_gate, conv, w_dt, b_dt, w_b, w_c, a_log, d_skip, w_out] = [
            idx.w_in, idx.w_gate, idx.conv, idx.w_dt, idx.b_dt, idx.w_b, idx.w_c, idx.a_log, idx.d_skip, idx.w_out,
        ]
        .map(|i| self.v(i));
        let t = &mut *self.tape;
        let u = t.linear(x, w_in, None)?;
        let z = t.linear(x, w_gate, None)?;
        let u = t.causal_conv(u, conv, seq_len)?;
        let u = t.silu(u)?;
        let dt = t.linear(u, w_dt, Some(b_dt))?;
        let dt = t.softplus(dt)?;
        let b = t.linear(u, w_b, None)?;
        let c = t.linear(u, w_c, None)?;
        let a = t.exp(a_log)?;
        let a = t.scale(a, -T::one())?;
        let y = t.selective_scan(u, dt, a, b, c, d_skip, seq_len)?;
        let gate = t.silu(z)?;
        let y = t.mul(y, gate)?;
        t.linear(y, w_out, None)
    }

    fn bimamba_idx(&mut self, x: Var, idx: &MambaIdx, seq_len: usize) -> crate::numerics::Result<Var> {
        let fwd = self.direction(x, &idx.fwd, seq_len)?;
        let xr = self.tape.reverse(x, seq_len)?;
        let rev = self.direction(xr, &idx.rev, seq_len)?;
        let rev = self.tape.reverse(rev, seq_len)?;
        let both = self.tape.add(fwd, rev)?;
        let lambda = self.v(idx.lambda);
        let scaled = self.tape.scale_by(both, lambda)?;
        let inner = self.tape.add(x, scaled)?;
        let normed = self.layer_norm(inner, idx.ln)?;
        let f = self.ffn(normed, idx.ffn)?;
        self.tape.add(inner, f)
    }

    /// Bidirectional state-space refinement of a whole stream; each frame's
    /// nodes form one sequence in ascending index order.
    pub fn bimamba_block(&mut self, block: usize, vn: bool, x: Var) -> Result<Var> {
        let b = &self.params.layout.blocks[block];
        let idx = if vn { b.vn_mamba } else { b.cn_mamba };
        let seq_len = if vn { self.graph.n } else { self.graph.checks };
        self.bimamba_idx(x, &idx, seq_len)
            .map_err(|source| MmpdError::Block { block, source })
    }

    /// One decoder block.
    pub fn block(&mut self, block: usize, state: StreamState) -> Result<StreamState> {
        let msg = self.aggregate_cn_to_vn(block, state)?;
        let m = self.gated_update(block, true, state.m, msg)?;
        let m = self.bimamba_block(block, true, m)?;
        let msg = self.aggregate_vn_to_cn(block, StreamState { m, s: state.s })?;
        let s = self.gated_update(block, false, state.s, msg)?;
        let s = self.bimamba_block(block, false, s)?;
        Ok(StreamState { m, s })
    }

    /// `nu_i = w_out . LN(M_i) + b_out`, flattened to one logit per bit.
    pub fn head(&mut self, m: Var) -> Result<Var> {
        let l = &self.params.layout;
        let (ln, w, b) = (l.head_ln, self.v(l.head_w), self.v(l.head_b));
        let run = |s: &mut Self| -> crate::numerics::Result<Var> {
            let x = s.layer_norm(m, ln)?;
            let logits = s.tape.linear(x, w, Some(b))?;
            let len = s.tape.value(logits).len();
            s.tape.reshape(logits, vec![len])
        };
        run(self).map_err(MmpdError::Head)
    }

    /// Error-indicator logits `nu_hat` for a batch; positive means "flipped".
    pub fn forward(&mut self, m_y: &[T], s_y: &[T]) -> Result<Var> {
        let mut state = self.embed_inputs(m_y, s_y)?;
        for t in 0..self.params.config.blocks {
            state = self.block(t, state)?;
        }
        self.head(state.m)
    }
}

/// Logits for a batch of frames given their stacked inputs, without gradients.
pub fn forward<T: Real>(params: &ModelParameters<T>, graph: &BatchGraph, m_y: &[T], s_y: &[T]) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let mut g = Graph {
        tape: &mut tape,
        vars: &vars,
        params,
        graph,
    };
    let nu = g.forward(m_y, s_y)?;
    Ok(tape.value(nu).data().to_vec())
}

/// Hard decision `y_b xor [nu_hat > 0]`.
pub fn decide<T: Real>(y_b: &[u8], nu_hat: &[T]) -> Vec<u8> {
    y_b.iter().zip(nu_hat).map(|(&b, &v)| b ^ (v > T::zero()) as u8).collect()
}

/// Decodes one channel observation.
pub fn decode(spec: &CodeSpec, params: &ModelParameters<f32>, y: &[f64]) -> Result<(Vec<u8>, Vec<f32>)> {
    if y.len() != spec.n {
        return Err(MmpdError::Length {
            what: "y",
            expected: spec.n,
            got: y.len(),
        });
    }
    let (m_y, y_b, s_y) = syndrome_inputs(spec, y);
    let m_y: Vec<f32> = m_y.iter().map(|&v| v as f32).collect();
    let s_y: Vec<f32> = s_y.iter().map(|&v| v as f32).collect();
    let nu = forward(params, &BatchGraph::new(spec, 1), &m_y, &s_y)?;
    Ok((decide(&y_b, &nu), nu))
}
