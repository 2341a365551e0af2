use super::{gelu, gelu_grad, sigmoid, silu, silu_grad, softplus, NumericsError, Real, Result, SegmentIndex, Tensor};
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleByScalar(Var, Var),
    ScaleRows(Var, Var),
    Concat(Var, Var),
    Linear { x: Var, w: Var, bias: Option<Var> },
    Silu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    SegmentSoftmax(Var, Rc<SegmentIndex>),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    SsmScan { a_bar: Var, bx: Var, c: Var, d_skip: Var, x: Var, seq_len: usize, states: Vec<T> },
    SelectiveScan { vars: [Var; 6], seq_len: usize, a_bar: Vec<T>, states: Vec<T> },
    Reverse(Var, usize),
    CausalConv { x: Var, kernel: Var, seq_len: usize },
    OuterScale(Var, Var),
    OuterRows(Var, Var),
    Reshape(Var),
    SumAll(Var),
    BceMean { logits: Var, targets: Rc<Vec<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Every kernel validates shapes, appends its
/// output, and rejects non-finite results naming the kernel.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(kernel: &'static str, detail: String) -> Result<V> {
    Err(NumericsError::Shape { kernel, detail })
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, kernel: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { kernel });
        }
        let rg = parents.iter().any(|&p| self.needs(p));
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(kernel, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(kernel, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(kernel, value, op, &[a, b])
    }

    fn unary(&mut self, kernel: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(kernel, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// Multiplies by a one-element tensor (e.g. a learnable scalar).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("scale_by", format!("scalar operand has shape {:?}", self.shape(s)));
        }
        let c = self.data(s)[0];
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale_by", value, Op::ScaleByScalar(a, s), &[a, s])
    }

    /// `out[r, :] = a[r, :] * s[r]` for `a` of shape `[.., C]` and `s` holding one
    /// value per row.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let cols = self.value(a).last_dim();
        if self.value(s).len() != rows {
            return shape_err("scale_rows", format!("{rows} rows but {} scales", self.value(s).len()));
        }
        let sd = self.data(s);
        let data = self
            .data(a)
            .chunks(cols.max(1))
            .zip(sd)
            .flat_map(|(row, &k)| row.iter().map(move |&x| x * k))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale_rows", value, Op::ScaleRows(a, s), &[a, s])
    }

    /// Concatenation along the last axis of two `[R, _]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = (self.value(a).rows(), self.value(a).last_dim());
        let (rb, cb) = (self.value(b).rows(), self.value(b).last_dim());
        if ra != rb {
            return shape_err("concat", format!("{ra} rows vs {rb} rows"));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    /// `x W^T + bias` with `x: [R, in]`, `W: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (rows, inp) = (self.value(x).rows(), self.value(x).last_dim());
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != inp {
            return shape_err("linear", format!("input width {inp} vs weight {ws:?}"));
        }
        let out = ws[0];
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = bias {
            if self.value(b).len() != out {
                return shape_err("linear", format!("bias {:?} for {out} outputs", self.shape(b)));
            }
            let bd = self.data(b);
            for row in data.chunks_mut(out.max(1)) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(rows, inp, out, T::one(), self.data(x), (inp, 1), self.data(w), (1, inp), beta, &mut data, (out, 1));
        let value = Tensor::new(vec![rows, out], data)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push("linear", value, Op::Linear { x, w, bias }, &parents)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, silu, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    /// Layer normalization over the last axis with epsilon 1e-5 and biased
    /// variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = (self.value(x).rows(), self.value(x).last_dim());
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(
                "layer_norm",
                format!("width {d} with gain {:?} bias {:?}", self.shape(gain), self.shape(bias)),
            );
        }
        let eps = T::c(1e-5);
        let inv_d = T::one() / T::c(d as f64);
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Softmax of `scores` (one value per position, any shape with that many
    /// elements) within each segment of `seg`.
    pub fn segment_softmax(&mut self, scores: Var, seg: Rc<SegmentIndex>) -> Result<Var> {
        if self.value(scores).len() != seg.len() {
            return shape_err(
                "segment_softmax",
                format!("{} scores for {} positions", self.value(scores).len(), seg.len()),
            );
        }
        if let Some(s) = seg.empty_segment() {
            return Err(NumericsError::EmptySegment(s));
        }
        let sd = self.data(scores);
        let mut out = vec![T::zero(); sd.len()];
        for s in 0..seg.segment_count() {
            let m = seg.members(s);
            let mx = m.iter().map(|&e| sd[e]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &e in m {
                let v = (sd[e] - mx).exp();
                out[e] = v;
                total = total + v;
            }
            for &e in m {
                out[e] = out[e] / total;
            }
        }
        let value = Tensor::new(self.shape(scores).to_vec(), out)?;
        self.push("segment_softmax", value, Op::SegmentSoftmax(scores, seg), &[scores])
    }

    /// `out[r] = x[idx[r]]` along the leading (row) axis.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (rows, d) = (self.value(x).rows(), self.value(x).last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("gather", format!("row {bad} out of {rows}"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        self.push("gather", value, Op::Gather(x, idx), &[x])
    }

    /// `out[idx[r]] += x[r]` into `out_rows` zero-initialized rows.
    pub fn scatter_add(&mut self, x: Var, idx: Rc<Vec<usize>>, out_rows: usize) -> Result<Var> {
        let (rows, d) = (self.value(x).rows(), self.value(x).last_dim());
        if idx.len() != rows {
            return shape_err("scatter_add", format!("{} indices for {rows} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return shape_err("scatter_add", format!("target row {bad} out of {out_rows}"));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); out_rows * d];
        for (r, &t) in idx.iter().enumerate() {
            for c in 0..d {
                out[t * d + c] = out[t * d + c] + xd[r * d + c];
            }
        }
        let value = Tensor::new(vec![out_rows, d], out)?;
        self.push("scatter_add", value, Op::ScatterAdd(x, idx), &[x])
    }

    /// Linear state recurrence over independent sequences of `seq_len` steps.
    ///
    /// Shapes: `a_bar, bx: [R, D, N]`, `c: [R, N]`, `d_skip: [D]`, `x: [R, D]`
    /// with `R` a multiple of `seq_len`. Per sequence, `h_0 = 0`,
    /// `h_t = a_bar_t * h_{t-1} + bx_t` and
    /// `y_t[d] = sum_n c_t[n] h_t[d, n] + d_skip[d] x_t[d]`.
    pub fn ssm_scan(&mut self, a_bar: Var, bx: Var, c: Var, d_skip: Var, x: Var, seq_len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(c).to_vec();
        let as_ = self.shape(a_bar).to_vec();
        if xs.len() != 2 || cs.len() != 2 || as_.len() != 3 {
            return shape_err("ssm_scan", format!("ranks: a_bar {as_:?}, c {cs:?}, x {xs:?}"));
        }
        let (rows, dd, ns) = (xs[0], xs[1], cs[1]);
        if as_ != [rows, dd, ns] || self.shape(bx) != as_.as_slice() || cs[0] != rows {
            return shape_err(
                "ssm_scan",
                format!("a_bar {as_:?}, bx {:?}, c {cs:?}, x {xs:?}", self.shape(bx)),
            );
        }
        if self.value(d_skip).len() != dd {
            return shape_err("ssm_scan", format!("d_skip {:?} for width {dd}", self.shape(d_skip)));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err("ssm_scan", format!("{rows} rows is not a multiple of seq_len {seq_len}"));
        }
        let (ad, bd, cd, dk, xd) = (self.data(a_bar), self.data(bx), self.data(c), self.data(d_skip), self.data(x));
        let state = dd * ns;
        let mut states = vec![T::zero(); rows * state];
        let mut y = vec![T::zero(); rows * dd];
        for r in 0..rows {
            let first = r % seq_len == 0;
            for s in 0..state {
                let prev = if first { T::zero() } else { states[(r - 1) * state + s] };
                states[r * state + s] = ad[r * state + s] * prev + bd[r * state + s];
            }
            for d in 0..dd {
                let h = &states[r * state + d * ns..r * state + (d + 1) * ns];
                let acc = h.iter().zip(&cd[r * ns..(r + 1) * ns]).fold(T::zero(), |acc, (&hv, &cv)| acc + hv * cv);
                y[r * dd + d] = acc + dk[d] * xd[r * dd + d];
            }
        }
        let value = Tensor::new(vec![rows, dd], y)?;
        self.push(
            "ssm_scan",
            value,
            Op::SsmScan { a_bar, bx, c, d_skip, x, seq_len, states },
            &[a_bar, bx, c, d_skip, x],
        )
    }

    /// Fused selective scan, equal to
    /// `ssm_scan(exp(delta (x) a), outer_rows(delta * u, b), c, d_skip, u)`
    /// without materializing the discretized inputs.
    ///
    /// Shapes: `u, delta: [R, D]`, `a: [D, N]`, `b, c: [R, N]`, `d_skip: [D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d_skip: Var, seq_len: usize) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 2 || self.shape(delta) != us.as_slice() {
            return shape_err("selective_scan", format!("u {us:?}, delta {:?}", self.shape(delta)));
        }
        let (rows, dd) = (us[0], us[1]);
        let as_ = self.shape(a).to_vec();
        if as_.len() != 2 || as_[0] != dd {
            return shape_err("selective_scan", format!("a {as_:?} for width {dd}"));
        }
        let ns = as_[1];
        if self.shape(b) != [rows, ns] || self.shape(c) != [rows, ns] {
            return shape_err(
                "selective_scan",
                format!("b {:?}, c {:?}, expected [{rows}, {ns}]", self.shape(b), self.shape(c)),
            );
        }
        if self.value(d_skip).len() != dd {
            return shape_err("selective_scan", format!("d_skip {:?} for width {dd}", self.shape(d_skip)));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err("selective_scan", format!("{rows} rows is not a multiple of seq_len {seq_len}"));
        }
        let (ud, dl, ad, bd, cd, dk) =
            (self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c), self.data(d_skip));
        let state = dd * ns;
        let mut a_bar = vec![T::zero(); rows * state];
        let mut states = vec![T::zero(); rows * state];
        let mut y = vec![T::zero(); rows * dd];
        for r in 0..rows {
            let first = r % seq_len == 0;
            let (brow, crow) = (&bd[r * ns..(r + 1) * ns], &cd[r * ns..(r + 1) * ns]);
            for d in 0..dd {
                let dt = dl[r * dd + d];
                let du = dt * ud[r * dd + d];
                let mut acc = T::zero();
                for n in 0..ns {
                    let s = r * state + d * ns + n;
                    let ab = (dt * ad[d * ns + n]).exp();
                    let prev = if first { T::zero() } else { states[s - state] };
                    let h = ab * prev + du * brow[n];
                    a_bar[s] = ab;
                    states[s] = h;
                    acc = acc + crow[n] * h;
                }
                y[r * dd + d] = acc + dk[d] * ud[r * dd + d];
            }
        }
        let value = Tensor::new(vec![rows, dd], y)?;
        let vars = [u, delta, a, b, c, d_skip];
        self.push("selective_scan", value, Op::SelectiveScan { vars, seq_len, a_bar, states }, &vars)
    }

    /// Reverses the row order inside each consecutive block of `seq_len` rows.
    pub fn reverse(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = (self.value(x).rows(), self.value(x).last_dim());
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err("reverse", format!("{rows} rows is not a multiple of seq_len {seq_len}"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let src = reversed_row(r, seq_len);
            out.extend_from_slice(&xd[src * d..(src + 1) * d]);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("reverse", value, Op::Reverse(x, seq_len), &[x])
    }

    /// Causal depthwise convolution along sequences of `seq_len` rows:
    /// `out[t, c] = sum_k kernel[c, k] x[t - (K-1) + k, c]`, zero padded.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, seq_len: usize) -> Result<Var> {
        let (rows, ch) = (self.value(x).rows(), self.value(x).last_dim());
        let ks = self.shape(kernel);
        if ks.len() != 2 || ks[0] != ch || ks[1] == 0 {
            return shape_err("causal_conv", format!("kernel {ks:?} for {ch} channels"));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return shape_err("causal_conv", format!("{rows} rows is not a multiple of seq_len {seq_len}"));
        }
        let kw = ks[1];
        let (xd, wt) = (self.data(x), transpose(self.data(kernel), ch, kw));
        let mut out = vec![T::zero(); rows * ch];
        for r in 0..rows {
            let orow = &mut out[r * ch..(r + 1) * ch];
            for (k, src) in conv_taps(r, seq_len, kw) {
                for ((o, &w), &v) in orow.iter_mut().zip(&wt[k * ch..(k + 1) * ch]).zip(&xd[src * ch..(src + 1) * ch]) {
                    *o = *o + w * v;
                }
            }
        }
        let value = Tensor::new(vec![rows, ch], out)?;
        self.push("causal_conv", value, Op::CausalConv { x, kernel, seq_len }, &[x, kernel])
    }

    /// `out[r, d, n] = a[r, d] * b[d, n]`.
    pub fn outer_scale(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, dd) = (self.value(a).rows(), self.value(a).last_dim());
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != dd {
            return shape_err("outer_scale", format!("[{rows}, {dd}] with {bs:?}"));
        }
        let ns = bs[1];
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * dd * ns);
        for r in 0..rows {
            for d in 0..dd {
                let av = ad[r * dd + d];
                out.extend(bd[d * ns..(d + 1) * ns].iter().map(|&bv| av * bv));
            }
        }
        let value = Tensor::new(vec![rows, dd, ns], out)?;
        self.push("outer_scale", value, Op::OuterScale(a, b), &[a, b])
    }

    /// Row-wise outer product: `out[r, d, n] = a[r, d] * b[r, n]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, dd) = (self.value(a).rows(), self.value(a).last_dim());
        let (rb, ns) = (self.value(b).rows(), self.value(b).last_dim());
        if rows != rb {
            return shape_err("outer_rows", format!("{rows} rows vs {rb} rows"));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * dd * ns);
        for r in 0..rows {
            let brow = &bd[r * ns..(r + 1) * ns];
            for d in 0..dd {
                let av = ad[r * dd + d];
                out.extend(brow.iter().map(|&bv| av * bv));
            }
        }
        let value = Tensor::new(vec![rows, dd, ns], out)?;
        self.push("outer_rows", value, Op::OuterRows(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.data(x).to_vec();
        let value = Tensor::new(shape, data)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean binary cross-entropy with logits, in the stable form
    /// `max(v, 0) - v * t + ln(1 + e^{-|v|})`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Rc<Vec<T>>) -> Result<Var> {
        let ld = self.data(logits);
        if ld.len() != targets.len() || ld.is_empty() {
            return shape_err("bce", format!("{} logits for {} targets", ld.len(), targets.len()));
        }
        let total = ld
            .iter()
            .zip(targets.iter())
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum::<T>();
        let mean = total / T::c(ld.len() as f64);
        self.push("bce", Tensor::scalar(mean), Op::BceMean { logits, targets }, &[logits])
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return shape_err("backward", format!("root has shape {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        axpy(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(bd) {
                        *x = *x + gy * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(ad) {
                        *x = *x + gy * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &gy) in ga.iter_mut().zip(g) {
                        *x = *x + gy * *c;
                    }
                }
            }
            Op::ScaleByScalar(a, s) => {
                let c = self.data(*s)[0];
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &gy) in ga.iter_mut().zip(g) {
                        *x = *x + gy * c;
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] = gs[0] + g.iter().zip(ad).map(|(&gy, &x)| gy * x).sum::<T>();
                }
            }
            Op::ScaleRows(a, s) => {
                let cols = self.value(*a).last_dim().max(1);
                let (ad, sd) = (self.data(*a), self.data(*s));
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (grow, gyrow)) in ga.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (x, &gy) in grow.iter_mut().zip(gyrow) {
                            *x = *x + gy * sd[r];
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (r, (arow, gyrow)) in ad.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        gs[r] = gs[r] + arow.iter().zip(gyrow).map(|(&x, &gy)| x * gy).sum::<T>();
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let w = ca + cb;
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, row) in ga.chunks_mut(ca.max(1)).enumerate() {
                        axpy(row, &g[r * w..r * w + ca]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, row) in gb.chunks_mut(cb.max(1)).enumerate() {
                        axpy(row, &g[r * w + ca..(r + 1) * w]);
                    }
                }
            }
            Op::Linear { x, w, bias } => {
                let (rows, inp) = (self.value(*x).rows(), self.value(*x).last_dim());
                let outd = self.shape(*w)[0];
                if let Some(gx) = self.acc(grads, *x) {
                    // gx[R, in] += g[R, out] W[out, in]
                    T::gemm(rows, outd, inp, T::one(), g, (outd, 1), self.data(*w), (inp, 1), T::one(), gx, (inp, 1));
                }
                if let Some(gw) = self.acc(grads, *w) {
                    // gW[out, in] += g^T[out, R] x[R, in]
                    T::gemm(outd, rows, inp, T::one(), g, (1, outd), self.data(*x), (inp, 1), T::one(), gw, (inp, 1));
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks(outd.max(1)) {
                            axpy(gb, row);
                        }
                    }
                }
            }
            Op::Silu(a) => self.unary_back(grads, *a, g, silu_grad),
            Op::Gelu(a) => self.unary_back(grads, *a, g, gelu_grad),
            Op::Softplus(a) => self.unary_back(grads, *a, g, sigmoid),
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x = *x + gy * y * (T::one() - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x = *x + gy * y;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*x).last_dim();
                let gd = self.data(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_d = T::one() / T::c(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let (gy, xh) = (&g[range.clone()], &xhat[range.clone()]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let gh = gy[c] * gd[c];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xh[c];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for c in 0..d {
                            let gh = gy[c] * gd[c];
                            gx[r * d + c] = gx[r * d + c] + rs * (gh - m1 - xh[c] * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gyrow, xhrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] = gg[c] + gyrow[c] * xhrow[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d) {
                        axpy(gb, row);
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for s in 0..seg.segment_count() {
                        let m = seg.members(s);
                        let dot = m.iter().map(|&e| out[e] * g[e]).sum::<T>();
                        for &e in m {
                            ga[e] = ga[e] + out[e] * (g[e] - dot);
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut ga[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ScatterAdd(a, idx) => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &t) in idx.iter().enumerate() {
                        axpy(&mut ga[r * d..(r + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                }
            }
            Op::SsmScan { a_bar, bx, c, d_skip, x, seq_len, states } => {
                self.ssm_scan_back(grads, g, [*a_bar, *bx, *c, *d_skip, *x], *seq_len, states);
            }
            Op::SelectiveScan { vars, seq_len, a_bar, states } => {
                self.selective_scan_back(grads, g, *vars, *seq_len, a_bar, states);
            }
            Op::Reverse(a, seq_len) => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    let rows = g.len() / d.max(1);
                    for r in 0..rows {
                        let src = reversed_row(r, *seq_len);
                        axpy(&mut ga[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CausalConv { x, kernel, seq_len } => {
                let (rows, ch) = (self.value(*x).rows(), self.value(*x).last_dim());
                let kw = self.shape(*kernel)[1];
                let (xd, wt) = (self.data(*x), transpose(self.data(*kernel), ch, kw));
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let grow = &g[r * ch..(r + 1) * ch];
                        for (k, src) in conv_taps(r, *seq_len, kw) {
                            let dst = &mut gx[src * ch..(src + 1) * ch];
                            for ((o, &w), &gy) in dst.iter_mut().zip(&wt[k * ch..(k + 1) * ch]).zip(grow) {
                                *o = *o + w * gy;
                            }
                        }
                    }
                }
                if self.needs(*kernel) {
                    let mut gwt = vec![T::zero(); kw * ch];
                    for r in 0..rows {
                        let grow = &g[r * ch..(r + 1) * ch];
                        for (k, src) in conv_taps(r, *seq_len, kw) {
                            let dst = &mut gwt[k * ch..(k + 1) * ch];
                            for ((o, &gy), &v) in dst.iter_mut().zip(grow).zip(&xd[src * ch..(src + 1) * ch]) {
                                *o = *o + gy * v;
                            }
                        }
                    }
                    let gw = self.acc(grads, *kernel).expect("kernel needs a gradient");
                    axpy(gw, &transpose(&gwt, kw, ch));
                }
            }
            Op::OuterScale(a, b) => {
                let (rows, dd) = (self.value(*a).rows(), self.value(*a).last_dim());
                let ns = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for d in 0..dd {
                            let base = (r * dd + d) * ns;
                            let s = (0..ns).map(|n| g[base + n] * bd[d * ns + n]).sum::<T>();
                            ga[r * dd + d] = ga[r * dd + d] + s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        for d in 0..dd {
                            let base = (r * dd + d) * ns;
                            let av = ad[r * dd + d];
                            for n in 0..ns {
                                gb[d * ns + n] = gb[d * ns + n] + g[base + n] * av;
                            }
                        }
                    }
                }
            }
            Op::OuterRows(a, b) => {
                let (rows, dd) = (self.value(*a).rows(), self.value(*a).last_dim());
                let ns = self.value(*b).last_dim();
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for d in 0..dd {
                            let base = (r * dd + d) * ns;
                            let s = (0..ns).map(|n| g[base + n] * bd[r * ns + n]).sum::<T>();
                            ga[r * dd + d] = ga[r * dd + d] + s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        for d in 0..dd {
                            let base = (r * dd + d) * ns;
                            let av = ad[r * dd + d];
                            for n in 0..ns {
                                gb[r * ns + n] = gb[r * ns + n] + g[base + n] * av;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g);
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x = *x + g[0];
                    }
                }
            }
            Op::BceMean { logits, targets } => {
                let ld = self.data(*logits);
                let scale = g[0] / T::c(ld.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((x, &v), &t) in gl.iter_mut().zip(ld).zip(targets.iter()) {
                        *x = *x + scale * (sigmoid(v) - t);
                    }
                }
            }
        }
    }

    fn unary_back(&self, grads: &mut [Option<Vec<T>>], a: Var, g: &[T], deriv: impl Fn(T) -> T) {
        let ad = self.data(a);
        if let Some(ga) = self.acc(grads, a) {
            for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(ad) {
                *x = *x + gy * deriv(v);
            }
        }
    }

    fn ssm_scan_back(&self, grads: &mut [Option<Vec<T>>], g: &[T], vars: [Var; 5], seq_len: usize, states: &[T]) {
        let [a_bar, bx, c, d_skip, x] = vars;
        let (rows, dd) = (self.value(x).rows(), self.value(x).last_dim());
        let ns = self.value(c).last_dim();
        let state = dd * ns;
        let (ad, cd, dk, xd) = (self.data(a_bar), self.data(c), self.data(d_skip), self.data(x));

        if let Some(gx) = self.acc(grads, x) {
            for r in 0..rows {
                for d in 0..dd {
                    gx[r * dd + d] = gx[r * dd + d] + g[r * dd + d] * dk[d];
                }
            }
        }
        if let Some(gd) = self.acc(grads, d_skip) {
            for r in 0..rows {
                for d in 0..dd {
                    gd[d] = gd[d] + g[r * dd + d] * xd[r * dd + d];
                }
            }
        }
        if let Some(gc) = self.acc(grads, c) {
            for r in 0..rows {
                for d in 0..dd {
                    let gy = g[r * dd + d];
                    for n in 0..ns {
                        gc[r * ns + n] = gc[r * ns + n] + gy * states[r * state + d * ns + n];
                    }
                }
            }
        }
        // Gradient w.r.t. the hidden states, accumulated backwards in time.
        let mut gh = vec![T::zero(); rows * state];
        for r in (0..rows).rev() {
            let last = r % seq_len == seq_len - 1;
            for d in 0..dd {
                let gy = g[r * dd + d];
                for n in 0..ns {
                    let s = d * ns + n;
                    let carry = if last { T::zero() } else { ad[(r + 1) * state + s] * gh[(r + 1) * state + s] };
                    gh[r * state + s] = gy * cd[r * ns + n] + carry;
                }
            }
        }
        if let Some(ga) = self.acc(grads, a_bar) {
            for r in 0..rows {
                if r % seq_len == 0 {
                    continue;
                }
                for s in 0..state {
                    ga[r * state + s] = ga[r * state + s] + gh[r * state + s] * states[(r - 1) * state + s];
                }
            }
        }
        if let Some(gb) = self.acc(grads, bx) {
            axpy(gb, &gh);
        }
    }

    fn selective_scan_back(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        vars: [Var; 6],
        seq_len: usize,
        a_bar: &[T],
        states: &[T],
    ) {
        let [u, delta, a, b, c, d_skip] = vars;
        let (rows, dd) = (self.value(u).rows(), self.value(u).last_dim());
        let ns = self.value(a).last_dim();
        let state = dd * ns;
        let (ud, dl, ad, bd, cd, dk) =
            (self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c), self.data(d_skip));
        let mut gu = vec![T::zero(); rows * dd];
        let mut gdelta = vec![T::zero(); rows * dd];
        let mut ga = vec![T::zero(); dd * ns];
        let mut gb = vec![T::zero(); rows * ns];
        let mut gc = vec![T::zero(); rows * ns];
        let mut gd = vec![T::zero(); dd];
        // Running gradient w.r.t. h_r for one row, carried backwards in time.
        let mut gh_next = vec![T::zero(); state];
        for r in (0..rows).rev() {
            let first = r % seq_len == 0;
            let last = r % seq_len == seq_len - 1;
            for d in 0..dd {
                let gy = g[r * dd + d];
                let dt = dl[r * dd + d];
                let uv = ud[r * dd + d];
                gu[r * dd + d] = gu[r * dd + d] + gy * dk[d];
                gd[d] = gd[d] + gy * uv;
                let mut g_dt = T::zero();
                let mut g_u = T::zero();
                for n in 0..ns {
                    let k = d * ns + n;
                    let s = r * state + k;
                    gc[r * ns + n] = gc[r * ns + n] + gy * states[s];
                    let carry = if last { T::zero() } else { a_bar[s + state] * gh_next[k] };
                    let gh = gy * cd[r * ns + n] + carry;
                    gh_next[k] = gh;
                    let prev = if first { T::zero() } else { states[s - state] };
                    let g_ab = gh * prev * a_bar[s];
                    g_dt = g_dt + g_ab * ad[k] + gh * bd[r * ns + n] * uv;
                    ga[k] = ga[k] + g_ab * dt;
                    gb[r * ns + n] = gb[r * ns + n] + gh * dt * uv;
                    g_u = g_u + gh * dt * bd[r * ns + n];
                }
                gdelta[r * dd + d] = gdelta[r * dd + d] + g_dt;
                gu[r * dd + d] = gu[r * dd + d] + g_u;
            }
        }
        for (v, gv) in [(u, gu), (delta, gdelta), (a, ga), (b, gb), (c, gc), (d_skip, gd)] {
            if let Some(acc) = self.acc(grads, v) {
                axpy(acc, &gv);
            }
        }
    }
}

/// `[rows, cols]` to `[cols, rows]`.
fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `(tap, source row)` pairs of a causal convolution of width `kw` at row `r`.
fn conv_taps(r: usize, seq_len: usize, kw: usize) -> impl Iterator<Item = (usize, usize)> {
    let t = r % seq_len;
    (0..kw).filter(move |&k| kw - 1 - k <= t).map(move |k| (k, r - (kw - 1 - k)))
}

#[inline]
fn reversed_row(r: usize, seq_len: usize) -> usize {
    let block = r / seq_len;
    block * seq_len + (seq_len - 1 - r % seq_len)
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], g: &[T]) {
    for (x, &y) in acc.iter_mut().zip(g) {
        *x = *x + y;
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` when `v` does not influence
    /// the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zeros when it does not influence the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}
