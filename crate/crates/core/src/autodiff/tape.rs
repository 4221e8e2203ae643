use std::collections::BTreeMap;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, S),
    Unary(UnaryKind, Var),
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, indices: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    DepthwiseConv1d { x: Var, w: Var, b: Var, pad: usize },
    ConvTranspose1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    LstmCell { gates: Var, c_prev: Option<Var> },
    GradReverse(Var, S),
    StraightThrough(Var),
    Huber { pred: Var, target: Var, delta: S },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Record of executed primitives, replayed in reverse by [`Tape::backward`].
///
/// Every primitive takes row-major 2-D operands unless stated otherwise.
/// Sequences are laid out time-major: `[frames × channels]`.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
    check_finite: bool,
    anchors: Anchors<S>,
}

/// Values entering `stop_gradient` and `grad_reverse`, in call order. A
/// replaying tape evaluates the surrogate whose true derivative is what
/// `backward` computes: stopped values stay at their recorded value and a
/// reversal becomes `x₀ − w(x − x₀)`. Only finite-difference checks use it.
#[derive(Debug, Clone, Default)]
pub struct Anchors<S> {
    mode: AnchorMode,
    values: Vec<Tensor<S>>,
    cursor: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
enum AnchorMode {
    #[default]
    Off,
    Record,
    Replay,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape2(t: &[usize]) -> (usize, usize) {
    match t.len() {
        1 => (1, t[0]),
        2 => (t[0], t[1]),
        _ => (t[..t.len() - 1].iter().product(), t[t.len() - 1]),
    }
}

/// Broadcast of `b` against `a` where `b` is either the same shape, a single
/// row repeated over `a`'s rows, or a single value.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Some(Bcast::Scalar);
    }
    let (_, ac) = shape2(a);
    let (br, bc) = shape2(b);
    if br == 1 && bc == ac && a.len() <= 2 {
        return Some(Bcast::Row);
    }
    None
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            check_finite: cfg!(debug_assertions),
            anchors: Anchors::default(),
        }
    }

    /// Tape that remembers the inputs of every stop and reversal.
    pub fn recording() -> Self {
        let mut t = Self::new();
        t.anchors.mode = AnchorMode::Record;
        t
    }

    /// Tape evaluating the linearized surrogate around recorded anchors.
    pub fn replaying(anchors: &Anchors<S>) -> Self {
        let mut t = Self::new();
        t.anchors = Anchors {
            mode: AnchorMode::Replay,
            values: anchors.values.clone(),
            cursor: 0,
        };
        t
    }

    pub fn into_anchors(self) -> Anchors<S> {
        self.anchors
    }

    /// Records `current` or returns the anchor recorded at this position.
    fn anchor(&mut self, current: &Tensor<S>) -> Result<Option<Tensor<S>>> {
        match self.anchors.mode {
            AnchorMode::Off => Ok(None),
            AnchorMode::Record => {
                self.anchors.values.push(current.clone());
                Ok(None)
            }
            AnchorMode::Replay => {
                let a = self
                    .anchors
                    .values
                    .get(self.anchors.cursor)
                    .ok_or_else(|| Error::invalid("replayed computation has more anchors than recorded"))?;
                if a.shape() != current.shape() {
                    return Err(Error::shape("anchor", a.shape(), current.shape()));
                }
                self.anchors.cursor += 1;
                Ok(Some(a.clone()))
            }
        }
    }

    /// Enables or disables the per-primitive NaN/Inf tripwire (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf: receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not registered as a named parameter.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter leaf. Repeated calls with the same name return the same
    /// handle so gradients from several uses accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor<S>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = if trainable {
            self.leaf(t.clone())
        } else {
            self.constant(t.clone())
        };
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of every trainable named parameter (zeros when unreached).
    pub fn param_grads(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg, "transpose")
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bk = broadcast_kind(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bc = sb.iter().product::<usize>();
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<S> = match bk {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bc])).collect(),
        };
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(sa, out)?, Op::Binary(kind, a, b), rg, name)
    }

    /// Elementwise sum; `b` may broadcast as a row or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    fn unary(&mut self, kind: UnaryKind, a: Var, name: &'static str) -> Result<Var> {
        let out = self.value(a).map(|x| match kind {
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(S::zero()),
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(kind, a), rg, name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a, "relu")
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = shape2(t.shape());
        let mut out = t.data().to_vec();
        for i in 0..r {
            softmax_row(&mut out[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Mean softmax cross-entropy of `logits [n × C]` against one label per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = shape2(t.shape());
        if labels.len() != r {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0f64;
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse: f64 = row.iter().map(|&v| (v - mx).f64().exp()).sum::<f64>().ln() + mx.f64();
            loss += lse - row[labels[i]].f64();
            softmax_row(&mut probs[i * c..(i + 1) * c]);
        }
        let out = Tensor::scalar(S::of(loss / r as f64));
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(S::of(self.value(a).sum_f64()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(S::of(self.value(a).mean_f64()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Mean over rows: `[r × c] → [1 × c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = shape2(t.shape());
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for (s, v) in acc.iter_mut().zip(t.row(i)) {
                *s += v.f64();
            }
        }
        let out = Tensor::new(vec![1, c], acc.into_iter().map(|s| S::of(s / r as f64)).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg, "mean_rows")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = shape2(t.shape());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = t.row(i);
            let mu = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = S::of(rs);
            for j in 0..c {
                let h = S::of((row[j].f64() - mu) * rs);
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::invalid("concat needs at least one part and axis 0 or 1"));
        }
        let first = self.shape(parts[0]).to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || first.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let out = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, first[1]], data)?
        } else {
            let r = first[0];
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r, cols], data)?
        };
        let rg = self.rg(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// `x[start..end]` along `axis` of a 2-D tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 || start >= end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let t = self.value(x);
        let out = if axis == 0 {
            Tensor::new(vec![end - start, s[1]], t.data()[start * s[1]..end * s[1]].to_vec())?
        } else {
            let mut data = Vec::with_capacity(s[0] * (end - start));
            for i in 0..s[0] {
                data.extend_from_slice(&t.row(i)[start..end]);
            }
            Tensor::new(vec![s[0], end - start], data)?
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Slice { x, axis, start }, rg, "slice")
    }

    /// Gathers rows of `table [V × d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let s = t.shape().to_vec();
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::shape("embedding", &s, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(format!("embedding index {bad} out of range for {} rows", s[0])));
        }
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), s[1]], data)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// 1-D convolution over time. `x [T × Cin]`, `w [Cout × Cin × K]`, `b [Cout]`;
    /// output length `floor((T + 2·pad − K)/stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || self.value(b).len() != sw[0] || stride == 0 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let (t, cin) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        if t + 2 * pad < k {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let wk = conv_weight_kcio(self.value(w).data(), cout, cin, k);
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); tout * cout];
        for to in 0..tout {
            let orow = &mut out[to * cout..(to + 1) * cout];
            orow.copy_from_slice(bv);
            for kk in 0..k {
                let ti = (to * stride + kk) as isize - pad as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                let xrow = &xv[ti as usize * cin..(ti as usize + 1) * cin];
                gemm_acc(xrow, &wk[kk * cin * cout..(kk + 1) * cin * cout], orow, 1, cin, cout);
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::new(vec![tout, cout], out)?,
            Op::Conv1d { x, w, b, stride, pad },
            rg,
            "conv1d",
        )
    }

    /// Per-channel convolution, stride 1. `x [T × C]`, `w [C × K]`, `b [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] || self.value(b).len() != sx[1] {
            return Err(Error::shape("depthwise_conv1d", &sx, &sw));
        }
        let (t, c) = (sx[0], sx[1]);
        let k = sw[1];
        if t + 2 * pad < k {
            return Err(Error::shape("depthwise_conv1d", &sx, &sw));
        }
        let tout = t + 2 * pad - k + 1;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![S::zero(); tout * c];
        for to in 0..tout {
            for ch in 0..c {
                let mut acc = bv[ch];
                for kk in 0..k {
                    let ti = (to + kk) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        acc += wv[ch * k + kk] * xv[ti as usize * c + ch];
                    }
                }
                out[to * c + ch] = acc;
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::new(vec![tout, c], out)?,
            Op::DepthwiseConv1d { x, w, b, pad },
            rg,
            "depthwise_conv1d",
        )
    }

    /// Transposed 1-D convolution. `x [T × Cin]`, `w [Cin × Cout × K]`, `b [Cout]`;
    /// output length `(T − 1)·stride + K − 2·pad`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sw[0] != sx[1] || self.value(b).len() != sw[1] || stride == 0 {
            return Err(Error::shape("conv_transpose1d", &sx, &sw));
        }
        let (t, cin) = (sx[0], sx[1]);
        let (cout, k) = (sw[1], sw[2]);
        let full = (t - 1) * stride + k;
        if full <= 2 * pad {
            return Err(Error::shape("conv_transpose1d", &sx, &sw));
        }
        let tout = full - 2 * pad;
        let wk = tconv_weight_kio(self.value(w).data(), cin, cout, k);
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); tout * cout];
        for r in 0..tout {
            out[r * cout..(r + 1) * cout].copy_from_slice(bv);
        }
        for ti in 0..t {
            let xrow = &xv[ti * cin..(ti + 1) * cin];
            for kk in 0..k {
                let j = (ti * stride + kk) as isize - pad as isize;
                if j < 0 || j as usize >= tout {
                    continue;
                }
                let j = j as usize;
                gemm_acc(
                    xrow,
                    &wk[kk * cin * cout..(kk + 1) * cin * cout],
                    &mut out[j * cout..(j + 1) * cout],
                    1,
                    cin,
                    cout,
                );
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::new(vec![tout, cout], out)?,
            Op::ConvTranspose1d { x, w, b, stride, pad },
            rg,
            "conv_transpose1d",
        )
    }

    /// One LSTM cell step. `gates [1 × 4H]` are the pre-activations in
    /// `(input, forget, cell, output)` order; `c_prev [1 × H]` or `None` for a
    /// zero initial state. Returns `[1 × 2H]` holding `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Option<Var>) -> Result<Var> {
        let sg = self.shape(gates).to_vec();
        let (gr, gc) = shape2(&sg);
        if gr != 1 || gc % 4 != 0 {
            return Err(Error::shape("lstm_cell", &sg, &[]));
        }
        let h = gc / 4;
        if let Some(c) = c_prev {
            if self.value(c).len() != h {
                return Err(Error::shape("lstm_cell", &sg, self.shape(c)));
            }
        }
        let a = self.value(gates).data();
        let cp = c_prev.map(|c| self.value(c).data());
        let mut out = vec![S::zero(); 2 * h];
        for j in 0..h {
            let i = sigmoid(a[j]);
            let f = sigmoid(a[h + j]);
            let g = a[2 * h + j].tanh();
            let o = sigmoid(a[3 * h + j]);
            let c = f * cp.map_or(S::zero(), |c| c[j]) + i * g;
            out[j] = o * c.tanh();
            out[h + j] = c;
        }
        let mut parents = vec![gates];
        parents.extend(c_prev);
        let rg = self.rg(&parents);
        self.push(
            Tensor::new(vec![1, 2 * h], out)?,
            Op::LstmCell { gates, c_prev },
            rg,
            "lstm_cell",
        )
    }

    /// Identity forward; the backward pass multiplies the incoming gradient by `−weight`.
    pub fn grad_reverse(&mut self, x: Var, weight: S) -> Result<Var> {
        if weight < S::zero() {
            return Err(Error::invalid("gradient reversal weight must be non-negative"));
        }
        let mut out = self.value(x).clone();
        if let Some(x0) = self.anchor(&out)? {
            for (o, &a) in out.data_mut().iter_mut().zip(x0.data()) {
                *o = a - weight * (*o - a);
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GradReverse(x, weight), rg, "grad_reverse")
    }

    /// Forward value is `quantized`; the gradient passes to `z_e` unchanged and
    /// nothing flows back into `quantized`.
    pub fn straight_through(&mut self, z_e: Var, quantized: Tensor<S>) -> Result<Var> {
        if self.shape(z_e) != quantized.shape() {
            return Err(Error::shape("straight_through", self.shape(z_e), quantized.shape()));
        }
        let rg = self.rg(&[z_e]);
        self.push(quantized, Op::StraightThrough(z_e), rg, "straight_through")
    }

    /// Copies `x` as a constant (`sg[·]`).
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        let v = self.anchor(&v)?.unwrap_or(v);
        Ok(self.constant(v))
    }

    /// Mean Huber loss: `½d²` for `|d| < δ`, else `δ(|d| − ½δ)`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: S) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("huber", self.shape(pred), self.shape(target)));
        }
        if delta <= S::zero() {
            return Err(Error::invalid("huber delta must be positive"));
        }
        let d = delta.f64();
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total: f64 = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| huber_elem((a - b).f64(), d))
            .sum();
        let out = Tensor::scalar(S::of(total / p.len() as f64));
        let rg = self.rg(&[pred, target]);
        self.push(out, Op::Huber { pred, target, delta }, rg, "huber")
    }

    /// Dense layer `x · w + b` with `w [in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<S>>],
        v: Var,
        f: impl FnOnce(&mut [S]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("slot initialized").data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |da| gemm_nt_acc(gd, bv, da, m, n, k));
                self.accumulate_with(grads, *b, |db| gemm_tn_acc(av, gd, db, m, k, n));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let bk = broadcast_kind(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                let bidx = |j: usize| match bk {
                    Bcast::Same => j,
                    Bcast::Scalar => 0,
                    Bcast::Row => j % bn,
                };
                self.accumulate_with(grads, *a, |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gd[j],
                            BinaryKind::Mul => gd[j] * bv[bidx(j)],
                        };
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for (j, &gj) in gd.iter().enumerate() {
                        db[bidx(j)] += match kind {
                            BinaryKind::Add => gj,
                            BinaryKind::Sub => -gj,
                            BinaryKind::Mul => gj * av[j],
                        };
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate_with(grads, *a, |da| {
                    for (d, &gj) in da.iter_mut().zip(gd) {
                        *d += gj * c;
                    }
                });
            }
            Op::Unary(kind, a) => {
                let y = node.value.data();
                let x = self.value(*a).data();
                self.accumulate_with(grads, *a, |da| {
                    for j in 0..da.len() {
                        let local = match kind {
                            UnaryKind::Tanh => S::one() - y[j] * y[j],
                            UnaryKind::Sigmoid => y[j] * (S::one() - y[j]),
                            UnaryKind::Relu => {
                                if x[j] > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                        };
                        da[j] += gd[j] * local;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (r, c) = shape2(node.value.shape());
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: S = gd[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .fold(S::zero(), |s, (&g, &p)| s + g * p);
                        for j in row {
                            da[j] += y[j] * (gd[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (r, c) = shape2(self.shape(*logits));
                let scale = gd[0] / S::of(r as f64);
                self.accumulate_with(grads, *logits, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if j == labels[i] { S::one() } else { S::zero() };
                            da[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(a) => {
                let g0 = gd[0] / S::of(self.value(*a).len() as f64);
                self.accumulate_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += g0));
            }
            Op::MeanRows(a) => {
                let (r, c) = shape2(self.shape(*a));
                let inv = S::one() / S::of(r as f64);
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += gd[j] * inv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = shape2(self.shape(*x));
                let gv = self.value(*gamma).data();
                self.accumulate_with(grads, *gamma, |dg| {
                    for i in 0..r * c {
                        dg[i % c] += gd[i] * xhat[i];
                    }
                });
                self.accumulate_with(grads, *beta, |db| {
                    for i in 0..r * c {
                        db[i % c] += gd[i];
                    }
                });
                self.accumulate_with(grads, *x, |dx| {
                    let cn = S::of(c as f64);
                    for i in 0..r {
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..c {
                            let dh = gd[i * c + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = gd[i * c + j] * gv[j];
                            dx[i * c + j] +=
                                rstd[i] * (dh - sum_dh / cn - xhat[i * c + j] * sum_dh_h / cn);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (_, total_c) = shape2(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p).to_vec();
                    if *axis == 0 {
                        let n = s[0] * s[1];
                        let start = offset;
                        self.accumulate_with(grads, p, |dp| {
                            for (d, &gj) in dp.iter_mut().zip(&gd[start..start + n]) {
                                *d += gj;
                            }
                        });
                        offset += n;
                    } else {
                        let start = offset;
                        self.accumulate_with(grads, p, |dp| {
                            for i in 0..s[0] {
                                for j in 0..s[1] {
                                    dp[i * s[1] + j] += gd[i * total_c + start + j];
                                }
                            }
                        });
                        offset += s[1];
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let (gr, gc) = shape2(node.value.shape());
                let start = *start;
                self.accumulate_with(grads, *x, |dx| {
                    for i in 0..gr {
                        for j in 0..gc {
                            let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                            dx[si * s[1] + sj] += gd[i * gc + j];
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                self.accumulate_with(grads, *table, |dt| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (t, cin) = shape2(self.shape(*x));
                let sw = self.shape(*w);
                let (cout, k) = (sw[0], sw[2]);
                let tout = node.value.shape()[0];
                let xv = self.value(*x).data();
                let wk = conv_weight_kcio(self.value(*w).data(), cout, cin, k);
                let in_range = |to: usize, kk: usize| {
                    let ti = (to * stride + kk) as isize - *pad as isize;
                    (ti >= 0 && (ti as usize) < t).then_some(ti as usize)
                };
                self.accumulate_with(grads, *b, |db| {
                    for to in 0..tout {
                        for o in 0..cout {
                            db[o] += gd[to * cout + o];
                        }
                    }
                });
                self.accumulate_with(grads, *x, |dx| {
                    for to in 0..tout {
                        let grow = &gd[to * cout..(to + 1) * cout];
                        for kk in 0..k {
                            if let Some(ti) = in_range(to, kk) {
                                gemm_nt_acc(
                                    grow,
                                    &wk[kk * cin * cout..(kk + 1) * cin * cout],
                                    &mut dx[ti * cin..(ti + 1) * cin],
                                    1,
                                    cout,
                                    cin,
                                );
                            }
                        }
                    }
                });
                if self.nodes[w.0].requires_grad {
                    let mut dwk = vec![S::zero(); k * cin * cout];
                    for to in 0..tout {
                        let grow = &gd[to * cout..(to + 1) * cout];
                        for kk in 0..k {
                            if let Some(ti) = in_range(to, kk) {
                                gemm_acc(
                                    &xv[ti * cin..(ti + 1) * cin],
                                    grow,
                                    &mut dwk[kk * cin * cout..(kk + 1) * cin * cout],
                                    cin,
                                    1,
                                    cout,
                                );
                            }
                        }
                    }
                    self.accumulate_with(grads, *w, |dw| {
                        for o in 0..cout {
                            for c in 0..cin {
                                for kk in 0..k {
                                    dw[(o * cin + c) * k + kk] += dwk[(kk * cin + c) * cout + o];
                                }
                            }
                        }
                    });
                }
            }
            Op::DepthwiseConv1d { x, w, b, pad } => {
                let (t, c) = shape2(self.shape(*x));
                let k = self.shape(*w)[1];
                let tout = node.value.shape()[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let pad = *pad as isize;
                self.accumulate_with(grads, *b, |db| {
                    for to in 0..tout {
                        for ch in 0..c {
                            db[ch] += gd[to * c + ch];
                        }
                    }
                });
                self.accumulate_with(grads, *w, |dw| {
                    for to in 0..tout {
                        for kk in 0..k {
                            let ti = (to + kk) as isize - pad;
                            if ti >= 0 && (ti as usize) < t {
                                for ch in 0..c {
                                    dw[ch * k + kk] += gd[to * c + ch] * xv[ti as usize * c + ch];
                                }
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *x, |dx| {
                    for to in 0..tout {
                        for kk in 0..k {
                            let ti = (to + kk) as isize - pad;
                            if ti >= 0 && (ti as usize) < t {
                                for ch in 0..c {
                                    dx[ti as usize * c + ch] += gd[to * c + ch] * wv[ch * k + kk];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose1d { x, w, b, stride, pad } => {
                let (t, cin) = shape2(self.shape(*x));
                let sw = self.shape(*w);
                let (cout, k) = (sw[1], sw[2]);
                let tout = node.value.shape()[0];
                let xv = self.value(*x).data();
                let wk = tconv_weight_kio(self.value(*w).data(), cin, cout, k);
                let target = |ti: usize, kk: usize| {
                    let j = (ti * stride + kk) as isize - *pad as isize;
                    (j >= 0 && (j as usize) < tout).then_some(j as usize)
                };
                self.accumulate_with(grads, *b, |db| {
                    for j in 0..tout {
                        for o in 0..cout {
                            db[o] += gd[j * cout + o];
                        }
                    }
                });
                self.accumulate_with(grads, *x, |dx| {
                    for ti in 0..t {
                        for kk in 0..k {
                            if let Some(j) = target(ti, kk) {
                                gemm_nt_acc(
                                    &gd[j * cout..(j + 1) * cout],
                                    &wk[kk * cin * cout..(kk + 1) * cin * cout],
                                    &mut dx[ti * cin..(ti + 1) * cin],
                                    1,
                                    cout,
                                    cin,
                                );
                            }
                        }
                    }
                });
                if self.nodes[w.0].requires_grad {
                    let mut dwk = vec![S::zero(); k * cin * cout];
                    for ti in 0..t {
                        for kk in 0..k {
                            if let Some(j) = target(ti, kk) {
                                gemm_acc(
                                    &xv[ti * cin..(ti + 1) * cin],
                                    &gd[j * cout..(j + 1) * cout],
                                    &mut dwk[kk * cin * cout..(kk + 1) * cin * cout],
                                    cin,
                                    1,
                                    cout,
                                );
                            }
                        }
                    }
                    self.accumulate_with(grads, *w, |dw| {
                        for c in 0..cin {
                            for o in 0..cout {
                                for kk in 0..k {
                                    dw[(c * cout + o) * k + kk] += dwk[(kk * cin + c) * cout + o];
                                }
                            }
                        }
                    });
                }
            }
            Op::LstmCell { gates, c_prev } => {
                let a = self.value(*gates).data();
                let h = a.len() / 4;
                let cp = c_prev.map(|c| self.value(c).data());
                let out = node.value.data();
                let mut dgates = vec![S::zero(); 4 * h];
                let mut dcp = vec![S::zero(); h];
                for j in 0..h {
                    let i = sigmoid(a[j]);
                    let f = sigmoid(a[h + j]);
                    let gg = a[2 * h + j].tanh();
                    let o = sigmoid(a[3 * h + j]);
                    let c = out[h + j];
                    let tc = c.tanh();
                    let dh = gd[j];
                    let dc = gd[h + j] + dh * o * (S::one() - tc * tc);
                    let cprev = cp.map_or(S::zero(), |c| c[j]);
                    dgates[j] = dc * gg * i * (S::one() - i);
                    dgates[h + j] = dc * cprev * f * (S::one() - f);
                    dgates[2 * h + j] = dc * i * (S::one() - gg * gg);
                    dgates[3 * h + j] = dh * tc * o * (S::one() - o);
                    dcp[j] = dc * f;
                }
                let gshape = self.shape(*gates).to_vec();
                self.accumulate(grads, *gates, Tensor::new(gshape, dgates)?);
                if let Some(c) = c_prev {
                    let cshape = self.shape(*c).to_vec();
                    self.accumulate(grads, *c, Tensor::new(cshape, dcp)?);
                }
            }
            Op::GradReverse(x, w) => {
                let m = -*w;
                self.accumulate_with(grads, *x, |dx| {
                    for (d, &gj) in dx.iter_mut().zip(gd) {
                        *d += gj * m;
                    }
                });
            }
            Op::StraightThrough(z_e) => {
                self.accumulate_with(grads, *z_e, |dz| {
                    for (d, &gj) in dz.iter_mut().zip(gd) {
                        *d += gj;
                    }
                });
            }
            Op::Huber { pred, target, delta } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = gd[0] / S::of(p.len() as f64);
                let local: Vec<S> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| (a - b).max(-*delta).min(*delta) * scale)
                    .collect();
                self.accumulate_with(grads, *pred, |dp| {
                    for (d, &l) in dp.iter_mut().zip(&local) {
                        *d += l;
                    }
                });
                self.accumulate_with(grads, *target, |dt| {
                    for (d, &l) in dt.iter_mut().zip(&local) {
                        *d -= l;
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn huber_elem(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a < delta {
        0.5 * d * d
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut z = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += v.f64();
    }
    let inv = S::of(1.0 / z);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `[Cout × Cin × K]` → `[K × Cin × Cout]`.
fn conv_weight_kcio<S: Scalar>(w: &[S], cout: usize, cin: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for kk in 0..k {
                out[(kk * cin + c) * cout + o] = w[(o * cin + c) * k + kk];
            }
        }
    }
    out
}

/// `[Cin × Cout × K]` → `[K × Cin × Cout]`.
fn tconv_weight_kio<S: Scalar>(w: &[S], cin: usize, cout: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for c in 0..cin {
        for o in 0..cout {
            for kk in 0..k {
                out[(kk * cin + c) * cout + o] = w[(c * cout + o) * k + kk];
            }
        }
    }
    out
}
