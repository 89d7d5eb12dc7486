//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops append nodes in execution order, so the tape is topologically
//! sorted by construction. `backward` walks it once in reverse.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{dim_err, Error, Result};
use crate::nn::AttentionMask;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        c: F,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: Var,
        tau: F,
    },
    LogSoftmax(Var),
    Index {
        x: Var,
        i: usize,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        heads: usize,
        probs: Vec<F>,
        keep: Option<Vec<F>>,
    },
    Nll {
        logp: Var,
        targets: Vec<u32>,
        pad: u32,
        smoothing: F,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    mode: Mode,
    rng: Option<Rng>,
}

impl<F: Scalar> Tape<F> {
    pub fn eval() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: HashSet::new(),
            mode: Mode::Eval,
            rng: None,
        }
    }

    /// Training-mode tape; `rng` drives dropout masks.
    pub fn train(rng: Rng) -> Self {
        Tape {
            mode: Mode::Train,
            rng: Some(rng),
            ..Self::eval()
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters registered here get no gradient (treated as constants).
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
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

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Node for a stored parameter; created once per tape and reused.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = !self.frozen.contains(&id);
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what} must be 2-D, got {s:?}")),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (br, bc) = self.mat_dims(b, "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return dim_err(format!(
                "matmul inner extents differ: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![F::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            rsb,
            csb,
            F::zero(),
            &mut out,
            n,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            rg,
            "matmul",
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg, "add")
    }

    /// Broadcast-adds a `[n]` vector to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return dim_err(format!(
                "add_row: bias {:?} does not match last axis {n}",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow { x, bias }, rg, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg, "scale")
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err(format!("scale_by: factor must hold one value, got {:?}", self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x, s]);
        self.push(out, Op::ScaleBy { x, s }, rg, "scale_by")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < F::zero() {
                *v = F::zero()
            }
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(mask) = self.dropout_mask(self.value(x).len(), p) else {
            return Ok(x);
        };
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    fn dropout_mask(&mut self, n: usize, p: f64) -> Option<Vec<F>> {
        if !self.is_training() || p <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut().expect("training tape carries an rng");
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        Some(
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
                .collect(),
        )
    }

    /// Standardizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = F::from_f64_lossy(eps);
        let df = F::from_usize(d).unwrap();
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out)?,
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

    /// Row-wise softmax of `x / tau` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
        }
        let tau_f = F::from_f64_lossy(tau);
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row, tau_f);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, tau: tau_f }, rg, "softmax")
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg, "log_softmax")
    }

    /// Element `i` of a flat tensor, as a `[1]` tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return dim_err(format!("index {i} out of range for {n} elements"));
        }
        let v = self.value(x).data()[i];
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Index { x, i }, rg, "index")
    }

    /// Contiguous sub-range of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        if self.shape(x).len() != 1 || len == 0 || start + len > n {
            return dim_err(format!(
                "slice [{start}, {}) invalid for shape {:?}",
                start + len,
                self.shape(x)
            ));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![len], data)?, Op::Slice { x, start }, rg, "slice")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Rows of `table[V×D]` selected by `ids`, giving `[len(ids)×D]`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.mat_dims(table, "gather table")?;
        if ids.is_empty() {
            return dim_err("gather with no ids");
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id_u = id as usize;
            if id_u >= v {
                return Err(Error::Vocab { id, size: v });
            }
            out.extend_from_slice(&t[id_u * d..(id_u + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[B·Tq × D]`, `k` and `v` are `[B·Tk × D]`, where `B`, `Tq`, `Tk`
    /// come from `mask`. Heads split `D` into contiguous slices of `D / heads`.
    /// Masked scores get weight exactly zero; `dropout` applies to the weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let (bsz, tq, tk) = (mask.batch(), mask.rows(), mask.cols());
        let (qr, d) = self.mat_dims(q, "attention query")?;
        let (kr, kd) = self.mat_dims(k, "attention key")?;
        if self.shape(v) != self.shape(k) {
            return dim_err(format!(
                "attention: key {:?} and value {:?} differ",
                self.shape(k),
                self.shape(v)
            ));
        }
        if qr != bsz * tq || kr != bsz * tk || kd != d {
            return dim_err(format!(
                "attention: q {:?}, k {:?} inconsistent with mask {bsz}×{tq}×{tk}",
                self.shape(q),
                self.shape(k)
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("{heads} heads do not divide model dim {d}")));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let mut probs = vec![F::zero(); bsz * heads * tq * tk];
        let mut scores = vec![F::zero(); tk];
        for b in 0..bsz {
            for i in 0..tq {
                if !mask.row(b, i).iter().any(|&a| a) {
                    return Err(Error::Contract(format!(
                        "attention row {i} of sequence {b} has no attendable column"
                    )));
                }
            }
            for h in 0..heads {
                for i in 0..tq {
                    let allowed = mask.row(b, i);
                    let qrow = &qv[(b * tq + i) * d + h * dh..][..dh];
                    let mut max = F::neg_infinity();
                    for j in 0..tk {
                        if allowed[j] {
                            let krow = &kv[(b * tk + j) * d + h * dh..][..dh];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let mut z = F::zero();
                    for j in 0..tk {
                        if allowed[j] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                }
            }
        }
        let keep = self.dropout_mask(probs.len(), dropout);
        let vv = self.value(v).data();
        let mut out = vec![F::zero(); bsz * tq * d];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..tq {
                    let base = ((b * heads + h) * tq + i) * tk;
                    let orow = &mut out[(b * tq + i) * d + h * dh..][..dh];
                    for j in 0..tk {
                        let mut w = probs[base + j];
                        if let Some(keep) = &keep {
                            w *= keep[base + j];
                        }
                        if w != F::zero() {
                            let vrow = &vv[(b * tk + j) * d + h * dh..][..dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new(vec![bsz * tq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
                keep,
            },
            rg,
            "attention",
        )
    }

    /// Attention weights recorded by an attention node, `[B, heads, Tq, Tk]`
    /// flattened (before dropout).
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over non-pad rows, optionally label-smoothed:
    /// each row contributes `(1-ε)·(-logp[target]) + ε·mean_v(-logp[v])`.
    pub fn nll_loss(&mut self, logp: Var, targets: &[u32], pad: u32, smoothing: f64) -> Result<Var> {
        let (rows, vocab) = self.mat_dims(logp, "nll log-probs")?;
        if targets.len() != rows {
            return dim_err(format!("nll: {} targets for {rows} rows", targets.len()));
        }
        let lp = self.value(logp).data();
        let eps = F::from_f64_lossy(smoothing);
        let vf = F::from_usize(vocab).unwrap();
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t as usize >= vocab {
                return Err(Error::Vocab { id: t, size: vocab });
            }
            let row = &lp[r * vocab..(r + 1) * vocab];
            let mut l = -(F::one() - eps) * row[t as usize];
            if smoothing != 0.0 {
                l -= eps * row.iter().copied().sum::<F>() / vf;
            }
            total += l;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let loss = total / F::from_usize(count).unwrap();
        let rg = self.rg(&[logp]);
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                pad,
                smoothing: eps,
                count,
            },
            rg,
            "nll_loss",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store);
        Ok(grads)
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if needs(a) {
                    let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
                    let da = slot(grads, a, m * k);
                    F::gemm(m, n, k, F::one(), g, n, 1, val(b), rs, cs, F::one(), da, k, 1);
                }
                if needs(b) {
                    let db = slot(grads, b, k * n);
                    if trans_b {
                        F::gemm(n, m, k, F::one(), g, 1, n, val(a), k, 1, F::one(), db, k, 1);
                    } else {
                        F::gemm(k, m, n, F::one(), val(a), 1, k, g, n, 1, F::one(), db, n, 1);
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if needs(x) {
                        add_into(slot(grads, x, g.len()), g);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if needs(bias) {
                    let n = self.nodes[bias.0].value.len();
                    let db = slot(grads, bias, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += gi * bi;
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, g.len());
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += gi * ai;
                    }
                }
            }
            &Op::Scale { x, c } => {
                let dx = slot(grads, x, g.len());
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            &Op::ScaleBy { x, s } => {
                let c = val(s)[0];
                if needs(x) {
                    let dx = slot(grads, x, g.len());
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                }
                if needs(s) {
                    let acc = g.iter().zip(val(x)).map(|(&gi, &xi)| gi * xi).sum::<F>();
                    slot(grads, s, 1)[0] += acc;
                }
            }
            &Op::Sigmoid(x) => {
                let dx = slot(grads, x, g.len());
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (F::one() - y);
                }
            }
            &Op::Relu(x) => {
                let dx = slot(grads, x, g.len());
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                    if y > F::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let dx = slot(grads, *x, g.len());
                for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let df = F::from_usize(d).unwrap();
                let gam = val(*gamma);
                if needs(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*beta) {
                    let db = slot(grads, *beta, d);
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dh = vec![F::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            dh[j] = grow[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= df;
                        mean_dh_h /= df;
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax { x, tau } => {
                let d = node.value.last_dim();
                let dx = slot(grads, x, g.len());
                for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let s = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..d {
                        dxr[j] += yr[j] * (gr[j] - s) / tau;
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let dx = slot(grads, x, g.len());
                for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let s = gr.iter().copied().sum::<F>();
                    for j in 0..d {
                        dxr[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            &Op::Index { x, i } => {
                let n = self.nodes[x.0].value.len();
                slot(grads, x, n)[i] += g[0];
            }
            &Op::Slice { x, start } => {
                let n = self.nodes[x.0].value.len();
                add_into(&mut slot(grads, x, n)[start..start + g.len()], g);
            }
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                slot(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Gather { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let d = tv.last_dim();
                let dt = slot(grads, *table, tv.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id as usize * d..][..d], &g[r * d..][..d]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
                keep,
            } => self.attention_backward(g, *q, *k, *v, mask, *heads, probs, keep.as_deref(), grads),
            Op::Nll {
                logp,
                targets,
                pad,
                smoothing,
                count,
            } => {
                let vocab = self.nodes[logp.0].value.last_dim();
                let scale = g[0] / F::from_usize(*count).unwrap();
                let spread = *smoothing / F::from_usize(vocab).unwrap();
                let dl = slot(grads, *logp, targets.len() * vocab);
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    row[t as usize] -= scale * (F::one() - *smoothing);
                    if spread != F::zero() {
                        row.iter_mut().for_each(|d| *d -= scale * spread);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        heads: usize,
        probs: &[F],
        keep: Option<&[F]>,
        grads: &mut [Option<Vec<F>>],
    ) {
        let (bsz, tq, tk) = (mask.batch(), mask.rows(), mask.cols());
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let d = self.nodes[q.0].value.last_dim();
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        let mut dp = vec![F::zero(); tk];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..tq {
                    let base = ((b * heads + h) * tq + i) * tk;
                    let p = &probs[base..base + tk];
                    let grow = &g[(b * tq + i) * d + h * dh..][..dh];
                    for j in 0..tk {
                        if p[j] == F::zero() {
                            dp[j] = F::zero();
                            continue;
                        }
                        let m = keep.map_or(F::one(), |kp| kp[base + j]);
                        let voff = (b * tk + j) * d + h * dh;
                        let w = p[j] * m;
                        if w != F::zero() {
                            for (dvx, &gx) in dv[voff..voff + dh].iter_mut().zip(grow) {
                                *dvx += w * gx;
                            }
                        }
                        dp[j] = dot(grow, &vv[voff..voff + dh]) * m;
                    }
                    let s = (0..tk).map(|j| p[j] * dp[j]).sum::<F>();
                    let qoff = (b * tq + i) * d + h * dh;
                    for j in 0..tk {
                        if p[j] == F::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let koff = (b * tk + j) * d + h * dh;
                        for x in 0..dh {
                            dq[qoff + x] += ds * kv[koff + x];
                            dk[koff + x] += ds * qv[qoff + x];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                add_into(slot(grads, var, buf.len()), &buf);
            }
        }
    }
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, n: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F], tau: F) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter_mut().for_each(|v| *v -= lse);
}

/// Per-node gradients produced by [`Tape::backward`]. Leaf and parameter
/// nodes keep their gradients; intermediate buffers are released on the way.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter's gradient into the store (gradients accumulate
    /// across calls until [`ParamStore::zero_grad`]).
    pub fn accumulate_into(&self, tape: &Tape<F>, store: &mut ParamStore<F>) {
        for (&id, &var) in &tape.param_vars {
            if let Some(g) = self.get(var) {
                add_into(&mut store.get_mut(id).grad, g);
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F, Func>(mut f: Func, x: &Tensor<F>, h: f64) -> Result<Tensor<F>>
where
    F: Scalar,
    Func: FnMut(&Tensor<F>) -> Result<F>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    let hf = F::from_f64_lossy(h);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hf;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - hf;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (hf + hf));
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use rand_distr::{Distribution, Uniform};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = derive(seed, Stream::Init, 99);
        let u = Uniform::new(-3.0, 3.0);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| u.sample(&mut rng)).collect::<Vec<_>>())
    }

    /// Max relative error; differences within 1e-8 absolute count as exact
    /// (finite-difference noise around true zeros).
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| if (x - y).abs() <= 1e-8 { 0.0 } else { (x - y).abs() / x.abs().max(y.abs()) })
            .fold(0.0, f64::max)
    }

    /// Checks the gradient of `build(tape, x)` w.r.t. `x` against finite differences.
    fn check_grad(x: Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
        let mut tape = Tape::eval();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let loss = build(&mut tape, xv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |p| {
                let mut tp = Tape::eval();
                let v = tp.leaf(p.clone(), false)?;
                let l = build(&mut tp, v)?;
                Ok(tp.value(l).data()[0])
            },
            &x,
            1e-5,
        )
        .unwrap();
        rel_err(&analytic, numeric.data())
    }

    /// Weighted sum so every output coordinate gets a distinct upstream gradient.
    fn probe_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
        let n = tape.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?)?;
        let p = tape.mul(y, wv)?;
        tape.sum(p)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::eval();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let a = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
        assert!(matches!(tape.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let b = random(&[3, 4], 2);
        let err = check_grad(random(&[2, 3], 1), |tp, a| {
            let bv = tp.constant(b.clone())?;
            let c = tp.matmul(a, bv)?;
            tp.sum(c)
        });
        assert!(err < 1e-6, "rel err {err}");
        // gradient w.r.t. the right operand, plain and transposed
        let a = random(&[2, 3], 3);
        let err = check_grad(random(&[3, 4], 4), |tp, b| {
            let av = tp.constant(a.clone())?;
            let c = tp.matmul(av, b)?;
            probe_sum(tp, c)
        });
        assert!(err < 1e-6, "rel err {err}");
        let err = check_grad(random(&[4, 3], 5), |tp, b| {
            let av = tp.constant(a.clone())?;
            let c = tp.matmul_nt(av, b)?;
            probe_sum(tp, c)
        });
        assert!(err < 1e-6, "rel err {err}");
        let bt = random(&[4, 3], 6);
        let err = check_grad(random(&[2, 3], 7), |tp, a| {
            let bv = tp.constant(bt.clone())?;
            let c = tp.matmul_nt(a, bv)?;
            probe_sum(tp, c)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::eval();
        let g = tape.constant(Tensor::full(vec![4], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let x = tape.constant(t(&[4], &[5., 5., 5., 5.])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0., 0.]);

        let g2 = tape.constant(Tensor::full(vec![2], 1.0)).unwrap();
        let b2 = tape.constant(Tensor::zeros(vec![2])).unwrap();
        let x2 = tape.constant(t(&[2], &[1., 3.])).unwrap();
        let y2 = tape.layer_norm(x2, g2, b2, 1e-12).unwrap();
        let d = tape.value(y2).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
        assert!(matches!(tape.layer_norm(x2, g2, b2, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let gamma = random(&[4], 11);
        let beta = random(&[4], 12);
        let err = check_grad(random(&[4], 10), |tp, x| {
            let g = tp.constant(gamma.clone())?;
            let b = tp.constant(beta.clone())?;
            let y = tp.layer_norm(x, g, b, 1e-5)?;
            probe_sum(tp, y)
        });
        assert!(err < 1e-5, "rel err {err}");
        // gamma and beta
        let x = random(&[3, 4], 13);
        for which in 0..2 {
            let err = check_grad(random(&[4], 14 + which), |tp, p| {
                let xv = tp.constant(x.clone())?;
                let other = tp.constant(random(&[4], 20))?;
                let (g, b) = if which == 0 { (p, other) } else { (other, p) };
                let y = tp.layer_norm(xv, g, b, 1e-5)?;
                probe_sum(tp, y)
            });
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::eval();
        let x = tape.constant(t(&[3], &[2.0, 2.0, 2.0])).unwrap();
        let y = tape.softmax(x, 5.0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let y = tape.softmax(x, 1.0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
        let y = tape.softmax(x, 512f64.sqrt()).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 0.5).abs() < 0.02);
        }
        assert!(matches!(tape.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(tape.softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sigmoid_examples() {
        let mut tape = Tape::<f64>::eval();
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);
        let xs = random(&[16], 3);
        let neg = t(&[16], &xs.data().iter().map(|v| -v).collect::<Vec<_>>());
        let a = tape.constant(xs).unwrap();
        let b = tape.constant(neg).unwrap();
        let sa = tape.sigmoid(a).unwrap();
        let sb = tape.sigmoid(b).unwrap();
        for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((p + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_examples() {
        let mut tape = Tape::<f64>::eval();
        // probability 1 on every target
        let lp = tape.constant(t(&[2, 2], &[0.0, f64::MIN_POSITIVE.ln(), f64::MIN_POSITIVE.ln(), 0.0])).unwrap();
        let l = tape.nll_loss(lp, &[0, 1], 99, 0.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        // uniform over V
        let v = 7;
        let lp = tape.constant(Tensor::full(vec![3, v], -(v as f64).ln())).unwrap();
        let l = tape.nll_loss(lp, &[1, 2, 3], 0, 0.0).unwrap();
        assert!((tape.value(l).data()[0] - (v as f64).ln()).abs() < 1e-12);
        // hand arithmetic with a pad row excluded
        let lp = tape
            .constant(t(&[3, 2], &[0.5f64.ln(), 0.5f64.ln(), 0.75f64.ln(), 0.25f64.ln(), 0.0, -9.0]))
            .unwrap();
        let l = tape.nll_loss(lp, &[0, 1, 0], 0, 0.0);
        assert!(l.is_ok());
        let l = tape.nll_loss(lp, &[1, 1, 5], 5, 0.0).unwrap();
        let want = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        assert!(matches!(tape.nll_loss(lp, &[5, 5, 5], 5, 0.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn nll_smoothed_gradient_matches_finite_differences() {
        let err = check_grad(random(&[3, 5], 30), |tp, x| {
            let lp = tp.log_softmax(x)?;
            tp.nll_loss(lp, &[1, 0, 4], 0, 0.1)
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::eval();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true).unwrap();
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::<f64>::eval();
        let x = tape.leaf(t(&[1], &[3.]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[6.]);
        assert!(matches!(tape.backward(x).map(|_| ()), Ok(())));
        let mut tape = Tape::<f64>::eval();
        let x = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", random(&[2, 3], 40));
        let x = random(&[4, 2], 41);
        let run = |store: &mut ParamStore<f64>| {
            let mut tape = Tape::eval();
            let w = tape.param(store, id);
            let xv = tape.constant(x.clone()).unwrap();
            let y = tape.matmul(xv, w).unwrap();
            let y = tape.sigmoid(y).unwrap();
            let l = tape.sum(y).unwrap();
            tape.backward_into(l, store).unwrap();
        };
        run(&mut store);
        let once = store.get(id).grad.clone();
        run(&mut store);
        let twice = &store.get(id).grad;
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        store.zero_grad();
        assert!(store.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn finite_diff_examples() {
        let x = t(&[1], &[3.0]);
        let g = finite_diff_grad(|p| Ok(p.data()[0] * p.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let x = Tensor::<f64>::zeros(vec![3]);
        let g = finite_diff_grad(|p| Ok(p.data().iter().map(|&v| sigmoid(v)).sum()), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_agrees_with_backward_on_mlp() {
        let w1 = random(&[3, 5], 51);
        let w2 = random(&[5, 2], 52);
        let b1 = random(&[5], 53);
        let err = check_grad(random(&[4, 3], 50), |tp, x| {
            let w1 = tp.constant(w1.clone())?;
            let w2 = tp.constant(w2.clone())?;
            let b1 = tp.constant(b1.clone())?;
            let h = tp.matmul(x, w1)?;
            let h = tp.add_row(h, b1)?;
            let h = tp.sigmoid(h)?;
            let o = tp.matmul(h, w2)?;
            let o = tp.log_softmax(o)?;
            probe_sum(tp, o)
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let other = random(&[2, 3], 61);
        let bias = random(&[3], 62);
        type Build = fn(&mut Tape<f64>, Var, Var, Var) -> Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("add", |tp, x, o, _| tp.add(x, o)),
            ("mul", |tp, x, o, _| tp.mul(x, o)),
            ("add_row", |tp, x, _, b| tp.add_row(x, b)),
            ("scale", |tp, x, _, _| tp.scale(x, 0.7)),
            ("sigmoid", |tp, x, _, _| tp.sigmoid(x)),
            ("softmax", |tp, x, _, _| tp.softmax(x, 1.7)),
            ("log_softmax", |tp, x, _, _| tp.log_softmax(x)),
            ("scale_by", |tp, x, o, _| {
                let s = tp.index(o, 2)?;
                let y = tp.scale_by(o, s)?;
                tp.add(x, y)
            }),
        ];
        for (name, f) in cases {
            let err = check_grad(random(&[2, 3], 60), |tp, x| {
                let o = tp.constant(other.clone())?;
                let b = tp.constant(bias.clone())?;
                let y = f(tp, x, o, b)?;
                probe_sum(tp, y)
            });
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
        // scale_by w.r.t. the scalar factor, index, slice
        let err = check_grad(random(&[4], 63), |tp, w| {
            let o = tp.constant(other.clone())?;
            let s = tp.index(w, 1)?;
            let s = tp.sigmoid(s)?;
            let y = tp.scale_by(o, s)?;
            let part = tp.slice(w, 1, 3)?;
            let part = tp.softmax(part, 2.0)?;
            let a = probe_sum(tp, y)?;
            let b = probe_sum(tp, part)?;
            tp.add(a, b)
        });
        assert!(err < 1e-5, "rel err {err}");
        // relu away from the kink
        let x = t(&[4], &[-2.0, -0.5, 0.7, 1.9]);
        let err = check_grad(x, |tp, x| {
            let y = tp.relu(x)?;
            probe_sum(tp, y)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn gather_gradient_scatters_rows() {
        let err = check_grad(random(&[5, 3], 70), |tp, table| {
            let y = tp.gather(table, &[4, 1, 4, 0])?;
            probe_sum(tp, y)
        });
        assert!(err < 1e-6, "rel err {err}");
        let mut tape = Tape::<f64>::eval();
        let table = tape.constant(random(&[5, 3], 70)).unwrap();
        assert!(matches!(tape.gather(table, &[5]), Err(Error::Vocab { id: 5, size: 5 })));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mask = Arc::new(AttentionMask::causal_with_padding(2, 3, &[false, false, false, false, false, true]));
        let k = random(&[6, 4], 81);
        let v = random(&[6, 4], 82);
        let q = random(&[6, 4], 80);
        for which in 0..3 {
            let base = [&q, &k, &v][which].clone();
            let err = check_grad(base, |tp, x| {
                let mut ins = [q.clone(), k.clone(), v.clone()].map(|t| tp.constant(t).unwrap());
                ins[which] = x;
                let y = tp.attention(ins[0], ins[1], ins[2], mask.clone(), 2, 0.0)?;
                probe_sum(tp, y)
            });
            assert!(err < 1e-5, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let x = random(&[1000], 90);
        let mut tape = Tape::<f64>::eval();
        let xv = tape.constant(x.clone()).unwrap();
        assert_eq!(tape.dropout(xv, 0.3).unwrap(), xv);

        let mut tape = Tape::<f64>::train(derive(1, Stream::Dropout, 0));
        let xv = tape.leaf(x.clone(), true).unwrap();
        let y = tape.dropout(xv, 0.3).unwrap();
        let out = tape.value(y).data();
        let dropped = out.iter().filter(|&&v| v == 0.0).count();
        assert!((200..400).contains(&dropped), "dropped {dropped}");
        for (o, i) in out.iter().zip(x.data()) {
            assert!(*o == 0.0 || (o - i / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::eval();
        let x = tape.constant(t(&[1], &[1e300])).unwrap();
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
        assert!(tape.leaf(t(&[1], &[f64::NAN]), false).is_err());
    }
}
