use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Relu,
    Softmax,
    LayerNorm,
    CrossEntropy,
    Sum,
    Gather,
    Attention,
    MeanPool,
}

/// Layout of a fused multi-head attention call over `[batch·seq, d_model]`
/// row-major activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionShape {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Test-only fault injection: multiplies the gradient propagated through every
/// node of `op` by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: OpKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        mask: Option<Vec<bool>>,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<Vec<bool>>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Binary { kind, .. } => *kind,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Gather { .. } => OpKind::Gather,
            Op::Attention { .. } => OpKind::Attention,
            Op::MeanPool { .. } => OpKind::MeanPool,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _) | Op::Gelu(x) | Op::Relu(x) | Op::Softmax(x) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, .. } | Op::MeanPool { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
    grad: Option<Vec<T>>,
}

/// Tape of primitive operations, recorded in execution order.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(op kind, input ids)` of every node, in execution order.
    pub fn structure(&self) -> Vec<(OpKind, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.kind(), n.op.inputs().iter().map(|v| v.0).collect()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a leaf. Frozen parameters never receive a gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        let v = self.leaf(value.clone(), trainable);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients of every named leaf that has one, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.nodes.iter().filter_map(|n| match (&n.name, &n.grad) {
            (Some(name), Some(g)) => Some((name.as_str(), g.as_slice())),
            _ => None,
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(OpKind::Mul, a, b)
    }

    /// Pointwise `a ∘ b`. `b` either matches `a`'s shape or is a vector
    /// broadcast over `a`'s trailing axis.
    pub fn elementwise(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let f: fn(T, T) -> T = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            OpKind::Mul => |x, y| x * y,
            _ => panic!("elementwise op must be add, sub or mul, got {kind:?}"),
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.shape().len() == 1 && tb.numel() == ta.last_dim() {
            true
        } else {
            return Err(Error::dim("elementwise", ta.shape(), tb.shape()));
        };
        let n = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[if broadcast { i % n } else { i }]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = kernels::softmax_rows(t.data(), t.last_dim());
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Layer normalization over the trailing axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let (data, inv_std) = kernels::layer_norm_rows(t.data(), t.last_dim(), eps);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }))
    }

    /// Mean cross-entropy of `[batch × classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let classes = t.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let probs = kernels::softmax_rows(t.data(), classes);
        let batch = T::from_usize(labels.len()).expect("batch");
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &t.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + (lse - row[label]);
        }
        let out = Tensor::scalar(total / batch);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Row lookup: `out[i] = table[ids[i]]` for a `[rows × width]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("gather", t.shape(), &[ids.len()]));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        if let Some(&token) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange { token, vocab: rows });
        }
        if ids.is_empty() {
            return Err(Error::EmptyAxis { op: "gather" });
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let out = Tensor::new(vec![ids.len(), width], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Scaled dot-product multi-head attention. `mask[b·seq + j] == false`
    /// removes key `j` of sequence `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let expected = [shape.batch * shape.seq, shape.d_model];
        for x in [q, k, v] {
            if self.value(x).shape() != expected {
                return Err(Error::dim("attention", self.value(x).shape(), &expected));
            }
        }
        if shape.heads == 0 || !shape.d_model.is_multiple_of(shape.heads) {
            return Err(Error::dim("attention", &[shape.d_model], &[shape.heads]));
        }
        if let Some(m) = mask {
            if m.len() != shape.batch * shape.seq {
                return Err(Error::dim("attention mask", &[m.len()], &expected[..1]));
            }
            if m.chunks(shape.seq).any(|row| !row.iter().any(|&b| b)) {
                return Err(Error::EmptyAxis { op: "attention" });
            }
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            mask,
        );
        let out = Tensor::new(expected.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask: mask.map(<[bool]>::to_vec),
                probs,
            },
        ))
    }

    /// Per-sequence mean over positions of `[batch·seq, d]` rows, skipping
    /// masked positions.
    pub fn mean_pool(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.shape()[0] != batch * seq {
            return Err(Error::dim("mean_pool", t.shape(), &[batch * seq]));
        }
        let d = t.shape()[1];
        let mut data = vec![T::zero(); batch * d];
        for b in 0..batch {
            let count = (0..seq)
                .filter(|&s| mask.is_none_or(|m| m[b * seq + s]))
                .count();
            if count == 0 {
                return Err(Error::EmptyAxis { op: "mean_pool" });
            }
            let inv = T::one() / T::from_usize(count).expect("count");
            let orow = &mut data[b * d..(b + 1) * d];
            for s in 0..seq {
                if mask.is_none_or(|m| m[b * seq + s]) {
                    let row = &t.data()[(b * seq + s) * d..(b * seq + s + 1) * d];
                    for (o, &v) in orow.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let out = Tensor::new(vec![batch, d], data)?;
        Ok(self.push(
            out,
            Op::MeanPool {
                x,
                batch,
                seq,
                mask: mask.map(<[bool]>::to_vec),
            },
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(fault) = self.fault.filter(|f| f.op == self.nodes[i].op.kind()) {
                let factor = T::from_f64_lossy(fault.factor);
                g.iter_mut().for_each(|v| *v = *v * factor);
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_a_bt_acc(g, tb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_at_b_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel();
                let bi = |i: usize| if *broadcast { i % nb } else { i };
                if let Some(ga) = self.slot(grads, *a) {
                    for (idx, (acc, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        *acc = *acc
                            + match kind {
                                OpKind::Mul => gv * tb.data()[bi(idx)],
                                _ => gv,
                            };
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (idx, &gv) in g.iter().enumerate() {
                        let contrib = match kind {
                            OpKind::Mul => gv * ta.data()[idx],
                            OpKind::Sub => -gv,
                            _ => gv,
                        };
                        let j = bi(idx);
                        gb[j] = gb[j] + contrib;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut()
                        .zip(g)
                        .for_each(|(a, &gv)| *a = *a + gv * *factor);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &gv), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *a = *a + gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &gv), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if xv > T::zero() {
                            *a = *a + gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::softmax_backward_rows(node.value.data(), g, n, gx);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::layer_norm_backward_rows(node.value.data(), inv_std, g, n, gx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).expect("batch");
                if let Some(gx) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let idx = r * classes + c;
                            let onehot = if c == label { T::one() } else { T::zero() };
                            gx[idx] = gx[idx] + (probs[idx] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::Gather { table, ids } => {
                let width = self.value(*table).shape()[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        let dst = &mut gt[id * width..(id + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    *shape,
                    mask.as_deref(),
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gx) = self.slot(grads, var) {
                        gx.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::MeanPool {
                x,
                batch,
                seq,
                mask,
            } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        let keep = |s: usize| mask.as_ref().is_none_or(|m| m[b * seq + s]);
                        let count = (0..*seq).filter(|&s| keep(s)).count();
                        let inv = T::one() / T::from_usize(count).expect("count");
                        let grow = &g[b * d..(b + 1) * d];
                        for s in (0..*seq).filter(|&s| keep(s)) {
                            let dst = &mut gx[(b * seq + s) * d..(b * seq + s + 1) * d];
                            dst.iter_mut()
                                .zip(grow)
                                .for_each(|(a, &gv)| *a = *a + gv * inv);
                        }
                    }
                }
            }
        }
    }
}

fn head_slice(row: usize, head: usize, dh: usize, d: usize) -> std::ops::Range<usize> {
    row * d + head * dh..row * d + (head + 1) * dh
}

fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: AttentionShape,
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        d_model: d,
    } = shape;
    let dh = shape.head_dim();
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let qi = &q[head_slice(b * seq + i, h, dh, d)];
                for j in 0..seq {
                    scores[j] = if mask.is_none_or(|m| m[b * seq + j]) {
                        let kj = &k[head_slice(b * seq + j, h, dh, d)];
                        qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                kernels::softmax_into(&scores, p);
                let orange = head_slice(b * seq + i, h, dh, d);
                for j in 0..seq {
                    let pj = p[j];
                    let vj = &v[head_slice(b * seq + j, h, dh, d)];
                    for (o, &vv) in out[orange.clone()].iter_mut().zip(vj) {
                        *o = *o + pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    shape: AttentionShape,
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        d_model: d,
    } = shape;
    let dh = shape.head_dim();
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let gi = &g[head_slice(b * seq + i, h, dh, d)];
                for j in 0..seq {
                    let vr = head_slice(b * seq + j, h, dh, d);
                    dp[j] = gi
                        .iter()
                        .zip(&v[vr.clone()])
                        .fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for (a, &gv) in dv[vr].iter_mut().zip(gi) {
                        *a = *a + p[j] * gv;
                    }
                }
                let dot = p.iter().zip(&dp).fold(T::zero(), |a, (&x, &y)| a + x * y);
                let qr = head_slice(b * seq + i, h, dh, d);
                for j in 0..seq {
                    if !mask.is_none_or(|m| m[b * seq + j]) {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kr = head_slice(b * seq + j, h, dh, d);
                    for t in 0..dh {
                        dq[qr.start + t] = dq[qr.start + t] + ds * k[kr.start + t];
                        dk[kr.start + t] = dk[kr.start + t] + ds * q[qr.start + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
