//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable operation as it executes. Nodes
//! are appended in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::params::ParamSet;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Class id that [`Tape::cross_entropy`] skips.
pub const IGNORE_INDEX: usize = usize::MAX;

const LAYERNORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        rows: Var,
        at: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalMask(Var),
    Gelu(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        count: usize,
    },
    SquaredError {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Counter-based uniform stream: the `n`-th draw depends only on
/// `(seed, n)`, so dropout masks are reproducible bit for bit.
#[derive(Clone, Debug)]
pub struct DropoutStream {
    seed: u64,
    counter: u64,
}

impl DropoutStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    fn next_uniform(&mut self) -> f64 {
        let z = splitmix64(self.seed ^ splitmix64(self.counter));
        self.counter += 1;
        (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    train: bool,
    dropout: DropoutStream,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter index of the [`ParamSet`] the tape read from.
    /// Parameters that never influenced the loss get zero gradients.
    pub fn into_param_grads(mut self, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        for &(node, idx) in &self.params {
            if let Some(g) = self.by_node[node].take() {
                out[idx].add_assign(&g);
            }
        }
        out
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(train: bool, dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            dropout: DropoutStream::new(dropout_seed),
        }
    }

    /// Tape for evaluation: dropout is the identity.
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input tensor. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, params: &ParamSet<T>, index: usize) -> Var {
        self.push(params.tensor(index).clone(), Op::Param(index), true)
    }

    /// `a[.., m, k] x b[k, n]`, or a batched product when `b` carries the
    /// same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batched = sb.len() > 2;
        if k != kb || (batched && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); shape.iter().product()];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if batched {
            let batch = ad.len() / (m * k);
            for i in 0..batch {
                gemm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            gemm_acc(ad, bd, &mut out, ad.len() / k, k, n);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs))
    }

    fn check_trailing(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise sum. `b` may match only the trailing dimensions of `a`
    /// (a bias added to every leading row).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_trailing("add", a, b)?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product, broadcasting like [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_trailing("mul", a, b)?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x *= y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x *= c;
        }
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    /// Rows of a `[n, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding_gather", format!("table {:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::shape(
                    "embedding_gather",
                    format!("id {id} out of range for table {:?}", t.shape()),
                ));
            }
            out.extend_from_slice(t.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Copy of `base` (`[n, d]`) with row `at[i]` replaced by row `i` of
    /// `rows`.
    pub fn replace_rows(&mut self, base: Var, rows: Var, at: &[usize]) -> Result<Var> {
        let (sb, sr) = (self.value(base).shape(), self.value(rows).shape());
        if sb.len() != 2 || sr.len() != 2 || sb[1] != sr[1] || sr[0] != at.len() {
            return Err(Error::shape(
                "replace_rows",
                format!("base {sb:?}, rows {sr:?}, {} positions", at.len()),
            ));
        }
        if let Some(&bad) = at.iter().find(|&&p| p >= sb[0]) {
            return Err(Error::shape("replace_rows", format!("row {bad} out of range for {sb:?}")));
        }
        let d = sb[1];
        let mut out = self.value(base).clone();
        for (i, &p) in at.iter().enumerate() {
            let src = self.value(rows).row(i).to_vec();
            out.data_mut()[p * d..(p + 1) * d].copy_from_slice(&src);
        }
        let needs = self.needs(base) || self.needs(rows);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                rows,
                at: at.to_vec(),
            },
            needs,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [d] {
                return Err(Error::shape(
                    "layernorm",
                    format!("{name} {:?} for input {:?}", self.value(v).shape(), self.value(x).shape()),
                ));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::of(LAYERNORM_EPS);
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / d.max(1));
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for {:?}", xv.shape())));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..len {
                    max = max.max(out[at(i)]);
                }
                let mut total = T::zero();
                for i in 0..len {
                    let e = (out[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / total;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs))
    }

    /// Sets entries above the diagonal of the trailing `[L, L]` block to
    /// negative infinity.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("causal_mask", format!("{s:?} is not square")));
        }
        let l = s[s.len() - 1];
        let mut out = xv.clone();
        for block in out.data_mut().chunks_mut(l * l) {
            for i in 0..l {
                for v in &mut block[i * l + i + 1..(i + 1) * l] {
                    *v = T::neg_infinity();
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::CausalMask(x), needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// Inverted dropout. Identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.dropout.next_uniform() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, needs))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not a matrix", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let d = v.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Mean negative log-softmax of `logits[.., C]` at the target classes,
    /// skipping rows whose target is [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        let rows = lv.numel() / c.max(1);
        if rows != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), lv.shape()),
            ));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = T::zero();
        let mut count = 0;
        for (row, &t) in lv.data().chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= c {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {t} out of range for {c} classes"),
                ));
            }
            loss += log_z - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every position is ignored".into()));
        }
        let value = loss / T::of(count as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Squared Euclidean norm of `pred - target`, summed over all elements.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("l2_loss", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let total = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(total), Op::SquaredError { pred, target }, needs))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(idx) => Some((i, idx)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sb = bv.shape();
                let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let m = av.shape()[av.rank() - 2];
                let batched = sb.len() > 2;
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    if batched {
                        for i in 0..av.numel() / (m * k) {
                            gemm_nt_acc(
                                &gd[i * m * n..(i + 1) * m * n],
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    } else {
                        gemm_nt_acc(gd, bv.data(), &mut ga, av.numel() / k, n, k);
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    if batched {
                        for i in 0..av.numel() / (m * k) {
                            gemm_tn_acc(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        gemm_tn_acc(av.data(), gd, &mut gb, av.numel() / k, k, n);
                    }
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let mut gb = vec![T::zero(); bv.numel()];
                    for chunk in gd.chunks(bv.numel()) {
                        for (acc, &x) in gb.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.numel();
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(bn) {
                        for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bn];
                    for (gc, ac) in gd.chunks(bn).zip(av.data().chunks(bn)) {
                        for ((acc, &x), &y) in gb.iter_mut().zip(gc).zip(ac) {
                            *acc += x * y;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::Scale(a, c) => {
                let mut ga = g.clone();
                for x in ga.data_mut() {
                    *x *= *c;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut gt = vec![T::zero(); tv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for (acc, &x) in gt[id * d..(id + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), gt)?);
            }
            Op::ReplaceRows { base, rows, at } => {
                let d = g.last_dim();
                if self.needs(*base) {
                    let mut gb = g.clone();
                    for &p in at {
                        gb.data_mut()[p * d..(p + 1) * d].fill(T::zero());
                    }
                    self.accumulate(grads, *base, gb);
                }
                if self.needs(*rows) {
                    let mut gr = Vec::with_capacity(at.len() * d);
                    for &p in at {
                        gr.extend_from_slice(&gd[p * d..(p + 1) * d]);
                    }
                    self.accumulate(grads, *rows, Tensor::new(vec![at.len(), d], gr)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let dn = T::of(d as f64);
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = Vec::with_capacity(gd.len());
                for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dy = T::zero();
                    let mut mean_dy_h = T::zero();
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dy = gr[j] * gv[j];
                        mean_dy += dy;
                        mean_dy_h += dy * hr[j];
                    }
                    mean_dy = mean_dy / dn;
                    mean_dy_h = mean_dy_h / dn;
                    for j in 0..d {
                        let dy = gr[j] * gv[j];
                        gx.push(rstd[r] * (dy - mean_dy - hr[j] * mean_dy_h));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                self.accumulate(grads, *gamma, Tensor::vector(gg));
                self.accumulate(grads, *beta, Tensor::vector(gbeta));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let mut dot = T::zero();
                        for i in 0..len {
                            dot += yd[at(i)] * gd[at(i)];
                        }
                        for i in 0..len {
                            gx[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::CausalMask(x) => {
                let l = g.last_dim();
                let mut gx = g.clone();
                for block in gx.data_mut().chunks_mut(l * l) {
                    for i in 0..l {
                        block[i * l + i + 1..(i + 1) * l].fill(T::zero());
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx: Vec<T> = xv.data().iter().zip(gd).map(|(&v, &d)| d * gelu_grad(v)).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.shape()[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(pv.numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), gp)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, len, inner) = split_axis(xv.shape(), *axis);
                let width = g.shape()[*axis];
                let mut gx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + width * inner]
                        .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c, r], gx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape)?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let c = lv.last_dim();
                let w = g.item() / T::of(*count as f64);
                let mut gl = vec![T::zero(); lv.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..c {
                        gl[r * c + j] = probs[r * c + j] * w;
                    }
                    gl[r * c + t] -= w;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), gl)?);
            }
            Op::SquaredError { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let two = T::of(2.0) * g.item();
                let diff: Vec<T> = pv.data().iter().zip(tv.data()).map(|(&a, &b)| two * (a - b)).collect();
                if self.needs(*target) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *target, Tensor::new(tv.shape().to_vec(), neg)?);
                }
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), diff)?);
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
        assert!(v[3] > v[1]);
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[1, 4], &[3.0; 4]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let m = tape.causal_mask(x).unwrap();
        let p = tape.softmax(m, 1).unwrap();
        let v = tape.value(p).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy(x, &[0, IGNORE_INDEX, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits_approach_zero() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[1, 3], &[0.0, 100.0, 0.0]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-40);
    }

    #[test]
    fn cross_entropy_all_ignored_is_an_error() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            tape.cross_entropy(x, &[IGNORE_INDEX, IGNORE_INDEX]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_hand_computed_log_softmax() {
        // 3x5 logits; expected value computed row by row in scalar arithmetic.
        let logits = [
            0.3, -1.2, 0.8, 2.0, -0.5, //
            1.1, 0.0, -0.7, 0.4, 0.9, //
            -2.0, 0.5, 0.5, 1.5, 0.2,
        ];
        let targets = [3usize, 0, 4];
        let mut expected = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &logits[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            expected += z.ln() - row[tgt];
        }
        expected /= 3.0;
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[3, 5], &logits));
        let l = tape.cross_entropy(x, &targets).unwrap();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn l2_loss_cases() {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.25]));
        let same = tape.l2_loss(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let b = tape.constant(t(&[4], &[0.5, -1.0, 3.0, 0.25]));
        let unit = tape.l2_loss(a, b).unwrap();
        assert_eq!(tape.value(unit).item(), 1.0);

        let c = tape.constant(t(&[4], &[1.5, 0.0, -1.0, 0.75]));
        let l = tape.l2_loss(a, c).unwrap();
        // (−1)^2 + (−1)^2 + 3^2 + (−0.5)^2
        assert_eq!(tape.value(l).item(), 11.25);

        let short = tape.constant(t(&[3], &[0.0; 3]));
        assert!(matches!(tape.l2_loss(a, short), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut eval = Tape::<f32>::new(false, 3);
        let x = eval.constant(Tensor::full(&[16], 1.0));
        let y = eval.dropout(x, 0.5).unwrap();
        assert_eq!(eval.value(y), eval.value(x));

        let mut train = Tape::<f32>::new(true, 3);
        let x = train.constant(Tensor::full(&[16], 1.0));
        let y = train.dropout(x, 0.0).unwrap();
        assert_eq!(train.value(y), train.value(x));
    }

    #[test]
    fn dropout_is_seed_reproducible() {
        let run = |seed| {
            let mut tape = Tape::<f32>::new(true, seed);
            let x = tape.constant(Tensor::full(&[64], 1.0));
            let y = tape.dropout(x, 0.3).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn gradient_accumulates_over_shared_inputs() {
        // d/dx sum(x * x) = 2x
        let mut tape = Tape::<f64>::new(false, 0);
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }
}
