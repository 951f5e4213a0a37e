use std::collections::BTreeMap;

use super::special::{digamma, trigamma};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Reference to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp { x: Var, clamp: Option<f64> },
    Log(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    MeanPool(Var),
    Normalize(Var),
    Cosine(Var, Var),
    Digamma(Var),
    LogSigmoid(Var),
    Softmax { x: Var, temperature: f64 },
    LogSumExp(Var),
    Sum(Var),
    SumLast(Var),
    Gather { x: Var, indices: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar output with respect to every leaf on the tape.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum of two gradient maps recorded on the same tape.
    pub fn accumulate(&mut self, other: &GradientMap) {
        for (leaf, g) in &other.grads {
            match self.grads.get_mut(leaf) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grads.insert(*leaf, g.clone());
                }
            }
        }
    }
}

/// Eagerly evaluated reverse-mode tape.
///
/// Every primitive computes its value when recorded, so node order is a
/// topological order by construction. [`Tape::backward`] walks the nodes in
/// reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
}

fn same_shape_or_scalar(a: &Tensor, b: &Tensor, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::Shape(format!("{what}: incompatible shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::new(shape, data).expect("broadcast shape is consistent")
}

/// Reduces a broadcast gradient back onto an operand's shape.
fn unbroadcast(grad: Vec<f64>, target: &Tensor) -> Tensor {
    if target.numel() == grad.len() {
        Tensor::new(target.shape().to_vec(), grad).expect("same length")
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.iter().sum()]).expect("scalar operand")
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.leaves.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_shape_or_scalar(ta, tb, "add")?;
        let out = zip_broadcast(ta, tb, shape, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_shape_or_scalar(ta, tb, "sub")?;
        let out = zip_broadcast(ta, tb, shape, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_shape_or_scalar(ta, tb, "mul")?;
        let out = zip_broadcast(ta, tb, shape, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_shape_or_scalar(ta, tb, "div")?;
        if tb.data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let out = zip_broadcast(ta, tb, shape, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        self.push(out, Op::Neg(x))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Shift(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp { x, clamp: None })
    }

    /// `exp(min(x, ceiling))`; the gradient is zero where the clamp is active.
    pub fn exp_clamped(&mut self, x: Var, ceiling: f64) -> Var {
        let out = self.value(x).map(|v| v.min(ceiling).exp());
        self.push(out, Op::Exp { x, clamp: Some(ceiling) })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = t.map(f64::ln);
        Ok(self.push(out, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let out = t.map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(x)))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", t.rank())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_raw(t.data(), r, c))?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Mean over the two spatial axes of a `[.., H, W, C]` tensor, giving `[.., C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 3 {
            return Err(Error::Shape(format!("mean_pool needs [.., H, W, C], got {:?}", t.shape())));
        }
        let r = t.rank();
        let (h, w, c) = (t.shape()[r - 3], t.shape()[r - 2], t.shape()[r - 1]);
        let batch: usize = t.shape()[..r - 3].iter().product();
        let hw = (h * w) as f64;
        let mut data = vec![0.0; batch * c];
        for b in 0..batch {
            let block = &t.data()[b * h * w * c..(b + 1) * h * w * c];
            let out = &mut data[b * c..(b + 1) * c];
            for pos in block.chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(pos) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= hw;
            }
        }
        let mut shape = t.shape()[..r - 3].to_vec();
        shape.push(c);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MeanPool(x)))
    }

    /// L2-normalizes along the last axis.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for (row_idx, row) in data.chunks_exact_mut(d).enumerate() {
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("cannot normalize row {row_idx} with norm {n}")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Normalize(x)))
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::Shape(format!("cosine: lengths {} and {}", ta.numel(), tb.numel())));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
        }
        let c = (dot(ta.data(), tb.data()) / (na * nb)).clamp(-1.0, 1.0);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b)))
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| digamma(v)).collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Digamma(x)))
    }

    /// `log(1 / (1 + exp(-x)))`, evaluated stably.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(x))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("softmax temperature {temperature}")));
        }
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / temperature).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { x, temperature }))
    }

    /// Log-sum-exp along the last axis, dropping that axis.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let data = t
            .data()
            .chunks_exact(d)
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect::<Vec<_>>();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::LogSumExp(x)))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Sum along the last axis, dropping that axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let data = t.data().chunks_exact(d).map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumLast(x)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Collects entries at flat `indices` into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Shape(format!("gather of {} indices into shape {:?}", indices.len(), shape)));
        }
        let extent = t.numel();
        let mut data = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= extent {
                return Err(Error::Index { index: i, extent });
            }
            data.push(t.data()[i]);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { x, indices }))
    }

    /// A single entry as a scalar node.
    pub fn select(&mut self, x: Var, flat_index: usize) -> Result<Var> {
        self.gather(x, vec![flat_index], &[])
    }

    /// Row `i` of a rank-2 tensor as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("row of rank-{} tensor", t.rank())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if i >= rows {
            return Err(Error::Index { index: i, extent: rows });
        }
        self.gather(x, (i * cols..(i + 1) * cols).collect(), &[cols])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Value of a scalar-shaped node.
    pub fn forward_scalar(&self, output: Var) -> Result<f64> {
        let t = self.value(output);
        if t.numel() != 1 {
            return Err(Error::Shape(format!("expected a scalar output, node has shape {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    /// Reverse pass from a scalar output. Every registered leaf gets an entry,
    /// zero-filled when the output does not depend on it.
    pub fn backward(&self, output: Var) -> Result<GradientMap> {
        self.forward_scalar(output)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[idx] = Some(g);
                    continue;
                }
                _ => {}
            }
            for (input, contribution) in self.local_gradients(node, &g) {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut map = GradientMap::default();
        for &leaf in &self.leaves {
            let shape = self.value(leaf).shape().to_vec();
            let g = match grads.get_mut(leaf.0).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            map.grads.insert(leaf, g);
        }
        Ok(map)
    }

    fn local_gradients(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.value(v);
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Const => Vec::new(),
            Op::Add(a, b) => {
                let ga = unbroadcast(g.to_vec(), val(*a)).into_data();
                let gb = unbroadcast(g.to_vec(), val(*b)).into_data();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sub(a, b) => {
                let ga = unbroadcast(g.to_vec(), val(*a)).into_data();
                let gb = unbroadcast(g.iter().map(|v| -v).collect(), val(*b)).into_data();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(tb, i)).collect();
                let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(ta, i)).collect();
                vec![(*a, unbroadcast(ga, ta).into_data()), (*b, unbroadcast(gb, tb).into_data())]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / pick(tb, i)).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let d = pick(tb, i);
                        -gi * pick(ta, i) / (d * d)
                    })
                    .collect();
                vec![(*a, unbroadcast(ga, ta).into_data()), (*b, unbroadcast(gb, tb).into_data())]
            }
            Op::Neg(x) => vec![(*x, g.iter().map(|v| -v).collect())],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Shift(x) => vec![(*x, g.to_vec())],
            Op::Exp { x, clamp } => {
                let xs = val(*x).data();
                let gx = g
                    .iter()
                    .zip(y)
                    .zip(xs)
                    .map(|((gi, yi), xi)| match clamp {
                        Some(c) if *xi >= *c => 0.0,
                        _ => gi * yi,
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Log(x) => {
                let xs = val(*x).data();
                vec![(*x, g.iter().zip(xs).map(|(gi, xi)| gi / xi).collect())]
            }
            Op::Sqrt(x) => vec![(*x, g.iter().zip(y).map(|(gi, yi)| gi / (2.0 * yi)).collect())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let bt = transpose_raw(tb.data(), k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(ta.data(), m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                vec![(*x, transpose_raw(g, s[0], s[1]))]
            }
            Op::MeanPool(x) => {
                let t = val(*x);
                let r = t.rank();
                let (h, w, c) = (t.shape()[r - 3], t.shape()[r - 2], t.shape()[r - 1]);
                let hw = (h * w) as f64;
                let mut gx = vec![0.0; t.numel()];
                for (b, block) in gx.chunks_exact_mut(h * w * c).enumerate() {
                    let gb = &g[b * c..(b + 1) * c];
                    for pos in block.chunks_exact_mut(c) {
                        for (o, gv) in pos.iter_mut().zip(gb) {
                            *o = gv / hw;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Normalize(x) => {
                let t = val(*x);
                let d = t.last_dim();
                let mut gx = vec![0.0; t.numel()];
                for (((gxr, gr), yr), xr) in
                    gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)).zip(t.data().chunks_exact(d))
                {
                    let n = dot(xr, xr).sqrt();
                    let proj = dot(yr, gr);
                    for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * proj) / n;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                let c = y[0];
                let g0 = g[0];
                let ga = ta.data().iter().zip(tb.data()).map(|(ai, bi)| g0 * (bi / nb - c * ai / na) / na).collect();
                let gb = tb.data().iter().zip(ta.data()).map(|(bi, ai)| g0 * (ai / na - c * bi / nb) / nb).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Digamma(x) => {
                let xs = val(*x).data();
                let gx =
                    g.iter().zip(xs).map(|(gi, &xi)| gi * trigamma(xi).expect("domain checked on forward")).collect();
                vec![(*x, gx)]
            }
            Op::LogSigmoid(x) => {
                let xs = val(*x).data();
                vec![(*x, g.iter().zip(xs).map(|(gi, &xi)| gi * sigmoid(-xi)).collect())]
            }
            Op::Softmax { x, temperature } => {
                let d = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((gxr, gr), yr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let inner = dot(gr, yr);
                    for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - inner) / temperature;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSumExp(x) => {
                let t = val(*x);
                let d = t.last_dim();
                let mut gx = vec![0.0; t.numel()];
                for (r, (gxr, xr)) in gx.chunks_exact_mut(d).zip(t.data().chunks_exact(d)).enumerate() {
                    let lse = y[r];
                    for (o, xi) in gxr.iter_mut().zip(xr) {
                        *o = g[r] * (xi - lse).exp();
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::SumLast(x) => {
                let t = val(*x);
                let d = t.last_dim();
                let gx = (0..t.numel()).map(|i| g[i / d]).collect();
                vec![(*x, gx)]
            }
            Op::Gather { x, indices } => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (gi, &i) in g.iter().zip(indices) {
                    gx[i] += gi;
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
        }
    }
}
