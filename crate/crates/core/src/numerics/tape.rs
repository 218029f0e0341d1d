use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::split_axis;
use super::{ParamId, ParamStore, Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Floor applied to vector norms before division.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(#[allow(dead_code)] ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    RowScale(Var, Vec<T>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    MaxAxis { a: Var, argmax: Vec<usize> },
    SumAxis { a: Var, axis: usize, scale: T },
    GatherRows { a: Var, idx: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    L2Normalize { a: Var, norms: Vec<T> },
    ReplaceRows { x: Var, token: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape: ops record their inputs, [`Tape::backward`] walks the
/// recording from a scalar root.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid_arg(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Shape bookkeeping for a (possibly batched, possibly transposed) matmul operand.
#[derive(Clone, Copy)]
struct Operand {
    batch: usize,
    rows: usize,
    cols: usize,
    // strides of op(X) over storage
    rs: isize,
    cs: isize,
    batch_stride: usize,
}

fn operand(shape: &[usize], trans: bool) -> Option<Operand> {
    let (batch, r, c) = match *shape {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => return None,
    };
    let (rows, cols, rs, cs) = if trans {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    };
    Some(Operand {
        batch,
        rows,
        cols,
        rs,
        cs,
        batch_stride: r * c,
    })
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Records a leaf that receives a gradient but is not a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Records a parameter leaf (deduplicated per tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Records a parameter leaf whose gradient is never needed.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.input(store.value(id).clone())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    /// Rank-2 and rank-3 operands are accepted; a rank-2 right operand is
    /// broadcast across the batch of a rank-3 left operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (oa, ob) = match (operand(&sa, ta), operand(&sb, tb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let broadcast_b = sb.len() == 2 && sa.len() == 3;
        if oa.cols != ob.rows || (!broadcast_b && sa.len() != sb.len()) || (!broadcast_b && oa.batch != ob.batch)
        {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (oa.rows, oa.cols, ob.cols);
        let batch = oa.batch;
        let mut out = vec![T::zero(); batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for bi in 0..batch {
            let boff = if broadcast_b { 0 } else { bi * ob.batch_stride };
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    av.as_ptr().add(bi * oa.batch_stride),
                    oa.rs,
                    oa.cs,
                    bv.as_ptr().add(boff),
                    ob.rs,
                    ob.cs,
                    T::zero(),
                    out.as_mut_ptr().add(bi * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let shape: Vec<usize> = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb }, ng))
    }

    /// `x · w + bias` for `x: [.., in]`, `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let x2 = if sx.len() == 2 {
            x
        } else {
            let rows = sx[..sx.len() - 1].iter().product();
            self.reshape(x, &[rows, *sx.last().unwrap()])?
        };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = bias {
            y = self.add_bias(y, b)?;
        }
        if sx.len() != 2 {
            let mut shape = sx.clone();
            *shape.last_mut().unwrap() = self.shape(y)[1];
            y = self.reshape(y, &shape)?;
        }
        Ok(y)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds a vector of length `last_dim` to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let c = va.last_dim();
        if vb.len() != c {
            return Err(shape_err("add_bias", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        if va.len() != c.len() {
            return Err(shape_err("mul_const", va.shape(), &[c.len()]));
        }
        let data = va.data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst(a, c), ng))
    }

    /// Multiplies row `i` (of the `[rows, last_dim]` view) by `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != factors.len() {
            return Err(shape_err("row_scale", va.shape(), &[factors.len()]));
        }
        let c = va.last_dim();
        let mut data = va.data().to_vec();
        for (row, &f) in data.chunks_mut(c).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::RowScale(a, factors), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid_arg(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid_arg(format!(
                "permute: {perm:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let (data, out_shape) = permute_data(va.data(), shape, perm);
        let t = Tensor::new(&out_shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (rows, c) = (va.rows(), va.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid_arg(format!(
                "gather_rows: index {bad} out of range for shape {:?}",
                va.shape()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", sa, sb));
        }
        let (outer, la, inner) = split_axis(sa, axis);
        let lb = sb[axis];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va.data()[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&vb.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = la + lb;
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Concat { a, b, axis }, ng))
    }

    /// Rows flagged in `mask` are replaced by `token` (length `last_dim`).
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let (vx, vt) = (self.value(x), self.value(token));
        let c = vx.last_dim();
        if vt.len() != c || mask.len() != vx.rows() {
            return Err(shape_err("replace_rows", vx.shape(), vt.shape()));
        }
        let mut data = vx.data().to_vec();
        for (row, &m) in data.chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(vt.data());
            }
        }
        let t = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(x) || self.ng(token);
        Ok(self.push(
            t,
            Op::ReplaceRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    // ---- normalisation / activation over the last axis -------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let t = Tensor::new(va.shape(), data).expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.last_dim();
        if vg.len() != c || vb.len() != c {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut out = Vec::with_capacity(vx.len());
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in vx.data().chunks(c) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(T::from_f64(r));
            for (j, v) in row.iter().enumerate() {
                let h = T::from_f64((v.as_f64() - mean) * r);
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.last_dim();
        let mut data = va.data().to_vec();
        let mut norms = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(c) {
            let n = row
                .iter()
                .map(|v| {
                    let v = v.as_f64();
                    v * v
                })
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            let n = T::from_f64(n);
            norms.push(n);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let t = Tensor::new(va.shape(), data).expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, Op::L2Normalize { a, norms }, ng)
    }

    // ---- reductions -------------------------------------------------------

    /// Maximum over `axis` (the axis is removed). Ties resolve to the lowest index.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid_arg(format!("reduce_max: bad axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = va.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            let start = out.len();
            out.extend_from_slice(&d[base..base + inner]);
            argmax.extend(base..base + inner);
            let (best, arg) = (&mut out[start..], &mut argmax[start..]);
            for l in 1..len {
                let off = base + l * inner;
                for (i, &v) in d[off..off + inner].iter().enumerate() {
                    // strict comparison keeps the lowest index on ties
                    if v > best[i] {
                        best[i] = v;
                        arg[i] = off + i;
                    }
                }
            }
        }
        let t = Tensor::new(&reduced_shape(&shape, axis), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaxAxis { a, argmax }, ng))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_scaled(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_scaled(a, axis, true)
    }

    fn reduce_scaled(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid_arg(format!("reduce: bad axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let d = va.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.iter_mut().for_each(|x| *x = 0.0);
            let base = o * len * inner;
            for l in 0..len {
                let row = &d[base + l * inner..base + (l + 1) * inner];
                for (s, v) in acc.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            out.extend(acc.iter().map(|&s| T::from_f64(s * scale)));
        }
        let t = Tensor::new(&reduced_shape(&shape, axis), out)?;
        let ng = self.ng(a);
        Ok(self.push(
            t,
            Op::SumAxis {
                a,
                axis,
                scale: T::from_f64(scale),
            },
            ng,
        ))
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce_mean(flat, 0)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce_sum(flat, 0)
    }

    /// Mean softmax cross-entropy of `logits: [rows, classes]` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let c = vl.last_dim();
        if vl.rows() != targets.len() || targets.iter().any(|&t| t >= c) || targets.is_empty() {
            return Err(shape_err("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(vl.len());
        let mut total = 0.0f64;
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t].as_f64();
            probs.extend(row.iter().map(|v| T::from_f64((v.as_f64() - lse).exp())));
        }
        let loss = T::from_f64(total / targets.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the single-element `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid_arg(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            // only leaves keep their gradient
            if matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`backward`](Self::backward) and adds parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(root)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads)?,
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || {
                    let c = g.last_dim();
                    let mut s = vec![0.0f64; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in s.iter_mut().zip(row) {
                            *acc += v.as_f64();
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    Tensor::new(&shape, s.into_iter().map(T::from_f64).collect()).unwrap()
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g.map(|v| v * *c)),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_map(g, vb, |x, y| x * y));
                self.acc(grads, *b, || zip_map(g, va, |x, y| x * y));
            }
            Op::MulConst(a, c) => self.acc(grads, *a, || {
                let data = g.data().iter().zip(c).map(|(&x, &y)| x * y).collect();
                Tensor::new(g.shape(), data).unwrap()
            }),
            Op::RowScale(a, f) => self.acc(grads, *a, || {
                let c = g.last_dim();
                let mut d = g.data().to_vec();
                for (row, &s) in d.chunks_mut(c).zip(f) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
                Tensor::new(g.shape(), d).unwrap()
            }),
            Op::Reshape(a) => self.acc(grads, *a, || {
                g.clone().reshaped(self.shape(*a)).unwrap()
            }),
            Op::Permute(a, perm) => self.acc(grads, *a, || {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, s) = permute_data(g.data(), g.shape(), &inv);
                Tensor::new(&s, d).unwrap()
            }),
            Op::Softmax(a) => self.acc(grads, *a, || {
                let c = y.last_dim();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p.as_f64() * q.as_f64()).sum();
                    let dot = T::from_f64(dot);
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                Tensor::new(y.shape(), d).unwrap()
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = y.last_dim();
                let vg = self.value(*gain).data();
                self.acc(grads, *x, || {
                    let mut d = Vec::with_capacity(y.len());
                    for ((gr, hr), &r) in g.data().chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let dh = gr[j].as_f64() * vg[j].as_f64();
                            m1 += dh;
                            m2 += dh * hr[j].as_f64();
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let r = r.as_f64();
                        for j in 0..c {
                            let dh = gr[j].as_f64() * vg[j].as_f64();
                            d.push(T::from_f64(r * (dh - m1 - hr[j].as_f64() * m2)));
                        }
                    }
                    Tensor::new(y.shape(), d).unwrap()
                });
                self.acc(grads, *gain, || {
                    let mut s = vec![0.0f64; c];
                    for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j].as_f64() * hr[j].as_f64();
                        }
                    }
                    let shape = self.shape(*gain).to_vec();
                    Tensor::new(&shape, s.into_iter().map(T::from_f64).collect()).unwrap()
                });
                self.acc(grads, *bias, || {
                    let mut s = vec![0.0f64; c];
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            s[j] += gr[j].as_f64();
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    Tensor::new(&shape, s.into_iter().map(T::from_f64).collect()).unwrap()
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || zip_map(g, va, |q, x| q * gelu_grad(x)));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    zip_map(g, va, |q, x| if x > T::zero() { q } else { T::zero() })
                });
            }
            Op::MaxAxis { a, argmax } => self.acc(grads, *a, || {
                let mut d = Tensor::zeros(self.shape(*a));
                let dd = d.data_mut();
                for (&src, &q) in argmax.iter().zip(g.data()) {
                    dd[src] += q;
                }
                d
            }),
            Op::SumAxis { a, axis, scale } => self.acc(grads, *a, || {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        d.extend(src.iter().map(|&v| v * *scale));
                    }
                }
                Tensor::new(&shape, d).unwrap()
            }),
            Op::GatherRows { a, idx } => self.acc(grads, *a, || {
                let mut d = Tensor::zeros(self.shape(*a));
                let c = g.last_dim();
                for (k, &r) in idx.iter().enumerate() {
                    let src = g.row(k);
                    for (x, &v) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *x += v;
                    }
                }
                d
            }),
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (outer, la, inner) = split_axis(&sa, *axis);
                let lb = sb[*axis];
                let lt = la + lb;
                self.acc(grads, *a, || {
                    let mut d = Vec::with_capacity(outer * la * inner);
                    for o in 0..outer {
                        let s = o * lt * inner;
                        d.extend_from_slice(&g.data()[s..s + la * inner]);
                    }
                    Tensor::new(&sa, d).unwrap()
                });
                self.acc(grads, *b, || {
                    let mut d = Vec::with_capacity(outer * lb * inner);
                    for o in 0..outer {
                        let s = o * lt * inner + la * inner;
                        d.extend_from_slice(&g.data()[s..s + lb * inner]);
                    }
                    Tensor::new(&sb, d).unwrap()
                });
            }
            Op::L2Normalize { a, norms } => self.acc(grads, *a, || {
                let c = y.last_dim();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p.as_f64() * q.as_f64()).sum();
                    let n = n.as_f64();
                    // at the floor the map is linear: y = x / floor
                    let floored = n <= NORM_FLOOR;
                    for (p, q) in yr.iter().zip(gr) {
                        let v = if floored {
                            q.as_f64() / n
                        } else {
                            (q.as_f64() - p.as_f64() * dot) / n
                        };
                        d.push(T::from_f64(v));
                    }
                }
                Tensor::new(y.shape(), d).unwrap()
            }),
            Op::ReplaceRows { x, token, mask } => {
                let c = y.last_dim();
                self.acc(grads, *x, || {
                    let mut d = g.data().to_vec();
                    for (row, &m) in d.chunks_mut(c).zip(mask) {
                        if m {
                            row.iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                    Tensor::new(g.shape(), d).unwrap()
                });
                self.acc(grads, *token, || {
                    let mut s = vec![0.0f64; c];
                    for (row, &m) in g.data().chunks(c).zip(mask) {
                        if m {
                            for (acc, v) in s.iter_mut().zip(row) {
                                *acc += v.as_f64();
                            }
                        }
                    }
                    let shape = self.shape(*token).to_vec();
                    Tensor::new(&shape, s.into_iter().map(T::from_f64).collect()).unwrap()
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => self.acc(grads, *logits, || {
                let shape = self.shape(*logits).to_vec();
                let c = *shape.last().unwrap();
                let scale = g.data()[0] / T::from_f64(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                Tensor::new(&shape, d).unwrap()
            }),
        }
        Ok(())
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let oa = operand(&sa, ta).unwrap();
        let ob = operand(&sb, tb).unwrap();
        let broadcast_b = sb.len() == 2 && sa.len() == 3;
        let (m, k, n) = (oa.rows, oa.cols, ob.cols);
        let gd = g.data();
        if self.ng(a) {
            // d op(A) = dC · op(B)^T, written through op(A)'s strides
            let mut da = Tensor::<T>::zeros(&sa);
            let bv = self.value(b).data();
            for bi in 0..oa.batch {
                let boff = if broadcast_b { 0 } else { bi * ob.batch_stride };
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd.as_ptr().add(bi * m * n),
                        n as isize,
                        1,
                        bv.as_ptr().add(boff),
                        ob.cs,
                        ob.rs,
                        T::one(),
                        da.data_mut().as_mut_ptr().add(bi * oa.batch_stride),
                        oa.rs,
                        oa.cs,
                    );
                }
            }
            accumulate(grads, a, da);
        }
        if self.ng(b) {
            // d op(B) = op(A)^T · dC
            let mut db = Tensor::<T>::zeros(&sb);
            let av = self.value(a).data();
            for bi in 0..oa.batch {
                let boff = if broadcast_b { 0 } else { bi * ob.batch_stride };
                unsafe {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.as_ptr().add(bi * oa.batch_stride),
                        oa.cs,
                        oa.rs,
                        gd.as_ptr().add(bi * m * n),
                        n as isize,
                        1,
                        T::one(),
                        db.data_mut().as_mut_ptr().add(boff),
                        ob.rs,
                        ob.cs,
                    );
                }
            }
            accumulate(grads, b, db);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.ng(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(cur) => cur.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), d).unwrap()
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let r = shape.len();
    let mut strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    // pad to four axes
    let mut os = [1usize; 4];
    let mut st = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        os[4 - r + i] = shape[p];
        st[4 - r + i] = strides[p];
    }
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..os[0] {
        for i1 in 0..os[1] {
            for i2 in 0..os[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                if st[3] == 1 {
                    out.extend_from_slice(&data[base..base + os[3]]);
                } else {
                    out.extend((0..os[3]).map(|i3| data[base + i3 * st[3]]));
                }
            }
        }
    }
    let out_shape = perm.iter().map(|&p| shape[p]).collect();
    (out, out_shape)
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    row.iter_mut().for_each(|v| *v *= inv);
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

// 0.5·(1 + tanh(u)) = σ(2u), evaluated in the storage precision
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_C);
    let two = T::from_f64(2.0);
    let u = c * (x + k * x * x * x);
    x / (T::one() + (-two * u).exp())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_C);
    let two = T::from_f64(2.0);
    let u = c * (x + k * x * x * x);
    let s = T::one() / (T::one() + (-two * u).exp());
    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
    s + x * two * s * (T::one() - s) * du
}

/// Gradients returned by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
