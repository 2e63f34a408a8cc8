//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and returns gradients for the leaves that require them.

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::image;
use crate::tensor::{Scalar, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Fill value for masked attention logits.
const MASK_FILL: f64 = -1e9;

/// Handle to a node on a [`Tape`].
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
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    AddBias(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskFill(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Embedding(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    SumLast(Var),
    SumAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    AdaptiveAvgPool(Var),
    Upsample(Var),
    Sobel {
        x: Var,
        gx: Vec<T>,
        gy: Vec<T>,
    },
    LocalVar {
        x: Var,
        window: usize,
        means: Vec<T>,
    },
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    DynDepthwise {
        x: Var,
        kernels: Var,
        ksize: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the leaves reachable from a loss.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, "operand shape", format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner = new_shape[last];
    let inner_stride = src_strides[last];
    'outer: loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break 'outer;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a constant of the same element count.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != c.len() {
            return Err(shape_err("mul_const", "numel", vx.numel(), c.len()));
        }
        let data = vx.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::MulConst(x, c), &[x]))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or(Error::Empty("add_bias"))?;
        if self.value(bias).numel() != n {
            return Err(shape_err("add_bias", "last axis", n, self.value(bias).numel()));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or(Error::Empty("softmax"))?;
        if n == 0 {
            return Err(Error::Empty("softmax"));
        }
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Replaces entries where `keep` is false by a large negative number.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != keep.len() {
            return Err(shape_err("mask_fill", "numel", vx.numel(), keep.len()));
        }
        let fill = T::lit(MASK_FILL);
        let data = vx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::MaskFill(x, keep), &[x]))
    }

    /// Inverted dropout with a precomputed keep mask (`0` or `1/(1-p)` per element).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != mask.len() {
            return Err(shape_err("dropout", "numel", vx.numel(), mask.len()));
        }
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::Dropout(x, mask), &[x]))
    }

    // ---------------------------------------------------------------- shapes

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, new_shape) = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(&new_shape, data)?;
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(Error::Empty("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", format!("non-concat axes (axis {axis})"), format!("{first:?}"), format!("{s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.numel() / outer;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), xs))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `x[.., din] @ w[din, dout] (+ b[dout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.value(w).expect_rank("linear", 2)?.to_vec();
        let din = *xs.last().ok_or(Error::Empty("linear"))?;
        if ws[0] != din {
            return Err(shape_err("linear", "input features (last axis)", ws[0], din));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(shape_err("linear", "bias length", dout, self.value(b).numel()));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        T::gemm(false, false, rows, dout, din, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, rows, din, dout }, &inputs))
    }

    /// Batched matrix product of `a[B, m, k]` with `b[B, k, n]` (or
    /// `b[B, n, k]` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.value(a).expect_rank("matmul", 3)?.to_vec();
        let sb = self.value(b).expect_rank("matmul", 3)?.to_vec();
        if sa[0] != sb[0] {
            return Err(shape_err("matmul", "batch (axis 0)", sa[0], sb[0]));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("matmul", "contraction axis", k, kb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                false,
                trans_b,
                m,
                n,
                k,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    // ---------------------------------------------------------------- normalisation

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or(Error::Empty("layer_norm"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", "affine length", d, self.value(gamma).numel()));
        }
        let vx = self.value(x);
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); vx.numel()];
        let (g, bb) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Batch normalisation of an NCHW tensor using batch statistics. Returns
    /// the output together with the per-channel batch mean and unbiased
    /// variance for running-statistics updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, h, w) = self.value(x).nchw("batch_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("batch_norm", "channels (axis 1)", c, self.value(gamma).numel()));
        }
        let plane = h * w;
        let count = b * plane;
        let vx = self.value(x).data();
        let eps = T::lit(BATCH_NORM_EPS);
        let cn = T::lit(count as f64);
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for n in 0..b {
                s += vx[(n * c + ch) * plane..(n * c + ch + 1) * plane].iter().copied().sum::<T>();
            }
            let mean = s / cn;
            let mut ss = T::zero();
            for n in 0..b {
                for &v in &vx[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                    ss += (v - mean) * (v - mean);
                }
            }
            means[ch] = mean;
            vars[ch] = if count > 1 { ss / T::lit((count - 1) as f64) } else { T::zero() };
            inv_std[ch] = T::one() / (ss / cn + eps).sqrt();
        }
        let (g, bb) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for n in 0..b {
            for ch in 0..c {
                for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                    let hv = (vx[i] - means[ch]) * inv_std[ch];
                    xhat[i] = hv;
                    out[i] = hv * g[ch] + bb[ch];
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((v, means, vars))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("batch_norm")?;
        if self.value(gamma).numel() != c || mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", "channels (axis 1)", c, self.value(gamma).numel()));
        }
        let eps = T::lit(BATCH_NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let plane = h * w;
        let vx = self.value(x).data();
        let (g, bb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); vx.len()];
        for n in 0..b {
            for ch in 0..c {
                for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                    out[i] = (vx[i] - mean[ch]) * inv_std[ch] * g[ch] + bb[ch];
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(
            t,
            Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), inv_std },
            &[x, gamma, beta],
        ))
    }

    // ---------------------------------------------------------------- lookup and losses

    /// Row gather from `table[V, d]`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.value(table).expect_rank("embedding", 2)?.to_vec();
        let (v, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(shape_err("embedding", "token id", format!("< {v}"), id));
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(t, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// Per-row cross-entropy of `logits[N, V]`; rows whose target is `None`
    /// (padding) produce 0 and no gradient. Output `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.value(logits).expect_rank("cross_entropy", 2)?.to_vec();
        let (n, v) = (s[0], s[1]);
        if targets.len() != n {
            return Err(shape_err("cross_entropy", "target count", n, targets.len()));
        }
        if v == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut out = Vec::with_capacity(n);
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            softmax_in_place(row);
            match *t {
                None => out.push(T::zero()),
                Some(t) if t >= v => {
                    return Err(invalid("cross_entropy", format!("target {t} outside vocabulary of {v}")))
                }
                Some(t) => {
                    let lv = self.value(logits).data();
                    let rowl = &lv[r * v..(r + 1) * v];
                    let mx = rowl.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let lse = mx + rowl.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
                    out.push(lse - rowl[t]);
                }
            }
        }
        let t = Tensor::new(&[n], out)?;
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or(Error::Empty("sum_last"))?;
        let data: Vec<T> = self.value(x).data().chunks(n.max(1)).map(|c| c.iter().copied().sum()).collect();
        let shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::SumLast(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x), &[x])
    }

    // ---------------------------------------------------------------- convolution and pooling

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs: [usize; 4] = self.shape(x).try_into().map_err(|_| shape_err("conv2d", "rank", 4, self.shape(x).len()))?;
        let out_shape = conv::conv2d_out_shape(&xs, self.shape(w), &spec)?;
        if let Some(b) = b {
            if self.value(b).numel() != spec.out_channels {
                return Err(shape_err("conv2d", "bias length", spec.out_channels, self.value(b).numel()));
            }
        }
        let data = conv::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &spec,
            out_shape,
        );
        let t = Tensor::new(&out_shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("max_pool2d")?;
        let (data, arg, shape) = conv::max_pool2d_forward(self.value(x).data(), [b, c, h, w], kernel, stride)?;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::MaxPool(x, arg), &[x]))
    }

    /// `[b, c, h, w] -> [b, c, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("global_avg_pool")?;
        if h * w == 0 {
            return Err(Error::Empty("global_avg_pool"));
        }
        let inv = T::lit(1.0 / (h * w) as f64);
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new(&[b, c, 1, 1], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("adaptive_avg_pool")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Empty("adaptive_avg_pool"));
        }
        let data = conv::adaptive_avg_pool_forward(self.value(x).data(), [b, c, h, w], out_h, out_w);
        let t = Tensor::new(&[b, c, out_h, out_w], data)?;
        Ok(self.push(t, Op::AdaptiveAvgPool(x), &[x]))
    }

    /// Half-pixel bilinear upsampling; downscaling is rejected.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("upsample_bilinear")?;
        if out_h < h {
            return Err(shape_err("upsample_bilinear", "output height", format!(">= {h}"), out_h));
        }
        if out_w < w {
            return Err(shape_err("upsample_bilinear", "output width", format!(">= {w}"), out_w));
        }
        let data = image::upsample_bilinear_forward(self.value(x).data(), b * c, h, w, out_h, out_w);
        let t = Tensor::new(&[b, c, out_h, out_w], data)?;
        Ok(self.push(t, Op::Upsample(x), &[x]))
    }

    /// Sobel gradient magnitude of a single-channel map.
    pub fn sobel_magnitude(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("sobel_magnitude")?;
        if c != 1 {
            return Err(shape_err("sobel_magnitude", "channels (axis 1)", 1, c));
        }
        let (mag, gx, gy) = image::sobel_forward(self.value(x).data(), b, h, w);
        let t = Tensor::new(&[b, 1, h, w], mag)?;
        Ok(self.push(t, Op::Sobel { x, gx, gy }, &[x]))
    }

    /// Sliding-window variance of a single-channel map (odd window).
    pub fn local_variance(&mut self, x: Var, window: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("local_variance")?;
        if c != 1 {
            return Err(shape_err("local_variance", "channels (axis 1)", 1, c));
        }
        if window % 2 == 0 {
            return Err(invalid("local_variance", format!("window must be odd, got {window}")));
        }
        let (out, means) = image::local_variance_forward(self.value(x).data(), b, h, w, window);
        let t = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(t, Op::LocalVar { x, window, means }, &[x]))
    }

    /// Mean over the channel axis: `[b, c, h, w] -> [b, 1, h, w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("channel_mean")?;
        let vx = self.value(x).data();
        let plane = h * w;
        let inv = T::lit(1.0 / c as f64);
        let mut out = vec![T::zero(); b * plane];
        for n in 0..b {
            for ch in 0..c {
                let src = &vx[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                for (o, &v) in out[n * plane..(n + 1) * plane].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(t, Op::ChannelMean(x), &[x]))
    }

    /// Max over the channel axis: `[b, c, h, w] -> [b, 1, h, w]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("channel_max")?;
        let vx = self.value(x).data();
        let plane = h * w;
        let mut out = vec![T::neg_infinity(); b * plane];
        let mut arg = vec![0usize; b * plane];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for p in 0..plane {
                    if vx[base + p] > out[n * plane + p] {
                        out[n * plane + p] = vx[base + p];
                        arg[n * plane + p] = base + p;
                    }
                }
            }
        }
        let t = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(t, Op::ChannelMax(x, arg), &[x]))
    }

    /// `x[b, c, h, w] * g[b, c]` with the gate broadcast over space.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("mul_channel")?;
        if self.value(g).numel() != b * c {
            return Err(shape_err("mul_channel", "gate size (b*c)", b * c, self.value(g).numel()));
        }
        let plane = h * w;
        let gd = self.value(g).data();
        let mut t = self.value(x).clone();
        for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= gd[i]);
        }
        Ok(self.push(t, Op::MulChannel(x, g), &[x, g]))
    }

    /// `x[b, c, h, w] * m[b, 1, h, w]` with the mask broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("mul_spatial")?;
        let ms = self.value(m).nchw("mul_spatial")?;
        if ms != (b, 1, h, w) {
            return Err(shape_err("mul_spatial", "mask shape", format!("[{b}, 1, {h}, {w}]"), format!("{:?}", self.shape(m))));
        }
        let plane = h * w;
        let md = self.value(m).data();
        let mut t = self.value(x).clone();
        for n in 0..b {
            for ch in 0..c {
                let chunk = &mut t.data_mut()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                for (v, &mv) in chunk.iter_mut().zip(&md[n * plane..(n + 1) * plane]) {
                    *v *= mv;
                }
            }
        }
        Ok(self.push(t, Op::MulSpatial(x, m), &[x, m]))
    }

    /// Depthwise convolution with per-sample kernels `[b, c, k, k]`.
    pub fn dynamic_depthwise(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).nchw("dynamic_depthwise")?;
        let ks = self.value(kernels).nchw("dynamic_depthwise")?;
        if ks.0 != b || ks.1 != c || ks.2 != ks.3 || ks.2 % 2 == 0 {
            return Err(shape_err(
                "dynamic_depthwise",
                "kernel shape",
                format!("[{b}, {c}, k, k] with odd k"),
                format!("{:?}", self.shape(kernels)),
            ));
        }
        let data = conv::dynamic_depthwise_forward(self.value(x).data(), [b, c, h, w], self.value(kernels).data(), ks.2);
        let t = Tensor::new(&[b, c, h, w], data)?;
        Ok(self.push(t, Op::DynDepthwise { x, kernels, ksize: ks.2 }, &[x, kernels]))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from `loss`, seeding its gradient with ones.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let seed = Tensor::ones(self.shape(loss));
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&self, loss: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        same_shape("backward", self.shape(loss), seed.shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.buf(grads, v) {
                        axpy(d, gd, T::one());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.buf(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.buf(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.buf(grads, *x) {
                    axpy(d, gd, *c);
                }
            }
            Op::MulConst(x, c) | Op::Dropout(x, c) => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, &g), &m) in d.iter_mut().zip(gd).zip(c) {
                        *d += g * m;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(d) = self.buf(grads, *x) {
                    axpy(d, gd, T::one());
                }
                let n = self.value(*bias).numel();
                if let Some(d) = self.buf(grads, *bias) {
                    for row in gd.chunks(n) {
                        axpy(d, row, T::one());
                    }
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if let Some(d) = self.buf(grads, *x) {
                    T::gemm(false, true, rows, din, dout, T::one(), gd, self.value(*w).data(), T::one(), d);
                }
                if let Some(d) = self.buf(grads, *w) {
                    T::gemm(true, false, din, dout, rows, T::one(), self.value(*x).data(), gd, T::one(), d);
                }
                if let Some(b) = b {
                    if let Some(d) = self.buf(grads, *b) {
                        for row in gd.chunks(dout) {
                            axpy(d, row, T::one());
                        }
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.buf(grads, *a) {
                    for i in 0..*batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        // dA = dC . op(B)^T
                        T::gemm(false, !*trans_b, m, k, n, T::one(), gi, bi, T::one(), di);
                    }
                }
                if let Some(d) = self.buf(grads, *b) {
                    for i in 0..*batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(true, false, n, k, m, T::one(), gi, ai, T::one(), di);
                        } else {
                            T::gemm(true, false, k, n, m, T::one(), ai, gi, T::one(), di);
                        }
                    }
                }
            }
            Op::Permute(x, perm) => {
                if let Some(d) = self.buf(grads, *x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute_data(gd, g.shape(), &inv);
                    axpy(d, &back, T::one());
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    axpy(d, gd, T::one());
                }
            }
            Op::Concat(xs, axis) => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row = node.value.numel() / outer;
                for &v in xs {
                    let chunk = self.value(v).numel() / outer;
                    if let Some(d) = self.buf(grads, v) {
                        for o in 0..outer {
                            axpy(
                                &mut d[o * chunk..(o + 1) * chunk],
                                &gd[o * row + offset..o * row + offset + chunk],
                                T::one(),
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Relu(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(out) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(out) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(d) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::MaskFill(x, keep) => {
                if let Some(d) = self.buf(grads, *x) {
                    for ((d, &g), &k) in d.iter_mut().zip(gd).zip(keep) {
                        if k {
                            *d += g;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let dn = *node.value.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                if let Some(d) = self.buf(grads, *gamma) {
                    for (gr, hr) in gd.chunks(dn).zip(xhat.chunks(dn)) {
                        for j in 0..dn {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *beta) {
                    for gr in gd.chunks(dn) {
                        axpy(d, gr, T::one());
                    }
                }
                if let Some(d) = self.buf(grads, *x) {
                    let nn = T::lit(dn as f64);
                    for (r, (gr, hr)) in gd.chunks(dn).zip(xhat.chunks(dn)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..dn {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..dn {
                            let dh = gr[j] * gam[j];
                            d[r * dn + j] += is / nn * (nn * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = node.value.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gh = vec![T::zero(); c];
                for n in 0..b {
                    for ch in 0..c {
                        for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                            sum_g[ch] += gd[i];
                            sum_gh[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *gamma) {
                    axpy(d, &sum_gh, T::one());
                }
                if let Some(d) = self.buf(grads, *beta) {
                    axpy(d, &sum_g, T::one());
                }
                if let Some(d) = self.buf(grads, *x) {
                    let cnt = T::lit((b * plane) as f64);
                    for n in 0..b {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / cnt;
                            for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                                d[i] += k * (cnt * gd[i] - sum_g[ch] - xhat[i] * sum_gh[ch]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let s = node.value.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *gamma) {
                    for n in 0..b {
                        for ch in 0..c {
                            for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                                d[ch] += gd[i] * (vx[i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *beta) {
                    for n in 0..b {
                        for ch in 0..c {
                            d[ch] += gd[(n * c + ch) * plane..(n * c + ch + 1) * plane].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *x) {
                    for n in 0..b {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                                d[i] += gd[i] * k;
                            }
                        }
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let dd = self.shape(*table)[1];
                if let Some(d) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * dd..(id + 1) * dd], &gd[r * dd..(r + 1) * dd], T::one());
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                if let Some(d) = self.buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let gr = gd[r];
                        for j in 0..v {
                            d[r * v + j] += gr * probs[r * v + j];
                        }
                        d[r * v + t] -= gr;
                    }
                }
            }
            Op::SumLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                if let Some(d) = self.buf(grads, *x) {
                    for (dr, &g) in d.chunks_mut(n).zip(gd) {
                        dr.iter_mut().for_each(|v| *v += g);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().for_each(|v| *v += gd[0]);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let xs: [usize; 4] = self.shape(*x).try_into().unwrap();
                let os: [usize; 4] = node.value.shape().try_into().unwrap();
                // Split borrows: gradients of distinct vars live in distinct slots.
                let mut dx = self.take_buf(grads, *x);
                let mut dw = self.take_buf(grads, *w);
                let mut db = b.and_then(|b| self.take_buf(grads, b));
                conv::conv2d_backward(
                    self.value(*x).data(),
                    xs,
                    self.value(*w).data(),
                    spec,
                    os,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.restore(grads, *x, dx);
                self.restore(grads, *w, dw);
                if let Some(b) = b {
                    self.restore(grads, *b, db);
                }
            }
            Op::MaxPool(x, arg) => {
                if let Some(d) = self.buf(grads, *x) {
                    for (&i, &g) in arg.iter().zip(gd) {
                        d[i] += g;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = T::lit(1.0 / plane as f64);
                if let Some(d) = self.buf(grads, *x) {
                    for (dp, &g) in d.chunks_mut(plane).zip(gd) {
                        dp.iter_mut().for_each(|v| *v += g * inv);
                    }
                }
            }
            Op::AdaptiveAvgPool(x) => {
                let xs: [usize; 4] = self.shape(*x).try_into().unwrap();
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                if let Some(d) = self.buf(grads, *x) {
                    conv::adaptive_avg_pool_backward(gd, xs, oh, ow, d);
                }
            }
            Op::Upsample(x) => {
                let s = self.shape(*x).to_vec();
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                if let Some(d) = self.buf(grads, *x) {
                    image::upsample_bilinear_backward(gd, s[0] * s[1], s[2], s[3], oh, ow, d);
                }
            }
            Op::Sobel { x, gx, gy } => {
                let s = self.shape(*x).to_vec();
                if let Some(d) = self.buf(grads, *x) {
                    image::sobel_backward(out, gx, gy, gd, s[0], s[2], s[3], d);
                }
            }
            Op::LocalVar { x, window, means } => {
                let s = self.shape(*x).to_vec();
                let vx = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    image::local_variance_backward(vx, out, means, gd, s[0], s[2], s[3], *window, d);
                }
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let inv = T::lit(1.0 / c as f64);
                if let Some(d) = self.buf(grads, *x) {
                    for n in 0..b {
                        for ch in 0..c {
                            let dst = &mut d[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                            axpy(dst, &gd[n * plane..(n + 1) * plane], inv);
                        }
                    }
                }
            }
            Op::ChannelMax(x, arg) => {
                if let Some(d) = self.buf(grads, *x) {
                    for (&i, &g) in arg.iter().zip(gd) {
                        d[i] += g;
                    }
                }
            }
            Op::MulChannel(x, gate) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for (i, (dp, gp)) in d.chunks_mut(plane).zip(gd.chunks(plane)).enumerate() {
                        axpy(dp, gp, gv[i]);
                    }
                }
                if let Some(d) = self.buf(grads, *gate) {
                    for (i, (gp, xp)) in gd.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        d[i] += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::MulSpatial(x, m) => {
                let s = self.shape(*x);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mv = self.value(*m).data();
                let xv = self.value(*x).data();
                if let Some(d) = self.buf(grads, *x) {
                    for n in 0..b {
                        for ch in 0..c {
                            let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                            for ((dv, &g), &mm) in d[r.clone()].iter_mut().zip(&gd[r]).zip(&mv[n * plane..(n + 1) * plane]) {
                                *dv += g * mm;
                            }
                        }
                    }
                }
                if let Some(d) = self.buf(grads, *m) {
                    for n in 0..b {
                        for ch in 0..c {
                            let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                            for ((dv, &g), &xx) in d[n * plane..(n + 1) * plane].iter_mut().zip(&gd[r.clone()]).zip(&xv[r]) {
                                *dv += g * xx;
                            }
                        }
                    }
                }
            }
            Op::DynDepthwise { x, kernels, ksize } => {
                let xs: [usize; 4] = self.shape(*x).try_into().unwrap();
                let mut dx = self.take_buf(grads, *x);
                let mut dk = self.take_buf(grads, *kernels);
                conv::dynamic_depthwise_backward(
                    self.value(*x).data(),
                    xs,
                    self.value(*kernels).data(),
                    *ksize,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                );
                self.restore(grads, *x, dx);
                self.restore(grads, *kernels, dk);
            }
        }
    }

    fn take_buf(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }

    fn restore(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Option<Tensor<T>>) {
        if let Some(t) = t {
            match &mut grads[v.0] {
                // the same var was passed as two operands
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
