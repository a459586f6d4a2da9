//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] is built define-by-run: every operation eagerly computes its
//! value and records enough to replay the chain rule backwards. Training
//! code builds one graph per step, calls [`Graph::backward`], and feeds the
//! parameter gradients to the optimizer. Everything is `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter inside a [`crate::nn::ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

const GELU_COEF: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Gelu(Var),
    Rsqrt(Var),
    Clamp(Var, f64, f64),
    LogAddExp(Var, Var),
    /// x[..., C] · w[C, D] over the last axis.
    LinearMap(Var, Var),
    /// a[m, k] · b[n, k]ᵀ.
    MatMulNT(Var, Var),
    /// a[B, m, k] · b[B, k, n].
    Bmm(Var, Var),
    /// a[B, m, k] · b[B, n, k]ᵀ.
    BmmNT(Var, Var),
    Transpose2(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    SliceAxis0(Var, usize),
    StackScalars(Vec<Var>),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxLast(Var),
    /// Row-wise log-sum-exp over entries where mask != 0; empty rows give 0.
    MaskedLseRows(Var, Tensor),
    /// L2-normalize rows of a matrix: x_i / sqrt(|x_i|^2 + eps).
    RowNormalize(Var, f64),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AddBias(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves ------------------------------------------------------

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(Op::Param(id), t)
    }

    // ---- elementwise -------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("zip shape");
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn logaddexp(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::LogAddExp(a, b), |x, y| {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        })
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.nodes[a.0].value.map(f);
        self.push(op, t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a, c), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| 1.0 / x.sqrt())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- linear algebra ----------------------------------------------

    /// `x[..., C] · w[C, D]`, contracting the last axis of `x`.
    pub fn linear_map(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let c = *tx.shape().last().expect("linear_map on rank-0");
        debug_assert_eq!(tw.rank(), 2);
        debug_assert_eq!(tw.shape()[0], c, "linear_map contraction mismatch");
        let d = tw.shape()[1];
        let n = tx.numel() / c;
        let mut out = vec![0.0; n * d];
        let (xd, wd) = (tx.data(), tw.data());
        for i in 0..n {
            for k in 0..c {
                let xv = xd[i * c + k];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[k * d..(k + 1) * d];
                let orow = &mut out[i * d..(i + 1) * d];
                for j in 0..d {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        let t = Tensor::new(shape, out).expect("linear_map shape");
        self.push(Op::LinearMap(x, w), t)
    }

    /// `a[m, k] · b[n, k]ᵀ -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(ta.rank(), 2);
        debug_assert_eq!(tb.rank(), 2);
        debug_assert_eq!(ta.shape()[1], tb.shape()[1]);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.data()[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("matmul_nt shape");
        self.push(Op::MatMulNT(a, b), t)
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(ta.rank(), 3);
        debug_assert_eq!(tb.rank(), 3);
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        debug_assert_eq!(tb.shape()[0], bs);
        debug_assert_eq!(tb.shape()[1], k);
        let n = tb.shape()[2];
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            let abase = bi * m * k;
            let bbase = bi * k * n;
            let obase = bi * m * n;
            for i in 0..m {
                for p in 0..k {
                    let av = ta.data()[abase + i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[obase + i * n + j] += av * tb.data()[bbase + p * n + j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![bs, m, n], out).expect("bmm shape");
        self.push(Op::Bmm(a, b), t)
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(ta.rank(), 3);
        debug_assert_eq!(tb.rank(), 3);
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        debug_assert_eq!(tb.shape()[0], bs);
        debug_assert_eq!(tb.shape()[2], k);
        let n = tb.shape()[1];
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            for i in 0..m {
                let arow = &ta.data()[bi * m * k + i * k..][..k];
                for j in 0..n {
                    let brow = &tb.data()[bi * n * k + j * k..][..k];
                    out[bi * m * n + i * n + j] =
                        arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let t = Tensor::new(vec![bs, m, n], out).expect("bmm_nt shape");
        self.push(Op::BmmNT(a, b), t)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        debug_assert_eq!(ta.rank(), 2);
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out).expect("transpose2 shape");
        self.push(Op::Transpose2(a), t)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self.nodes[a.0]
            .value
            .reshaped(shape)
            .expect("reshape numel mismatch");
        self.push(Op::Reshape(a), t)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            debug_assert_eq!(s[..axis], first[..axis]);
            debug_assert_eq!(s[axis + 1..], first[axis + 1..]);
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis];
                let start = o * len * inner;
                out.extend_from_slice(&t.data()[start..start + len * inner]);
            }
        }
        let t = Tensor::new(shape, out).expect("concat shape");
        self.push(Op::Concat(parts.to_vec(), axis), t)
    }

    /// Select index `i` along axis 0, dropping that axis.
    pub fn slice_axis0(&mut self, a: Var, i: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape()[1..].to_vec();
        let block: usize = shape.iter().product();
        let data = ta.data()[i * block..(i + 1) * block].to_vec();
        let t = Tensor::new(shape, data).expect("slice shape");
        self.push(Op::SliceAxis0(a, i), t)
    }

    /// Pack rank-0 vars into a 1-D tensor.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().map(|&p| self.nodes[p.0].value.item()).collect();
        let t = Tensor::new(vec![parts.len()], data).expect("stack shape");
        self.push(Op::StackScalars(parts.to_vec()), t)
    }

    // ---- reductions ----------------------------------------------------

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += ta.data()[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in out.iter_mut() {
            *v *= scale;
        }
        let t = Tensor::new(out_shape, out).expect("mean_axis shape");
        self.push(Op::MeanAxis(a, axis), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(s))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let last = *ta.shape().last().expect("softmax on rank-0");
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("softmax shape");
        self.push(Op::SoftmaxLast(a), t)
    }

    /// Per-row `ln Σ_j exp(x_ij)` restricted to entries with `mask != 0`.
    /// Rows whose mask is empty produce 0 and receive no gradient.
    pub fn masked_lse_rows(&mut self, a: Var, mask: Tensor) -> Var {
        let ta = &self.nodes[a.0].value;
        debug_assert_eq!(ta.rank(), 2);
        debug_assert_eq!(ta.shape(), mask.shape());
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mrow = &mask.data()[i * n..(i + 1) * n];
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] != 0.0 && row[j] > hi {
                    hi = row[j];
                }
            }
            if hi == f64::NEG_INFINITY {
                out[i] = 0.0;
                continue;
            }
            let z: f64 = (0..n)
                .filter(|&j| mrow[j] != 0.0)
                .map(|j| (row[j] - hi).exp())
                .sum();
            out[i] = hi + z.ln();
        }
        let t = Tensor::new(vec![m], out).expect("lse shape");
        self.push(Op::MaskedLseRows(a, mask), t)
    }

    /// L2-normalize each row: `x_i / sqrt(|x_i|^2 + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        debug_assert_eq!(ta.rank(), 2);
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = ta.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let sq: f64 = row.iter().map(|v| v * v).sum();
            let inv = 1.0 / (sq + eps).sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("row_normalize shape");
        self.push(Op::RowNormalize(a, eps), t)
    }

    // ---- convolutions --------------------------------------------------

    /// 1-D convolution over `x[B, T, Ci]` with kernel `w[Co, Ci, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Var {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        debug_assert_eq!(tx.rank(), 3);
        debug_assert_eq!(tw.rank(), 3);
        let (bs, t_in, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (co, wci, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        debug_assert_eq!(ci, wci, "conv1d channel mismatch");
        let span = dilation * (k - 1) + 1;
        assert!(
            t_in + 2 * pad >= span,
            "conv1d: input length {t_in} too short for kernel span {span}"
        );
        let t_out = (t_in + 2 * pad - span) / stride + 1;
        let mut out = vec![0.0; bs * t_out * co];
        if let Some(bv) = b {
            let tb = &self.nodes[bv.0].value;
            debug_assert_eq!(tb.shape(), &[co]);
            for chunk in out.chunks_mut(co) {
                chunk.copy_from_slice(tb.data());
            }
        }
        for bi in 0..bs {
            for to in 0..t_out {
                let obase = (bi * t_out + to) * co;
                for kk in 0..k {
                    let ti = (to * stride + kk * dilation) as isize - pad as isize;
                    if ti < 0 || ti as usize >= t_in {
                        continue;
                    }
                    let xbase = (bi * t_in + ti as usize) * ci;
                    for c_in in 0..ci {
                        let xv = tx.data()[xbase + c_in];
                        if xv == 0.0 {
                            continue;
                        }
                        for c_out in 0..co {
                            out[obase + c_out] += xv * tw.data()[(c_out * ci + c_in) * k + kk];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bs, t_out, co], out).expect("conv1d shape");
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            },
            t,
        )
    }

    /// Transposed 1-D convolution over `x[B, T, Ci]` with kernel `w[Ci, Co, K]`.
    pub fn conv_t1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        debug_assert_eq!(tx.rank(), 3);
        debug_assert_eq!(tw.rank(), 3);
        let (bs, t_in, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (wci, co, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        debug_assert_eq!(ci, wci, "conv_t1d channel mismatch");
        let t_out = (t_in - 1) * stride + k - 2 * pad;
        let mut out = vec![0.0; bs * t_out * co];
        if let Some(bv) = b {
            let tb = &self.nodes[bv.0].value;
            debug_assert_eq!(tb.shape(), &[co]);
            for chunk in out.chunks_mut(co) {
                chunk.copy_from_slice(tb.data());
            }
        }
        for bi in 0..bs {
            for ti in 0..t_in {
                let xbase = (bi * t_in + ti) * ci;
                for kk in 0..k {
                    let to = (ti * stride + kk) as isize - pad as isize;
                    if to < 0 || to as usize >= t_out {
                        continue;
                    }
                    let obase = (bi * t_out + to as usize) * co;
                    for c_in in 0..ci {
                        let xv = tx.data()[xbase + c_in];
                        if xv == 0.0 {
                            continue;
                        }
                        for c_out in 0..co {
                            out[obase + c_out] += xv * tw.data()[(c_in * co + c_out) * k + kk];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bs, t_out, co], out).expect("conv_t1d shape");
        self.push(Op::ConvT1d { x, w, b, stride, pad }, t)
    }

    /// Broadcast-add `b[C]` over the last axis of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let tb = &self.nodes[b.0].value;
        let c = *tx.shape().last().expect("add_bias on rank-0");
        debug_assert_eq!(tb.shape(), &[c]);
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (v, bv) in chunk.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("add_bias shape");
        self.push(Op::AddBias(x, b), t)
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagate from a rank-0 `loss` node. Gradients of all reachable
    /// nodes (including every bound parameter) are accumulated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Collect accumulated parameter gradients, summed per [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    if let Some(slot) = out.iter_mut().find(|(id, _)| *id == pid) {
                        for (a, b) in slot.1.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    } else {
                        out.push((pid, g.clone()));
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[v.0] {
                Some(g) => {
                    debug_assert_eq!(g.shape(), delta.shape());
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                let da = zip_map(gy, val(*b), |g, y| g * y);
                let db = zip_map(gy, val(*a), |g, x| g * x);
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::Neg(a) => acc(*a, gy.map(|v| -v), grads),
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, gy.map(|v| c * v), grads)
            }
            Op::AddConst(a, _) => acc(*a, gy.clone(), grads),
            Op::Exp(a) => acc(*a, zip_map(gy, &node.value, |g, y| g * y), grads),
            Op::Ln(a) => acc(*a, zip_map(gy, val(*a), |g, x| g / x), grads),
            Op::Sigmoid(a) => acc(*a, zip_map(gy, &node.value, |g, y| g * y * (1.0 - y)), grads),
            Op::Gelu(a) => acc(*a, zip_map(gy, val(*a), |g, x| g * gelu_grad(x)), grads),
            Op::Rsqrt(a) => acc(
                *a,
                zip_map(gy, &node.value, |g, y| -0.5 * g * y * y * y),
                grads,
            ),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    zip_map(gy, val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                    grads,
                )
            }
            Op::LogAddExp(a, b) => {
                let da = zip3_map(gy, val(*a), &node.value, |g, x, y| g * (x - y).exp());
                let db = zip3_map(gy, val(*b), &node.value, |g, x, y| g * (x - y).exp());
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::LinearMap(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let c = tw.shape()[0];
                let d = tw.shape()[1];
                let n = tx.numel() / c;
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                for i in 0..n {
                    for j in 0..d {
                        let g = gy.data()[i * d + j];
                        if g == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            dx[i * c + k] += g * tw.data()[k * d + j];
                            dw[k * d + j] += g * tx.data()[i * c + k];
                        }
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap(), grads);
                acc(*w, Tensor::new(tw.shape().to_vec(), dw).unwrap(), grads);
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = gy.data()[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += g * tb.data()[j * k + p];
                            db[j * k + p] += g * ta.data()[i * k + p];
                        }
                    }
                }
                acc(*a, Tensor::new(vec![m, k], da).unwrap(), grads);
                acc(*b, Tensor::new(vec![n, k], db).unwrap(), grads);
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for bi in 0..bs {
                    for i in 0..m {
                        for j in 0..n {
                            let g = gy.data()[(bi * m + i) * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[(bi * m + i) * k + p] += g * tb.data()[(bi * k + p) * n + j];
                                db[(bi * k + p) * n + j] += g * ta.data()[(bi * m + i) * k + p];
                            }
                        }
                    }
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap(), grads);
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap(), grads);
            }
            Op::BmmNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[1];
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for bi in 0..bs {
                    for i in 0..m {
                        for j in 0..n {
                            let g = gy.data()[(bi * m + i) * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[(bi * m + i) * k + p] += g * tb.data()[(bi * n + j) * k + p];
                                db[(bi * n + j) * k + p] += g * ta.data()[(bi * m + i) * k + p];
                            }
                        }
                    }
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap(), grads);
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap(), grads);
            }
            Op::Transpose2(a) => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = gy.data()[i * m + j];
                    }
                }
                acc(*a, Tensor::new(vec![m, n], da).unwrap(), grads);
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                acc(*a, gy.reshaped(shape).unwrap(), grads);
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offsets = Vec::with_capacity(parts.len());
                let mut total = 0usize;
                for &p in parts {
                    offsets.push(total);
                    total += val(p).shape()[axis];
                }
                for (pi, &p) in parts.iter().enumerate() {
                    let tp = val(p);
                    let len = tp.shape()[axis];
                    let mut dp = vec![0.0; tp.numel()];
                    for o in 0..outer {
                        let src = (o * total + offsets[pi]) * inner;
                        let dst = o * len * inner;
                        dp[dst..dst + len * inner]
                            .copy_from_slice(&gy.data()[src..src + len * inner]);
                    }
                    acc(p, Tensor::new(tp.shape().to_vec(), dp).unwrap(), grads);
                }
            }
            Op::SliceAxis0(a, i) => {
                let ta = val(*a);
                let block = ta.numel() / ta.shape()[0];
                let mut da = vec![0.0; ta.numel()];
                da[i * block..(i + 1) * block].copy_from_slice(gy.data());
                acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap(), grads);
            }
            Op::StackScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, Tensor::scalar(gy.data()[i]), grads);
                }
            }
            Op::MeanAxis(a, axis) => {
                let ta = val(*a);
                let shape = ta.shape();
                let axis = *axis;
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = 1.0 / len as f64;
                let mut da = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            da[base + i] = gy.data()[o * inner + i] * scale;
                        }
                    }
                }
                acc(*a, Tensor::new(shape.to_vec(), da).unwrap(), grads);
            }
            Op::SumAll(a) => {
                let g = gy.item();
                acc(*a, Tensor::full(val(*a).shape().to_vec(), g), grads);
            }
            Op::MeanAll(a) => {
                let ta = val(*a);
                let g = gy.item() / ta.numel() as f64;
                acc(*a, Tensor::full(ta.shape().to_vec(), g), grads);
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let last = *y.shape().last().unwrap();
                let mut da = vec![0.0; y.numel()];
                for (r, (yrow, grow)) in y
                    .data()
                    .chunks(last)
                    .zip(gy.data().chunks(last))
                    .enumerate()
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(x, g)| x * g).sum();
                    let drow = &mut da[r * last..(r + 1) * last];
                    for j in 0..last {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), da).unwrap(), grads);
            }
            Op::MaskedLseRows(a, mask) => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let lse = node.value.data()[i];
                    let g = gy.data()[i];
                    if g == 0.0 {
                        continue;
                    }
                    let any = mask.data()[i * n..(i + 1) * n].iter().any(|&v| v != 0.0);
                    if !any {
                        continue;
                    }
                    for j in 0..n {
                        if mask.data()[i * n + j] != 0.0 {
                            da[i * n + j] = g * (ta.data()[i * n + j] - lse).exp();
                        }
                    }
                }
                acc(*a, Tensor::new(vec![m, n], da).unwrap(), grads);
            }
            Op::RowNormalize(a, eps) => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let xrow = &ta.data()[i * n..(i + 1) * n];
                    let grow = &gy.data()[i * n..(i + 1) * n];
                    let sq: f64 = xrow.iter().map(|v| v * v).sum::<f64>() + eps;
                    let inv = 1.0 / sq.sqrt();
                    let dot: f64 = grow.iter().zip(xrow).map(|(g, x)| g * x).sum();
                    let inv3 = inv * inv * inv;
                    for j in 0..n {
                        da[i * n + j] = inv * grow[j] - inv3 * dot * xrow[j];
                    }
                }
                acc(*a, Tensor::new(vec![m, n], da).unwrap(), grads);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (bs, t_in, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, _, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let t_out = node.value.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                for bi in 0..bs {
                    for to in 0..t_out {
                        let gbase = (bi * t_out + to) * co;
                        for kk in 0..k {
                            let ti = (to * stride + kk * dilation) as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t_in {
                                continue;
                            }
                            let xbase = (bi * t_in + ti as usize) * ci;
                            for c_out in 0..co {
                                let g = gy.data()[gbase + c_out];
                                if g == 0.0 {
                                    continue;
                                }
                                for c_in in 0..ci {
                                    let widx = (c_out * ci + c_in) * k + kk;
                                    dx[xbase + c_in] += g * tw.data()[widx];
                                    dw[widx] += g * tx.data()[xbase + c_in];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap(), grads);
                acc(*w, Tensor::new(tw.shape().to_vec(), dw).unwrap(), grads);
                if let Some(bv) = b {
                    let mut db = vec![0.0; co];
                    for chunk in gy.data().chunks(co) {
                        for (d, g) in db.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    acc(*bv, Tensor::new(vec![co], db).unwrap(), grads);
                }
            }
            Op::ConvT1d { x, w, b, stride, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let (bs, t_in, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (_, co, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let t_out = node.value.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                for bi in 0..bs {
                    for ti in 0..t_in {
                        let xbase = (bi * t_in + ti) * ci;
                        for kk in 0..k {
                            let to = (ti * stride + kk) as isize - *pad as isize;
                            if to < 0 || to as usize >= t_out {
                                continue;
                            }
                            let gbase = (bi * t_out + to as usize) * co;
                            for c_in in 0..ci {
                                let xv = tx.data()[xbase + c_in];
                                for c_out in 0..co {
                                    let g = gy.data()[gbase + c_out];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    let widx = (c_in * co + c_out) * k + kk;
                                    dx[xbase + c_in] += g * tw.data()[widx];
                                    dw[widx] += g * xv;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap(), grads);
                acc(*w, Tensor::new(tw.shape().to_vec(), dw).unwrap(), grads);
                if let Some(bv) = b {
                    let mut db = vec![0.0; co];
                    for chunk in gy.data().chunks(co) {
                        for (d, g) in db.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    acc(*bv, Tensor::new(vec![co], db).unwrap(), grads);
                }
            }
            Op::AddBias(x, b) => {
                let c = *val(*b).shape().last().unwrap();
                acc(*x, gy.clone(), grads);
                let mut db = vec![0.0; c];
                for chunk in gy.data().chunks(c) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                acc(*b, Tensor::new(vec![c], db).unwrap(), grads);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

// ---- common composites --------------------------------------------------

/// Σ a⊙b as a rank-0 var.
pub fn dot(g: &mut Graph, a: Var, b: Var) -> Var {
    let p = g.mul(a, b);
    g.sum_all(p)
}

/// Cosine similarity of two equally-shaped tensors flattened to vectors.
pub fn cosine(g: &mut Graph, a: Var, b: Var, eps: f64) -> Var {
    let num = dot(g, a, b);
    let na = dot(g, a, a);
    let nb = dot(g, b, b);
    let prod = g.mul(na, nb);
    let shifted = g.add_const(prod, eps);
    let inv = g.rsqrt(shifted);
    g.mul(num, inv)
}

/// Mean binary cross-entropy of probabilities against per-element 0/1
/// targets, with the probabilities clamped away from {0, 1}.
pub fn bce_mean(g: &mut Graph, probs: Var, targets: Var, clamp_eps: f64) -> Var {
    let p = g.clamp(probs, clamp_eps, 1.0 - clamp_eps);
    let lp = g.ln(p);
    let t1 = g.mul(targets, lp);
    let np = g.neg(p);
    let one_minus = g.add_const(np, 1.0);
    let lq = g.ln(one_minus);
    let nt = g.neg(targets);
    let one_minus_t = g.add_const(nt, 1.0);
    let t0 = g.mul(one_minus_t, lq);
    let s = g.add(t1, t0);
    let m = g.mean_all(s);
    g.scale(m, -1.0)
}

/// Mean squared error over all entries.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check: builds the graph twice per perturbed entry.
    fn check_grads(
        inputs: &[Tensor],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
            let loss = build(&mut g, &vars);
            g.value(loss).item()
        };

        let h = 1e-5;
        for (vi, t) in inputs.iter().enumerate() {
            let ad = grads
                .wrt(vars[vi])
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            for e in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let diff = (ad[e] - fd).abs();
                let denom = ad[e].abs().max(fd.abs()).max(1.0);
                assert!(
                    diff / denom < tol,
                    "input {vi} elem {e}: ad={} fd={fd}",
                    ad[e]
                );
            }
        }
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_grads(&[a, b], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let e = g.gelu(m);
            let sc = g.scale(e, 0.7);
            let t = g.sigmoid(sc);
            g.mean_all(t)
        }, 1e-6);
    }

    #[test]
    fn grad_exp_ln_rsqrt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = randn(&mut rng, &[5]);
        for v in a.data_mut() {
            *v = v.abs() + 0.5;
        }
        check_grads(&[a], |g, v| {
            let e = g.exp(v[0]);
            let l = g.ln(e);
            let r = g.rsqrt(l);
            g.sum_all(r)
        }, 1e-6);
    }

    #[test]
    fn grad_logaddexp_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[6]);
        let b = randn(&mut rng, &[6]);
        check_grads(&[a, b], |g, v| {
            let l = g.logaddexp(v[0], v[1]);
            let c = g.clamp(l, -0.4, 0.9);
            g.sum_all(c)
        }, 1e-5);
    }

    #[test]
    fn grad_linear_map_2d_and_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x2 = randn(&mut rng, &[4, 3]);
        let w = randn(&mut rng, &[3, 5]);
        check_grads(&[x2, w.clone()], |g, v| {
            let y = g.linear_map(v[0], v[1]);
            let s = g.gelu(y);
            g.mean_all(s)
        }, 1e-6);
        let x3 = randn(&mut rng, &[2, 4, 3]);
        check_grads(&[x3, w], |g, v| {
            let y = g.linear_map(v[0], v[1]);
            g.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn grad_matmul_nt_bmm_bmm_nt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[5, 4]);
        check_grads(&[a, b], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            let s = g.sigmoid(y);
            g.sum_all(s)
        }, 1e-6);
        let a3 = randn(&mut rng, &[2, 3, 4]);
        let b3 = randn(&mut rng, &[2, 4, 2]);
        check_grads(&[a3.clone(), b3], |g, v| {
            let y = g.bmm(v[0], v[1]);
            g.mean_all(y)
        }, 1e-6);
        let c3 = randn(&mut rng, &[2, 5, 4]);
        check_grads(&[a3, c3], |g, v| {
            let y = g.bmm_nt(v[0], v[1]);
            let e = g.gelu(y);
            g.mean_all(e)
        }, 1e-6);
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, &[2, 6]);
        let b = randn(&mut rng, &[2, 3]);
        check_grads(&[a, b], |g, v| {
            let t = g.transpose2(v[0]);
            let r = g.reshape(t, vec![4, 3]);
            let c = g.concat(&[r, v[1]], 0);
            let s = g.slice_axis0(c, 2);
            let sum1 = g.sum_all(s);
            let m = g.mean_all(c);
            let st = g.stack_scalars(&[sum1, m]);
            let sq = g.mul(st, st);
            g.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_reductions_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[2, 3, 4]);
        check_grads(&[a], |g, v| {
            let m = g.mean_axis(v[0], 1);
            let s = g.softmax_last(m);
            let l = g.ln(s);
            g.mean_all(l)
        }, 1e-5);
    }

    #[test]
    fn grad_masked_lse_and_row_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, &[3, 4]);
        let mask = Tensor::new(
            vec![3, 4],
            vec![1., 0., 1., 1., 0., 0., 0., 0., 1., 1., 1., 0.],
        )
        .unwrap();
        check_grads(&[a], move |g, v| {
            let n = g.row_normalize(v[0], 1e-12);
            let l = g.masked_lse_rows(n, mask.clone());
            g.sum_all(l)
        }, 1e-5);
    }

    #[test]
    fn grad_conv1d_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // same-padded dilated conv
        let x = randn(&mut rng, &[2, 8, 3]);
        let w = randn(&mut rng, &[4, 3, 3]);
        let b = randn(&mut rng, &[4]);
        check_grads(&[x.clone(), w, b.clone()], |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), 1, 2, 2);
            let a = g.gelu(y);
            g.mean_all(a)
        }, 1e-5);
        // strided downsampling conv
        let w2 = randn(&mut rng, &[4, 3, 4]);
        check_grads(&[x, w2, b], |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), 2, 1, 1);
            g.sum_all(y)
        }, 1e-5);
    }

    #[test]
    fn grad_conv_t1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[2, 4, 3]);
        let w = randn(&mut rng, &[3, 5, 4]);
        let b = randn(&mut rng, &[5]);
        check_grads(&[x, w, b], |g, v| {
            let y = g.conv_t1d(v[0], v[1], Some(v[2]), 2, 1);
            let s = g.sigmoid(y);
            g.mean_all(s)
        }, 1e-5);
    }

    #[test]
    fn grad_add_bias_and_composites() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4]);
        let y = randn(&mut rng, &[3, 4]);
        check_grads(&[x, b, y], |g, v| {
            let z = g.add_bias(v[0], v[1]);
            let c = cosine(g, z, v[2], 1e-12);
            let m = mse(g, z, v[2]);
            let s = g.add(c, m);
            g.scale(s, 1.0)
        }, 1e-5);
    }

    #[test]
    fn grad_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = randn(&mut rng, &[6]);
        for v in p.data_mut() {
            *v = 0.5 + 0.4 * *v; // keep strictly inside the clamp band
        }
        let t = Tensor::new(vec![6], vec![1., 0., 1., 1., 0., 1.]).unwrap();
        check_grads(&[p], move |g, v| {
            let targets = g.input(t.clone());
            bce_mean(g, v[0], targets, 1e-7)
        }, 1e-5);
    }

    #[test]
    fn conv1d_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 64, 3]));
        let w = g.input(Tensor::zeros(vec![8, 3, 4]));
        let y = g.conv1d(x, w, None, 2, 1, 1);
        assert_eq!(g.value(y).shape(), &[1, 32, 8]);
        let w2 = g.input(Tensor::zeros(vec![8, 3, 3]));
        let y2 = g.conv1d(x, w2, None, 1, 4, 4);
        assert_eq!(g.value(y2).shape(), &[1, 64, 8]);
        let xt = g.input(Tensor::zeros(vec![1, 32, 8]));
        let wt = g.input(Tensor::zeros(vec![8, 3, 4]));
        let yt = g.conv_t1d(xt, wt, None, 2, 1);
        assert_eq!(g.value(yt).shape(), &[1, 64, 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn param_grads_accumulate_across_bindings() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let p1 = g.param(ParamId(7), t.clone());
        let p2 = g.param(ParamId(7), t);
        let s = g.add(p1, p2);
        let loss = g.sum_all(s);
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[2.0, 2.0]);
    }
}
