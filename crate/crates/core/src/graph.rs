//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` walks it once in reverse. Parameters
//! enter the tape by copy from a [`ParamStore`]; their gradients are
//! accumulated back into the store. Free variables created with
//! [`Graph::variable`] keep accumulated gradients on the graph itself.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::kernels::{self, ConvGeometry};
use crate::params::{BnUpdate, BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Probability floor used wherever a log of a probability is taken.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// The right operand repeats with period `inner`.
    Right(usize),
    /// The left operand repeats with period `inner`.
    Left(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<F: Float> {
    Constant,
    Leaf,
    Param(ParamId),
    Binary(BinOp, Var, Var, Bcast),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Scale(Var, F),
    ClampMin(Var, F),
    Reshape(Var),
    MatMul(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, [usize; 3]),
    MeanAxis(Var, [usize; 3]),
    MaxAxis(Var, [usize; 3], Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
        clamped: Vec<bool>,
    },
    KlDistill {
        teacher: Var,
        student: Var,
        inv_t: F,
        teacher_grad: bool,
        teacher_p: Vec<F>,
        student_p: Vec<F>,
        clamped: Vec<bool>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<F>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    GateCombine {
        gate: Var,
        branches: Vec<Var>,
    },
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Batch-norm running statistics passed to [`Graph::batch_norm`].
pub struct BnState<'a, F: Float> {
    pub running_mean: &'a Tensor<F>,
    pub running_var: &'a Tensor<F>,
    pub ids: (BufferId, BufferId),
    pub eps: F,
    pub momentum: F,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    leaf_grads: HashMap<usize, Tensor<F>>,
    bn_updates: Vec<BnUpdate<F>>,
    clamp_events: usize,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<[usize; 3]> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok([outer, shape[axis], inner])
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok((a.to_vec(), Bcast::Same))
    } else if nb == 1 {
        Ok((a.to_vec(), Bcast::Right(1)))
    } else if na == 1 {
        Ok((b.to_vec(), Bcast::Left(1)))
    } else if a.ends_with(b) {
        Ok((a.to_vec(), Bcast::Right(nb)))
    } else if b.ends_with(a) {
        Ok((b.to_vec(), Bcast::Left(na)))
    } else {
        Err(Error::dim(format!("shapes {a:?} and {b:?} do not broadcast")))
    }
}

/// Row-wise softmax over the last axis with max subtraction; also returns
/// the row log-sum-exp values.
fn softmax_rows<F: Float>(x: &[F], cols: usize, scale: F) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / cols;
    let mut p = vec![F::ZERO; x.len()];
    let mut lse = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v * scale));
        let mut s = F::ZERO;
        for (o, &v) in p[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v * scale - m).exp();
            s += *o;
        }
        for o in &mut p[r * cols..(r + 1) * cols] {
            *o /= s;
        }
        lse.push(m + s.ln());
    }
    (p, lse)
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: HashMap::new(), bn_updates: Vec::new(), clamp_events: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times a probability was clamped at [`PROB_FLOOR`].
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<F>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a variable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by node {} of shape {:?}",
                self.nodes.len(),
                value.shape()
            )));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Constant, false)
    }

    /// A leaf that requires gradients; its gradient accumulates on the graph.
    pub fn variable(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (shape, bc) = broadcast(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        if op == BinOp::Div {
            if let Some(i) = bv.iter().position(|&x| x == F::ZERO) {
                return Err(Error::Domain(format!("division by zero at index {i}")));
            }
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = match bc {
                Bcast::Same => (av[i], bv[i]),
                Bcast::Right(k) => (av[i], bv[i % k]),
                Bcast::Left(k) => (av[i % k], bv[i]),
            };
            out.push(match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            });
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Binary(op, a, b, bc), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x <= F::ZERO) {
            return Err(Error::Domain(format!("log of non-positive value at index {i}")));
        }
        let t = self.value(a).map(|x| x.ln());
        let ng = self.ng(&[a]);
        self.push(t, Op::Log(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > F::ZERO { x } else { F::ZERO });
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: F) -> Result<Var> {
        let hits = self.value(a).data().iter().filter(|&&x| x < floor).count();
        self.clamp_events += hits;
        let t = self.value(a).map(|x| x.max(floor));
        let ng = self.ng(&[a]);
        self.push(t, Op::ClampMin(a, floor), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<F>() / F::cast_usize(t.len());
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let dims = split_axis(self.shape(a), axis)?;
        let [outer, len, inner] = dims;
        let x = self.value(a).data();
        let mut out = vec![F::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        if mean {
            let d = F::cast_usize(len);
            out.iter_mut().for_each(|v| *v /= d);
        }
        let shape = reduced_shape(self.shape(a), axis);
        let ng = self.ng(&[a]);
        let op = if mean { Op::MeanAxis(a, dims) } else { Op::SumAxis(a, dims) };
        self.push(Tensor::from_parts(shape, out), op, ng)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn argmax_axis_raw(&self, a: Var, axis: usize) -> Result<([usize; 3], Vec<usize>)> {
        let dims = split_axis(self.shape(a), axis)?;
        let [outer, len, inner] = dims;
        let x = self.value(a).data();
        let mut idx = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if x[(o * len + j) * inner + i] > x[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                idx.push(best);
            }
        }
        Ok((dims, idx))
    }

    /// Maximum along `axis`; the gradient routes to the first maximum.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (dims, idx) = self.argmax_axis_raw(a, axis)?;
        let [_, len, inner] = dims;
        let x = self.value(a).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(flat, &j)| {
                let (o, i) = (flat / inner, flat % inner);
                x[(o * len + j) * inner + i]
            })
            .collect();
        let shape = reduced_shape(self.shape(a), axis);
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::MaxAxis(a, dims, idx), ng)
    }

    /// Index of the maximum along `axis` (ties to the lowest index), as a
    /// constant tensor.
    pub fn argmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (_, idx) = self.argmax_axis_raw(a, axis)?;
        let shape = reduced_shape(self.shape(a), axis);
        let data = idx.into_iter().map(F::cast_usize).collect();
        self.constant(Tensor::from_parts(shape, data))
    }

    fn last_dim(&self, a: Var) -> Result<usize> {
        self.shape(a).last().copied().ok_or_else(|| Error::dim("softmax of a scalar"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim(a)?;
        let (p, _) = softmax_rows(self.value(a).data(), cols, F::ONE);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, p), Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim(a)?;
        let x = self.value(a).data();
        let (_, lse) = softmax_rows(x, cols, F::ONE);
        let out = x.iter().enumerate().map(|(i, &v)| v - lse[i / cols]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), ng)
    }

    /// Fused softmax + cross-entropy, averaged over rows. `p(y)` is floored at
    /// [`PROB_FLOOR`]; each floored row increments the clamp counter.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!("logits {shape:?} vs {} labels", labels.len())));
        }
        let cols = shape[1];
        if let Some(&y) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::dim(format!("label {y} out of range for {cols} classes")));
        }
        let x = self.value(logits).data();
        let (probs, lse) = softmax_rows(x, cols, F::ONE);
        let floor = F::cast(PROB_FLOOR.ln());
        let mut loss = F::ZERO;
        let mut clamped = Vec::with_capacity(labels.len());
        for (r, &y) in labels.iter().enumerate() {
            let lp = x[r * cols + y] - lse[r];
            let hit = lp < floor;
            clamped.push(hit);
            loss -= if hit { floor } else { lp };
        }
        self.clamp_events += clamped.iter().filter(|&&c| c).count();
        loss /= F::cast_usize(labels.len());
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs, clamped },
            ng,
        )
    }

    /// Row-averaged `KL(softmax(teacher/T) || softmax(student/T))`.
    ///
    /// With `teacher_grad == false` the teacher distribution is a constant
    /// target. Student log-probabilities are floored at `ln(PROB_FLOOR)`.
    pub fn kl_distill(&mut self, teacher: Var, student: Var, temperature: F, teacher_grad: bool) -> Result<Var> {
        if temperature <= F::ZERO {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        let (st, ss) = (self.shape(teacher), self.shape(student));
        if st != ss || st.len() != 2 {
            return Err(Error::dim(format!("teacher {st:?} vs student {ss:?}")));
        }
        let (rows, cols) = (st[0], st[1]);
        let inv_t = F::ONE / temperature;
        let (pt, lse_t) = softmax_rows(self.value(teacher).data(), cols, inv_t);
        let (ps, lse_s) = softmax_rows(self.value(student).data(), cols, inv_t);
        let (zt, zs) = (self.value(teacher).data(), self.value(student).data());
        let floor = F::cast(PROB_FLOOR.ln());
        let mut clamped = vec![false; rows * cols];
        let mut total = F::ZERO;
        for i in 0..rows * cols {
            let r = i / cols;
            if pt[i] == F::ZERO {
                continue;
            }
            let log_t = zt[i] * inv_t - lse_t[r];
            let mut log_s = zs[i] * inv_t - lse_s[r];
            if log_s < floor {
                log_s = floor;
                clamped[i] = true;
            }
            total += pt[i] * (log_t - log_s);
        }
        self.clamp_events += clamped.iter().filter(|&&c| c).count();
        total /= F::cast_usize(rows);
        let ng = self.nodes[student.0].needs_grad || (teacher_grad && self.nodes[teacher.0].needs_grad);
        self.push(
            Tensor::scalar(total),
            Op::KlDistill { teacher, student, inv_t, teacher_grad, teacher_p: pt, student_p: ps, clamped },
            ng,
        )
    }

    /// Cross-correlation of an `N x C x H x W` input with a
    /// `Cout x C x k x k` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim(format!("conv2d input {si:?} weight {sw:?}")));
        }
        if si[1] != sw[1] {
            return Err(Error::dim(format!("conv2d channel mismatch: input has {}, kernel expects {}", si[1], sw[1])));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim("conv2d bias shape"));
            }
        }
        let geom = ConvGeometry {
            batch: si[0],
            in_channels: si[1],
            height: si[2],
            width: si[3],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            padding,
        };
        let (oh, ow) = match (
            ConvGeometry::out_extent(si[2], sw[2], stride, padding),
            ConvGeometry::out_extent(si[3], sw[2], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::dim(format!("conv2d output would be empty for input {si:?}"))),
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let ng = self.ng(&deps);
        self.push(
            Tensor::from_parts(vec![si[0], sw[0], oh, ow], out),
            Op::Conv2d { input, weight, bias, geom, cols },
            ng,
        )
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::dim(format!("max_pool2d k={kernel} on {s:?}")));
        }
        let (out, argmax, os) = kernels::max_pool2d(self.value(input).data(), [s[0], s[1], s[2], s[3]], kernel, stride);
        let ng = self.ng(&[input]);
        self.push(Tensor::from_parts(os.to_vec(), out), Op::MaxPool2d { input, argmax }, ng)
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool on {s:?}")));
        }
        let hw = s[2] * s[3];
        let d = F::cast_usize(hw);
        let out = self.value(input).data().chunks(hw).map(|c| c.iter().copied().sum::<F>() / d).collect();
        let ng = self.ng(&[input]);
        self.push(Tensor::from_parts(vec![s[0], s[1]], out), Op::GlobalAvgPool(input), ng)
    }

    /// Per-channel batch normalisation of an `N x C` or `N x C x H x W` input.
    /// In train mode the batch statistics are used and a running-statistics
    /// update is queued (see [`Graph::take_bn_updates`]).
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, state: BnState<'_, F>, mode: Mode) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::dim(format!("batch_norm on {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm affine parameter shape"));
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::dim(format!("batch_norm in train mode needs batch >= 2, got {n}")));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let m = n * spatial;
        let (mean, var): (Vec<F>, Vec<F>) = if train {
            let mut mean = vec![F::ZERO; c];
            let mut var = vec![F::ZERO; c];
            for ni in 0..n {
                for ch in 0..c {
                    let blk = &x[(ni * c + ch) * spatial..][..spatial];
                    mean[ch] += blk.iter().copied().sum::<F>();
                }
            }
            let mf = F::cast_usize(m);
            mean.iter_mut().for_each(|v| *v /= mf);
            for ni in 0..n {
                for ch in 0..c {
                    let blk = &x[(ni * c + ch) * spatial..][..spatial];
                    var[ch] += blk.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<F>();
                }
            }
            var.iter_mut().for_each(|v| *v /= mf);
            (mean, var)
        } else {
            (state.running_mean.data().to_vec(), state.running_var.data().to_vec())
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![F::ZERO; x.len()];
        let mut out = vec![F::ZERO; x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        if train {
            let unbias = F::cast_usize(m) / F::cast_usize(m - 1);
            self.bn_updates.push(BnUpdate {
                running_mean: state.ids.0,
                running_var: state.ids.1,
                batch_mean: mean,
                batch_var: var.iter().map(|&v| v * unbias).collect(),
                momentum: state.momentum,
            });
        }
        let ng = self.ng(&[input, gamma, beta]);
        self.push(Tensor::from_parts(s, out), Op::BatchNorm { input, gamma, beta, xhat, inv_std, train }, ng)
    }

    /// `z_e[n] = sum_i gate[n, i] * branches[i][n]` over `N x C` branch logits.
    pub fn gate_combine(&mut self, gate: Var, branches: &[Var]) -> Result<Var> {
        let sg = self.shape(gate).to_vec();
        if branches.is_empty() || sg.len() != 2 || sg[1] != branches.len() {
            return Err(Error::dim(format!("gate {sg:?} for {} branches", branches.len())));
        }
        let sb = self.shape(branches[0]).to_vec();
        if sb.len() != 2 || sb[0] != sg[0] || branches.iter().any(|&b| self.shape(b) != sb.as_slice()) {
            return Err(Error::dim("branch logits must share shape N x C matching the gate"));
        }
        let (n, c, k) = (sb[0], sb[1], branches.len());
        let gv = self.value(gate).data();
        let mut out = vec![F::ZERO; n * c];
        for (i, &b) in branches.iter().enumerate() {
            let z = self.value(b).data();
            for r in 0..n {
                let w = gv[r * k + i];
                for j in 0..c {
                    out[r * c + j] += w * z[r * c + j];
                }
            }
        }
        let mut deps = branches.to_vec();
        deps.push(gate);
        let ng = self.ng(&deps);
        self.push(Tensor::from_parts(sb, out), Op::GateCombine { gate, branches: branches.to_vec() }, ng)
    }

    /// Backpropagates from a scalar root. Gradients are added (`+=`) to the
    /// store's parameter gradients and to variable-leaf gradients on the graph.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore<F>) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(format!("backward from non-scalar of shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), F::ONE));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>], store: &mut ParamStore<F>) {
        let nodes = &self.nodes;
        let need = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, data: Vec<F>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::from_parts(nodes[v.0].value.shape().to_vec(), data)),
            }
        };
        let gd = g.data();
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Constant => {}
            Op::Leaf => {
                match self.leaf_grads.get_mut(&idx) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(idx, g);
                    }
                }
            }
            Op::Param(id) => store.grad_mut(*id).add_assign(&g),
            Op::Binary(op, a, b, bc) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let (na, nb) = (av.len(), bv.len());
                let ai = |i: usize| match bc {
                    Bcast::Left(k) => i % k,
                    _ => i,
                };
                let bi = |i: usize| match bc {
                    Bcast::Right(k) => i % k,
                    _ => i,
                };
                if need(*a) {
                    let mut da = vec![F::ZERO; na];
                    for (i, &gi) in gd.iter().enumerate() {
                        da[ai(i)] += match op {
                            BinOp::Add | BinOp::Sub => gi,
                            BinOp::Mul => gi * bv[bi(i)],
                            BinOp::Div => gi / bv[bi(i)],
                        };
                    }
                    acc(*a, da);
                }
                if need(*b) {
                    let mut db = vec![F::ZERO; nb];
                    for (i, &gi) in gd.iter().enumerate() {
                        let (x, y) = (av[ai(i)], bv[bi(i)]);
                        db[bi(i)] += match op {
                            BinOp::Add => gi,
                            BinOp::Sub => -gi,
                            BinOp::Mul => gi * x,
                            BinOp::Div => -gi * x / (y * y),
                        };
                    }
                    acc(*b, db);
                }
            }
            Op::Exp(a) => acc(*a, gd.iter().zip(out.data()).map(|(&g, &y)| g * y).collect()),
            Op::Log(a) => acc(*a, gd.iter().zip(val(*a).data()).map(|(&g, &x)| g / x).collect()),
            Op::Relu(a) => acc(
                *a,
                gd.iter().zip(val(*a).data()).map(|(&g, &x)| if x > F::ZERO { g } else { F::ZERO }).collect(),
            ),
            Op::Scale(a, c) => acc(*a, gd.iter().map(|&g| g * *c).collect()),
            Op::ClampMin(a, floor) => acc(
                *a,
                gd.iter().zip(val(*a).data()).map(|(&g, &x)| if x > *floor { g } else { F::ZERO }).collect(),
            ),
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if need(*a) {
                    let mut da = vec![F::ZERO; m * k];
                    // dA = dC * B^T
                    F::gemm(m, n, k, F::ONE, gd, n as isize, 1, val(*b).data(), 1, n as isize, F::ZERO, &mut da, k as isize, 1);
                    acc(*a, da);
                }
                if need(*b) {
                    let mut db = vec![F::ZERO; k * n];
                    // dB = A^T * dC
                    F::gemm(k, m, n, F::ONE, val(*a).data(), 1, k as isize, gd, n as isize, 1, F::ZERO, &mut db, n as isize, 1);
                    acc(*b, db);
                }
            }
            Op::SumAll(a) => acc(*a, vec![gd[0]; val(*a).len()]),
            Op::MeanAll(a) => {
                let n = val(*a).len();
                acc(*a, vec![gd[0] / F::cast_usize(n); n]);
            }
            Op::SumAxis(a, [outer, len, inner]) | Op::MeanAxis(a, [outer, len, inner]) => {
                let scale = if matches!(nodes[idx].op, Op::MeanAxis(..)) { F::ONE / F::cast_usize(*len) } else { F::ONE };
                let mut da = vec![F::ZERO; outer * len * inner];
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            da[(o * len + j) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                acc(*a, da);
            }
            Op::MaxAxis(a, [outer, len, inner], arg) => {
                let mut da = vec![F::ZERO; outer * len * inner];
                for (flat, &j) in arg.iter().enumerate() {
                    let (o, i) = (flat / inner, flat % inner);
                    da[(o * len + j) * inner + i] += gd[flat];
                }
                acc(*a, da);
            }
            Op::Softmax(a) => {
                let cols = *out.shape().last().unwrap();
                let y = out.data();
                let mut da = vec![F::ZERO; y.len()];
                for r in 0..y.len() / cols {
                    let rg = &gd[r * cols..(r + 1) * cols];
                    let ry = &y[r * cols..(r + 1) * cols];
                    let dot: F = rg.iter().zip(ry).map(|(&g, &p)| g * p).sum();
                    for j in 0..cols {
                        da[r * cols + j] = ry[j] * (rg[j] - dot);
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmax(a) => {
                let cols = *out.shape().last().unwrap();
                let y = out.data();
                let mut da = vec![F::ZERO; y.len()];
                for r in 0..y.len() / cols {
                    let rg = &gd[r * cols..(r + 1) * cols];
                    let s: F = rg.iter().copied().sum();
                    for j in 0..cols {
                        da[r * cols + j] = rg[j] - y[r * cols + j].exp() * s;
                    }
                }
                acc(*a, da);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs, clamped } => {
                let cols = probs.len() / labels.len();
                let scale = gd[0] / F::cast_usize(labels.len());
                let mut da = vec![F::ZERO; probs.len()];
                for (r, &y) in labels.iter().enumerate() {
                    if clamped[r] {
                        continue;
                    }
                    for j in 0..cols {
                        da[r * cols + j] = probs[r * cols + j] * scale;
                    }
                    da[r * cols + y] -= scale;
                }
                acc(*logits, da);
            }
            Op::KlDistill { teacher, student, inv_t, teacher_grad, teacher_p, student_p, clamped } => {
                let shape = val(*student).shape();
                let (rows, cols) = (shape[0], shape[1]);
                let scale = gd[0] * *inv_t / F::cast_usize(rows);
                if need(*student) {
                    let mut ds = vec![F::ZERO; rows * cols];
                    for r in 0..rows {
                        let o = r * cols;
                        let w: F = (0..cols).filter(|&j| !clamped[o + j]).map(|j| teacher_p[o + j]).sum();
                        for j in 0..cols {
                            let wj = if clamped[o + j] { F::ZERO } else { teacher_p[o + j] };
                            ds[o + j] = scale * (student_p[o + j] * w - wj);
                        }
                    }
                    acc(*student, ds);
                }
                if *teacher_grad && need(*teacher) {
                    let floor = F::cast(PROB_FLOOR.ln());
                    let (zt, zs) = (val(*teacher).data(), val(*student).data());
                    let mut dt = vec![F::ZERO; rows * cols];
                    for r in 0..rows {
                        let o = r * cols;
                        let lse = |z: &[F]| {
                            let m = z.iter().fold(F::neg_infinity(), |m, &v| m.max(v * *inv_t));
                            m + z.iter().map(|&v| (v * *inv_t - m).exp()).sum::<F>().ln()
                        };
                        let (lt, ls) = (lse(&zt[o..o + cols]), lse(&zs[o..o + cols]));
                        let a: Vec<F> = (0..cols)
                            .map(|j| (zt[o + j] * *inv_t - lt) - (zs[o + j] * *inv_t - ls).max(floor))
                            .collect();
                        let mean_a: F = (0..cols).map(|j| teacher_p[o + j] * a[j]).sum();
                        for j in 0..cols {
                            dt[o + j] = scale * teacher_p[o + j] * (a[j] - mean_a);
                        }
                    }
                    acc(*teacher, dt);
                }
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(gd, cols, val(*weight).data(), geom, need(*input));
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                acc(*weight, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![F::ZERO; val(*input).len()];
                for (&i, &g) in argmax.iter().zip(gd) {
                    dx[i] += g;
                }
                acc(*input, dx);
            }
            Op::GlobalAvgPool(input) => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let d = F::cast_usize(hw);
                let mut dx = Vec::with_capacity(val(*input).len());
                for &g in gd {
                    dx.extend(std::iter::repeat(g / d).take(hw));
                }
                acc(*input, dx);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let s = val(*input).shape();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let gam = val(*gamma).data();
                let mut dgamma = vec![F::ZERO; c];
                let mut dbeta = vec![F::ZERO; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let off = (ni * c + ch) * spatial;
                        for i in off..off + spatial {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if need(*input) {
                    let mut dx = vec![F::ZERO; xhat.len()];
                    let m = F::cast_usize(n * spatial);
                    for ni in 0..n {
                        for ch in 0..c {
                            let off = (ni * c + ch) * spatial;
                            for i in off..off + spatial {
                                dx[i] = if *train {
                                    gam[ch] * inv_std[ch] / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gd[i] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::GateCombine { gate, branches } => {
                let sg = val(*gate).shape();
                let (n, k) = (sg[0], sg[1]);
                let c = gd.len() / n;
                let gv = val(*gate).data();
                if need(*gate) {
                    let mut dg = vec![F::ZERO; n * k];
                    for (i, &b) in branches.iter().enumerate() {
                        let z = val(b).data();
                        for r in 0..n {
                            dg[r * k + i] = (0..c).map(|j| z[r * c + j] * gd[r * c + j]).sum();
                        }
                    }
                    acc(*gate, dg);
                }
                for (i, &b) in branches.iter().enumerate() {
                    if need(b) {
                        let mut dz = vec![F::ZERO; n * c];
                        for r in 0..n {
                            let w = gv[r * k + i];
                            for j in 0..c {
                                dz[r * c + j] = w * gd[r * c + j];
                            }
                        }
                        acc(b, dz);
                    }
                }
            }
        }
    }
}
