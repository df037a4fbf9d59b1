//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations append nodes to a [`Tape`] in execution order, so the node list
//! is always topologically sorted. [`Tape::backward`] walks it in reverse and
//! accumulates adjoints into every leaf that requires a gradient.

use super::array::Tensor;
use super::kernels::{self, Exec, MatRef};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a named parameter in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        shared_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SumAll(Var),
    SumAxis0(Var),
    Reshape(Var),
    SwapAxes12(Var),
    /// Input read as `dims`, axes 1 and 2 swapped, output reshaped.
    SwapReshape {
        x: Var,
        dims: [usize; 4],
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
    exec: Exec,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            exec: Exec::current(),
        }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            exec,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = self
            .op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::Linear { x, w, bias } => vec![*x, *w, *bias],
            Op::ScaleRows { x, w } => vec![*x, *w],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::GatherElems { x, .. }
            | Op::SwapReshape { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { student, .. } => vec![*student],
            Op::Gelu(x)
            | Op::Softmax(x)
            | Op::CausalSoftmax(x)
            | Op::SumAll(x)
            | Op::SumAxis0(x)
            | Op::Reshape(x)
            | Op::SwapAxes12(x) => vec![*x],
            Op::ConcatRows(xs) => xs.clone(),
        }
    }

    /// Records an input tensor. Leaves with `requires_grad` accumulate
    /// gradients across [`Tape::backward`] calls.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable parameter and remembers which store entry it is.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.push((id, v));
        v
    }

    /// Records a parameter whose gradient is not wanted (e.g. a frozen teacher).
    pub fn frozen_param(&mut self, value: &Tensor<T>) -> Var {
        self.leaf(value.clone(), false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter bindings made with [`Tape::param`] and their gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params
            .iter()
            .map(|&(id, v)| (id, self.grads[v.0].as_ref()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ----------------------------------------------------------------------
    // Forward operations
    // ----------------------------------------------------------------------

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` where `b` is stored as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::ZERO; m * n];
        let bref = MatRef::new(self.value(b).data(), sb[0], sb[1]);
        let bref = if trans_b { bref.t() } else { bref };
        kernels::matmul_into(
            self.exec,
            &mut out,
            MatRef::new(self.value(a).data(), m, k),
            bref,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch: 1,
                shared_b: true,
            },
            "matmul",
        )
    }

    /// Batched product over the leading axis: `a [B×m×k] · b [B×k×n]`, or
    /// `a · bᵀ` per batch with `b [B×n×k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            kernels::rows_mut(self.exec, &mut out, m * n, |i, o| {
                let aref = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                let bref = MatRef::new(&bv[i * k * n..(i + 1) * k * n], sb[1], sb[2]);
                let bref = if trans_b { bref.t() } else { bref };
                kernels::matmul_into(Exec::Sequential, o, aref, bref, false);
            });
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b: false,
            },
            "bmm",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a vector to every row (broadcast over all leading axes).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.ndim() != 1 || tb.numel() != c {
            return Err(shape_err("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        let bd = tb.data();
        kernels::rows_mut(self.exec, &mut out, c, |_, row| {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        });
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::AddRow { x, bias }, "add_row")
    }

    /// Affine map `x [m×k] · w [k×n] + bias [n]` as a single node.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(shape_err("linear", sx, sw));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        if sb != [n] {
            return Err(shape_err("linear", sw, sb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::matmul_into(
            self.exec,
            &mut out,
            MatRef::new(self.value(x).data(), m, k),
            MatRef::new(self.value(w).data(), k, n),
            true,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::Linear { x, w, bias }, "linear")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::Scale { x, c }, "scale")
    }

    /// Exact GELU: `x·Φ(x)` with Φ the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        kernels::elems_mut(self.exec, &mut out, |_, v| *v = gelu_value(*v));
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::Gelu(x), "gelu")
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.data().to_vec();
        kernels::rows_mut(self.exec, &mut out, c, |_, row| softmax_in_place(row));
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(x), "softmax")
    }

    /// Softmax over the last axis of `[.., s, s]` scores where query row `t`
    /// only sees keys `0..=t`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let sh = tx.shape();
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(shape_err("causal_softmax", sh, &[]));
        }
        let s = sh[sh.len() - 1];
        let mut out = tx.data().to_vec();
        kernels::rows_mut(self.exec, &mut out, s, |r, row| {
            let t = r % s;
            softmax_in_place(&mut row[..=t]);
            row[t + 1..].iter_mut().for_each(|v| *v = T::ZERO);
        });
        let value = Tensor::new(sh.to_vec(), out)?;
        self.push(value, Op::CausalSoftmax(x), "causal_softmax")
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if c == 0 {
            return Err(shape_err("layer_norm", tx.shape(), &[]));
        }
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.ndim() != 1 || tp.numel() != c {
                return Err(shape_err("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let rows = tx.numel() / c;
        let eps = T::from_f64(eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut normed = tx.data().to_vec();
        let mut rstd = vec![T::ZERO; rows];
        {
            let stats: Vec<T> = kernels::map_indexed(self.exec, rows, |r| {
                let row = &tx.data()[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                T::ONE / (var + eps).sqrt()
            });
            rstd.copy_from_slice(&stats);
            kernels::rows_mut(self.exec, &mut normed, c, |r, row| {
                let mean = row.iter().copied().sum::<T>() * inv_c;
                for v in row.iter_mut() {
                    *v = (*v - mean) * stats[r];
                }
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = normed.clone();
        kernels::rows_mut(self.exec, &mut out, c, |_, row| {
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        });
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.ndim() != 2 || tl.shape()[0] != targets.len() {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let v = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target vocabulary",
                index: bad,
                bound: v,
            });
        }
        let n = targets.len();
        let mut probs = tl.data().to_vec();
        let nll: Vec<f64> = {
            let logits_data = tl.data();
            kernels::rows_mut(self.exec, &mut probs, v, |_, row| softmax_in_place(row));
            kernels::map_indexed(self.exec, n, |i| {
                let row = &logits_data[i * v..(i + 1) * v];
                log_sum_exp(row) - row[targets[i]].to_f64()
            })
        };
        let mean = nll.iter().sum::<f64>() / n.max(1) as f64;
        self.push(
            Tensor::scalar(T::from_f64(mean)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Row-averaged `KL(softmax(teacher) ‖ softmax(student))`; the teacher
    /// logits are constants.
    pub fn kl_div(&mut self, student: Var, teacher_logits: &Tensor<T>) -> Result<Var> {
        let ts = self.value(student);
        if ts.shape() != teacher_logits.shape() || ts.ndim() != 2 {
            return Err(shape_err("kl_div", ts.shape(), teacher_logits.shape()));
        }
        let v = ts.shape()[1];
        let n = ts.shape()[0];
        let mut q = ts.data().to_vec();
        let mut p = teacher_logits.data().to_vec();
        kernels::rows_mut(self.exec, &mut q, v, |_, row| softmax_in_place(row));
        kernels::rows_mut(self.exec, &mut p, v, |_, row| softmax_in_place(row));
        let sd = ts.data();
        let td = teacher_logits.data();
        let per_row: Vec<f64> = kernels::map_indexed(self.exec, n, |i| {
            let (zs, zt) = (&sd[i * v..(i + 1) * v], &td[i * v..(i + 1) * v]);
            let (lse_s, lse_t) = (log_sum_exp(zs), log_sum_exp(zt));
            zs.iter()
                .zip(zt)
                .map(|(&s, &t)| {
                    let log_p = t.to_f64() - lse_t;
                    let p = log_p.exp();
                    if p == 0.0 {
                        0.0
                    } else {
                        p * (log_p - (s.to_f64() - lse_s))
                    }
                })
                .sum::<f64>()
        });
        let mean = per_row.iter().sum::<f64>() / n.max(1) as f64;
        self.push(
            Tensor::scalar(T::from_f64(mean)),
            Op::KlDiv {
                student,
                teacher_probs: p,
                student_probs: q,
            },
            "kl_div",
        )
    }

    /// Selects rows of `x [R×c]` (embedding lookup, expert dispatch).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return Err(shape_err("gather_rows", tx.shape(), &[]));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let mut out = vec![T::ZERO; idx.len() * c];
        let src = tx.data();
        kernels::rows_mut(self.exec, &mut out, c, |i, row| {
            row.copy_from_slice(&src[idx[i] * c..(idx[i] + 1) * c])
        });
        let value = Tensor::new(vec![idx.len(), c], out)?;
        self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Sums rows of `x [M×c]` into a zero `[n×c]` output at `idx`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || tx.shape()[0] != idx.len() {
            return Err(shape_err("scatter_add_rows", tx.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "scatter_add_rows",
                index: bad,
                bound: n,
            });
        }
        let c = tx.shape()[1];
        let mut out = vec![T::ZERO; n * c];
        for (i, &dst) in idx.iter().enumerate() {
            for (o, &v) in out[dst * c..(dst + 1) * c]
                .iter_mut()
                .zip(&tx.data()[i * c..(i + 1) * c])
            {
                *o += v;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push(
            value,
            Op::ScatterAddRows {
                x,
                idx: idx.to_vec(),
            },
            "scatter_add_rows",
        )
    }

    /// Multiplies row `i` of `x [M×c]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 1 || tw.numel() != tx.shape()[0] {
            return Err(shape_err("scale_rows", tx.shape(), tw.shape()));
        }
        let c = tx.shape()[1];
        let mut out = tx.data().to_vec();
        let wd = tw.data();
        kernels::rows_mut(self.exec, &mut out, c, |i, row| {
            row.iter_mut().for_each(|v| *v *= wd[i])
        });
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::ScaleRows { x, w }, "scale_rows")
    }

    /// Picks elements of the flattened `x` into a 1-D tensor.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.numel()) {
            return Err(Error::Index {
                what: "gather_elems",
                index: bad,
                bound: tx.numel(),
            });
        }
        let data = idx.iter().map(|&i| tx.data()[i]).collect();
        let value = Tensor::new(vec![idx.len()], data)?;
        self.push(
            value,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            "gather_elems",
        )
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let c = self.shape(first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.ndim() != 2 || t.shape()[1] != c {
                return Err(shape_err("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push(value, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the leading axis: `[r × rest..] -> [rest..]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() < 1 {
            return Err(shape_err("sum_axis0", tx.shape(), &[]));
        }
        let rest: Vec<usize> = tx.shape()[1..].to_vec();
        let c: usize = rest.iter().product();
        let mut out = vec![T::ZERO; c];
        for row in tx.data().chunks(c.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::new(rest, out)?;
        self.push(value, Op::SumAxis0(x), "sum_axis0")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let sh = tx.shape();
        if sh.len() != 4 {
            return Err(shape_err("swap_axes12", sh, &[]));
        }
        let out = swap12(tx.data(), sh[0], sh[1], sh[2], sh[3]);
        let value = Tensor::new(vec![sh[0], sh[2], sh[1], sh[3]], out)?;
        self.push(value, Op::SwapAxes12(x), "swap_axes12")
    }

    /// Reads `x` as `[b, s, h, d]` and returns `[b·h, s, d]`: splits the
    /// model width into attention heads.
    pub fn split_heads(&mut self, x: Var, b: usize, s: usize, h: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if b * s * h == 0 || !n.is_multiple_of(b * s * h) {
            return Err(shape_err("split_heads", self.shape(x), &[b, s, h]));
        }
        let d = n / (b * s * h);
        self.swap_reshape(x, [b, s, h, d], vec![b * h, s, d])
    }

    /// Inverse of [`Tape::split_heads`]: `[b·h, s, d] -> [b·s, h·d]`.
    pub fn merge_heads(&mut self, x: Var, b: usize, h: usize) -> Result<Var> {
        let sh = self.shape(x);
        if sh.len() != 3 || sh[0] != b * h {
            return Err(shape_err("merge_heads", sh, &[b, h]));
        }
        let (s, d) = (sh[1], sh[2]);
        self.swap_reshape(x, [b, h, s, d], vec![b * s, h * d])
    }

    fn swap_reshape(&mut self, x: Var, dims: [usize; 4], shape: Vec<usize>) -> Result<Var> {
        let [a, b, c, d] = dims;
        let out = swap12(self.value(x).data(), a, b, c, d);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SwapReshape { x, dims }, "swap_reshape")
    }

    // ----------------------------------------------------------------------
    // Backward
    // ----------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient accumulator of every reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, g, &mut adj)?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let exec = self.exec;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b,
            } => self.matmul_backward(a, b, trans_b, batch, shared_b, &g, adj)?,
            &Op::Linear { x, w, bias } => {
                if self.needs(bias) {
                    let c = self.value(bias).numel();
                    let mut db = vec![T::ZERO; c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(adj, bias, Tensor::new(vec![c], db)?);
                }
                self.matmul_backward(x, w, false, 1, true, &g, adj)?;
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(adj, a, g.clone());
                }
                if self.needs(b) {
                    accumulate(adj, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(adj, a, g.clone());
                }
                if self.needs(b) {
                    let neg = g.data().iter().map(|&v| -v).collect();
                    accumulate(adj, b, Tensor::new(g.shape().to_vec(), neg)?);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(adj, a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(adj, b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            &Op::Div(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| x / y)
                        .collect();
                    accumulate(adj, a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .zip(tb.data())
                        .map(|((&gv, &x), &y)| -gv * x / (y * y))
                        .collect();
                    accumulate(adj, b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            &Op::AddRow { x, bias } => {
                if self.needs(bias) {
                    let c = self.value(bias).numel();
                    let mut db = vec![T::ZERO; c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(adj, bias, Tensor::new(vec![c], db)?);
                }
                if self.needs(x) {
                    accumulate(adj, x, g);
                }
            }
            &Op::Scale { x, c } => {
                let d = g.data().iter().map(|&v| v * c).collect();
                accumulate(adj, x, Tensor::new(g.shape().to_vec(), d)?);
            }
            &Op::Gelu(x) => {
                let tx = self.value(x).data();
                let mut d = g.into_data();
                kernels::elems_mut(exec, &mut d, |j, v| *v *= gelu_grad(tx[j]));
                accumulate(adj, x, Tensor::new(self.shape(x).to_vec(), d)?);
            }
            &Op::Softmax(x) | &Op::CausalSoftmax(x) => {
                let c = out.last_dim();
                let y = out.data();
                let mut d = g.into_data();
                kernels::rows_mut(exec, &mut d, c, |r, row| {
                    let yr = &y[r * c..(r + 1) * c];
                    let dot: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (v, &yy) in row.iter_mut().zip(yr) {
                        *v = yy * (*v - dot);
                    }
                });
                accumulate(adj, x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = out.last_dim();
                let gd = g.data();
                if self.needs(gain) || self.needs(bias) {
                    let mut dg = vec![T::ZERO; c];
                    let mut dbias = vec![T::ZERO; c];
                    for (grow, nrow) in gd.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * nrow[j];
                            dbias[j] += grow[j];
                        }
                    }
                    if self.needs(gain) {
                        accumulate(adj, gain, Tensor::new(vec![c], dg)?);
                    }
                    if self.needs(bias) {
                        accumulate(adj, bias, Tensor::new(vec![c], dbias)?);
                    }
                }
                if self.needs(x) {
                    let gw = self.value(gain).data();
                    let inv_c = T::from_f64(1.0 / c as f64);
                    let mut dx = vec![T::ZERO; gd.len()];
                    kernels::rows_mut(exec, &mut dx, c, |r, row| {
                        let grow = &gd[r * c..(r + 1) * c];
                        let nrow = &normed[r * c..(r + 1) * c];
                        let mut mean_d = T::ZERO;
                        let mut mean_dn = T::ZERO;
                        for j in 0..c {
                            let dn = grow[j] * gw[j];
                            mean_d += dn;
                            mean_dn += dn * nrow[j];
                        }
                        mean_d *= inv_c;
                        mean_dn *= inv_c;
                        for j in 0..c {
                            let dn = grow[j] * gw[j];
                            row[j] = rstd[r] * (dn - mean_d - nrow[j] * mean_dn);
                        }
                    });
                    accumulate(adj, x, Tensor::new(self.shape(x).to_vec(), dx)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = self.shape(*logits)[1];
                let scale = g.item() / T::from_f64(n.max(1) as f64);
                let mut d = probs.clone();
                kernels::rows_mut(exec, &mut d, v, |r, row| {
                    row[targets[r]] -= T::ONE;
                    row.iter_mut().for_each(|x| *x *= scale);
                });
                accumulate(adj, *logits, Tensor::new(vec![n, v], d)?);
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                let sh = self.shape(*student).to_vec();
                let scale = g.item() / T::from_f64(sh[0].max(1) as f64);
                let d = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(&q, &p)| (q - p) * scale)
                    .collect();
                accumulate(adj, *student, Tensor::new(sh, d)?);
            }
            Op::GatherRows { x, idx } => {
                let sh = self.shape(*x).to_vec();
                let c = sh[1];
                let mut d = vec![T::ZERO; sh[0] * c];
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &v) in d[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[i * c..(i + 1) * c])
                    {
                        *o += v;
                    }
                }
                accumulate(adj, *x, Tensor::new(sh, d)?);
            }
            Op::ScatterAddRows { x, idx } => {
                let c = out.shape()[1];
                let mut d = vec![T::ZERO; idx.len() * c];
                let gd = g.data();
                kernels::rows_mut(exec, &mut d, c, |i, row| {
                    row.copy_from_slice(&gd[idx[i] * c..(idx[i] + 1) * c])
                });
                accumulate(adj, *x, Tensor::new(vec![idx.len(), c], d)?);
            }
            &Op::ScaleRows { x, w } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let c = tx.shape()[1];
                let gd = g.data();
                if self.needs(w) {
                    let dw: Vec<T> = kernels::map_indexed(exec, tw.numel(), |i| {
                        gd[i * c..(i + 1) * c]
                            .iter()
                            .zip(&tx.data()[i * c..(i + 1) * c])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    });
                    accumulate(adj, w, Tensor::new(vec![tw.numel()], dw)?);
                }
                if self.needs(x) {
                    let wd = tw.data();
                    let mut dx = gd.to_vec();
                    kernels::rows_mut(exec, &mut dx, c, |i, row| {
                        row.iter_mut().for_each(|v| *v *= wd[i])
                    });
                    accumulate(adj, x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
            }
            Op::GatherElems { x, idx } => {
                let tx = self.value(*x);
                let mut d = vec![T::ZERO; tx.numel()];
                for (&j, &v) in idx.iter().zip(g.data()) {
                    d[j] += v;
                }
                accumulate(adj, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.needs(x) {
                        let d = g.data()[offset..offset + n].to_vec();
                        accumulate(adj, x, Tensor::new(self.shape(x).to_vec(), d)?);
                    }
                    offset += n;
                }
            }
            &Op::SumAll(x) => {
                accumulate(adj, x, Tensor::full(self.shape(x).to_vec(), g.item()));
            }
            &Op::SumAxis0(x) => {
                let sh = self.shape(x).to_vec();
                let c = g.numel();
                let mut d = vec![T::ZERO; self.value(x).numel()];
                for row in d.chunks_mut(c.max(1)) {
                    row.copy_from_slice(g.data());
                }
                accumulate(adj, x, Tensor::new(sh, d)?);
            }
            &Op::Reshape(x) => {
                accumulate(adj, x, g.reshape(self.shape(x).to_vec())?);
            }
            &Op::SwapAxes12(x) => {
                let sh = out.shape();
                let d = swap12(g.data(), sh[0], sh[1], sh[2], sh[3]);
                accumulate(adj, x, Tensor::new(self.shape(x).to_vec(), d)?);
            }
            &Op::SwapReshape {
                x,
                dims: [a, b, c, d],
            } => {
                let dx = swap12(g.data(), a, c, b, d);
                accumulate(adj, x, Tensor::new(self.shape(x).to_vec(), dx)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        shared_b: bool,
        g: &Tensor<T>,
        adj: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let exec = self.exec;
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let sb = tb.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let n = if trans_b { br } else { bc };
        let gd = g.data();
        if self.needs(a) {
            let mut da = vec![T::ZERO; batch * m * k];
            let bsz = if shared_b { 0 } else { br * bc };
            kernels::rows_mut(exec, &mut da, m * k, |bi, o| {
                let gref = MatRef::new(&gd[bi * m * n..(bi + 1) * m * n], m, n);
                let bref = MatRef::new(&tb.data()[bi * bsz..bi * bsz + br * bc], br, bc);
                // dA = dC · op(B)ᵀ
                let bref = if trans_b { bref } else { bref.t() };
                let inner = if batch > 1 { Exec::Sequential } else { exec };
                kernels::matmul_into(inner, o, gref, bref, false);
            });
            accumulate(adj, a, Tensor::new(sa.to_vec(), da)?);
        }
        if self.needs(b) {
            let mut db = vec![T::ZERO; tb.numel()];
            let step = |bi: usize, o: &mut [T], acc: bool, inner: Exec| {
                let gref = MatRef::new(&gd[bi * m * n..(bi + 1) * m * n], m, n);
                let aref = MatRef::new(&ta.data()[bi * m * k..(bi + 1) * m * k], m, k);
                if trans_b {
                    // dB (n×k) = dCᵀ · A
                    kernels::matmul_into(inner, o, gref.t(), aref, acc);
                } else {
                    // dB (k×n) = Aᵀ · dC
                    kernels::matmul_into(inner, o, aref.t(), gref, acc);
                }
            };
            if shared_b {
                for bi in 0..batch {
                    step(bi, &mut db, bi > 0, exec);
                }
            } else {
                kernels::rows_mut(exec, &mut db, br * bc, |bi, o| {
                    step(bi, o, false, Exec::Sequential)
                });
            }
            accumulate(adj, b, Tensor::new(sb.to_vec(), db)?);
        }
        Ok(())
    }
}

fn swap12<T: Scalar>(src: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let s = ((ai * b + bi) * c + ci) * d;
                let t = ((ai * c + ci) * b + bi) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], Scalar::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(row)` evaluated in f64 with max subtraction.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    max + row
        .iter()
        .map(|v| (v.to_f64() - max).exp())
        .sum::<f64>()
        .ln()
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, e) in tape.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 1000.3, 999.0, 1002.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        for j in 0..3 {
            assert!((d[j] - d[3 + j]).abs() < 1e-12);
        }
        assert!((d[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g1 = tape.constant(t(&[3], &[1.0; 3]));
        let b0 = tape.constant(t(&[3], &[0.0; 3]));
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, g1, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(t(&[2], &[1.0; 2]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);

        let g0 = tape.constant(t(&[2], &[0.0; 2]));
        let bb = tape.constant(t(&[2], &[0.7, 0.7]));
        let y = tape.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7]);
    }

    #[test]
    fn gelu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -10.0]));
        let y = tape.gelu(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.841_344_746).abs() < 1e-6);
        assert!(d[2].abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![4, 50]));
        let l = tape.cross_entropy(z, &[0, 7, 49, 3]).unwrap();
        assert!((tape.value(l).item() - 50f64.ln()).abs() < 1e-12);

        let mut hot = Tensor::<f64>::zeros(vec![1, 5]);
        hot.data_mut()[2] = 1e4;
        let z = tape.constant(hot);
        let l = tape.cross_entropy(z, &[2]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let z = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).item() + 0.75f64.ln()).abs() < 1e-12);

        let err = tape.cross_entropy(z, &[2]).unwrap_err();
        assert!(matches!(
            err,
            Error::Index {
                index: 2,
                bound: 2,
                ..
            }
        ));
    }

    #[test]
    fn backward_sum_and_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.leaf(Tensor::scalar(-2.0), true);
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), -2.0);
        assert_eq!(tape.grad(y).unwrap().item(), 3.0);

        // Repeated calls accumulate until zeroed.
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), -4.0);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, f64::NAN]));
        assert!(matches!(tape.scale(x, 2.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(
            &[1, 3, 3],
            &[1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 0.0, 0.0, 0.0],
        ));
        let y = tape.causal_softmax(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..3], &[1.0, 0.0, 0.0]);
        assert!((d[3] - 0.5).abs() < 1e-15 && d[5] == 0.0);
        assert!((d[6] - 1.0 / 3.0).abs() < 1e-15);
    }
}
