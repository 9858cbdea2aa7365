//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward sweep. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and backward is a single reverse
//! scan.

use std::collections::BTreeMap;

use crate::error::{Result, WwtError};
use crate::tensor::{self, axis_split, last2, Activation, MatMulPlan, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs has `last_dim` elements, repeated for every row.
    Row,
    /// rhs has one element per row (`[rows, 1]`).
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Exp,
    Log,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        plan: MatMulPlan,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddConst {
        a: Var,
    },
    Unary {
        kind: UnKind,
        a: Var,
    },
    Act {
        a: Var,
        f: Activation,
    },
    Softmax {
        a: Var,
        axis: usize,
        temperature: f64,
    },
    LogSoftmaxRows {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose {
        a: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SumRows {
        a: Var,
    },
    SumCols {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a softmax evaluated on the tape, for instrumentation.
#[derive(Clone, Copy, Debug)]
pub struct SoftmaxRecord {
    pub input: Var,
    pub output: Var,
    pub axis: usize,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    macs: u64,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            macs: 0,
            check_finite: true,
        }
    }

    /// Disable the per-op finiteness check (used by throughput benchmarks).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmuls recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Every softmax recorded on the tape, in evaluation order.
    pub fn softmax_records(&self) -> Vec<SoftmaxRecord> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Softmax { a, axis, .. } => Some(SoftmaxRecord {
                    input: a,
                    output: Var(i),
                    axis,
                }),
                _ => None,
            })
            .collect()
    }

    /// Number of nodes that consume `v` directly.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .filter(|n| inputs_of(&n.op).contains(&v))
            .count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(WwtError::NonFinite {
                op: op_name.to_string(),
            });
        }
        let requires_grad = inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    /// An anonymous trainable leaf.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), ta, self.shape(b), tb)?;
        let mut out = vec![T::zero(); plan.out_shape.iter().product()];
        tensor::matmul_into(
            &plan,
            self.value(a),
            ta,
            self.value(b),
            tb,
            &mut out,
            T::zero(),
        );
        self.macs += plan.macs();
        let value = Tensor::from_vec(&plan.out_shape, out)?;
        self.push(value, Op::MatMul { a, b, ta, tb, plan }, "matmul")
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, op_name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        let bcast = if sa == sb {
            Bcast::Same
        } else if nb == 1 {
            Bcast::Scalar
        } else if !sa.is_empty() && nb == sa[sa.len() - 1] && (sb.len() == 1 || sb[0] == 1) {
            Bcast::Row
        } else if sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1 {
            Bcast::Col
        } else {
            return Err(WwtError::shape(op_name, &sa, &sb));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let cols = sa.last().copied().unwrap_or(1).max(1);
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
            BinKind::Max => x.max(y),
            BinKind::Min => x.min(y),
        };
        let out: Vec<T> = (0..na)
            .map(|i| f(av[i], bv[bidx(bcast, i, cols)]))
            .collect();
        let value = Tensor::from_vec(&sa, out)?;
        self.push(value, Op::Binary { kind, a, b, bcast }, op_name)
    }

    /// Elementwise sum; `b` may also be a row vector, a column, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Max, a, b, "maximum")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Min, a, b, "minimum")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale { a, c }, "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddConst { a }, "add_const")
    }

    fn unary(&mut self, kind: UnKind, a: Var, op_name: &'static str) -> Result<Var> {
        let value = self.value(a).map(|v| match kind {
            UnKind::Exp => v.exp(),
            UnKind::Log => v.ln(),
            UnKind::Abs => v.abs(),
        });
        self.push(value, Op::Unary { kind, a }, op_name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, a, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Log, a, "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Abs, a, "abs")
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Result<Var> {
        let value = tensor::pointwise(self.value(a), f);
        self.push(value, Op::Act { a, f }, "activation")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_t(a, axis, 1.0)
    }

    pub fn softmax_t(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        let value = tensor::softmax_along(self.value(a), axis, temperature)?;
        self.push(
            value,
            Op::Softmax {
                a,
                axis,
                temperature,
            },
            "softmax",
        )
    }

    /// Log-softmax over the last axis of a rank-2 tensor.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(WwtError::invalid("log_softmax_rows", "expects rank 2"));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = x.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let value = Tensor::from_vec(&[r, c], out)?;
        self.push(value, Op::LogSoftmaxRows { a }, "log_softmax")
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, xhat, rstd) =
            tensor::layer_norm(self.value(a), self.value(gain), self.value(bias), eps)?;
        self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(WwtError::invalid("transpose", "expects rank 2"));
        }
        let value = self.value(a).transpose2();
        self.push(value, Op::Transpose { a }, "transpose")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start + len > x.cols() {
            return Err(WwtError::invalid(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let r = x.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(&[r, len], out)?;
        self.push(value, Op::SliceCols { a, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(WwtError::shape("concat_cols", self.shape(parts[0]), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::from_vec(&[r, total], out)?;
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            "concat_cols",
        )
    }

    /// Row gather: output row `i` is row `idx[i]` of `a`. Repeated indices are
    /// allowed (nearest-neighbour upsampling is a gather).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || idx.iter().any(|&i| i >= x.rows()) {
            return Err(WwtError::invalid("gather_rows", "row index out of range"));
        }
        let c = x.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(x.row(i));
        }
        let value = Tensor::from_vec(&[idx.len(), c], out)?;
        self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape { a }, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of a rank-2 tensor, shape `[1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(WwtError::invalid("sum_rows", "expects rank 2"));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let value = Tensor::from_vec(&[1, c], out)?;
        self.push(value, Op::SumRows { a }, "sum_rows")
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rows();
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / r as f64)
    }

    /// Row sums of a rank-2 tensor, shape `[rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(WwtError::invalid("sum_cols", "expects rank 2"));
        }
        let r = x.rows();
        let out: Vec<T> = (0..r).map(|i| x.row(i).iter().copied().sum()).collect();
        let value = Tensor::from_vec(&[r, 1], out)?;
        self.push(value, Op::SumCols { a }, "sum_cols")
    }

    /// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(WwtError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(WwtError::Backward(
                "loss is detached from every trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        let mut out = Gradients {
            by_var: BTreeMap::new(),
            names: Vec::new(),
        };
        for (i, g) in grads.into_iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
                out.by_var.insert(Var(i), g);
            }
        }
        // leaves created after the loss still get zero gradients
        for (i, n) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                out.by_var.insert(Var(i), Tensor::zeros(n.value.shape()));
            }
        }
        out.names = self.params.clone();
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, plan } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); av.numel()];
                    matmul_grad_lhs(plan, g, bv, *ta, *tb, av.shape(), &mut ga);
                    self.accumulate(grads, *a, Tensor::from_vec(av.shape(), ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); bv.numel()];
                    matmul_grad_rhs(plan, g, av, *ta, *tb, bv.shape(), &mut gb);
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), gb)?);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let cols = self.shape(*a).last().copied().unwrap_or(1).max(1);
                let gd = g.data();
                let n = gd.len();
                let mut ga = vec![T::zero(); n];
                let mut gb = vec![T::zero(); bv.len()];
                for k in 0..n {
                    let j = bidx(*bcast, k, cols);
                    let (x, z) = (av[k], bv[j]);
                    let (da, db) = match kind {
                        BinKind::Add => (T::one(), T::one()),
                        BinKind::Sub => (T::one(), -T::one()),
                        BinKind::Mul => (z, x),
                        BinKind::Div => (T::one() / z, -x / (z * z)),
                        // ties route the gradient to the left operand
                        BinKind::Max => {
                            if x >= z {
                                (T::one(), T::zero())
                            } else {
                                (T::zero(), T::one())
                            }
                        }
                        BinKind::Min => {
                            if x <= z {
                                (T::one(), T::zero())
                            } else {
                                (T::zero(), T::one())
                            }
                        }
                    };
                    ga[k] = gd[k] * da;
                    gb[j] += gd[k] * db;
                }
                self.accumulate(grads, *a, Tensor::from_vec(self.shape(*a), ga)?);
                self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddConst { a } => self.accumulate(grads, *a, g.clone()),
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let ga = match kind {
                    UnKind::Exp => g.zip_map(y, "exp", |gv, yv| gv * yv)?,
                    UnKind::Log => g.zip_map(x, "log", |gv, xv| gv / xv)?,
                    UnKind::Abs => g.zip_map(x, "abs", |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })?,
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Act { a, f } => {
                let x = self.value(*a);
                let f = *f;
                let ga = g.zip_map(x, "activation", |gv, xv| gv * f.derivative(xv))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax {
                a,
                axis,
                temperature,
            } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let inv_t = T::of(1.0 / temperature);
                let mut ga = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let base = o * len * inner + i2;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot += gd[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            ga[p] = yd[p] * (gd[p] - dot) * inv_t;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(y.shape(), ga)?);
            }
            Op::LogSoftmaxRows { a } => {
                let (r, c) = (y.rows(), y.cols());
                let mut ga = vec![T::zero(); r * c];
                for i2 in 0..r {
                    let gs: T = g.row(i2).iter().copied().sum();
                    for j in 0..c {
                        ga[i2 * c + j] = g.at2(i2, j) - y.at2(i2, j).exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[r, c], ga)?);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *y.shape().last().unwrap_or(&1);
                let rows = y.numel() / n.max(1);
                let gam = self.value(*gain).data();
                let gd = g.data();
                let nf = T::of(n as f64);
                let mut ga = vec![T::zero(); y.numel()];
                let mut gg = vec![T::zero(); n];
                let mut gbias = vec![T::zero(); n];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        let p = r * n + j;
                        let gh = gd[p] * gam[j];
                        m1 += gh;
                        m2 += gh * xhat[p];
                        gg[j] += gd[p] * xhat[p];
                        gbias[j] += gd[p];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..n {
                        let p = r * n + j;
                        ga[p] = rstd[r] * (gd[p] * gam[j] - m1 - xhat[p] * m2);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(y.shape(), ga)?);
                self.accumulate(grads, *gain, Tensor::from_vec(self.shape(*gain), gg)?);
                self.accumulate(grads, *bias, Tensor::from_vec(self.shape(*bias), gbias)?);
            }
            Op::Transpose { a } => self.accumulate(grads, *a, g.transpose2()),
            Op::SliceCols { a, start } => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let len = g.cols();
                let mut ga = vec![T::zero(); r * c];
                for i2 in 0..r {
                    ga[i2 * c + start..i2 * c + start + len].copy_from_slice(g.row(i2));
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[r, c], ga)?);
            }
            Op::ConcatCols { parts } => {
                let r = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(r * c);
                    for i2 in 0..r {
                        gp.extend_from_slice(&g.row(i2)[off..off + c]);
                    }
                    off += c;
                    self.accumulate(grads, p, Tensor::from_vec(&[r, c], gp)?);
                }
            }
            Op::GatherRows { a, idx } => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = vec![T::zero(); x.numel()];
                for (o, &src) in idx.iter().enumerate() {
                    for (d, &v) in ga[src * c..(src + 1) * c].iter_mut().zip(g.row(o)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(x.shape(), ga)?);
            }
            Op::Reshape { a } => {
                let ga = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sum { a } => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SumRows { a } => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend_from_slice(g.data());
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[r, c], ga)?);
            }
            Op::SumCols { a } => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = Vec::with_capacity(r * c);
                for i2 in 0..r {
                    ga.extend(std::iter::repeat_n(g.data()[i2], c));
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[r, c], ga)?);
            }
        }
        Ok(())
    }
}

fn bidx(bcast: Bcast, k: usize, cols: usize) -> usize {
    match bcast {
        Bcast::Same => k,
        Bcast::Row => k % cols,
        Bcast::Col => k / cols,
        Bcast::Scalar => 0,
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
        Op::LayerNorm { a, gain, bias, .. } => vec![*a, *gain, *bias],
        Op::ConcatCols { parts } => parts.clone(),
        Op::Scale { a, .. }
        | Op::AddConst { a }
        | Op::Unary { a, .. }
        | Op::Act { a, .. }
        | Op::Softmax { a, .. }
        | Op::LogSoftmaxRows { a }
        | Op::Transpose { a }
        | Op::SliceCols { a, .. }
        | Op::GatherRows { a, .. }
        | Op::Reshape { a }
        | Op::Sum { a }
        | Op::SumRows { a }
        | Op::SumCols { a } => vec![*a],
    }
}

/// `dA` for `Y = op(A) op(B)`, accumulated over broadcast batches.
fn matmul_grad_lhs<T: Scalar>(
    plan: &MatMulPlan,
    g: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    a_shape: &[usize],
    ga: &mut [T],
) {
    let (br, bc) = last2(b.shape());
    let (ar, ac) = last2(a_shape);
    // d op(A) = G op(B)^T, shape p x q
    let (rsb, csb) = tensor::strides(br, bc, tb);
    // op(B)^T swaps the logical strides
    let (rsbt, csbt) = (csb, rsb);
    for &(oa, ob, oo) in &plan.offsets {
        // SAFETY: extents and offsets were validated when the plan was built.
        unsafe {
            if !ta {
                T::gemm(
                    plan.p,
                    plan.r,
                    plan.q,
                    T::one(),
                    g.data().as_ptr().add(oo),
                    plan.r as isize,
                    1,
                    b.data().as_ptr().add(ob),
                    rsbt,
                    csbt,
                    T::one(),
                    ga.as_mut_ptr().add(oa),
                    ac as isize,
                    1,
                );
            } else {
                // A stored q x p: dA = (G op(B)^T)^T, written through transposed strides
                T::gemm(
                    plan.p,
                    plan.r,
                    plan.q,
                    T::one(),
                    g.data().as_ptr().add(oo),
                    plan.r as isize,
                    1,
                    b.data().as_ptr().add(ob),
                    rsbt,
                    csbt,
                    T::one(),
                    ga.as_mut_ptr().add(oa),
                    1,
                    ac as isize,
                );
            }
        }
    }
    let _ = ar;
}

/// `dB` for `Y = op(A) op(B)`.
fn matmul_grad_rhs<T: Scalar>(
    plan: &MatMulPlan,
    g: &Tensor<T>,
    a: &Tensor<T>,
    ta: bool,
    tb: bool,
    b_shape: &[usize],
    gb: &mut [T],
) {
    let (ar, ac) = last2(a.shape());
    let (_, bc) = last2(b_shape);
    let (rsa, csa) = tensor::strides(ar, ac, ta);
    let (rsat, csat) = (csa, rsa);
    for &(oa, ob, oo) in &plan.offsets {
        // d op(B) = op(A)^T G, shape q x r
        // SAFETY: extents and offsets were validated when the plan was built.
        unsafe {
            let (rsc, csc) = if tb {
                (1, bc as isize)
            } else {
                (bc as isize, 1)
            };
            T::gemm(
                plan.q,
                plan.p,
                plan.r,
                T::one(),
                a.data().as_ptr().add(oa),
                rsat,
                csat,
                g.data().as_ptr().add(oo),
                plan.r as isize,
                1,
                T::one(),
                gb.as_mut_ptr().add(ob),
                rsc,
                csc,
            );
        }
    }
}

/// Gradients of every trainable leaf reachable from a `backward` call.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_var: BTreeMap<Var, Tensor<T>>,
    names: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v)
    }

    /// Gradients of named parameters.
    pub fn by_name(&self) -> BTreeMap<String, Tensor<T>> {
        self.names
            .iter()
            .filter_map(|(n, v)| self.by_var.get(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (n, v) in std::mem::take(&mut self.names) {
            if let Some(g) = self.by_var.remove(&v) {
                out.insert(n, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` w.r.t. every element of every input.
    fn check_grad(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.var(x.clone())).collect();
            let l = build(&mut t, &vs).unwrap();
            t.value(l).data()[0]
        };
        let h = 1e-6;
        for (k, inp) in inputs.iter().enumerate() {
            let g = grads.get(vars[k]).unwrap();
            for e in 0..inp.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[e];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < tol, "input {k} elem {e}: fd {fd} vs analytic {an}");
            }
        }
    }

    /// Weighted sum with fixed irregular weights so every output element matters.
    fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
        let n = t.value(y).numel();
        let shape = t.shape(y).to_vec();
        let w = Tensor::from_vec(
            &shape,
            (0..n).map(|i| ((i * 7 % 11) as f64 - 4.7) / 3.0).collect(),
        )?;
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2., 4.]);
        assert_eq!(g.by_name()["w"].data(), &[2., 4.]);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let u = tape.param("u", Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(u).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        assert!(matches!(tape.backward(w), Err(WwtError::Backward(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        let d = tape.scale(c, 2.0).unwrap();
        assert!(matches!(tape.backward(d), Err(WwtError::Backward(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.var(Tensor::from_f64(&[1], &[0.0]).unwrap());
        assert!(matches!(tape.log(w), Err(WwtError::NonFinite { .. })));
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_t(&mut rng, if ta { &[4, 3] } else { &[3, 4] });
            let b = rand_t(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
            check_grad(
                &[a, b],
                |t, v| {
                    let y = t.matmul_t(v[0], ta, v[1], tb)?;
                    probe(t, y)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn batched_matmul_gradient_with_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, &[2, 3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        check_grad(
            &[a, b],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&mut rng, &[3, 4]);
        let row = rand_t(&mut rng, &[4]);
        let col = rand_t(&mut rng, &[3, 1]).map(|v| v.abs() + 0.5);
        let s = Tensor::from_f64(&[1], &[0.7]).unwrap();
        check_grad(
            &[a, row, col, s],
            |t, v| {
                let x = t.add(v[0], v[1])?;
                let x = t.div(x, v[2])?;
                let x = t.mul(x, v[3])?;
                let x = t.sub(x, v[1])?;
                let e = t.exp(x)?;
                let e = t.add_const(e, 1.0)?;
                let l = t.log(e)?;
                let m = t.abs(x)?;
                let x = t.add(l, m)?;
                probe(t, x)
            },
            1e-6,
        );
    }

    #[test]
    fn min_max_gradients_away_from_ties() {
        let a = Tensor::from_f64(&[4], &[0.1, -0.5, 0.9, 0.3]).unwrap();
        let b = Tensor::from_f64(&[4], &[0.4, -0.7, 0.2, 0.6]).unwrap();
        check_grad(
            &[a, b],
            |t, v| {
                let hi = t.maximum(v[0], v[1])?;
                let lo = t.minimum(v[0], v[1])?;
                let p = t.mul(hi, lo)?;
                probe(t, p)
            },
            1e-6,
        );
    }

    #[test]
    fn activation_softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&mut rng, &[3, 5]);
        let g = rand_t(&mut rng, &[5]);
        let b = rand_t(&mut rng, &[5]);
        check_grad(
            &[a, g, b],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let s0 = t.softmax_t(y, 0, 0.7)?;
                let s1 = t.softmax(y, 1)?;
                let gl = t.gelu(s0)?;
                let sg = t.sigmoid(s1)?;
                let x = t.add(gl, sg)?;
                let ls = t.log_softmax_rows(x)?;
                probe(t, ls)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&mut rng, &[4, 3]);
        let b = rand_t(&mut rng, &[4, 2]);
        check_grad(
            &[a, b],
            |t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let s = t.slice_cols(c, 1, 3)?;
                let tr = t.transpose(s)?;
                let g = t.gather_rows(tr, &[2, 0, 0, 1])?;
                let r = t.reshape(g, &[2, 8])?;
                let sr = t.sum_rows(r)?;
                let sc = t.sum_cols(r)?;
                let mr = t.mean_rows(r)?;
                let x = t.mul(sr, mr)?;
                let p1 = probe(t, x)?;
                let p2 = probe(t, sc)?;
                let m = t.mean(r)?;
                let tot = t.add(p1, p2)?;
                t.add(tot, m)
            },
            1e-6,
        );
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_t(&mut rng, &[6, 5]);
        let b = rand_t(&mut rng, &[5, 4]);
        let run = || {
            let mut t = Tape::new();
            let va = t.param("a", a.clone());
            let vb = t.param("b", b.clone());
            let y = t.matmul(va, vb).unwrap();
            let y = t.gelu(y).unwrap();
            let y = t.softmax(y, 0).unwrap();
            let l = probe(&mut t, y).unwrap();
            t.backward(l).unwrap().by_name()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mac_counter_counts_matmuls() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[3, 4]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        t.matmul(a, b).unwrap();
        assert_eq!(t.macs(), 60);
    }
}
