//! Define-by-run computation tape.
//!
//! Every op appends a node holding its output value and enough metadata to
//! push gradients back to its parents. Nodes are appended in execution
//! order, so reverse iteration is a valid topological order for the
//! backward sweep.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::{Tensor, TensorError};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    Max { x: usize, argmax: Vec<usize> },
    Softmax { x: usize, axis: usize },
    Dropout { x: usize, keep: Vec<f64>, scale: f64 },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Embedding { table: usize, ids: Vec<usize> },
    AddBias { x: usize, bias: usize },
    ScaleRows { x: usize, scales: Vec<f64> },
    TimeSlice { x: usize, t: usize },
    BceWithLogits { logits: usize, targets: Tensor },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Records differentiable operations for one forward/backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Lifts a constant onto the tape; no gradient is tracked for it.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Lifts a trainable tensor onto the tape; `backward` will populate its
    /// gradient.
    pub fn param(&self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one tape node; cheap to clone.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

macro_rules! unary_via {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(&self) -> Var {
            let value = self.with_value(|v| v.map($f));
            self.push_unary(value, Op::$op(self.idx))
        }
    };
}

impl Var {
    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    /// The tape this variable lives on.
    pub fn tape_handle(&self) -> Tape {
        self.tape.clone()
    }

    /// Clones the node's value off the tape.
    pub fn value(&self) -> Tensor {
        self.with_value(|v| v.clone())
    }

    pub fn scalar_value(&self) -> f64 {
        self.with_value(|v| v.scalar_value())
    }

    /// Gradient populated by [`backward`]; `None` when the node never
    /// received one (treat as zero).
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().grads[self.idx].clone()
    }

    fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.idx].value)
    }

    fn with_values2<T>(&self, other: &Var, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.idx].value, &inner.nodes[other.idx].value)
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].needs_grad
    }

    fn push_unary(&self, value: Tensor, op: Op) -> Var {
        let needs = self.needs_grad();
        self.tape.push(value, op, needs)
    }

    fn push_binary(&self, other: &Var, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !self.tape.same_tape(&other.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(value, op, needs))
    }

    fn check_same_shape(&self, other: &Var, op: &'static str) -> Result<(), TensorError> {
        let (lhs, rhs) = self.with_values2(other, |a, b| (a.shape().to_vec(), b.shape().to_vec()));
        if lhs != rhs {
            return Err(TensorError::ShapeMismatch { op, lhs, rhs });
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, other: &Var) -> Result<Var, TensorError> {
        self.check_same_shape(other, "add")?;
        let value = self.with_values2(other, |a, b| zip_map(a, b, |x, y| x + y));
        self.push_binary(other, value, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Var) -> Result<Var, TensorError> {
        self.check_same_shape(other, "sub")?;
        let value = self.with_values2(other, |a, b| zip_map(a, b, |x, y| x - y));
        self.push_binary(other, value, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Var) -> Result<Var, TensorError> {
        self.check_same_shape(other, "mul")?;
        let value = self.with_values2(other, |a, b| zip_map(a, b, |x, y| x * y));
        self.push_binary(other, value, Op::Mul(self.idx, other.idx))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.with_value(|v| v.map(|x| x + c));
        self.push_unary(value, Op::AddScalar(self.idx))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let value = self.with_value(|v| v.map(|x| x * c));
        self.push_unary(value, Op::MulScalar(self.idx, c))
    }

    unary_via!(sigmoid, Sigmoid, |x| 1.0 / (1.0 + (-x).exp()));
    unary_via!(tanh, Tanh, f64::tanh);
    unary_via!(relu, Relu, |x| if x > 0.0 { x } else { 0.0 });
    unary_via!(exp, Exp, f64::exp);

    pub fn log(&self) -> Result<Var, TensorError> {
        if let Some(bad) = self.with_value(|v| v.data().iter().copied().find(|&x| x <= 0.0)) {
            return Err(TensorError::LogDomain { value: bad });
        }
        let value = self.with_value(|v| v.map(f64::ln));
        Ok(self.push_unary(value, Op::Log(self.idx)))
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var, TensorError> {
        let (sa, sb) = self.with_values2(other, |a, b| (a.shape().to_vec(), b.shape().to_vec()));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.with_values2(other, |a, b| {
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            matmul_nn(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out).expect("matmul shape")
        });
        self.push_binary(other, value, Op::MatMul(self.idx, other.idx))
    }

    /// Batched `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&self, other: &Var) -> Result<Var, TensorError> {
        let (sa, sb) = self.with_values2(other, |a, b| (a.shape().to_vec(), b.shape().to_vec()));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.with_values2(other, |a, b| {
            let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; g * m * n];
            for i in 0..g {
                matmul_nn(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(vec![g, m, n], out).expect("bmm shape")
        });
        self.push_binary(other, value, Op::Bmm(self.idx, other.idx))
    }

    /// Adds a bias vector to the trailing axis of `x`.
    pub fn add_bias(&self, bias: &Var) -> Result<Var, TensorError> {
        let (sx, sb) = self.with_values2(bias, |a, b| (a.shape().to_vec(), b.shape().to_vec()));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let value = self.with_values2(bias, |x, b| {
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % n];
            }
            out
        });
        self.push_binary(
            bias,
            value,
            Op::AddBias {
                x: self.idx,
                bias: bias.idx,
            },
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self, axis: Option<usize>) -> Result<Var, TensorError> {
        let value = reduce(&self.value(), axis, Reduction::Sum)?;
        Ok(self.push_unary(value, Op::Sum { x: self.idx, axis }))
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var, TensorError> {
        let value = reduce(&self.value(), axis, Reduction::Mean)?;
        Ok(self.push_unary(value, Op::Mean { x: self.idx, axis }))
    }

    /// Max reduction; gradient routes to the first argmax on ties.
    pub fn max(&self, axis: Option<usize>) -> Result<Var, TensorError> {
        let x = self.value();
        let (value, argmax) = reduce_max(&x, axis)?;
        Ok(self.push_unary(
            value,
            Op::Max {
                x: self.idx,
                argmax,
            },
        ))
    }

    // ---- shape movement --------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.with_value(|v| v.reshaped(shape))?;
        Ok(self.push_unary(value, Op::Reshape(self.idx)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var, TensorError> {
        let x = self.value();
        let value = permute_tensor(&x, perm)?;
        Ok(self.push_unary(
            value,
            Op::Permute {
                x: self.idx,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = &parts[0];
        for p in parts.iter().skip(1) {
            if !first.tape.same_tape(&p.tape) {
                return Err(TensorError::TapeMismatch);
            }
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = concat_tensors(&values, axis)?;
        let needs = parts.iter().any(|p| p.needs_grad());
        Ok(first.tape.push(
            value,
            Op::Concat {
                xs: parts.iter().map(|p| p.idx).collect(),
                axis,
            },
            needs,
        ))
    }

    /// `x[:, t, :]` for a rank-3 input.
    pub fn time_slice(&self, t: usize) -> Result<Var, TensorError> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(TensorError::InvalidAxis {
                axis: t,
                rank: s.len(),
            });
        }
        let (b, tt, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; b * d];
        for row in 0..b {
            let src = row * tt * d + t * d;
            out[row * d..(row + 1) * d].copy_from_slice(&x.data()[src..src + d]);
        }
        Ok(self.push_unary(
            Tensor::new(vec![b, d], out).expect("slice shape"),
            Op::TimeSlice { x: self.idx, t },
        ))
    }

    // ---- structured ops --------------------------------------------------

    /// Numerically stable softmax along `axis`. Entries where `mask` is 0
    /// receive probability exactly 0; each slice must keep at least one
    /// unmasked entry.
    pub fn softmax(&self, axis: usize, mask: Option<&Tensor>) -> Result<Var, TensorError> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: x.rank(),
            });
        }
        if let Some(m) = mask {
            if m.shape() != x.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax mask",
                    lhs: x.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let value = softmax_tensor(&x, axis, mask)?;
        Ok(self.push_unary(value, Op::Softmax { x: self.idx, axis }))
    }

    /// Inverted dropout: zeroes elements with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `training` is false.
    pub fn dropout<R: Rng>(
        &self,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability { p });
        }
        if !training || p == 0.0 {
            let value = self.value();
            return Ok(self.push_unary(value, Op::Reshape(self.idx)));
        }
        let scale = 1.0 / (1.0 - p);
        let x = self.value();
        let keep: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
            .collect();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k * scale)
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("dropout shape");
        Ok(self.push_unary(
            value,
            Op::Dropout {
                x: self.idx,
                keep,
                scale,
            },
        ))
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var, TensorError> {
        let table = self.value();
        let s = table.shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, d) = (s[0], s[1]);
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(TensorError::IdOutOfRange { id, rows });
            }
            out[i * d..(i + 1) * d].copy_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push_unary(
            Tensor::new(vec![ids.len(), d], out).expect("embedding shape"),
            Op::Embedding {
                table: self.idx,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multiplies each row of a `[rows, n]` tensor by a constant scale.
    pub fn scale_rows(&self, scales: &[f64]) -> Result<Var, TensorError> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 2 || s[0] != scales.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: s,
                rhs: vec![scales.len()],
            });
        }
        let n = s[1];
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scales[i / n])
            .collect();
        Ok(self.push_unary(
            Tensor::new(s, data).expect("scale_rows shape"),
            Op::ScaleRows {
                x: self.idx,
                scales: scales.to_vec(),
            },
        ))
    }

    /// Binary cross-entropy from logits: per element
    /// `max(x,0) - x*y + ln(1+exp(-|x|))`, summed over trailing positions
    /// per row and averaged over rows. `targets` must be 0/1 constants.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var, TensorError> {
        let x = self.value();
        if x.shape() != targets.shape() || x.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let batch = x.shape()[0] as f64;
        let mut total = 0.0;
        for (&v, &y) in x.data().iter().zip(targets.data()) {
            total += v.max(0.0) - v * y + (-v.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / batch);
        Ok(self.push_unary(
            value,
            Op::BceWithLogits {
                logits: self.idx,
                targets: targets.clone(),
            },
        ))
    }

    /// Layer normalization along the trailing axis with learnable gain and
    /// shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var, TensorError> {
        if !self.tape.same_tape(&gamma.tape) || !self.tape.same_tape(&beta.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&0);
        let (sg, sb) = (gamma.shape(), beta.shape());
        if sg != vec![n] || sb != vec![n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: sg,
            });
        }
        let g = gamma.value();
        let b = beta.value();
        let value = layer_norm_forward(&x, g.data(), b.data(), eps);
        let needs = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                eps,
            },
            needs,
        ))
    }
}

/// Runs the reverse sweep from a scalar loss, accumulating gradients for
/// every node that needs one.
pub fn backward(loss: &Var) -> Result<(), TensorError> {
    let mut inner = loss.tape.inner.borrow_mut();
    let loss_shape = inner.nodes[loss.idx].value.shape().to_vec();
    if !loss_shape.is_empty() {
        return Err(TensorError::NonScalarLoss { shape: loss_shape });
    }
    for g in inner.grads.iter_mut() {
        *g = None;
    }
    inner.grads[loss.idx] = Some(Tensor::scalar(1.0));

    for idx in (0..=loss.idx).rev() {
        if !inner.nodes[idx].needs_grad {
            continue;
        }
        let Some(grad) = inner.grads[idx].take() else {
            continue;
        };
        step_backward(&mut inner, idx, &grad);
        inner.grads[idx] = Some(grad);
    }
    Ok(())
}

fn step_backward(inner: &mut TapeInner, idx: usize, grad: &Tensor) {
    // Split borrows: read node values immutably, write into grads.
    macro_rules! value_of {
        ($i:expr) => {
            &inner.nodes[$i].value
        };
    }

    let mut pending: Vec<(usize, Tensor)> = Vec::new();
    {
        let nodes = &inner.nodes;
        let out_value = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                pending.push((*a, grad.clone()));
                pending.push((*b, grad.clone()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, grad.clone()));
                pending.push((*b, grad.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                pending.push((*a, zip_map(grad, value_of!(*b), |g, v| g * v)));
                pending.push((*b, zip_map(grad, value_of!(*a), |g, v| g * v)));
            }
            Op::AddScalar(a) => pending.push((*a, grad.clone())),
            Op::MulScalar(a, c) => {
                let c = *c;
                pending.push((*a, grad.map(|g| g * c)));
            }
            Op::Sigmoid(a) => {
                pending.push((*a, zip_map(grad, out_value, |g, y| g * y * (1.0 - y))));
            }
            Op::Tanh(a) => {
                pending.push((*a, zip_map(grad, out_value, |g, y| g * (1.0 - y * y))));
            }
            Op::Relu(a) => {
                pending.push((
                    *a,
                    zip_map(grad, value_of!(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                ));
            }
            Op::Exp(a) => {
                pending.push((*a, zip_map(grad, out_value, |g, y| g * y)));
            }
            Op::Log(a) => {
                pending.push((*a, zip_map(grad, value_of!(*a), |g, x| g / x)));
            }
            Op::MatMul(a, b) => {
                let av = value_of!(*a);
                let bv = value_of!(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_nt(grad.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn(av.data(), grad.data(), &mut db, k, m, n);
                pending.push((*a, Tensor::new(vec![m, k], da).expect("matmul da")));
                pending.push((*b, Tensor::new(vec![k, n], db).expect("matmul db")));
            }
            Op::Bmm(a, b) => {
                let av = value_of!(*a);
                let bv = value_of!(*b);
                let (g_, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let mut da = vec![0.0; g_ * m * k];
                let mut db = vec![0.0; g_ * k * n];
                for i in 0..g_ {
                    matmul_nt(
                        &grad.data()[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    matmul_tn(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &grad.data()[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                pending.push((*a, Tensor::new(av.shape().to_vec(), da).expect("bmm da")));
                pending.push((*b, Tensor::new(bv.shape().to_vec(), db).expect("bmm db")));
            }
            Op::Sum { x, axis } => {
                let xs = value_of!(*x).shape().to_vec();
                pending.push((*x, spread(grad, &xs, *axis, 1.0)));
            }
            Op::Mean { x, axis } => {
                let xs = value_of!(*x).shape().to_vec();
                let count = match axis {
                    Some(ax) => xs[*ax] as f64,
                    None => xs.iter().product::<usize>() as f64,
                };
                pending.push((*x, spread(grad, &xs, *axis, 1.0 / count)));
            }
            Op::Max { x, argmax } => {
                let xs = value_of!(*x).shape().to_vec();
                let mut dx = Tensor::zeros(&xs);
                for (gi, &pos) in argmax.iter().enumerate() {
                    dx.data_mut()[pos] += grad.data()[gi];
                }
                pending.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                // dx = y * (g - sum(g*y over axis))
                let y = out_value;
                let dx = softmax_backward(y, grad, *axis);
                pending.push((*x, dx));
            }
            Op::Dropout { x, keep, scale } => {
                let data: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(&g, &k)| g * k * scale)
                    .collect();
                pending.push((
                    *x,
                    Tensor::new(grad.shape().to_vec(), data).expect("dropout grad"),
                ));
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<Vec<usize>> =
                    xs.iter().map(|&i| nodes[i].value.shape().to_vec()).collect();
                let parts = split_grad(grad, &shapes, *axis);
                for (&i, part) in xs.iter().zip(parts) {
                    pending.push((i, part));
                }
            }
            Op::Reshape(a) => {
                let xs = value_of!(*a).shape().to_vec();
                pending.push((*a, grad.reshaped(xs).expect("reshape grad")));
            }
            Op::Permute { x, perm } => {
                let inverse = invert_perm(perm);
                pending.push((*x, permute_tensor(grad, &inverse).expect("permute grad")));
            }
            Op::Embedding { table, ids } => {
                let ts = value_of!(*table).shape().to_vec();
                let d = ts[1];
                let mut dt = Tensor::zeros(&ts);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[id * d + j] += grad.data()[i * d + j];
                    }
                }
                pending.push((*table, dt));
            }
            Op::AddBias { x, bias } => {
                let n = value_of!(*bias).shape()[0];
                let mut db = vec![0.0; n];
                for (i, &g) in grad.data().iter().enumerate() {
                    db[i % n] += g;
                }
                pending.push((*x, grad.clone()));
                pending.push((*bias, Tensor::from_vec(db)));
            }
            Op::ScaleRows { x, scales } => {
                let n = grad.shape()[1];
                let data: Vec<f64> = grad
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * scales[i / n])
                    .collect();
                pending.push((
                    *x,
                    Tensor::new(grad.shape().to_vec(), data).expect("scale_rows grad"),
                ));
            }
            Op::TimeSlice { x, t } => {
                let xs = value_of!(*x).shape().to_vec();
                let (b, tt, d) = (xs[0], xs[1], xs[2]);
                let mut dx = Tensor::zeros(&xs);
                for row in 0..b {
                    let dst = row * tt * d + t * d;
                    dx.data_mut()[dst..dst + d]
                        .copy_from_slice(&grad.data()[row * d..(row + 1) * d]);
                }
                pending.push((*x, dx));
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = value_of!(*logits);
                let batch = xv.shape()[0] as f64;
                let g = grad.scalar_value();
                let data: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| g * (1.0 / (1.0 + (-x).exp()) - y) / batch)
                    .collect();
                pending.push((
                    *logits,
                    Tensor::new(xv.shape().to_vec(), data).expect("bce grad"),
                ));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = value_of!(*x);
                let gv = value_of!(*gamma);
                let (dx, dg, db) = layer_norm_backward(xv, gv.data(), grad, *eps);
                pending.push((*x, dx));
                pending.push((*gamma, dg));
                pending.push((*beta, db));
            }
        }
    }

    for (target, delta) in pending {
        if !inner.nodes[target].needs_grad {
            continue;
        }
        match &mut inner.grads[target] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

// ---- plain-tensor kernels ----------------------------------------------

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            out[i * k + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

enum Reduction {
    Sum,
    Mean,
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Result<Vec<usize>, TensorError> {
    match axis {
        None => Ok(vec![]),
        Some(ax) => {
            if ax >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
            let mut s = shape.to_vec();
            s.remove(ax);
            Ok(s)
        }
    }
}

/// Iterates `(outer, inner)` strides so that input offset = outer*len*inner_s
/// + i*inner_s + inner for i along the reduced axis.
fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduce(x: &Tensor, axis: Option<usize>, kind: Reduction) -> Result<Tensor, TensorError> {
    let out_shape = reduced_shape(x.shape(), axis)?;
    match axis {
        None => {
            let sum: f64 = x.data().iter().sum();
            let v = match kind {
                Reduction::Sum => sum,
                Reduction::Mean => sum / x.len() as f64,
            };
            Ok(Tensor::scalar(v))
        }
        Some(ax) => {
            let (outer, len, inner) = axis_geometry(x.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        out[o * inner + j] += x.data()[(o * len + i) * inner + j];
                    }
                }
            }
            if let Reduction::Mean = kind {
                for v in &mut out {
                    *v /= len as f64;
                }
            }
            Tensor::new(out_shape, out)
        }
    }
}

fn reduce_max(x: &Tensor, axis: Option<usize>) -> Result<(Tensor, Vec<usize>), TensorError> {
    let out_shape = reduced_shape(x.shape(), axis)?;
    match axis {
        None => {
            let (pos, &v) = x
                .data()
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
                .expect("max of empty tensor");
            Ok((Tensor::scalar(v), vec![pos]))
        }
        Some(ax) => {
            let (outer, len, inner) = axis_geometry(x.shape(), ax);
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        let off = (o * len + i) * inner + j;
                        let v = x.data()[off];
                        let slot = o * inner + j;
                        if v > out[slot] {
                            out[slot] = v;
                            arg[slot] = off;
                        }
                    }
                }
            }
            Ok((Tensor::new(out_shape, out)?, arg))
        }
    }
}

fn spread(grad: &Tensor, target_shape: &[usize], axis: Option<usize>, scale: f64) -> Tensor {
    let mut out = Tensor::zeros(target_shape);
    match axis {
        None => {
            let g = grad.scalar_value() * scale;
            for v in out.data_mut() {
                *v = g;
            }
        }
        Some(ax) => {
            let (outer, len, inner) = axis_geometry(target_shape, ax);
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        out.data_mut()[(o * len + i) * inner + j] =
                            grad.data()[o * inner + j] * scale;
                    }
                }
            }
        }
    }
    out
}

fn softmax_tensor(x: &Tensor, axis: usize, mask: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let offset = |i: usize| (o * len + i) * inner + j;
            let live = |i: usize| mask.map_or(true, |m| m.data()[offset(i)] != 0.0);
            let mut hi = f64::NEG_INFINITY;
            for i in 0..len {
                if live(i) {
                    hi = hi.max(x.data()[offset(i)]);
                }
            }
            if hi == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedSlice);
            }
            let mut denom = 0.0;
            for i in 0..len {
                if live(i) {
                    let e = (x.data()[offset(i)] - hi).exp();
                    out[offset(i)] = e;
                    denom += e;
                }
            }
            for i in 0..len {
                if live(i) {
                    out[offset(i)] /= denom;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_geometry(y.shape(), axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for j in 0..inner {
            let offset = |i: usize| (o * len + i) * inner + j;
            let mut dot = 0.0;
            for i in 0..len {
                dot += grad.data()[offset(i)] * y.data()[offset(i)];
            }
            for i in 0..len {
                dx[offset(i)] = y.data()[offset(i)] * (grad.data()[offset(i)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("softmax grad shape")
}

fn concat_tensors(parts: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
    let first = &parts[0];
    if axis >= first.rank() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: first.rank(),
        });
    }
    let mut out_shape = first.shape().to_vec();
    for p in parts.iter().skip(1) {
        if p.rank() != first.rank() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (d, (&a, &b)) in first.shape().iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = axis_geometry(&out_shape, axis);
    let mut out = vec![0.0; out_shape.iter().product()];
    let total_axis = out_shape[axis];
    let mut axis_start = 0;
    for p in parts {
        let plen = p.shape()[axis];
        for o in 0..outer {
            for i in 0..plen {
                let src = (o * plen + i) * inner;
                let dst = (o * total_axis + axis_start + i) * inner;
                out[dst..dst + inner].copy_from_slice(&p.data()[src..src + inner]);
            }
        }
        axis_start += plen;
    }
    Tensor::new(out_shape, out)
}

fn split_grad(grad: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let total_axis = grad.shape()[axis];
    let (outer, _, inner) = axis_geometry(grad.shape(), axis);
    let mut out = Vec::with_capacity(shapes.len());
    let mut axis_start = 0;
    for s in shapes {
        let plen = s[axis];
        let mut part = Tensor::zeros(s);
        for o in 0..outer {
            for i in 0..plen {
                let dst = (o * plen + i) * inner;
                let src = (o * total_axis + axis_start + i) * inner;
                part.data_mut()[dst..dst + inner].copy_from_slice(&grad.data()[src..src + inner]);
            }
        }
        axis_start += plen;
        out.push(part);
    }
    out
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Result<Tensor, TensorError> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::InvalidPermutation {
            perm: perm.to_vec(),
            rank,
        });
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let mut out = vec![0.0; x.len()];
    let mut idx = vec![0usize; rank];
    for (dst, slot) in out.iter_mut().enumerate() {
        // idx enumerates the output multi-index in row-major order.
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *slot = x.data()[src];
        let _ = dst;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn layer_norm_forward(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let denom = (var + eps).sqrt();
        for j in 0..n {
            out[r * n + j] = gamma[j] * (row[j] - mean) / denom + beta[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("layer_norm shape")
}

fn layer_norm_backward(
    x: &Tensor,
    gamma: &[f64],
    grad: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let n = *x.shape().last().unwrap_or(&1);
    let rows = x.len() / n;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let grow = &grad.data()[r * n..(r + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let denom = (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / denom).collect();
        let dxhat: Vec<f64> = grow.iter().zip(gamma).map(|(&g, &w)| g * w).collect();
        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
        let mean_dxhat_xhat: f64 =
            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
        for j in 0..n {
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
            dx.data_mut()[r * n + j] =
                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom;
        }
    }
    (dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}
