//! Define-by-run reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the records in reverse and
//! accumulates vector-Jacobian products. Tapes are cheap and meant to be
//! rebuilt for each forward pass; dropping the tape releases every
//! intermediate buffer.
//!
//! Network weights live outside the tape as named [`Param`]s. A trainable
//! parameter is registered with [`Tape::param`] and its gradient is looked up
//! by name in the resulting [`Gradients`]. Frozen parameters enter the tape as
//! constants via [`Tape::constant_shared`]: gradients still flow *through* the
//! operations that consume them, but none is accumulated for them.

mod kernels;
pub mod gradcheck;
pub mod optim;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, grad_check_param};
pub use optim::{Optimizer, OptimizerKind};

/// Lower bound applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Square,
    AddRow,
    Scale,
    AddScalar,
    Clamp,
    SoftmaxCrossEntropy,
}

impl OpKind {
    /// Every differentiable operation, in a stable order.
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Square,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Clamp,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::AddRow => "broadcast-add-row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add-scalar",
            OpKind::Clamp => "clamp",
            OpKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Square,
    AddRow,
    Scale(f64),
    AddScalar,
    Clamp(f64, f64),
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Tanh => OpKind::Tanh,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Square => OpKind::Square,
            Op::AddRow => OpKind::AddRow,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Clamp(..) => OpKind::Clamp,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node {
    op: Op,
    inputs: [usize; 2],
    arity: usize,
    value: Arc<Tensor>,
    requires_grad: bool,
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Makes the backward rule of `kind` on this thread scale its result by 1.5.
///
/// Only used to check that the gradient checker catches a broken rule.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

/// A named trainable tensor owned by a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access to the values; copies only if a live tape still holds them.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: &[usize], value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_shared(op, inputs, Arc::new(value), requires_grad)
    }

    fn push_shared(
        &self,
        op: Op,
        inputs: &[usize],
        value: Arc<Tensor>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let mut ids = [0; 2];
        ids[..inputs.len()].copy_from_slice(inputs);
        nodes.push(Node {
            op,
            inputs: ids,
            arity: inputs.len(),
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, &[], value, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_shared(Op::Leaf, &[], value, false)
    }

    /// Records an unnamed value that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, &[], value, true)
    }

    /// Registers a trainable parameter. Registering the same name twice on
    /// one tape returns the same node, so shared weights accumulate gradient.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(p.name()) {
            return Var { tape: self, id };
        }
        let v = self.push_shared(Op::Leaf, &[], p.shared(), true);
        self.params.borrow_mut().insert(p.name().to_string(), v.id);
        v
    }

    /// Registers `p` as trainable or as a constant depending on `trainable`.
    pub fn bind(&self, p: &Param, trainable: bool) -> Var<'_> {
        if trainable {
            self.param(p)
        } else {
            self.constant_shared(p.shared())
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Applies an operation by kind. Parameterized kinds take their argument
    /// from `arg` (scale factor, scalar offset, or `(lo, hi)` for clamp) and
    /// cross-entropy takes class labels from `labels`.
    pub fn apply<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>], arg: OpArg) -> Result<Var<'t>> {
        let want = match kind {
            OpKind::Leaf => 0,
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::AddRow => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::InvalidArgument(format!(
                "{kind} takes {want} inputs, got {}",
                inputs.len()
            )));
        }
        let a = inputs.first().copied();
        let b = inputs.get(1).copied();
        match kind {
            OpKind::Leaf => Err(Error::InvalidArgument("leaf is not an operation".into())),
            OpKind::MatMul => a.unwrap().matmul(b.unwrap()),
            OpKind::Add => a.unwrap().add(b.unwrap()),
            OpKind::Sub => a.unwrap().sub(b.unwrap()),
            OpKind::Mul => a.unwrap().mul(b.unwrap()),
            OpKind::AddRow => a.unwrap().add_row(b.unwrap()),
            OpKind::Exp => Ok(a.unwrap().exp()),
            OpKind::Log => Ok(a.unwrap().ln()),
            OpKind::Tanh => Ok(a.unwrap().tanh()),
            OpKind::Relu => Ok(a.unwrap().relu()),
            OpKind::Sigmoid => Ok(a.unwrap().sigmoid()),
            OpKind::Sum => Ok(a.unwrap().sum()),
            OpKind::Mean => Ok(a.unwrap().mean()),
            OpKind::Square => Ok(a.unwrap().square()),
            OpKind::Scale => match arg {
                OpArg::Scalar(c) => Ok(a.unwrap().scale(c)),
                _ => Err(Error::InvalidArgument("scale needs a scalar".into())),
            },
            OpKind::AddScalar => match arg {
                OpArg::Scalar(c) => Ok(a.unwrap().add_scalar(c)),
                _ => Err(Error::InvalidArgument("add-scalar needs a scalar".into())),
            },
            OpKind::Clamp => match arg {
                OpArg::Range(lo, hi) => Ok(a.unwrap().clamp(lo, hi)),
                _ => Err(Error::InvalidArgument("clamp needs a range".into())),
            },
            OpKind::SoftmaxCrossEntropy => match arg {
                OpArg::Labels(labels) => a.unwrap().softmax_cross_entropy(labels),
                _ => Err(Error::InvalidArgument("cross-entropy needs labels".into())),
            },
        }
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let fault = BACKWARD_FAULT.with(|f| f.get());

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let ins = &node.inputs[..node.arity];
            let wants: Vec<bool> = ins.iter().map(|&i| nodes[i].requires_grad).collect();
            let values: Vec<&Tensor> = ins.iter().map(|&i| &*nodes[i].value).collect();
            let mut contributions = vjp(&node.op, &values, &node.value, &g, &wants);
            if fault == Some(node.op.kind()) {
                for t in contributions.iter_mut().flatten() {
                    for v in t.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (&input, contribution) in ins.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
            grads[id] = Some(g);
        }

        let params = self.params.borrow().clone();
        for &id in params.values() {
            if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(nodes[id].value.shape()));
            }
        }
        Ok(Gradients { grads, params })
    }
}

/// Extra argument for [`Tape::apply`].
#[derive(Debug, Clone, Copy)]
pub enum OpArg<'a> {
    None,
    Scalar(f64),
    Range(f64, f64),
    Labels(&'a [usize]),
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if the loss depends on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a registered parameter. Registered parameters the loss
    /// does not reach get a zero gradient.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .get(name)
            .and_then(|&id| self.grads[id].as_ref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn shape_err(op: OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

// Fallible shape-checked arithmetic, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        self.tape.push(op, &[self.id], out, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(op, &[self.id, other.id], value, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err(OpKind::MatMul, &a, &b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
        Ok(self.binary(other, Op::MatMul, Tensor::matrix(m, n, c)?))
    }

    fn zip(self, other: Var<'t>, kind: OpKind, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(kind, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, op, out))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, OpKind::Add, Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, OpKind::Sub, Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, OpKind::Mul, Op::Mul, |x, y| x * y)
    }

    /// `[rows, n] + [n]`, adding the vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let (a, b) = (self.value(), row.value());
        if a.rank() != 2 || b.rank() != 1 || a.cols() != b.numel() {
            return Err(shape_err(OpKind::AddRow, &a, &b));
        }
        let n = b.numel();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(row, Op::AddRow, out))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log, |x| x.max(LOG_FLOOR).ln())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, kernels::sigmoid)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .push(Op::Sum, &[self.id], Tensor::scalar(s), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let m = x.sum() / x.numel() as f64;
        self.tape
            .push(Op::Mean, &[self.id], Tensor::scalar(m), self.requires_grad())
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let label_shape = Tensor::vector(labels.iter().map(|&l| l as f64).collect::<Vec<_>>());
        if logits.rank() != 2 || logits.rows() != labels.len() {
            return Err(shape_err(OpKind::SoftmaxCrossEntropy, &logits, &label_shape));
        }
        let c = logits.cols();
        if labels.iter().any(|&l| l >= c) {
            return Err(shape_err(OpKind::SoftmaxCrossEntropy, &logits, &label_shape));
        }
        let probs = kernels::softmax_rows(logits.data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs[r * c + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let op = Op::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
            probs,
        };
        Ok(self
            .tape
            .push(op, &[self.id], Tensor::scalar(loss), self.requires_grad()))
    }
}

/// Vector-Jacobian products of one node for the inputs flagged in `wants`.
fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor, wants: &[bool]) -> Vec<Option<Tensor>> {
    let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&x, &y), &g)| f(x, y, g))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape as input")
    };
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = want(0).then(|| {
                let mut d = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut d);
                Tensor::matrix(m, k, d).unwrap()
            });
            let db = want(1).then(|| {
                let mut d = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut d);
                Tensor::matrix(k, n, d).unwrap()
            });
            vec![da, db]
        }
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
        Op::Mul => {
            let prod = |other: &Tensor| {
                let data = other.data().iter().zip(g.data()).map(|(o, g)| o * g).collect();
                Tensor::new(g.shape().to_vec(), data).unwrap()
            };
            vec![
                want(0).then(|| prod(inputs[1])),
                want(1).then(|| prod(inputs[0])),
            ]
        }
        Op::AddRow => {
            let n = inputs[1].numel();
            let db = want(1).then(|| {
                let mut acc = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::vector(acc)
            });
            vec![want(0).then(|| g.clone()), db]
        }
        Op::Exp => vec![want(0).then(|| elementwise(inputs[0], &|_, y, g| y * g))],
        Op::Log => vec![want(0).then(|| {
            elementwise(inputs[0], &|x, _, g| if x > LOG_FLOOR { g / x } else { 0.0 })
        })],
        Op::Tanh => vec![want(0).then(|| elementwise(inputs[0], &|_, y, g| (1.0 - y * y) * g))],
        Op::Relu => vec![want(0).then(|| elementwise(inputs[0], &|x, _, g| if x > 0.0 { g } else { 0.0 }))],
        Op::Sigmoid => vec![want(0).then(|| elementwise(inputs[0], &|_, y, g| y * (1.0 - y) * g))],
        Op::Square => vec![want(0).then(|| elementwise(inputs[0], &|x, _, g| 2.0 * x * g))],
        Op::Scale(c) => vec![want(0).then(|| g.map(|v| c * v))],
        Op::AddScalar => vec![want(0).then(|| g.clone())],
        Op::Clamp(lo, hi) => vec![want(0).then(|| {
            let (lo, hi) = (*lo, *hi);
            let data = inputs[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| if x > lo && x < hi { g } else { 0.0 })
                .collect();
            Tensor::new(inputs[0].shape().to_vec(), data).unwrap()
        })],
        Op::Sum => vec![want(0).then(|| Tensor::full(inputs[0].shape(), g.item()))],
        Op::Mean => vec![want(0).then(|| {
            let n = inputs[0].numel() as f64;
            Tensor::full(inputs[0].shape(), g.item() / n)
        })],
        Op::SoftmaxCrossEntropy { labels, probs } => vec![want(0).then(|| {
            let c = inputs[0].cols();
            let scale = g.item() / labels.len() as f64;
            let mut d = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                d[r * c + l] -= 1.0;
            }
            for v in &mut d {
                *v *= scale;
            }
            Tensor::new(inputs[0].shape().to_vec(), d).unwrap()
        })],
    }
}
