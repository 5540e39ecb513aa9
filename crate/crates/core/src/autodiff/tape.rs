use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Primitive operation kinds, reported in errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Div,
    SafeDiv,
    AddScalar,
    MulScalar,
    ScaleBy,
    Exp,
    Log,
    Pow,
    Sqrt,
    Max,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    MulConst,
    Sum,
    SumRows,
    SumCols,
    Broadcast,
    MatMul,
    Transpose,
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpTag::Leaf => "leaf",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Neg => "neg",
            OpTag::Div => "div",
            OpTag::SafeDiv => "safe-div",
            OpTag::AddScalar => "add-scalar",
            OpTag::MulScalar => "mul-scalar",
            OpTag::ScaleBy => "scale-by",
            OpTag::Exp => "exp",
            OpTag::Log => "log",
            OpTag::Pow => "pow",
            OpTag::Sqrt => "sqrt",
            OpTag::Max => "max",
            OpTag::Relu => "relu",
            OpTag::Sigmoid => "sigmoid",
            OpTag::Tanh => "tanh",
            OpTag::Abs => "abs",
            OpTag::MulConst => "mul-const",
            OpTag::Sum => "sum",
            OpTag::SumRows => "sum-rows",
            OpTag::SumCols => "sum-cols",
            OpTag::Broadcast => "broadcast",
            OpTag::MatMul => "matmul",
            OpTag::Transpose => "transpose",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Division that yields 0 wherever the denominator is exactly 0.
    SafeDiv(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    /// `s * a` with `s` a 1×1 node.
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Pow(NodeId, f64),
    Sqrt(NodeId),
    Max(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    /// Elementwise product with a constant array.
    MulConst(NodeId, Arc<Matrix>),
    Sum(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    BroadcastRows(NodeId, usize),
    BroadcastCols(NodeId, usize),
    BroadcastScalar(NodeId, (usize, usize)),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
}

impl Op {
    pub(crate) fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Div(..) => OpTag::Div,
            Op::SafeDiv(..) => OpTag::SafeDiv,
            Op::Neg(_) => OpTag::Neg,
            Op::AddScalar(..) => OpTag::AddScalar,
            Op::MulScalar(..) => OpTag::MulScalar,
            Op::ScaleBy(..) => OpTag::ScaleBy,
            Op::Exp(_) => OpTag::Exp,
            Op::Log(_) => OpTag::Log,
            Op::Pow(..) => OpTag::Pow,
            Op::Sqrt(_) => OpTag::Sqrt,
            Op::Max(..) => OpTag::Max,
            Op::Relu(_) => OpTag::Relu,
            Op::Sigmoid(_) => OpTag::Sigmoid,
            Op::Tanh(_) => OpTag::Tanh,
            Op::Abs(_) => OpTag::Abs,
            Op::MulConst(..) => OpTag::MulConst,
            Op::Sum(_) => OpTag::Sum,
            Op::SumRows(_) => OpTag::SumRows,
            Op::SumCols(_) => OpTag::SumCols,
            Op::BroadcastRows(..) | Op::BroadcastCols(..) | Op::BroadcastScalar(..) => {
                OpTag::Broadcast
            }
            Op::MatMul(..) => OpTag::MatMul,
            Op::Transpose(_) => OpTag::Transpose,
        }
    }

    fn parents(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Op::Leaf => (None, None),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::SafeDiv(a, b)
            | Op::ScaleBy(a, b)
            | Op::Max(a, b)
            | Op::MatMul(a, b) => (Some(a), Some(b)),
            Op::Neg(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::MulConst(a, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::BroadcastScalar(a, _)
            | Op::Transpose(a) => (Some(a), None),
        }
    }
}

fn same_shape(op: &str, a: &Matrix, b: &Matrix) {
    assert_eq!(a.dim(), b.dim(), "{op}: operand shapes {:?} and {:?} differ", a.dim(), b.dim());
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates one op given access to already-computed parent values.
fn eval_op<'a>(op: &Op, val: impl Fn(NodeId) -> &'a Matrix) -> Matrix {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => {
            same_shape("add", val(*a), val(*b));
            val(*a) + val(*b)
        }
        Op::Sub(a, b) => {
            same_shape("sub", val(*a), val(*b));
            val(*a) - val(*b)
        }
        Op::Mul(a, b) => {
            same_shape("mul", val(*a), val(*b));
            val(*a) * val(*b)
        }
        Op::Div(a, b) => {
            same_shape("div", val(*a), val(*b));
            val(*a) / val(*b)
        }
        Op::SafeDiv(a, b) => {
            same_shape("safe-div", val(*a), val(*b));
            Zip::from(val(*a))
                .and(val(*b))
                .map_collect(|&x, &y| if y == 0.0 { 0.0 } else { x / y })
        }
        Op::Neg(a) => -val(*a),
        Op::AddScalar(a, c) => val(*a) + *c,
        Op::MulScalar(a, c) => val(*a) * *c,
        Op::ScaleBy(s, a) => {
            let s = val(*s);
            assert_eq!(s.dim(), (1, 1), "scale-by: scale must be 1x1");
            val(*a) * s[[0, 0]]
        }
        Op::Exp(a) => val(*a).mapv(f64::exp),
        Op::Log(a) => val(*a).mapv(f64::ln),
        Op::Pow(a, k) => {
            let k = *k;
            val(*a).mapv(|x| x.powf(k))
        }
        Op::Sqrt(a) => val(*a).mapv(f64::sqrt),
        Op::Max(a, b) => {
            same_shape("max", val(*a), val(*b));
            Zip::from(val(*a)).and(val(*b)).map_collect(|&x, &y| x.max(y))
        }
        Op::Relu(a) => val(*a).mapv(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Sigmoid(a) => val(*a).mapv(sigmoid),
        Op::Tanh(a) => val(*a).mapv(f64::tanh),
        Op::Abs(a) => val(*a).mapv(f64::abs),
        Op::MulConst(a, c) => {
            same_shape("mul-const", val(*a), c);
            val(*a) * &**c
        }
        Op::Sum(a) => Array2::from_elem((1, 1), val(*a).sum()),
        Op::SumRows(a) => val(*a).sum_axis(Axis(0)).insert_axis(Axis(0)),
        Op::SumCols(a) => val(*a).sum_axis(Axis(1)).insert_axis(Axis(1)),
        Op::BroadcastRows(a, n) => {
            let v = val(*a);
            assert_eq!(v.nrows(), 1, "broadcast-rows expects a row vector");
            v.broadcast((*n, v.ncols())).unwrap().to_owned()
        }
        Op::BroadcastCols(a, m) => {
            let v = val(*a);
            assert_eq!(v.ncols(), 1, "broadcast-cols expects a column vector");
            v.broadcast((v.nrows(), *m)).unwrap().to_owned()
        }
        Op::BroadcastScalar(a, shape) => {
            let v = val(*a);
            assert_eq!(v.dim(), (1, 1), "broadcast-scalar expects 1x1");
            Array2::from_elem(*shape, v[[0, 0]])
        }
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            assert_eq!(x.ncols(), y.nrows(), "matmul: {:?} x {:?}", x.dim(), y.dim());
            x.dot(y)
        }
        Op::Transpose(a) => val(*a).t().to_owned(),
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    non_finite: Option<(usize, OpTag)>,
}

/// Append-only record of a computation. Values are dense `f64` matrices;
/// scalars are 1×1.
///
/// [`Tape::grad`] differentiates by appending the adjoint computation to the
/// same tape, so gradients are ordinary nodes and can be differentiated again.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Position on a tape that [`Tape::truncate`] can roll back to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint(usize);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let nodes = &inner.nodes;
            eval_op(&op, |id| &nodes[id.0].value)
        };
        self.push_node(value, op)
    }

    fn push_node(&self, value: Matrix, op: Op) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            inner.non_finite = Some((id, op.tag()));
        }
        inner.nodes.push(Node { value, op });
        NodeId(id)
    }

    /// Records a leaf (input, parameter, or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        let id = self.push_node(value, Op::Leaf);
        Var { tape: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn zeros(&self, shape: (usize, usize)) -> Var<'_> {
        self.leaf(Array2::zeros(shape))
    }

    /// Handle for an existing node.
    pub fn var(&self, id: NodeId) -> Result<Var<'_>> {
        if id.0 < self.len() {
            Ok(Var { tape: self, id })
        } else {
            Err(Error::InvalidNode(id.0))
        }
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Matrix> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[id.0].value)
    }

    pub fn op_tag(&self, id: NodeId) -> OpTag {
        self.inner.borrow().nodes[id.0].op.tag()
    }

    /// Parents of a node; each precedes the node in tape order.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        let (a, b) = self.inner.borrow().nodes[id.0].op.parents();
        a.into_iter().chain(b).collect()
    }

    /// Fails with the first op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.inner.borrow().non_finite {
            Some((_, op)) => Err(Error::NonFiniteValue { op }),
            None => Ok(()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.len())
    }

    /// Drops every node recorded after `cp`. Handles to dropped nodes become invalid.
    pub fn truncate(&self, cp: Checkpoint) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.truncate(cp.0);
        if matches!(inner.non_finite, Some((id, _)) if id >= cp.0) {
            inner.non_finite = None;
        }
    }

    /// Recomputes every non-leaf node from the leaves.
    pub fn replay(&self) -> Vec<Matrix> {
        let inner = self.inner.borrow();
        let mut out: Vec<Matrix> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval_op(op, |id| &out[id.0]),
            };
            out.push(v);
        }
        out
    }

    fn op(&self, id: NodeId) -> Op {
        self.inner.borrow().nodes[id.0].op.clone()
    }

    fn dim(&self, id: NodeId) -> (usize, usize) {
        self.inner.borrow().nodes[id.0].value.dim()
    }

    fn var_unchecked(&self, id: NodeId) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Reverse-mode gradient of `sum(output)` with respect to each node in
    /// `wrt`. The adjoint computation is recorded on this tape, so each
    /// returned node can itself be differentiated.
    ///
    /// Derivative conventions at kinks: relu'(x) = 1 for x > 0 and 0
    /// otherwise, abs'(0) = 0, max routes ties to its first argument,
    /// sqrt'(0) = 0. Masks are recorded as constants, so relu and abs have
    /// zero second derivative.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let len = self.len();
        if output.0 >= len {
            return Err(Error::InvalidNode(output.0));
        }
        if let Some(bad) = wrt.iter().find(|w| w.0 >= len) {
            return Err(Error::InvalidNode(bad.0));
        }
        let lo = wrt.iter().map(|w| w.0).min().unwrap_or(output.0).min(output.0);

        // Nodes in [lo, output] that depend on some wrt node.
        let span = output.0 + 1 - lo;
        let mut depends = vec![false; span];
        for w in wrt {
            if w.0 <= output.0 {
                depends[w.0 - lo] = true;
            }
        }
        {
            let inner = self.inner.borrow();
            for i in lo..=output.0 {
                if depends[i - lo] {
                    continue;
                }
                let (a, b) = inner.nodes[i].op.parents();
                depends[i - lo] = [a, b]
                    .into_iter()
                    .flatten()
                    .any(|p| p.0 >= lo && depends[p.0 - lo]);
            }
        }
        let relevant = |id: NodeId| id.0 >= lo && depends[id.0 - lo];

        let mut adj: Vec<Option<NodeId>> = vec![None; span];
        if relevant(output) {
            let seed = Array2::ones(self.dim(output));
            adj[output.0 - lo] = Some(self.push_node(seed, Op::Leaf));
        }

        for i in (lo..=output.0).rev() {
            let Some(g) = adj[i - lo] else { continue };
            let id = NodeId(i);
            let op = self.op(id);
            for (parent, contrib) in self.vjp(&op, id, g, &relevant) {
                let slot = &mut adj[parent.0 - lo];
                *slot = Some(match *slot {
                    None => contrib,
                    Some(prev) => self.push(Op::Add(prev, contrib)),
                });
            }
        }

        let grads = wrt
            .iter()
            .map(|w| match w.0 <= output.0 {
                true => adj[w.0 - lo],
                false => None,
            })
            .map(|g| g.unwrap_or(NodeId(usize::MAX)))
            .zip(wrt)
            .map(|(g, w)| {
                if g.0 == usize::MAX {
                    self.push_node(Array2::zeros(self.dim(*w)), Op::Leaf)
                } else {
                    g
                }
            })
            .collect();
        self.check_finite()?;
        Ok(grads)
    }

    /// Vector-Jacobian products for one node, restricted to relevant parents.
    fn vjp<'t>(
        &'t self,
        op: &Op,
        out: NodeId,
        g: NodeId,
        relevant: &dyn Fn(NodeId) -> bool,
    ) -> Vec<(NodeId, NodeId)> {
        let mut v = Vec::with_capacity(2);
        let t = self;
        let var = |id| t.var_unchecked(id);
        let mut emit = |p: NodeId, f: &dyn Fn() -> Var<'t>| {
            if relevant(p) {
                v.push((p, f().id));
            }
        };
        let g = var(g);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| -g);
            }
            Op::Mul(a, b) => {
                emit(a, &|| g * var(b));
                emit(b, &|| g * var(a));
            }
            Op::Div(a, b) => {
                emit(a, &|| g / var(b));
                emit(b, &|| -(g * var(out) / var(b)));
            }
            Op::SafeDiv(a, b) => {
                emit(a, &|| g.safe_div(var(b)));
                emit(b, &|| -(g * var(out)).safe_div(var(b)));
            }
            Op::Neg(a) => emit(a, &|| -g),
            Op::AddScalar(a, _) => emit(a, &|| g),
            Op::MulScalar(a, c) => emit(a, &|| g * c),
            Op::ScaleBy(s, a) => {
                emit(a, &|| g.scale_by(var(s)));
                emit(s, &|| (g * var(a)).sum());
            }
            Op::Exp(a) => emit(a, &|| g * var(out)),
            Op::Log(a) => emit(a, &|| g / var(a)),
            Op::Pow(a, k) => {
                if k != 0.0 {
                    emit(a, &|| {
                        let d = if k == 2.0 { var(a) } else { var(a).powf(k - 1.0) };
                        (g * d) * k
                    });
                }
            }
            Op::Sqrt(a) => emit(a, &|| (g * 0.5).safe_div(var(out))),
            Op::Max(a, b) => {
                let (ma, mb) = {
                    let (x, y) = (t.value(a), t.value(b));
                    let ma = Zip::from(&*x).and(&*y).map_collect(|&x, &y| f64::from(x >= y));
                    let mb = ma.mapv(|m| 1.0 - m);
                    (Arc::new(ma), Arc::new(mb))
                };
                emit(a, &|| g.mul_const(ma.clone()));
                emit(b, &|| g.mul_const(mb.clone()));
            }
            Op::Relu(a) => {
                let mask = Arc::new(t.value(a).mapv(|x| f64::from(x > 0.0)));
                emit(a, &|| g.mul_const(mask.clone()));
            }
            Op::Sigmoid(a) => emit(a, &|| {
                let s = var(out);
                g * (s * (1.0 - s))
            }),
            Op::Tanh(a) => emit(a, &|| {
                let th = var(out);
                g * (1.0 - th * th)
            }),
            Op::Abs(a) => {
                let sign = Arc::new(t.value(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                emit(a, &|| g.mul_const(sign.clone()));
            }
            Op::MulConst(a, ref c) => emit(a, &|| g.mul_const(c.clone())),
            Op::Sum(a) => {
                let shape = t.dim(a);
                emit(a, &|| g.broadcast_scalar(shape));
            }
            Op::SumRows(a) => {
                let n = t.dim(a).0;
                emit(a, &|| g.broadcast_rows(n));
            }
            Op::SumCols(a) => {
                let m = t.dim(a).1;
                emit(a, &|| g.broadcast_cols(m));
            }
            Op::BroadcastRows(a, _) => emit(a, &|| g.sum_rows()),
            Op::BroadcastCols(a, _) => emit(a, &|| g.sum_cols()),
            Op::BroadcastScalar(a, _) => emit(a, &|| g.sum()),
            Op::MatMul(a, b) => {
                emit(a, &|| g.matmul(var(b).t()));
                emit(b, &|| var(a).t().matmul(g));
            }
            Op::Transpose(a) => emit(a, &|| g.t()),
        }
        v
    }
}

/// Handle to a node on a tape. Arithmetic on handles records new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id.0).field("op", &self.tape.op_tag(self.id)).finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Matrix {
        self.tape.value(self.id).clone()
    }

    /// Value of a 1×1 node.
    pub fn item(self) -> f64 {
        let v = self.tape.value(self.id);
        assert_eq!(v.dim(), (1, 1), "item() on a {:?} node", v.dim());
        v[[0, 0]]
    }

    pub fn shape(self) -> (usize, usize) {
        self.tape.dim(self.id)
    }

    fn un(self, op: Op) -> Var<'t> {
        let id = self.tape.push(op);
        Var { tape: self.tape, id }
    }

    fn check_same_tape(self, other: Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "operands live on different tapes");
    }

    pub fn exp(self) -> Var<'t> {
        self.un(Op::Exp(self.id))
    }
    pub fn ln(self) -> Var<'t> {
        self.un(Op::Log(self.id))
    }
    pub fn powf(self, k: f64) -> Var<'t> {
        self.un(Op::Pow(self.id, k))
    }
    pub fn sqrt(self) -> Var<'t> {
        self.un(Op::Sqrt(self.id))
    }
    pub fn relu(self) -> Var<'t> {
        self.un(Op::Relu(self.id))
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.un(Op::Sigmoid(self.id))
    }
    pub fn tanh(self) -> Var<'t> {
        self.un(Op::Tanh(self.id))
    }
    pub fn abs(self) -> Var<'t> {
        self.un(Op::Abs(self.id))
    }
    pub fn max(self, other: Var<'t>) -> Var<'t> {
        self.check_same_tape(other);
        self.un(Op::Max(self.id, other.id))
    }
    pub fn safe_div(self, other: Var<'t>) -> Var<'t> {
        self.check_same_tape(other);
        self.un(Op::SafeDiv(self.id, other.id))
    }
    /// Multiplies by a 1×1 node.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        self.check_same_tape(s);
        self.un(Op::ScaleBy(s.id, self.id))
    }
    pub fn mul_const(self, c: Arc<Matrix>) -> Var<'t> {
        self.un(Op::MulConst(self.id, c))
    }
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.check_same_tape(other);
        self.un(Op::MatMul(self.id, other.id))
    }
    pub fn t(self) -> Var<'t> {
        self.un(Op::Transpose(self.id))
    }
    /// Sum of all entries (1×1).
    pub fn sum(self) -> Var<'t> {
        self.un(Op::Sum(self.id))
    }
    /// Column sums as a 1×m row.
    pub fn sum_rows(self) -> Var<'t> {
        self.un(Op::SumRows(self.id))
    }
    /// Row sums as an n×1 column.
    pub fn sum_cols(self) -> Var<'t> {
        self.un(Op::SumCols(self.id))
    }
    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum() * (1.0 / (r * c) as f64)
    }
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        self.un(Op::BroadcastRows(self.id, n))
    }
    pub fn broadcast_cols(self, m: usize) -> Var<'t> {
        self.un(Op::BroadcastCols(self.id, m))
    }
    pub fn broadcast_scalar(self, shape: (usize, usize)) -> Var<'t> {
        self.un(Op::BroadcastScalar(self.id, shape))
    }
    /// Adds a 1×m row to every row of an n×m node.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let n = self.shape().0;
        self + row.broadcast_rows(n)
    }
    pub fn square(self) -> Var<'t> {
        self * self
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.check_same_tape(rhs);
                self.un(Op::$op(self.id, rhs.id))
            }
        }
    };
}
binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.un(Op::Neg(self.id))
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.un(Op::AddScalar(self.id, c))
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.un(Op::AddScalar(self.id, -c))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.un(Op::MulScalar(self.id, c))
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.un(Op::MulScalar(self.id, 1.0 / c))
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        (-v) + self
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        v.powf(-1.0) * self
    }
}
