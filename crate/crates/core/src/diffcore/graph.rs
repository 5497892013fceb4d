use std::collections::HashMap;

use super::{Bindings, DiffError, Program};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Node kinds. Operands always precede the node that uses them.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Scalar input slot.
    Input(usize),
    /// Contiguous block of the parameter vector.
    Param { offset: usize },
    /// Fixed values. Values are stored in the graph.
    Const,
    /// Gather scalars into a vector.
    Stack(Vec<NodeId>),
    /// Extract one component as a scalar.
    Index(NodeId, usize),
    /// Repeat a scalar `n` times.
    Broadcast(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product; a length-one operand broadcasts.
    Mul(NodeId, NodeId),
    /// Row-major `rows x cols` matrix times a vector of length `cols`.
    MatVec {
        mat: NodeId,
        vec: NodeId,
        rows: usize,
        cols: usize,
    },
    Scale(NodeId, f64),
    Sum(NodeId),
    Neg(NodeId),
    Recip(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Powf(NodeId, f64),
    Softplus(NodeId),
    Logistic(NodeId),
    /// `x + e^-eps` for `x >= 0`, `e^(x - eps)` otherwise.
    NonNeg(NodeId, f64),
    /// Slope of [`Op::NonNeg`]: `1` for `x >= 0`, `e^(x - eps)` otherwise.
    NonNegSlope(NodeId, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::Stack(_) => "stack",
            Op::Index(..) => "index",
            Op::Broadcast(_) => "broadcast",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatVec { .. } => "matvec",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Neg(_) => "neg",
            Op::Recip(_) => "recip",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Powf(..) => "pow",
            Op::Softplus(_) => "softplus",
            Op::Logistic(_) => "logistic",
            Op::NonNeg(..) => "nonneg",
            Op::NonNegSlope(..) => "nonneg_slope",
        }
    }

    pub(crate) fn operands(&self) -> OperandIter<'_> {
        OperandIter { op: self, pos: 0 }
    }
}

pub(crate) struct OperandIter<'a> {
    op: &'a Op,
    pos: usize,
}

impl Iterator for OperandIter<'_> {
    type Item = NodeId;

    fn next(&mut self) -> Option<NodeId> {
        let p = self.pos;
        self.pos += 1;
        match self.op {
            Op::Input(_) | Op::Param { .. } | Op::Const => None,
            Op::Stack(items) => items.get(p).copied(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => match p {
                0 => Some(*a),
                1 => Some(*b),
                _ => None,
            },
            Op::MatVec { mat, vec, .. } => match p {
                0 => Some(*mat),
                1 => Some(*vec),
                _ => None,
            },
            Op::Index(a, _)
            | Op::Broadcast(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Neg(a)
            | Op::Recip(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Powf(a, _)
            | Op::Softplus(a)
            | Op::Logistic(a)
            | Op::NonNeg(a, _)
            | Op::NonNegSlope(a, _) => (p == 0).then_some(*a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum OpKey {
    Param(usize, usize),
    Const(Vec<u64>),
    Stack(Vec<NodeId>),
    Index(NodeId, usize),
    Broadcast(NodeId, usize),
    Binary(u8, NodeId, NodeId),
    MatVec(NodeId, NodeId, usize, usize),
    Unary(u8, NodeId),
    UnaryParam(u8, NodeId, u64),
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub len: usize,
    pub offset: usize,
    /// True when the node depends on parameters and constants only.
    pub is_static: bool,
}

/// Append-only expression arena. Structurally identical nodes are shared.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) consts: HashMap<usize, Vec<f64>>,
    total_len: usize,
    n_inputs: usize,
    dedup: HashMap<OpKey, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of input slots referenced so far (highest slot + 1).
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub(crate) fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.index()].len
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.index()].op
    }

    pub fn is_static(&self, id: NodeId) -> bool {
        self.nodes[id.index()].is_static
    }

    fn push(&mut self, op: Op, len: usize, key: Option<OpKey>) -> NodeId {
        if let Some(k) = &key {
            if let Some(&id) = self.dedup.get(k) {
                return id;
            }
        }
        let is_static = match &op {
            Op::Input(_) => false,
            Op::Param { .. } | Op::Const => true,
            other => other.operands().all(|o| self.nodes[o.index()].is_static),
        };
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            len,
            offset: self.total_len,
            is_static,
        });
        self.total_len += len;
        if let Some(k) = key {
            self.dedup.insert(k, id);
        }
        id
    }

    /// Scalar input bound from `Bindings::inputs[slot]`.
    pub fn input(&mut self, slot: usize) -> NodeId {
        self.n_inputs = self.n_inputs.max(slot + 1);
        // inputs are shared per slot
        self.push(Op::Input(slot), 1, Some(OpKey::Unary(255, NodeId(slot as u32))))
    }

    /// Parameter block `params[offset..offset + len]`.
    pub fn param(&mut self, offset: usize, len: usize) -> NodeId {
        self.push(Op::Param { offset }, len, Some(OpKey::Param(offset, len)))
    }

    /// Shared constant vector.
    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        let key = OpKey::Const(values.iter().map(|v| v.to_bits()).collect());
        if let Some(&id) = self.dedup.get(&key) {
            return id;
        }
        let id = self.push(Op::Const, values.len(), Some(key));
        self.consts.insert(id.index(), values.to_vec());
        id
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(&[value])
    }

    /// A constant that is never shared with other nodes. Use it as an
    /// evaluation point that will later be differentiated against.
    pub fn fresh_constant(&mut self, values: &[f64]) -> NodeId {
        let id = self.push(Op::Const, values.len(), None);
        self.consts.insert(id.index(), values.to_vec());
        id
    }

    pub fn stack(&mut self, items: &[NodeId]) -> NodeId {
        for &i in items {
            assert_eq!(self.node_len(i), 1, "stack expects scalar operands");
        }
        if items.len() == 1 {
            return items[0];
        }
        self.push(
            Op::Stack(items.to_vec()),
            items.len(),
            Some(OpKey::Stack(items.to_vec())),
        )
    }

    pub fn index(&mut self, a: NodeId, k: usize) -> NodeId {
        let n = self.node_len(a);
        assert!(k < n, "index {k} out of range for length {n}");
        if n == 1 {
            return a;
        }
        self.push(Op::Index(a, k), 1, Some(OpKey::Index(a, k)))
    }

    pub fn broadcast(&mut self, a: NodeId, n: usize) -> NodeId {
        assert_eq!(self.node_len(a), 1, "broadcast expects a scalar");
        if n == 1 {
            return a;
        }
        self.push(Op::Broadcast(a), n, Some(OpKey::Broadcast(a, n)))
    }

    fn binary_len(&self, a: NodeId, b: NodeId) -> usize {
        let (la, lb) = (self.node_len(a), self.node_len(b));
        assert!(
            la == lb || la == 1 || lb == 1,
            "length mismatch in binary op: {la} vs {lb}"
        );
        la.max(lb)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let len = self.binary_len(a, b);
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.push(Op::Add(a, b), len, Some(OpKey::Binary(0, x, y)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let len = self.binary_len(a, b);
        self.push(Op::Sub(a, b), len, Some(OpKey::Binary(1, a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let len = self.binary_len(a, b);
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.push(Op::Mul(a, b), len, Some(OpKey::Binary(2, x, y)))
    }

    pub fn matvec(&mut self, mat: NodeId, vec: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.node_len(mat), rows * cols, "matrix shape mismatch");
        assert_eq!(self.node_len(vec), cols, "vector length mismatch");
        self.push(
            Op::MatVec {
                mat,
                vec,
                rows,
                cols,
            },
            rows,
            Some(OpKey::MatVec(mat, vec, rows, cols)),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        if c == 1.0 {
            return a;
        }
        let len = self.node_len(a);
        self.push(
            Op::Scale(a, c),
            len,
            Some(OpKey::UnaryParam(0, a, c.to_bits())),
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        if self.node_len(a) == 1 {
            return a;
        }
        self.push(Op::Sum(a), 1, Some(OpKey::Unary(0, a)))
    }

    fn unary(&mut self, op: Op, tag: u8, a: NodeId) -> NodeId {
        let len = self.node_len(a);
        self.push(op, len, Some(OpKey::Unary(tag, a)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg(a), 1, a)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Recip(a), 2, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), 3, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), 4, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), 5, a)
    }

    pub fn logistic(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Logistic(a), 6, a)
    }

    pub fn powf(&mut self, a: NodeId, c: f64) -> NodeId {
        if c == 1.0 {
            return a;
        }
        let len = self.node_len(a);
        self.push(
            Op::Powf(a, c),
            len,
            Some(OpKey::UnaryParam(1, a, c.to_bits())),
        )
    }

    pub fn nonneg(&mut self, a: NodeId, eps: f64) -> NodeId {
        let len = self.node_len(a);
        self.push(
            Op::NonNeg(a, eps),
            len,
            Some(OpKey::UnaryParam(2, a, eps.to_bits())),
        )
    }

    pub fn nonneg_slope(&mut self, a: NodeId, eps: f64) -> NodeId {
        let len = self.node_len(a);
        self.push(
            Op::NonNegSlope(a, eps),
            len,
            Some(OpKey::UnaryParam(3, a, eps.to_bits())),
        )
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Input node for `slot`, if one exists.
    pub fn find_input(&self, slot: usize) -> Option<NodeId> {
        self.dedup
            .get(&OpKey::Unary(255, NodeId(slot as u32)))
            .copied()
    }

    /// Scalar value of `root`.
    pub fn evaluate(&self, root: NodeId, b: &Bindings) -> Result<f64, DiffError> {
        if self.node_len(root) != 1 {
            return Err(DiffError::NotScalar(root.index()));
        }
        let prog = Program::new(self, &[root]);
        let mut ws = prog.prepare(self, b.params)?;
        prog.forward(self, &mut ws, b.inputs)?;
        Ok(ws.value(self, root)[0])
    }

    /// Vector value of any node.
    pub fn evaluate_vector(&self, root: NodeId, b: &Bindings) -> Result<Vec<f64>, DiffError> {
        let prog = Program::new(self, &[root]);
        let mut ws = prog.prepare(self, b.params)?;
        prog.forward(self, &mut ws, b.inputs)?;
        Ok(ws.value(self, root).to_vec())
    }

    /// Node for the derivative of scalar `root` with respect to input slot
    /// `which_input`. The returned node is an ordinary graph node and can be
    /// differentiated again.
    pub fn input_derivative(&mut self, root: NodeId, which_input: usize) -> Result<NodeId, DiffError> {
        let x = self
            .find_input(which_input)
            .ok_or(DiffError::NoSuchInput(which_input))?;
        Ok(self.tangent(root, x))
    }

    /// Gradient of scalar `root` with respect to the whole parameter vector.
    pub fn param_gradient(&self, root: NodeId, b: &Bindings) -> Result<Vec<f64>, DiffError> {
        if self.node_len(root) != 1 {
            return Err(DiffError::NotScalar(root.index()));
        }
        let prog = Program::new(self, &[root]);
        let mut ws = prog.prepare(self, b.params)?;
        prog.forward(self, &mut ws, b.inputs)?;
        prog.backward(self, &mut ws, &[1.0]);
        let mut grad = vec![0.0; b.params.len()];
        prog.finish_static(self, &mut ws, &mut grad);
        Ok(grad)
    }
}
