use super::graph::{Graph, NodeId, Op};
use super::{logistic, nonneg, nonneg_slope, softplus, DiffError};

/// Evaluation schedule for a fixed set of roots.
///
/// Nodes that depend only on parameters are computed once by
/// [`Program::prepare`]; the rest are recomputed by [`Program::forward`]
/// for every sample. Adjoints of the parameter-only part accumulate across
/// calls to [`Program::backward`] and are pushed into the parameter
/// gradient by [`Program::finish_static`].
#[derive(Debug, Clone)]
pub struct Program {
    roots: Vec<NodeId>,
    static_order: Vec<u32>,
    dyn_order: Vec<u32>,
    inputs: Vec<(u32, usize)>,
}

/// Value and adjoint buffers for one [`Program`].
#[derive(Debug, Clone)]
pub struct Workspace {
    vals: Vec<f64>,
    adj: Vec<f64>,
}

impl Workspace {
    pub fn value<'a>(&'a self, g: &Graph, id: NodeId) -> &'a [f64] {
        let n = &g.nodes[id.index()];
        &self.vals[n.offset..n.offset + n.len]
    }

    pub fn scalar(&self, g: &Graph, id: NodeId) -> f64 {
        self.vals[g.nodes[id.index()].offset]
    }
}

impl Program {
    pub fn new(g: &Graph, roots: &[NodeId]) -> Self {
        let top = roots.iter().map(|r| r.index()).max().map_or(0, |m| m + 1);
        let mut needed = vec![false; top];
        for r in roots {
            needed[r.index()] = true;
        }
        for i in (0..top).rev() {
            if needed[i] {
                for o in g.nodes[i].op.operands() {
                    needed[o.index()] = true;
                }
            }
        }
        let mut static_order = Vec::new();
        let mut dyn_order = Vec::new();
        let mut inputs = Vec::new();
        for (i, &keep) in needed.iter().enumerate() {
            if !keep {
                continue;
            }
            if g.nodes[i].is_static {
                static_order.push(i as u32);
            } else {
                if let Op::Input(slot) = g.nodes[i].op {
                    inputs.push((i as u32, slot));
                }
                dyn_order.push(i as u32);
            }
        }
        Program {
            roots: roots.to_vec(),
            static_order,
            dyn_order,
            inputs,
        }
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    /// Number of nodes evaluated per sample.
    pub fn dynamic_len(&self) -> usize {
        self.dyn_order.len()
    }

    /// Allocates buffers and evaluates the parameter-only part.
    pub fn prepare(&self, g: &Graph, params: &[f64]) -> Result<Workspace, DiffError> {
        let mut ws = Workspace {
            vals: vec![0.0; g.total_len()],
            adj: vec![0.0; g.total_len()],
        };
        for &i in &self.static_order {
            let i = i as usize;
            let node = &g.nodes[i];
            match node.op {
                Op::Param { offset } => {
                    let end = offset + node.len;
                    if end > params.len() {
                        return Err(DiffError::UnboundParam {
                            offset,
                            end,
                            available: params.len(),
                        });
                    }
                    ws.vals[node.offset..node.offset + node.len]
                        .copy_from_slice(&params[offset..end]);
                }
                Op::Const => {
                    let v = &g.consts[&i];
                    ws.vals[node.offset..node.offset + node.len].copy_from_slice(v);
                }
                _ => eval_node(g, i, &mut ws.vals),
            }
        }
        Ok(ws)
    }

    /// Evaluates the input-dependent part for one sample.
    pub fn forward(&self, g: &Graph, ws: &mut Workspace, inputs: &[f64]) -> Result<(), DiffError> {
        for &(i, slot) in &self.inputs {
            if slot >= inputs.len() {
                return Err(DiffError::UnboundInput {
                    slot,
                    available: inputs.len(),
                });
            }
            ws.vals[g.nodes[i as usize].offset] = inputs[slot];
        }
        for &i in &self.dyn_order {
            let i = i as usize;
            if !matches!(g.nodes[i].op, Op::Input(_)) {
                eval_node(g, i, &mut ws.vals);
            }
        }
        for &r in &self.roots {
            let n = &g.nodes[r.index()];
            if ws.vals[n.offset..n.offset + n.len]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(self.non_finite(g, ws, r));
            }
        }
        Ok(())
    }

    fn non_finite(&self, g: &Graph, ws: &Workspace, root: NodeId) -> DiffError {
        let bad = |i: usize| {
            let n = &g.nodes[i];
            ws.vals[n.offset..n.offset + n.len]
                .iter()
                .any(|v| !v.is_finite())
        };
        let mut order: Vec<u32> = self
            .static_order
            .iter()
            .chain(&self.dyn_order)
            .copied()
            .collect();
        order.sort_unstable();
        let first = order
            .iter()
            .map(|&i| i as usize)
            .find(|&i| bad(i))
            .unwrap_or(root.index());
        // walk from the first bad node towards the root through bad consumers
        let mut path = vec![first];
        let mut cur = first;
        while cur != root.index() {
            let next = order.iter().map(|&i| i as usize).find(|&i| {
                i > cur && i <= root.index() && bad(i) && g.nodes[i].op.operands().any(|o| o.index() == cur)
            });
            match next {
                Some(n) => {
                    path.push(n);
                    cur = n;
                }
                None => break,
            }
        }
        DiffError::NonFinite {
            node: first,
            op: g.nodes[first].op.name(),
            path,
        }
    }

    /// Reverse sweep through the input-dependent part for the sample held in
    /// `ws`, with `seeds[k]` as the adjoint of `roots[k]` (scalar roots).
    pub fn backward(&self, g: &Graph, ws: &mut Workspace, seeds: &[f64]) {
        for &i in &self.dyn_order {
            let n = &g.nodes[i as usize];
            ws.adj[n.offset..n.offset + n.len].fill(0.0);
        }
        for (r, &s) in self.roots.iter().zip(seeds) {
            let n = &g.nodes[r.index()];
            ws.adj[n.offset] += s;
        }
        for &i in self.dyn_order.iter().rev() {
            back_node(g, i as usize, &ws.vals, &mut ws.adj);
        }
    }

    /// Clears the accumulated adjoints of the parameter-only part.
    pub fn reset_static(&self, g: &Graph, ws: &mut Workspace) {
        for &i in &self.static_order {
            let n = &g.nodes[i as usize];
            ws.adj[n.offset..n.offset + n.len].fill(0.0);
        }
    }

    /// Pushes accumulated adjoints through the parameter-only part and adds
    /// them to `grad`. Clears the accumulated adjoints afterwards.
    pub fn finish_static(&self, g: &Graph, ws: &mut Workspace, grad: &mut [f64]) {
        for &i in self.static_order.iter().rev() {
            let i = i as usize;
            let node = &g.nodes[i];
            match node.op {
                Op::Param { offset } => {
                    let a = &ws.adj[node.offset..node.offset + node.len];
                    for (gr, &v) in grad[offset..offset + node.len].iter_mut().zip(a) {
                        *gr += v;
                    }
                }
                Op::Const => {}
                _ => back_node(g, i, &ws.vals, &mut ws.adj),
            }
        }
        self.reset_static(g, ws);
    }
}

#[inline]
fn slot(g: &Graph, id: NodeId) -> (usize, usize) {
    let n = &g.nodes[id.index()];
    (n.offset, n.len)
}

fn eval_node(g: &Graph, i: usize, vals: &mut [f64]) {
    let node = &g.nodes[i];
    let (lo, hi) = vals.split_at_mut(node.offset);
    let out = &mut hi[..node.len];
    let get = |id: NodeId| {
        let (o, l) = slot(g, id);
        &lo[o..o + l]
    };
    let unary = |out: &mut [f64], a: NodeId, f: &dyn Fn(f64) -> f64| {
        for (y, &x) in out.iter_mut().zip(get(a)) {
            *y = f(x);
        }
    };
    match &node.op {
        Op::Input(_) | Op::Param { .. } | Op::Const => {}
        Op::Stack(items) => {
            for (y, &it) in out.iter_mut().zip(items) {
                *y = get(it)[0];
            }
        }
        Op::Index(a, k) => out[0] = get(*a)[*k],
        Op::Broadcast(a) => out.fill(get(*a)[0]),
        Op::Add(a, b) => binary(out, get(*a), get(*b), |x, y| x + y),
        Op::Sub(a, b) => binary(out, get(*a), get(*b), |x, y| x - y),
        Op::Mul(a, b) => binary(out, get(*a), get(*b), |x, y| x * y),
        Op::MatVec {
            mat,
            vec,
            rows: _,
            cols,
        } => {
            let m = get(*mat);
            let x = get(*vec);
            for (r, y) in out.iter_mut().enumerate() {
                let row = &m[r * cols..(r + 1) * cols];
                *y = row.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        Op::Scale(a, c) => unary(out, *a, &|x| c * x),
        Op::Sum(a) => out[0] = get(*a).iter().sum(),
        Op::Neg(a) => unary(out, *a, &|x| -x),
        Op::Recip(a) => unary(out, *a, &|x| 1.0 / x),
        Op::Log(a) => unary(out, *a, &f64::ln),
        Op::Exp(a) => unary(out, *a, &f64::exp),
        Op::Powf(a, c) => {
            if *c == 2.0 {
                unary(out, *a, &|x| x * x)
            } else {
                unary(out, *a, &|x| x.powf(*c))
            }
        }
        Op::Softplus(a) => unary(out, *a, &softplus),
        Op::Logistic(a) => unary(out, *a, &logistic),
        Op::NonNeg(a, eps) => unary(out, *a, &|x| nonneg(x, *eps)),
        Op::NonNegSlope(a, eps) => unary(out, *a, &|x| nonneg_slope(x, *eps)),
    }
}

#[inline]
fn binary(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    match (a.len(), b.len()) {
        (la, lb) if la == lb => {
            for ((y, &x), &z) in out.iter_mut().zip(a).zip(b) {
                *y = f(x, z);
            }
        }
        (1, _) => {
            for (y, &z) in out.iter_mut().zip(b) {
                *y = f(a[0], z);
            }
        }
        _ => {
            for (y, &x) in out.iter_mut().zip(a) {
                *y = f(x, b[0]);
            }
        }
    }
}

/// Adds `g * d(node)/d(operand)` into operand adjoints.
fn back_node(g: &Graph, i: usize, vals: &[f64], adj: &mut [f64]) {
    let node = &g.nodes[i];
    let (lo, hi) = adj.split_at_mut(node.offset);
    let gout = &hi[..node.len];
    if gout.iter().all(|&v| v == 0.0) {
        return;
    }
    let y = &vals[node.offset..node.offset + node.len];
    let val = |id: NodeId| {
        let (o, l) = slot(g, id);
        &vals[o..o + l]
    };
    // operand adjoint slices are disjoint from `gout`; operands may alias
    // each other, so they are written one at a time.
    macro_rules! adj_of {
        ($id:expr) => {{
            let (o, l) = slot(g, $id);
            &mut lo[o..o + l]
        }};
    }
    let unary = |lo: &mut [f64], a: NodeId, d: &dyn Fn(usize, f64) -> f64| {
        let (o, l) = slot(g, a);
        let xa = val(a);
        for (k, ga) in lo[o..o + l].iter_mut().enumerate() {
            *ga += gout[k] * d(k, xa[k]);
        }
    };
    match &node.op {
        Op::Input(_) | Op::Param { .. } | Op::Const => {}
        Op::Stack(items) => {
            for (k, &it) in items.iter().enumerate() {
                adj_of!(it)[0] += gout[k];
            }
        }
        Op::Index(a, k) => adj_of!(*a)[*k] += gout[0],
        Op::Broadcast(a) => adj_of!(*a)[0] += gout.iter().sum::<f64>(),
        Op::Add(a, b) => {
            accumulate(adj_of!(*a), gout, |_| 1.0);
            accumulate(adj_of!(*b), gout, |_| 1.0);
        }
        Op::Sub(a, b) => {
            accumulate(adj_of!(*a), gout, |_| 1.0);
            accumulate(adj_of!(*b), gout, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(adj_of!(*a), gout, |k| pick(vb, k));
            accumulate(adj_of!(*b), gout, |k| pick(va, k));
        }
        Op::MatVec {
            mat,
            vec,
            rows: _,
            cols,
        } => {
            let cols = *cols;
            let m = val(*mat);
            let x = val(*vec);
            {
                let am = adj_of!(*mat);
                for (r, &gr) in gout.iter().enumerate() {
                    if gr != 0.0 {
                        for (a, &xc) in am[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                            *a += gr * xc;
                        }
                    }
                }
            }
            let ax = adj_of!(*vec);
            for (r, &gr) in gout.iter().enumerate() {
                if gr != 0.0 {
                    for (a, &mc) in ax.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                        *a += gr * mc;
                    }
                }
            }
        }
        Op::Scale(a, c) => unary(lo, *a, &|_, _| *c),
        Op::Sum(a) => {
            for ga in adj_of!(*a).iter_mut() {
                *ga += gout[0];
            }
        }
        Op::Neg(a) => unary(lo, *a, &|_, _| -1.0),
        Op::Recip(a) => unary(lo, *a, &|k, _| -y[k] * y[k]),
        Op::Log(a) => unary(lo, *a, &|_, x| 1.0 / x),
        Op::Exp(a) => unary(lo, *a, &|k, _| y[k]),
        Op::Powf(a, c) => unary(lo, *a, &|_, x| {
            if *c == 2.0 {
                2.0 * x
            } else {
                c * x.powf(c - 1.0)
            }
        }),
        Op::Softplus(a) => unary(lo, *a, &|_, x| logistic(x)),
        Op::Logistic(a) => unary(lo, *a, &|k, _| y[k] * (1.0 - y[k])),
        Op::NonNeg(a, eps) => unary(lo, *a, &|_, x| nonneg_slope(x, *eps)),
        Op::NonNegSlope(a, eps) => unary(lo, *a, &|_, x| {
            if x >= 0.0 {
                0.0
            } else {
                (x - eps).exp()
            }
        }),
    }
}

#[inline]
fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

/// `adj_operand += gout * d(k)`, summing over broadcast positions when the
/// operand is a scalar.
#[inline]
fn accumulate(a: &mut [f64], gout: &[f64], d: impl Fn(usize) -> f64) {
    if a.len() == gout.len() {
        for (k, ga) in a.iter_mut().enumerate() {
            *ga += gout[k] * d(k);
        }
    } else {
        a[0] += gout.iter().enumerate().map(|(k, &gk)| gk * d(k)).sum::<f64>();
    }
}
