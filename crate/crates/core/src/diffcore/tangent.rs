use super::graph::{Graph, NodeId, Op};

impl Graph {
    /// Builds the directional derivative of `root` along the leaf `wrt`
    /// (usually an input node, but any constant made with
    /// [`Graph::fresh_constant`] works too). Only nodes between `wrt` and
    /// `root` are visited. The result has the length of `root`.
    pub fn tangent(&mut self, root: NodeId, wrt: NodeId) -> NodeId {
        let root_len = self.node_len(root);
        if wrt > root {
            return self.constant(&vec![0.0; root_len]);
        }
        let lo = wrt.index();
        let hi = root.index();

        // ancestors of root within [lo, hi]
        let mut needed = vec![false; hi - lo + 1];
        needed[hi - lo] = true;
        for i in (lo..=hi).rev() {
            if !needed[i - lo] {
                continue;
            }
            let ops: Vec<NodeId> = self.nodes[i].op.operands().collect();
            for o in ops {
                if o.index() >= lo {
                    needed[o.index() - lo] = true;
                }
            }
        }

        let mut tan: Vec<Option<NodeId>> = vec![None; hi - lo + 1];
        let one = self.scalar(1.0);
        tan[0] = Some(if self.node_len(wrt) == 1 {
            one
        } else {
            let n = self.node_len(wrt);
            self.constant(&vec![1.0; n])
        });

        for i in lo + 1..=hi {
            if !needed[i - lo] {
                continue;
            }
            let get = |tan: &Vec<Option<NodeId>>, id: NodeId| -> Option<NodeId> {
                if id.index() < lo {
                    None
                } else {
                    tan[id.index() - lo]
                }
            };
            let node = NodeId(i as u32);
            let op = self.nodes[i].op.clone();
            let len = self.nodes[i].len;
            let t = match op {
                Op::Input(_) | Op::Param { .. } | Op::Const => None,
                Op::Stack(items) => {
                    if items.iter().any(|&x| get(&tan, x).is_some()) {
                        let zero = self.scalar(0.0);
                        let parts: Vec<NodeId> =
                            items.iter().map(|&x| get(&tan, x).unwrap_or(zero)).collect();
                        Some(self.stack(&parts))
                    } else {
                        None
                    }
                }
                Op::Index(a, k) => get(&tan, a).map(|ta| self.index(ta, k)),
                Op::Broadcast(a) => get(&tan, a).map(|ta| self.broadcast(ta, len)),
                Op::Add(a, b) => match (get(&tan, a), get(&tan, b)) {
                    (Some(ta), Some(tb)) => Some(self.add(ta, tb)),
                    (Some(t), None) | (None, Some(t)) => Some(self.widen(t, len)),
                    (None, None) => None,
                },
                Op::Sub(a, b) => match (get(&tan, a), get(&tan, b)) {
                    (Some(ta), Some(tb)) => Some(self.sub(ta, tb)),
                    (Some(ta), None) => Some(self.widen(ta, len)),
                    (None, Some(tb)) => {
                        let n = self.neg(tb);
                        Some(self.widen(n, len))
                    }
                    (None, None) => None,
                },
                Op::Mul(a, b) => {
                    let l = get(&tan, a).map(|ta| self.mul(ta, b));
                    let r = get(&tan, b).map(|tb| self.mul(a, tb));
                    match (l, r) {
                        (Some(l), Some(r)) => Some(self.add(l, r)),
                        (Some(t), None) | (None, Some(t)) => Some(self.widen(t, len)),
                        (None, None) => None,
                    }
                }
                Op::MatVec {
                    mat,
                    vec,
                    rows,
                    cols,
                } => {
                    let l = get(&tan, vec).map(|tv| self.matvec(mat, tv, rows, cols));
                    let r = get(&tan, mat).map(|tm| self.matvec(tm, vec, rows, cols));
                    match (l, r) {
                        (Some(l), Some(r)) => Some(self.add(l, r)),
                        (t, None) | (None, t) => t,
                    }
                }
                Op::Scale(a, c) => get(&tan, a).map(|ta| self.scale(ta, c)),
                Op::Sum(a) => get(&tan, a).map(|ta| self.sum(ta)),
                Op::Neg(a) => get(&tan, a).map(|ta| self.neg(ta)),
                Op::Recip(a) => get(&tan, a).map(|ta| {
                    let sq = self.mul(node, node);
                    let m = self.mul(sq, ta);
                    self.neg(m)
                }),
                Op::Log(a) => get(&tan, a).map(|ta| {
                    let r = self.recip(a);
                    self.mul(ta, r)
                }),
                Op::Exp(a) => get(&tan, a).map(|ta| self.mul(node, ta)),
                Op::Powf(a, c) => get(&tan, a).map(|ta| {
                    let p = if c == 2.0 { a } else { self.powf(a, c - 1.0) };
                    let m = self.mul(p, ta);
                    self.scale(m, c)
                }),
                Op::Softplus(a) => get(&tan, a).map(|ta| {
                    let s = self.logistic(a);
                    self.mul(s, ta)
                }),
                Op::Logistic(a) => get(&tan, a).map(|ta| {
                    let sq = self.mul(node, node);
                    let d = self.sub(node, sq);
                    self.mul(d, ta)
                }),
                Op::NonNeg(a, eps) => get(&tan, a).map(|ta| {
                    let s = self.nonneg_slope(a, eps);
                    self.mul(s, ta)
                }),
                Op::NonNegSlope(a, _) => {
                    assert!(
                        get(&tan, a).is_none(),
                        "differentiating the slope of a non-negative weight is not supported"
                    );
                    None
                }
            };
            tan[i - lo] = t;
        }
        match tan[hi - lo] {
            Some(t) => self.widen(t, root_len),
            None => self.constant(&vec![0.0; root_len]),
        }
    }

    fn widen(&mut self, t: NodeId, len: usize) -> NodeId {
        if self.node_len(t) == len {
            t
        } else {
            self.broadcast(t, len)
        }
    }
}
