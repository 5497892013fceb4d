//! Trainable architectures: an unconstrained integrable network, a fully
//! input-convex one, and a partially input-convex one.
//!
//! Every network owns a contiguous slice of a shared parameter vector
//! starting at `base`. Weights that must stay non-negative are stored raw and
//! realized through [`realize_nonneg`] inside the graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Graph, NodeId};

/// Shift used by the non-negative weight realization.
pub const NONNEG_EPS: f64 = 5.0;

/// `raw + e^-5` for `raw >= 0`, `e^(raw - 5)` otherwise.
pub fn realize_nonneg(raw: f64) -> f64 {
    diffcore::nonneg(raw, NONNEG_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Inn,
    Ficinn,
    Picinn,
}

/// Layer widths. `state_width` feeds the unconstrained track and is zero for
/// the fully convex network; `convex_width` is zero for the plain network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub state_width: usize,
    pub convex_width: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Glorot,
    Zero,
}

/// One weight matrix or bias vector inside the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    /// Realized through [`realize_nonneg`] before use.
    pub nonneg: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetworkError {
    #[error("layer widths must all be at least one")]
    ZeroWidth,
    #[error("{kind:?} network expects {expected} {what} inputs, got {got}")]
    Shape {
        kind: NetKind,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parameter block {0} not found")]
    MissingBlock(String),
    #[error("parameter block {name} has shape {rows}x{cols}, stored values do not match")]
    BadBlock {
        name: String,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub kind: NetKind,
    pub spec: LayerSpec,
    pub base: usize,
    pub blocks: Vec<Block>,
    n_params: usize,
}

struct Layout {
    base: usize,
    next: usize,
    blocks: Vec<Block>,
}

impl Layout {
    fn new(base: usize) -> Self {
        Layout {
            base,
            next: base,
            blocks: Vec::new(),
        }
    }

    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, nonneg: bool) -> usize {
        let idx = self.blocks.len();
        self.blocks.push(Block {
            name,
            offset: self.next,
            rows,
            cols,
            init,
            nonneg,
        });
        self.next += rows * cols;
        idx
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.add(name, rows, cols, Init::Glorot, false)
    }

    fn bias(&mut self, name: String, rows: usize) -> usize {
        self.add(name, rows, 1, Init::Zero, false)
    }

    fn finish(self, kind: NetKind, spec: LayerSpec) -> Network {
        Network {
            kind,
            spec,
            base: self.base,
            n_params: self.next - self.base,
            blocks: self.blocks,
        }
    }
}

impl Network {
    /// Plain integrable network over `input_width` inputs.
    pub fn inn(input_width: usize, hidden: &[usize], base: usize) -> Result<Self, NetworkError> {
        check_widths(&[input_width], hidden)?;
        let mut lay = Layout::new(base);
        let widths: Vec<usize> = std::iter::once(input_width)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        for l in 0..widths.len() - 1 {
            lay.weight(format!("W{l}"), widths[l + 1], widths[l]);
            lay.bias(format!("b{l}"), widths[l + 1]);
        }
        Ok(lay.finish(
            NetKind::Inn,
            LayerSpec {
                state_width: input_width,
                convex_width: 0,
                hidden: hidden.to_vec(),
            },
        ))
    }

    /// Network convex in all of its `input_width` inputs.
    pub fn ficinn(input_width: usize, hidden: &[usize], base: usize) -> Result<Self, NetworkError> {
        check_widths(&[input_width], hidden)?;
        let mut lay = Layout::new(base);
        let outs: Vec<usize> = hidden.iter().copied().chain(std::iter::once(1)).collect();
        for (l, &rows) in outs.iter().enumerate() {
            if l > 0 {
                lay.add(format!("Wy{l}"), rows, outs[l - 1], Init::Glorot, true);
            }
            lay.weight(format!("Ww{l}"), rows, input_width);
            lay.bias(format!("b{l}"), rows);
        }
        Ok(lay.finish(
            NetKind::Ficinn,
            LayerSpec {
                state_width: 0,
                convex_width: input_width,
                hidden: hidden.to_vec(),
            },
        ))
    }

    /// Network convex in its `convex_width` inputs for every value of the
    /// `state_width` inputs.
    pub fn picinn(
        state_width: usize,
        convex_width: usize,
        hidden: &[usize],
        base: usize,
    ) -> Result<Self, NetworkError> {
        check_widths(&[state_width, convex_width], hidden)?;
        let mut lay = Layout::new(base);
        let outs: Vec<usize> = hidden.iter().copied().chain(std::iter::once(1)).collect();
        // width of the unconstrained track entering layer l
        let track: Vec<usize> = std::iter::once(state_width)
            .chain(hidden.iter().copied())
            .collect();
        for l in 0..hidden.len() {
            lay.weight(format!("Wzx{l}"), hidden[l], track[l]);
            lay.bias(format!("bzx{l}"), hidden[l]);
        }
        for (l, &rows) in outs.iter().enumerate() {
            if l > 0 {
                let prev = outs[l - 1];
                lay.add(format!("Wy{l}"), rows, prev, Init::Glorot, true);
                lay.weight(format!("Wyx{l}"), prev, track[l]);
                lay.bias(format!("byx{l}"), prev);
            }
            lay.weight(format!("Ww{l}"), rows, convex_width);
            lay.weight(format!("Wwx{l}"), convex_width, track[l]);
            lay.bias(format!("bwx{l}"), convex_width);
            lay.weight(format!("Wx{l}"), rows, track[l]);
            lay.bias(format!("b{l}"), rows);
        }
        Ok(lay.finish(
            NetKind::Picinn,
            LayerSpec {
                state_width,
                convex_width,
                hidden: hidden.to_vec(),
            },
        ))
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// One past the last parameter index used by this network.
    pub fn end(&self) -> usize {
        self.base + self.n_params
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Glorot-uniform weights (bound `sqrt(6 / (fan_in + fan_out))`) and
    /// zero biases, written into `params[base..end]`. Non-negative weights
    /// are drawn in raw space.
    pub fn init_into(&self, params: &mut [f64], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &self.blocks {
            let dst = &mut params[b.offset..b.offset + b.len()];
            match b.init {
                Init::Zero => dst.fill(0.0),
                Init::Glorot => {
                    let bound = (6.0 / (b.rows + b.cols) as f64).sqrt();
                    for v in dst.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
            }
        }
    }

    /// Fresh parameter vector of length `end()` with this network initialized.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.end()];
        self.init_into(&mut p, seed);
        p
    }

    fn node(&self, g: &mut Graph, name: &str) -> NodeId {
        let b = self
            .block(name)
            .unwrap_or_else(|| panic!("missing block {name}"));
        let p = g.param(b.offset, b.len());
        if b.nonneg {
            g.nonneg(p, NONNEG_EPS)
        } else {
            p
        }
    }

    fn affine(&self, g: &mut Graph, w: &str, b: Option<&str>, x: NodeId) -> NodeId {
        let blk = self.block(w).unwrap();
        let (rows, cols) = (blk.rows, blk.cols);
        let wn = self.node(g, w);
        let y = g.matvec(wn, x, rows, cols);
        match b {
            Some(b) => {
                let bn = self.node(g, b);
                g.add(y, bn)
            }
            None => y,
        }
    }

    /// Builds the scalar output. `state` feeds the unconstrained inputs and
    /// `convex` the convex ones; pass an empty slice for the side the network
    /// does not have.
    pub fn build(&self, g: &mut Graph, state: &[NodeId], convex: &[NodeId]) -> Result<NodeId, NetworkError> {
        let check = |what, expected, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(NetworkError::Shape {
                    kind: self.kind,
                    what,
                    expected,
                    got,
                })
            }
        };
        check("state", self.spec.state_width, state.len())?;
        check("convex", self.spec.convex_width, convex.len())?;
        let k = self.spec.hidden.len();
        Ok(match self.kind {
            NetKind::Inn => {
                let mut h = g.stack(state);
                for l in 0..=k {
                    let z = self.affine(g, &format!("W{l}"), Some(&format!("b{l}")), h);
                    h = if l < k { g.softplus(z) } else { z };
                }
                h
            }
            NetKind::Ficinn => {
                let w = g.stack(convex);
                let mut y = None;
                for l in 0..=k {
                    let mut z = self.affine(g, &format!("Ww{l}"), Some(&format!("b{l}")), w);
                    if let Some(prev) = y {
                        let t = self.affine(g, &format!("Wy{l}"), None, prev);
                        z = g.add(z, t);
                    }
                    y = Some(if l < k { g.softplus(z) } else { z });
                }
                y.unwrap()
            }
            NetKind::Picinn => {
                let w = g.stack(convex);
                let mut x = g.stack(state);
                let mut y: Option<NodeId> = None;
                for l in 0..=k {
                    // gated passthrough of the convex inputs
                    let gate = self.affine(g, &format!("Wwx{l}"), Some(&format!("bwx{l}")), x);
                    let gated = g.mul(w, gate);
                    let mut z = self.affine(g, &format!("Ww{l}"), None, gated);
                    let lin = self.affine(g, &format!("Wx{l}"), Some(&format!("b{l}")), x);
                    z = g.add(z, lin);
                    if let Some(prev) = y {
                        let s = self.affine(g, &format!("Wyx{l}"), Some(&format!("byx{l}")), x);
                        let s = g.softplus(s);
                        let yg = g.mul(prev, s);
                        let t = self.affine(g, &format!("Wy{l}"), None, yg);
                        z = g.add(z, t);
                    }
                    y = Some(if l < k { g.softplus(z) } else { z });
                    if l < k {
                        let nx = self.affine(g, &format!("Wzx{l}"), Some(&format!("bzx{l}")), x);
                        x = g.softplus(nx);
                    }
                }
                y.unwrap()
            }
        })
    }

    /// Parameters of this network as nested arrays, for checkpoints.
    pub fn export(&self, params: &[f64]) -> NetworkRecord {
        NetworkRecord {
            kind: self.kind,
            spec: self.spec.clone(),
            nonneg_eps: NONNEG_EPS,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRecord {
                    name: b.name.clone(),
                    nonneg: b.nonneg,
                    values: params[b.offset..b.offset + b.len()]
                        .chunks(b.cols)
                        .map(|r| r.to_vec())
                        .collect(),
                })
                .collect(),
        }
    }

    /// Writes the values of `rec` into `params[base..end]`.
    pub fn import(&self, rec: &NetworkRecord, params: &mut [f64]) -> Result<(), NetworkError> {
        for b in &self.blocks {
            let r = rec
                .blocks
                .iter()
                .find(|r| r.name == b.name)
                .ok_or_else(|| NetworkError::MissingBlock(b.name.clone()))?;
            let bad = || NetworkError::BadBlock {
                name: b.name.clone(),
                rows: b.rows,
                cols: b.cols,
            };
            if r.values.len() != b.rows || r.values.iter().any(|row| row.len() != b.cols) {
                return Err(bad());
            }
            for (i, row) in r.values.iter().enumerate() {
                let o = b.offset + i * b.cols;
                params[o..o + b.cols].copy_from_slice(row);
            }
        }
        Ok(())
    }

    /// Rebuilds a network from checkpoint metadata.
    pub fn from_record(rec: &NetworkRecord, base: usize) -> Result<Self, NetworkError> {
        let s = &rec.spec;
        match rec.kind {
            NetKind::Inn => Network::inn(s.state_width, &s.hidden, base),
            NetKind::Ficinn => Network::ficinn(s.convex_width, &s.hidden, base),
            NetKind::Picinn => Network::picinn(s.state_width, s.convex_width, &s.hidden, base),
        }
    }
}

fn check_widths(inputs: &[usize], hidden: &[usize]) -> Result<(), NetworkError> {
    if inputs.iter().chain(hidden).any(|&w| w == 0) {
        Err(NetworkError::ZeroWidth)
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub name: String,
    pub nonneg: bool,
    /// Raw stored values, row-major.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub kind: NetKind,
    pub spec: LayerSpec,
    pub nonneg_eps: f64,
    pub blocks: Vec<BlockRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Bindings;

    fn scalar_net(net: &Network, state: usize, convex: usize) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let s: Vec<NodeId> = (0..state).map(|i| g.input(i)).collect();
        let c: Vec<NodeId> = (0..convex).map(|i| g.input(state + i)).collect();
        let out = net.build(&mut g, &s, &c).unwrap();
        (g, out)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::inn(2, &[25, 25], 0).unwrap();
        let (g, out) = scalar_net(&net, 2, 0);
        let p = vec![0.0; net.n_params()];
        assert_eq!(g.evaluate(out, &Bindings::new(&[0.3, -1.0], &p)).unwrap(), 0.0);
    }

    #[test]
    fn single_neuron_gives_ln2() {
        let net = Network::inn(1, &[1], 0).unwrap();
        let (g, out) = scalar_net(&net, 1, 0);
        let mut p = vec![0.0; net.n_params()];
        p[net.block("W0").unwrap().offset] = 1.0;
        p[net.block("W1").unwrap().offset] = 1.0;
        let v = g.evaluate(out, &Bindings::new(&[0.0], &p)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Network::inn(2, &[4], 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(0);
        assert!(matches!(
            net.build(&mut g, &[x], &[]),
            Err(NetworkError::Shape { expected: 2, got: 1, .. })
        ));
        assert_eq!(Network::inn(0, &[4], 0), Err(NetworkError::ZeroWidth));
    }

    #[test]
    fn realize_nonneg_values() {
        assert!((realize_nonneg(0.0) - 6.7379e-3).abs() < 1e-7);
        assert!((realize_nonneg(2.0) - 2.0067379).abs() < 1e-7);
        assert!((realize_nonneg(-1.0) - 2.4788e-3).abs() < 1e-7);
        assert_eq!(realize_nonneg(0.0), realize_nonneg(-0.0));
    }

    #[test]
    fn init_zero_biases_and_determinism() {
        let net = Network::picinn(1, 1, &[10, 10], 3).unwrap();
        let a = net.init(7);
        let b = net.init(7);
        assert_eq!(a, b);
        assert!(a[..3].iter().all(|&v| v == 0.0));
        for blk in net.blocks.iter().filter(|b| b.init == Init::Zero) {
            assert!(a[blk.offset..blk.offset + blk.len()].iter().all(|&v| v == 0.0));
        }
        assert_ne!(net.init(8), a);
    }

    #[test]
    fn glorot_variance_of_square_layer() {
        let net = Network::inn(25, &[25], 0).unwrap();
        let blk = net.block("W1").unwrap().clone();
        assert_eq!((blk.rows, blk.cols), (1, 25));
        let w0 = net.block("W0").unwrap().clone();
        let mut all = Vec::new();
        for seed in 0..100 {
            let p = net.init(seed);
            all.extend_from_slice(&p[w0.offset..w0.offset + w0.len()]);
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((var - 0.04).abs() < 0.2 * 0.04, "variance {var}");
    }

    #[test]
    fn ficinn_without_passthrough_is_constant() {
        let net = Network::ficinn(2, &[8, 8], 0).unwrap();
        let mut p = net.init(1);
        for b in net.blocks.iter().filter(|b| b.name.starts_with("Ww") || b.name.starts_with('b')) {
            p[b.offset..b.offset + b.len()].fill(0.0);
        }
        let (g, out) = scalar_net(&net, 0, 2);
        let a = g.evaluate(out, &Bindings::new(&[0.1, 0.2], &p)).unwrap();
        let b = g.evaluate(out, &Bindings::new(&[-3.0, 5.0], &p)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn picinn_without_convex_weights_ignores_convex_input() {
        let net = Network::picinn(2, 1, &[10, 10], 0).unwrap();
        let mut p = net.init(4);
        for b in net
            .blocks
            .iter()
            .filter(|b| b.name.starts_with("Ww") && !b.name.starts_with("Wwx"))
        {
            p[b.offset..b.offset + b.len()].fill(0.0);
        }
        let (mut g, out) = scalar_net(&net, 2, 1);
        let d = g.input_derivative(out, 2).unwrap();
        for w in [-2.0, 0.0, 1.5] {
            let v = g.evaluate(d, &Bindings::new(&[0.3, -0.2, w], &p)).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn picinn_depends_on_state() {
        let net = Network::picinn(1, 1, &[10, 10], 0).unwrap();
        let p = net.init(12);
        let (g, out) = scalar_net(&net, 1, 1);
        let a = g.evaluate(out, &Bindings::new(&[0.0, 0.7], &p)).unwrap();
        let b = g.evaluate(out, &Bindings::new(&[1.0, 0.7], &p)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn record_round_trip() {
        let net = Network::ficinn(1, &[5, 5], 10).unwrap();
        let mut p = vec![0.0; net.end()];
        net.init_into(&mut p, 3);
        let rec = net.export(&p);
        let json = serde_json::to_string(&rec).unwrap();
        let back: NetworkRecord = serde_json::from_str(&json).unwrap();
        let net2 = Network::from_record(&back, 10).unwrap();
        let mut q = vec![0.0; net2.end()];
        net2.import(&back, &mut q).unwrap();
        assert_eq!(p, q);
    }
}
