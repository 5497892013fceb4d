//! Discrete residuals of the evolution equations, the weighted
//! mean-square loss built from them and adaptive loss weights from the
//! traces of the neural tangent kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, Program};
use crate::potentials::{Experiment, PotentialError, PotentialPair};

/// Rows handled per parallel task; reductions run in task order.
const CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ResidualError {
    #[error("loss term '{0}' has no samples")]
    Empty(String),
    #[error("tangent kernel trace of term '{0}' is zero")]
    DegenerateKernel(String),
    #[error("sample table for '{term}' has {got} columns, expected {expected}")]
    Columns {
        term: String,
        expected: usize,
        got: usize,
    },
    #[error("{0} weights for {1} loss terms")]
    WeightCount(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// Anything that can place a free energy and a dissipation potential into a
/// graph; the learned pair and closed-form references alike.
pub trait PotentialModel {
    fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError>;
    fn dissipation(&self, g: &mut Graph, z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError>;
}

impl PotentialModel for PotentialPair {
    fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
        PotentialPair::free_energy(self, g, z)
    }

    fn dissipation(&self, g: &mut Graph, z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
        PotentialPair::dissipation(self, g, z, w)
    }
}

pub const PHASE_PDE: [&str; 3] = ["strain", "strain_next", "velocity"];
pub const PHASE_BC: [&str; 2] = ["strain", "traction"];
pub const VISCO_PDE: [&str; 6] = [
    "strain",
    "strain_next",
    "viscous_strain",
    "viscous_strain_next",
    "viscous_rate",
    "acceleration",
];
pub const VISCO_BC: [&str; 3] = ["strain", "viscous_strain", "traction"];
pub const DIFFUSION_PDE: [&str; 3] = ["concentration", "concentration_next", "flux"];

fn slope(g: &mut Graph, f: NodeId, wrt: NodeId) -> NodeId {
    g.tangent(f, wrt)
}

/// `[f'(eps_next) - f'(eps)] / dX - psi'(v)`.
pub fn phase_pde(
    m: &impl PotentialModel,
    g: &mut Graph,
    eps: NodeId,
    eps_next: NodeId,
    v: NodeId,
    dx: f64,
) -> Result<NodeId, PotentialError> {
    let f0 = m.free_energy(g, &[eps])?;
    let f1 = m.free_energy(g, &[eps_next])?;
    let (d0, d1) = (slope(g, f0, eps), slope(g, f1, eps_next));
    let diff = g.sub(d1, d0);
    let grad = g.scale(diff, 1.0 / dx);
    let psi = m.dissipation(g, &[], &[v])?;
    let force = slope(g, psi, v);
    Ok(g.sub(grad, force))
}

/// `t - f'(eps_N)`.
pub fn phase_bc(
    m: &impl PotentialModel,
    g: &mut Graph,
    eps: NodeId,
    traction: NodeId,
) -> Result<NodeId, PotentialError> {
    let f = m.free_energy(g, &[eps])?;
    let d = slope(g, f, eps);
    Ok(g.sub(traction, d))
}

/// Nodes of one viscoelastic sample, in [`VISCO_PDE`] order.
#[derive(Debug, Clone, Copy)]
pub struct ViscoNodes {
    pub strain: NodeId,
    pub strain_next: NodeId,
    pub viscous_strain: NodeId,
    pub viscous_strain_next: NodeId,
    pub viscous_rate: NodeId,
    pub acceleration: NodeId,
}

impl ViscoNodes {
    pub fn from_slice(x: &[NodeId]) -> Self {
        ViscoNodes {
            strain: x[0],
            strain_next: x[1],
            viscous_strain: x[2],
            viscous_strain_next: x[3],
            viscous_rate: x[4],
            acceleration: x[5],
        }
    }
}

/// Momentum balance `[f_e(i+1) - f_e(i)] / dX - rho a` and internal
/// variable balance `psi'(rate) + f_ev(i)`.
pub fn visco_pde(
    m: &impl PotentialModel,
    g: &mut Graph,
    s: ViscoNodes,
    dx: f64,
    density: f64,
) -> Result<(NodeId, NodeId), PotentialError> {
    let f0 = m.free_energy(g, &[s.strain, s.viscous_strain])?;
    let f1 = m.free_energy(g, &[s.strain_next, s.viscous_strain_next])?;
    let (s0, s1) = (slope(g, f0, s.strain), slope(g, f1, s.strain_next));
    let diff = g.sub(s1, s0);
    let div = g.scale(diff, 1.0 / dx);
    let inertia = g.scale(s.acceleration, density);
    let eq = g.sub(div, inertia);
    let psi = m.dissipation(g, &[], &[s.viscous_rate])?;
    let force = slope(g, psi, s.viscous_rate);
    let conf = slope(g, f0, s.viscous_strain);
    let int = g.add(force, conf);
    Ok((eq, int))
}

/// `t - f_e(eps_N, ev_N)`.
pub fn visco_bc(
    m: &impl PotentialModel,
    g: &mut Graph,
    eps: NodeId,
    ev: NodeId,
    traction: NodeId,
) -> Result<NodeId, PotentialError> {
    let f = m.free_energy(g, &[eps, ev])?;
    let d = slope(g, f, eps);
    Ok(g.sub(traction, d))
}

/// `[f'(c_next) - f'(c)] / dX + psi_j(c, j)`.
pub fn diffusion_pde(
    m: &impl PotentialModel,
    g: &mut Graph,
    c: NodeId,
    c_next: NodeId,
    j: NodeId,
    dx: f64,
) -> Result<NodeId, PotentialError> {
    let f0 = m.free_energy(g, &[c])?;
    let f1 = m.free_energy(g, &[c_next])?;
    let (d0, d1) = (slope(g, f0, c), slope(g, f1, c_next));
    let diff = g.sub(d1, d0);
    let grad = g.scale(diff, 1.0 / dx);
    let psi = m.dissipation(g, &[c], &[j])?;
    let force = slope(g, psi, j);
    Ok(g.add(grad, force))
}

/// Row-major table of samples with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTable {
    pub columns: Vec<String>,
    pub values: Vec<f64>,
}

impl SampleTable {
    pub fn new(columns: &[&str]) -> Self {
        SampleTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.values.len() / self.columns.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.width(), "sample width");
        self.values.extend_from_slice(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.values.iter().skip(k).step_by(self.width()).copied().collect())
    }

    pub fn select(&self, rows: &[usize]) -> SampleTable {
        let mut out = SampleTable {
            columns: self.columns.clone(),
            values: Vec::with_capacity(rows.len() * self.width()),
        };
        for &r in rows {
            out.values.extend_from_slice(self.row(r));
        }
        out
    }
}

struct Group {
    graph: Graph,
    program: Program,
    samples: SampleTable,
    /// Global term index of each program root.
    terms: Vec<usize>,
}

/// Loss value with its per-term mean squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub terms: Vec<f64>,
}

/// Residual terms, their sample sets and weights:
/// `L = sum_k alpha_k mean_i r_k(x_i)^2`.
pub struct LossAssembly {
    groups: Vec<Group>,
    names: Vec<String>,
    owner: Vec<(usize, usize)>,
    weights: Vec<f64>,
    n_params: usize,
}

impl LossAssembly {
    pub fn new(n_params: usize) -> Self {
        LossAssembly {
            groups: Vec::new(),
            names: Vec::new(),
            owner: Vec::new(),
            weights: Vec::new(),
            n_params,
        }
    }

    /// Adds terms sharing one sample table. `build` receives one input node
    /// per column and returns one residual node per name.
    pub fn push_group(
        &mut self,
        names: &[&str],
        samples: SampleTable,
        build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<Vec<NodeId>, PotentialError>,
    ) -> Result<(), ResidualError> {
        if samples.is_empty() {
            return Err(ResidualError::Empty(names.join(",")));
        }
        let mut graph = Graph::new();
        let inputs: Vec<NodeId> = (0..samples.width()).map(|i| graph.input(i)).collect();
        let roots = build(&mut graph, &inputs)?;
        assert_eq!(roots.len(), names.len(), "one residual per term name");
        let program = Program::new(&graph, &roots);
        let gi = self.groups.len();
        let mut terms = Vec::new();
        for (slot, name) in names.iter().enumerate() {
            terms.push(self.names.len());
            self.names.push(name.to_string());
            self.owner.push((gi, slot));
            self.weights.push(1.0);
        }
        self.groups.push(Group {
            graph,
            program,
            samples,
            terms,
        });
        Ok(())
    }

    /// Standard terms of an experiment: PDE residual(s) over `pde`, plus
    /// the boundary residual over `bc` where the experiment has one.
    pub fn for_experiment(
        pp: &PotentialPair,
        dx: f64,
        density: f64,
        pde: SampleTable,
        bc: Option<SampleTable>,
    ) -> Result<Self, ResidualError> {
        let mut la = LossAssembly::new(pp.n_params());
        let check = |t: &SampleTable, name: &str, cols: &[&str]| {
            if t.width() != cols.len() {
                Err(ResidualError::Columns {
                    term: name.to_string(),
                    expected: cols.len(),
                    got: t.width(),
                })
            } else {
                Ok(())
            }
        };
        match pp.experiment {
            Experiment::Phase => {
                check(&pde, "pde", &PHASE_PDE)?;
                la.push_group(&["pde"], pde, |g, x| {
                    Ok(vec![phase_pde(pp, g, x[0], x[1], x[2], dx)?])
                })?;
                let bc = bc.ok_or_else(|| ResidualError::Empty("bc".into()))?;
                check(&bc, "bc", &PHASE_BC)?;
                la.push_group(&["bc"], bc, |g, x| Ok(vec![phase_bc(pp, g, x[0], x[1])?]))?;
            }
            Experiment::Visco => {
                check(&pde, "equilibrium", &VISCO_PDE)?;
                la.push_group(&["equilibrium", "internal"], pde, |g, x| {
                    let (a, b) = visco_pde(pp, g, ViscoNodes::from_slice(x), dx, density)?;
                    Ok(vec![a, b])
                })?;
                let bc = bc.ok_or_else(|| ResidualError::Empty("bc".into()))?;
                check(&bc, "bc", &VISCO_BC)?;
                la.push_group(&["bc"], bc, |g, x| {
                    Ok(vec![visco_bc(pp, g, x[0], x[1], x[2])?])
                })?;
            }
            Experiment::DiffusionLinear | Experiment::DiffusionNonlinear => {
                check(&pde, "pde", &DIFFUSION_PDE)?;
                la.push_group(&["pde"], pde, |g, x| {
                    Ok(vec![diffusion_pde(pp, g, x[0], x[1], x[2], dx)?])
                })?;
            }
        }
        Ok(la)
    }

    pub fn n_terms(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_samples(&self, term: usize) -> usize {
        self.groups[self.owner[term].0].samples.len()
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<(), ResidualError> {
        if w.len() != self.n_terms() {
            return Err(ResidualError::WeightCount(w.len(), self.n_terms()));
        }
        self.weights.copy_from_slice(w);
        Ok(())
    }

    /// Residual values of one term over its samples.
    pub fn residuals(&self, params: &[f64], term: usize) -> Result<Vec<f64>, ResidualError> {
        let (gi, slot) = self.owner[term];
        let grp = &self.groups[gi];
        let root = grp.program.roots()[slot];
        let mut ws = grp.program.prepare(&grp.graph, params)?;
        let mut out = Vec::with_capacity(grp.samples.len());
        for i in 0..grp.samples.len() {
            grp.program.forward(&grp.graph, &mut ws, grp.samples.row(i))?;
            out.push(ws.scalar(&grp.graph, root));
        }
        Ok(out)
    }

    pub fn loss(&self, params: &[f64]) -> Result<LossValue, ResidualError> {
        self.evaluate(params, None)
    }

    /// Loss value; the gradient is added into `grad`.
    pub fn loss_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<LossValue, ResidualError> {
        self.evaluate(params, Some(grad))
    }

    fn evaluate(&self, params: &[f64], mut grad: Option<&mut [f64]>) -> Result<LossValue, ResidualError> {
        let mut terms = vec![0.0; self.n_terms()];
        let want = grad.is_some();
        for grp in &self.groups {
            let n = grp.samples.len() as f64;
            let coef: Vec<f64> = grp.terms.iter().map(|&t| 2.0 * self.weights[t] / n).collect();
            let template = grp.program.prepare(&grp.graph, params)?;
            let w = grp.samples.width();
            let n_roots = grp.terms.len();
            let parts: Vec<Result<(Vec<f64>, Vec<f64>), DiffError>> = grp
                .samples
                .values
                .par_chunks(CHUNK * w)
                .map(|chunk| {
                    let mut ws = template.clone();
                    let mut sq = vec![0.0; n_roots];
                    let mut seeds = vec![0.0; n_roots];
                    let mut g = if want { vec![0.0; self.n_params] } else { Vec::new() };
                    for row in chunk.chunks(w) {
                        grp.program.forward(&grp.graph, &mut ws, row)?;
                        for (k, &r) in grp.program.roots().iter().enumerate() {
                            let v = ws.scalar(&grp.graph, r);
                            sq[k] += v * v;
                            seeds[k] = coef[k] * v;
                        }
                        if want {
                            grp.program.backward(&grp.graph, &mut ws, &seeds);
                        }
                    }
                    if want {
                        grp.program.finish_static(&grp.graph, &mut ws, &mut g);
                    }
                    Ok((sq, g))
                })
                .collect();
            for part in parts {
                let (sq, g) = part?;
                for (k, &t) in grp.terms.iter().enumerate() {
                    terms[t] += sq[k];
                }
                if let Some(acc) = grad.as_deref_mut() {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
            for &t in &grp.terms {
                terms[t] /= n;
            }
        }
        let total = terms.iter().zip(&self.weights).map(|(l, a)| l * a).sum();
        Ok(LossValue { total, terms })
    }

    /// `tr(K_kk) = sum_i |d r_k(x_i) / d theta|^2` for every term. With a
    /// cap, evenly spaced rows are used and the sum is scaled to the full
    /// sample count.
    pub fn ntk_traces(&self, params: &[f64], max_samples: Option<usize>) -> Result<Vec<f64>, ResidualError> {
        let mut traces = vec![0.0; self.n_terms()];
        for grp in &self.groups {
            let n = grp.samples.len();
            let m = max_samples.map_or(n, |c| c.clamp(1, n));
            let rows: Vec<usize> = (0..m).map(|i| i * n / m).collect();
            let template = grp.program.prepare(&grp.graph, params)?;
            let n_roots = grp.terms.len();
            let parts: Vec<Result<Vec<f64>, DiffError>> = rows
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut ws = template.clone();
                    let mut tr = vec![0.0; n_roots];
                    let mut g = vec![0.0; self.n_params];
                    let mut seeds = vec![0.0; n_roots];
                    for &r in chunk {
                        grp.program.forward(&grp.graph, &mut ws, grp.samples.row(r))?;
                        for k in 0..n_roots {
                            seeds.fill(0.0);
                            seeds[k] = 1.0;
                            grp.program.backward(&grp.graph, &mut ws, &seeds);
                            g.fill(0.0);
                            grp.program.finish_static(&grp.graph, &mut ws, &mut g);
                            tr[k] += g.iter().map(|x| x * x).sum::<f64>();
                        }
                    }
                    Ok(tr)
                })
                .collect();
            let scale = n as f64 / m as f64;
            for part in parts {
                for (k, v) in part?.into_iter().enumerate() {
                    traces[grp.terms[k]] += v * scale;
                }
            }
        }
        Ok(traces)
    }

    /// `alpha_k = tr(K) / tr(K_kk)` with `tr(K) = sum_k tr(K_kk)`.
    pub fn ntk_weights(&self, params: &[f64], max_samples: Option<usize>) -> Result<Vec<f64>, ResidualError> {
        let traces = self.ntk_traces(params, max_samples)?;
        weights_from_traces(&traces, &self.names)
    }
}

pub fn weights_from_traces(traces: &[f64], names: &[String]) -> Result<Vec<f64>, ResidualError> {
    for (t, name) in traces.iter().zip(names) {
        if !(*t > 0.0 && t.is_finite()) {
            return Err(ResidualError::DegenerateKernel(name.clone()));
        }
    }
    let total: f64 = traces.iter().sum();
    Ok(traces.iter().map(|t| total / t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Bindings;
    use crate::potentials::Normalization;
    use crate::simulate::phase::{simulate_phase, PhaseConfig, PhaseFreeEnergy};
    use crate::simulate::visco::{simulate_visco, ViscoConfig, ViscoConstants, ViscoMaterial};
    use rand::{Rng, SeedableRng};

    /// `f = k z^2 / 2`, `psi = eta w^2 / 2`.
    struct Quadratic {
        k: f64,
        eta: f64,
    }

    impl PotentialModel for Quadratic {
        fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
            let sq = g.mul(z[0], z[0]);
            Ok(g.scale(sq, 0.5 * self.k))
        }
        fn dissipation(&self, g: &mut Graph, _z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
            let sq = g.mul(w[0], w[0]);
            Ok(g.scale(sq, 0.5 * self.eta))
        }
    }

    struct DoubleWell {
        depth: f64,
        a: f64,
        b: f64,
        eta: f64,
    }

    impl PotentialModel for DoubleWell {
        fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
            let a = g.scalar(self.a);
            let b = g.scalar(self.b);
            let p = g.sub(z[0], a);
            let q = g.sub(z[0], b);
            let pq = g.mul(p, q);
            let sq = g.mul(pq, pq);
            Ok(g.scale(sq, self.depth))
        }
        fn dissipation(&self, g: &mut Graph, _z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
            let sq = g.mul(w[0], w[0]);
            Ok(g.scale(sq, 0.5 * self.eta))
        }
    }

    /// Closed-form uniaxial viscoelastic potentials.
    struct Visco(ViscoConstants);

    impl PotentialModel for Visco {
        fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
            let c = &self.0;
            let d = g.sub(z[0], z[1]);
            let ee = g.mul(z[0], z[0]);
            let dd = g.mul(d, d);
            let e1 = g.scale(z[0], c.elastic_modulus);
            let e2 = g.scale(d, c.viscous_modulus);
            let s = g.add(e1, e2);
            let ss = g.mul(s, s);
            let t1 = g.scale(ee, 0.5 * c.theta * c.elastic_modulus);
            let t2 = g.scale(dd, 0.5 * c.theta * c.viscous_modulus);
            let t3 = g.scale(ss, -c.theta / (18.0 * c.bulk_modulus));
            let t12 = g.add(t1, t2);
            Ok(g.add(t12, t3))
        }
        fn dissipation(&self, g: &mut Graph, _z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
            let sq = g.mul(w[0], w[0]);
            Ok(g.scale(sq, 0.5 * self.0.viscosity))
        }
    }

    /// `f = c log c - c`, `psi = j^2 / (2 c)`.
    struct Zrp;

    impl PotentialModel for Zrp {
        fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
            let l = g.log(z[0]);
            let cl = g.mul(z[0], l);
            Ok(g.sub(cl, z[0]))
        }
        fn dissipation(&self, g: &mut Graph, z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
            let jj = g.mul(w[0], w[0]);
            let inv = g.recip(z[0]);
            let q = g.mul(jj, inv);
            Ok(g.scale(q, 0.5))
        }
    }

    fn eval1(build: impl FnOnce(&mut Graph, &[NodeId]) -> NodeId, x: &[f64]) -> f64 {
        let mut g = Graph::new();
        let xs: Vec<NodeId> = (0..x.len()).map(|i| g.input(i)).collect();
        let r = build(&mut g, &xs);
        g.evaluate(r, &Bindings::new(x, &[])).unwrap()
    }

    #[test]
    fn quadratic_phase_residual_vanishes_on_scheme_data() {
        let (k, eta) = (3.0e3, 8.0);
        let cfg = PhaseConfig {
            free_energy: PhaseFreeEnergy::Quadratic { stiffness: k },
            viscosity: eta,
            t_end: 1e-4,
            dt: 1e-7,
            output_stride: 100,
            ..PhaseConfig::default()
        };
        let tf = simulate_phase(&cfg).unwrap();
        let s = tf.field("strain").unwrap();
        let v = tf.field("velocity").unwrap();
        let m = Quadratic { k, eta };
        let scale = k * 0.01 / cfg.dx();
        for n in 1..tf.n_times() {
            let (sr, vr) = (s.row(n), v.row(n));
            for i in 0..vr.len() {
                let r = eval1(|g, x| phase_pde(&m, g, x[0], x[1], x[2], cfg.dx()).unwrap(), &[sr[i], sr[i + 1], vr[i]]);
                assert!(r.abs() < 1e-10 * scale.max(1.0), "{r}");
            }
        }
    }

    #[test]
    fn phase_residual_trivial_cases() {
        let m = DoubleWell {
            depth: 1e7,
            a: 0.0,
            b: 0.02,
            eta: 8.0,
        };
        let r = eval1(|g, x| phase_pde(&m, g, x[0], x[1], x[2], 0.06).unwrap(), &[0.013, 0.013, 0.0]);
        assert_eq!(r, 0.0);
        let lin = Quadratic { k: 5.0, eta: 1.0 };
        let r = eval1(|g, x| phase_bc(&lin, g, x[0], x[1]).unwrap(), &[0.3, 2.0]);
        assert!((r - (2.0 - 5.0 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn double_well_boundary_residual_vanishes_on_simulator_output() {
        let cfg = PhaseConfig {
            t_end: 2e-3,
            output_stride: 1000,
            ..PhaseConfig::default()
        };
        let tf = simulate_phase(&cfg).unwrap();
        let m = DoubleWell {
            depth: 1e7,
            a: 0.0,
            b: 0.02,
            eta: 8.0,
        };
        let s = tf.field("strain").unwrap();
        let t = tf.field("traction").unwrap();
        let v = tf.field("velocity").unwrap();
        for n in 0..tf.n_times() {
            let r = eval1(|g, x| phase_bc(&m, g, x[0], x[1]).unwrap(), &[s.row(n)[149], t.values[n]]);
            assert!(r.abs() < 1e-10, "{r}");
            let (sr, vr) = (s.row(n), v.row(n));
            for i in 0..vr.len() {
                let r = eval1(|g, x| phase_pde(&m, g, x[0], x[1], x[2], cfg.dx()).unwrap(), &[sr[i], sr[i + 1], vr[i]]);
                assert!(r.abs() < 1e-10 * (8.0 * vr[i].abs()).max(1.0), "{r}");
            }
        }
    }

    #[test]
    fn random_network_residual_is_the_hand_assembled_expression() {
        let pp = PotentialPair::new(
            Experiment::Phase,
            &[6, 6],
            vec![Normalization { mean: 0.01, std: 0.006 }],
            vec![],
            vec![Normalization { mean: 0.0, std: 3.0 }],
            (2.0, 5.0),
        )
        .unwrap();
        let p = pp.init_params(9);
        let x = [0.012, 0.0135, 1.7];
        let dx = 0.06;
        let got = {
            let mut g = Graph::new();
            let xs: Vec<NodeId> = (0..3).map(|i| g.input(i)).collect();
            let r = phase_pde(&pp, &mut g, xs[0], xs[1], xs[2], dx).unwrap();
            g.evaluate(r, &Bindings::new(&x, &p)).unwrap()
        };
        let mut probe = crate::potentials::Probe::new(&pp, &p).unwrap();
        let d1 = probe.free_energy(&[x[1]]).unwrap().1[0];
        let d0 = probe.free_energy(&[x[0]]).unwrap().1[0];
        let force = probe.dissipation(&[], &[x[2]]).unwrap().1[0];
        let want = (d1 - d0) / dx - force;
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn visco_residuals_vanish_for_closed_forms() {
        let cfg = ViscoConfig {
            n_output: 60,
            ..ViscoConfig::default()
        };
        let tf = simulate_visco(&cfg).unwrap();
        let c = cfg.constants();
        let m = Visco(c);
        let s = tf.field("strain").unwrap();
        let ev = tf.field("viscous_strain").unwrap();
        let rate = tf.field("viscous_rate_exact").unwrap();
        let t = tf.field("traction").unwrap();
        let acc = tf.field("acceleration").unwrap();
        let dx = cfg.dx();
        let mut worst_eq: f64 = 0.0;
        for n in 0..tf.n_times() {
            let last = cfg.n_x - 1;
            let r = eval1(
                |g, x| visco_bc(&m, g, x[0], x[1], x[2]).unwrap(),
                &[s.row(n)[last], ev.row(n)[last], t.values[n]],
            );
            assert!(r.abs() < 1e-8, "bc {r}");
            for i in 0..cfg.n_x - 1 {
                let row = [
                    s.row(n)[i],
                    s.row(n)[i + 1],
                    ev.row(n)[i],
                    ev.row(n)[i + 1],
                    rate.row(n)[i],
                    acc.row(n)[i],
                ];
                let mut g = Graph::new();
                let xs: Vec<NodeId> = (0..6).map(|k| g.input(k)).collect();
                let (eq, int) = visco_pde(&m, &mut g, ViscoNodes::from_slice(&xs), dx, c.density).unwrap();
                let b = Bindings::new(&row, &[]);
                let (req, rint) = (g.evaluate(eq, &b).unwrap(), g.evaluate(int, &b).unwrap());
                assert!(rint.abs() < 1e-8, "internal {rint}");
                worst_eq = worst_eq.max(req.abs() / (c.density * row[5].abs()).max(1.0));
            }
        }
        assert!(worst_eq < 1e-8, "equilibrium {worst_eq}");
    }

    #[test]
    fn visco_trivial_cases() {
        let c = ViscoConfig::default().constants();
        let m = Visco(c);
        // internal equilibrium: ev = e - sigma / 9K, solved for ev
        let e = 0.01;
        let ev = (e - (c.elastic_modulus + c.viscous_modulus) * e / (9.0 * c.bulk_modulus))
            / (1.0 - c.viscous_modulus / (9.0 * c.bulk_modulus));
        let mut g = Graph::new();
        let xs: Vec<NodeId> = (0..6).map(|k| g.input(k)).collect();
        let (eq, int) = visco_pde(&m, &mut g, ViscoNodes::from_slice(&xs), 0.004, c.density).unwrap();
        let row = [e, e, ev, ev, 0.0, 0.0];
        let b = Bindings::new(&row, &[]);
        assert_eq!(g.evaluate(eq, &b).unwrap(), 0.0);
        assert!(g.evaluate(int, &b).unwrap().abs() < 1e-10);
        let r = eval1(|g, x| visco_bc(&m, g, x[0], x[1], x[2]).unwrap(), &[0.0, 0.0, 42.0]);
        assert_eq!(r, 42.0);
        let elastic = ViscoConstants::new(&ViscoMaterial {
            viscous_shear_modulus: 0.0,
            ..ViscoMaterial::default()
        });
        let m = Visco(elastic);
        let r = eval1(|g, x| visco_bc(&m, g, x[0], x[1], x[2]).unwrap(), &[0.002, 0.0, 900.0]);
        assert!((r - (900.0 - elastic.elastic_modulus * 0.002)).abs() < 1e-9);
    }

    #[test]
    fn diffusion_residual_zero_for_exact_flux_and_first_order_on_grid() {
        let m = Zrp;
        let r = eval1(|g, x| diffusion_pde(&m, g, x[0], x[1], x[2], 0.01).unwrap(), &[0.4, 0.4, 0.0]);
        assert_eq!(r, 0.0);
        // exact continuous pair: d/dx log c + j / c = 0 with j = -c'
        let profile = |x: f64| 0.5 + 0.49 * (4.0 * std::f64::consts::PI * x).sin();
        let dprofile = |x: f64| 0.49 * 4.0 * std::f64::consts::PI * (4.0 * std::f64::consts::PI * x).cos();
        let mut prev = f64::INFINITY;
        for n in [50usize, 100, 200, 400] {
            let dx = 1.0 / n as f64;
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let x = i as f64 * dx;
                let (c0, c1) = (profile(x), profile(x + dx));
                let j = -(c1 - c0) / dx;
                let r = eval1(|g, v| diffusion_pde(&m, g, v[0], v[1], v[2], dx).unwrap(), &[c0, c1, j]);
                worst = worst.max(r.abs());
            }
            // a one-sided quotient makes the discrete residual first order
            assert!(worst < prev * 0.6, "n = {n}: {worst} vs {prev}");
            prev = worst;
            let _ = dprofile;
        }
    }

    fn table(cols: &[&str], rows: &[&[f64]]) -> SampleTable {
        let mut t = SampleTable::new(cols);
        for r in rows {
            t.push(r);
        }
        t
    }

    #[test]
    fn loss_arithmetic() {
        let mut la = LossAssembly::new(0);
        la.push_group(&["a"], table(&["x"], &[&[1.0], &[-1.0]]), |_, x| Ok(vec![x[0]]))
            .unwrap();
        la.push_group(&["b"], table(&["x"], &[&[2.0]]), |_, x| Ok(vec![x[0]]))
            .unwrap();
        la.set_weights(&[1.0, 3.0]).unwrap();
        let l = la.loss(&[]).unwrap();
        assert_eq!(l.total, 13.0);
        assert_eq!(l.terms, vec![1.0, 4.0]);

        let mut zero = LossAssembly::new(0);
        zero.push_group(&["z"], table(&["x"], &[&[0.0]]), |_, x| Ok(vec![x[0]]))
            .unwrap();
        assert_eq!(zero.loss(&[]).unwrap().total, 0.0);
        let mut one = LossAssembly::new(0);
        one.push_group(&["r"], table(&["x"], &[&[0.7]]), |_, x| Ok(vec![x[0]]))
            .unwrap();
        assert!((one.loss(&[]).unwrap().total - 0.49).abs() < 1e-16);
        assert!(matches!(
            one.push_group(&["e"], SampleTable::new(&["x"]), |_, x| Ok(vec![x[0]])),
            Err(ResidualError::Empty(_))
        ));
    }

    #[test]
    fn weight_identities() {
        let names: Vec<String> = vec!["a".into()];
        assert_eq!(weights_from_traces(&[3.5], &names).unwrap(), vec![1.0]);
        let names: Vec<String> = vec!["a".into(), "b".into()];
        assert_eq!(weights_from_traces(&[2.0, 2.0], &names).unwrap(), vec![2.0, 2.0]);
        assert!(matches!(
            weights_from_traces(&[1.0, 0.0], &names),
            Err(ResidualError::DegenerateKernel(_))
        ));
    }

    fn micro_phase(seed: u64) -> (LossAssembly, Vec<f64>) {
        let pp = PotentialPair::new(
            Experiment::Phase,
            &[4, 3],
            vec![Normalization { mean: 0.01, std: 0.01 }],
            vec![],
            vec![Normalization { mean: 0.0, std: 2.0 }],
            (1.5, 2.5),
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pde = SampleTable::new(&PHASE_PDE);
        let mut bc = SampleTable::new(&PHASE_BC);
        for _ in 0..5 {
            pde.push(&[
                rng.gen_range(-0.01..0.03),
                rng.gen_range(-0.01..0.03),
                rng.gen_range(-3.0..3.0),
            ]);
            bc.push(&[rng.gen_range(-0.01..0.03), rng.gen_range(-5.0..20.0)]);
        }
        let la = LossAssembly::for_experiment(&pp, 0.06, 0.0, pde, Some(bc)).unwrap();
        let mut p = pp.init_params(seed);
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        (la, p)
    }

    #[test]
    fn traces_match_finite_difference_jacobians() {
        let (la, p) = micro_phase(4);
        let traces = la.ntk_traces(&p, None).unwrap();
        for term in 0..la.n_terms() {
            let mut brute = 0.0;
            let h = 1e-6;
            let mut q = p.clone();
            let mut jac = vec![vec![0.0; p.len()]; 5];
            for k in 0..p.len() {
                q[k] = p[k] + h;
                let up = la.residuals(&q, term).unwrap();
                q[k] = p[k] - h;
                let dn = la.residuals(&q, term).unwrap();
                q[k] = p[k];
                for i in 0..5 {
                    jac[i][k] = (up[i] - dn[i]) / (2.0 * h);
                }
            }
            for row in &jac {
                brute += row.iter().map(|x| x * x).sum::<f64>();
            }
            let rel = (traces[term] - brute).abs() / brute;
            assert!(rel < 1e-4, "term {term}: {} vs {brute}", traces[term]);
        }
        let w = la.ntk_weights(&p, None).unwrap();
        assert!(w.iter().all(|&a| a > 0.0));
        let inv: f64 = w.iter().map(|a| 1.0 / a).sum();
        assert!((inv - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (mut la, p) = micro_phase(11);
        la.set_weights(&[0.7, 1.9]).unwrap();
        let mut grad = vec![0.0; p.len()];
        la.loss_and_grad(&p, &mut grad).unwrap();
        let mut q = p.clone();
        let h = 1e-4;
        let mut at = |k: usize, d: f64| {
            q[k] = p[k] + d;
            let v = la.loss(&q).unwrap().total;
            q[k] = p[k];
            v
        };
        // fourth-order central differences, compared in the vector norm
        let fd: Vec<f64> = (0..p.len())
            .map(|k| (8.0 * (at(k, h) - at(k, -h)) - (at(k, 2.0 * h) - at(k, -2.0 * h))) / (12.0 * h))
            .collect();
        let err: f64 = fd.iter().zip(&grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = grad.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(err <= 1e-4 * norm, "relative gradient error {}", err / norm);
    }

    #[test]
    fn residuals_are_pure() {
        let (la, p) = micro_phase(2);
        assert_eq!(la.residuals(&p, 0).unwrap(), la.residuals(&p, 0).unwrap());
        let a = la.loss(&p).unwrap();
        let b = la.loss(&p).unwrap();
        assert_eq!(a, b);
    }
}
