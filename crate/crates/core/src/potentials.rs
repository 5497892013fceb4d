//! Dimensional free energy and dissipation potential built around the
//! networks: input normalization, output scaling and the exact constraints
//! `f(0) = 0`, `psi(z, 0) = 0` and `d psi / d w (z, 0) = 0`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, DiffError, Graph, NodeId, Program, Workspace};
use crate::networks::{Network, NetworkError, NetworkRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Phase,
    Visco,
    DiffusionLinear,
    DiffusionNonlinear,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Phase => "phase",
            Experiment::Visco => "visco",
            Experiment::DiffusionLinear => "diffusion-linear",
            Experiment::DiffusionNonlinear => "diffusion-nonlinear",
        }
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, Experiment::DiffusionLinear | Experiment::DiffusionNonlinear)
    }

    /// Number of inputs of the free energy.
    pub fn free_energy_width(self) -> usize {
        match self {
            Experiment::Visco => 2,
            _ => 1,
        }
    }

    /// (state, rate) input widths of the dissipation potential.
    pub fn dissipation_widths(self) -> (usize, usize) {
        if self.is_diffusion() {
            (1, 1)
        } else {
            (0, 1)
        }
    }

    pub fn default_hidden(self) -> Vec<usize> {
        if self.is_diffusion() {
            vec![10, 10]
        } else {
            vec![25, 25]
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phase" => Ok(Experiment::Phase),
            "visco" => Ok(Experiment::Visco),
            "diffusion-linear" => Ok(Experiment::DiffusionLinear),
            "diffusion-nonlinear" => Ok(Experiment::DiffusionNonlinear),
            other => Err(format!("unknown experiment '{other}'")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PotentialError {
    #[error("cannot fit normalization of '{0}': no data")]
    Empty(String),
    #[error("cannot fit normalization of '{0}': zero spread")]
    ZeroSpread(String),
    #[error("characteristic scale {0} is not positive and finite")]
    BadScale(&'static str),
    #[error("{what} expects {expected} inputs, got {got}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Affine map `(x - mean) / std` for one input component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// Mean and population standard deviation.
    pub fn fit(name: &str, values: &[f64]) -> Result<Self, PotentialError> {
        if values.is_empty() {
            return Err(PotentialError::Empty(name.to_string()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(PotentialError::ZeroSpread(name.to_string()));
        }
        Ok(Normalization { mean, std })
    }

    pub fn identity() -> Self {
        Normalization {
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    fn node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shifted = if self.mean == 0.0 {
            x
        } else {
            let m = g.scalar(self.mean);
            g.sub(x, m)
        };
        g.scale(shifted, 1.0 / self.std)
    }
}

/// Statistics entering the characteristic scales of each experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleInputs {
    Phase {
        traction_std: f64,
        bc_strain_std: f64,
        velocity_std: f64,
        length: f64,
    },
    Visco {
        traction_range: f64,
        bc_strain_range: f64,
        viscous_strain_range: f64,
        viscous_rate_range: f64,
    },
    Diffusion {
        max_abs_flux: f64,
    },
}

/// Returns `(f*, psi*)`.
pub fn characteristic_scales(s: &ScaleInputs) -> Result<(f64, f64), PotentialError> {
    let (f, psi) = match *s {
        ScaleInputs::Phase {
            traction_std,
            bc_strain_std,
            velocity_std,
            length,
        } => (
            traction_std * bc_strain_std,
            traction_std * velocity_std / length,
        ),
        ScaleInputs::Visco {
            traction_range,
            bc_strain_range,
            viscous_strain_range,
            viscous_rate_range,
        } => {
            let f = traction_range * bc_strain_range;
            (f, f * viscous_strain_range / viscous_rate_range)
        }
        ScaleInputs::Diffusion { max_abs_flux } => (1.0, max_abs_flux),
    };
    let ok = |v: f64| v > 0.0 && v.is_finite();
    if !ok(f) {
        return Err(PotentialError::BadScale("f*"));
    }
    if !ok(psi) {
        return Err(PotentialError::BadScale("psi*"));
    }
    Ok((f, psi))
}

/// Spread `max - min` of a sample.
pub fn max_min(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

/// Free energy and dissipation potential networks with their normalization
/// and scales. The two networks share one parameter vector: free energy
/// first, dissipation second.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub experiment: Experiment,
    pub f_net: Network,
    pub psi_net: Network,
    pub f_norm: Vec<Normalization>,
    pub psi_state_norm: Vec<Normalization>,
    pub psi_rate_norm: Vec<Normalization>,
    pub f_scale: f64,
    pub psi_scale: f64,
}

impl PotentialPair {
    pub fn new(
        experiment: Experiment,
        hidden: &[usize],
        f_norm: Vec<Normalization>,
        psi_state_norm: Vec<Normalization>,
        psi_rate_norm: Vec<Normalization>,
        scales: (f64, f64),
    ) -> Result<Self, PotentialError> {
        let nf = experiment.free_energy_width();
        let (ns, nr) = experiment.dissipation_widths();
        arity("free energy normalization", nf, f_norm.len())?;
        arity("dissipation state normalization", ns, psi_state_norm.len())?;
        arity("dissipation rate normalization", nr, psi_rate_norm.len())?;
        let f_net = Network::inn(nf, hidden, 0)?;
        let psi_net = if ns == 0 {
            Network::ficinn(nr, hidden, f_net.end())?
        } else {
            Network::picinn(ns, nr, hidden, f_net.end())?
        };
        Ok(PotentialPair {
            experiment,
            f_net,
            psi_net,
            f_norm,
            psi_state_norm,
            psi_rate_norm,
            f_scale: scales.0,
            psi_scale: scales.1,
        })
    }

    pub fn n_params(&self) -> usize {
        self.psi_net.end()
    }

    /// Glorot initialization of both networks from one seed.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        self.f_net.init_into(&mut p, seed);
        self.psi_net
            .init_into(&mut p, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
        p
    }

    fn raw_free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
        let zn: Vec<NodeId> = z
            .iter()
            .zip(&self.f_norm)
            .map(|(&x, n)| n.node(g, x))
            .collect();
        Ok(self.f_net.build(g, &zn, &[])?)
    }

    /// Dimensional free energy at the scalar nodes `z`. Vanishes at `z = 0`;
    /// for the viscoelastic experiment its derivative in the first
    /// component also vanishes at the origin.
    pub fn free_energy(&self, g: &mut Graph, z: &[NodeId]) -> Result<NodeId, PotentialError> {
        arity("free energy", self.f_norm.len(), z.len())?;
        let raw = self.raw_free_energy(g, z)?;
        let zeros: Vec<NodeId> = z.iter().map(|_| g.fresh_constant(&[0.0])).collect();
        let at_zero = self.raw_free_energy(g, &zeros)?;
        let mut out = g.sub(raw, at_zero);
        if self.experiment == Experiment::Visco {
            let slope = g.tangent(at_zero, zeros[0]);
            let lin = g.mul(slope, z[0]);
            out = g.sub(out, lin);
        }
        Ok(g.scale(out, self.f_scale))
    }

    fn raw_dissipation(&self, g: &mut Graph, z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
        let zn: Vec<NodeId> = z
            .iter()
            .zip(&self.psi_state_norm)
            .map(|(&x, n)| n.node(g, x))
            .collect();
        let wn: Vec<NodeId> = w
            .iter()
            .zip(&self.psi_rate_norm)
            .map(|(&x, n)| n.node(g, x))
            .collect();
        Ok(self.psi_net.build(g, &zn, &wn)?)
    }

    /// Dimensional dissipation potential. `psi(z, 0) = 0` and
    /// `d psi / d w (z, 0) = 0` hold for every parameter state.
    pub fn dissipation(&self, g: &mut Graph, z: &[NodeId], w: &[NodeId]) -> Result<NodeId, PotentialError> {
        arity("dissipation state", self.psi_state_norm.len(), z.len())?;
        arity("dissipation rate", self.psi_rate_norm.len(), w.len())?;
        let raw = self.raw_dissipation(g, z, w)?;
        let zeros: Vec<NodeId> = w.iter().map(|_| g.fresh_constant(&[0.0])).collect();
        let at_zero = self.raw_dissipation(g, z, &zeros)?;
        let mut out = g.sub(raw, at_zero);
        for (k, &z0) in zeros.iter().enumerate() {
            let slope = g.tangent(at_zero, z0);
            let lin = g.mul(slope, w[k]);
            out = g.sub(out, lin);
        }
        Ok(g.scale(out, self.psi_scale))
    }

    pub fn to_record(&self, params: &[f64]) -> PotentialRecord {
        PotentialRecord {
            experiment: self.experiment,
            free_energy: self.f_net.export(params),
            dissipation: self.psi_net.export(params),
            f_norm: self.f_norm.clone(),
            psi_state_norm: self.psi_state_norm.clone(),
            psi_rate_norm: self.psi_rate_norm.clone(),
            f_scale: self.f_scale,
            psi_scale: self.psi_scale,
        }
    }

    /// Rebuilds the pair and its parameter vector.
    pub fn from_record(rec: &PotentialRecord) -> Result<(Self, Vec<f64>), PotentialError> {
        let f_net = Network::from_record(&rec.free_energy, 0)?;
        let psi_net = Network::from_record(&rec.dissipation, f_net.end())?;
        let mut params = vec![0.0; psi_net.end()];
        f_net.import(&rec.free_energy, &mut params)?;
        psi_net.import(&rec.dissipation, &mut params)?;
        let pp = PotentialPair {
            experiment: rec.experiment,
            f_net,
            psi_net,
            f_norm: rec.f_norm.clone(),
            psi_state_norm: rec.psi_state_norm.clone(),
            psi_rate_norm: rec.psi_rate_norm.clone(),
            f_scale: rec.f_scale,
            psi_scale: rec.psi_scale,
        };
        Ok((pp, params))
    }
}

fn arity(what: &'static str, expected: usize, got: usize) -> Result<(), PotentialError> {
    if expected == got {
        Ok(())
    } else {
        Err(PotentialError::Arity {
            what,
            expected,
            got,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialRecord {
    pub experiment: Experiment,
    pub free_energy: NetworkRecord,
    pub dissipation: NetworkRecord,
    pub f_norm: Vec<Normalization>,
    pub psi_state_norm: Vec<Normalization>,
    pub psi_rate_norm: Vec<Normalization>,
    pub f_scale: f64,
    pub psi_scale: f64,
}

/// Pointwise evaluation of a trained pair: values and first derivatives.
pub struct Probe {
    graph: Graph,
    f_prog: Program,
    f_ws: Workspace,
    f_roots: Vec<NodeId>,
    psi_prog: Program,
    psi_ws: Workspace,
    psi_roots: Vec<NodeId>,
    nf: usize,
    ns: usize,
}

impl Probe {
    pub fn new(pp: &PotentialPair, params: &[f64]) -> Result<Self, PotentialError> {
        let nf = pp.f_norm.len();
        let ns = pp.psi_state_norm.len();
        let nr = pp.psi_rate_norm.len();
        let mut g = Graph::new();
        let z: Vec<NodeId> = (0..nf).map(|i| g.input(i)).collect();
        let f = pp.free_energy(&mut g, &z)?;
        let mut f_roots = vec![f];
        for &zi in &z {
            f_roots.push(g.tangent(f, zi));
        }
        if nf == 1 {
            let d = f_roots[1];
            f_roots.push(g.tangent(d, z[0]));
        }
        let s: Vec<NodeId> = (0..ns).map(|i| g.input(nf + i)).collect();
        let w: Vec<NodeId> = (0..nr).map(|i| g.input(nf + ns + i)).collect();
        let psi = pp.dissipation(&mut g, &s, &w)?;
        let mut psi_roots = vec![psi];
        for &wi in &w {
            psi_roots.push(g.tangent(psi, wi));
        }
        let f_prog = Program::new(&g, &f_roots);
        let psi_prog = Program::new(&g, &psi_roots);
        let f_ws = f_prog.prepare(&g, params)?;
        let psi_ws = psi_prog.prepare(&g, params)?;
        Ok(Probe {
            graph: g,
            f_prog,
            f_ws,
            f_roots,
            psi_prog,
            psi_ws,
            psi_roots,
            nf,
            ns,
        })
    }

    /// `(f, df/dz)` at `z`.
    pub fn free_energy(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>), PotentialError> {
        arity("free energy", self.nf, z.len())?;
        let mut inputs = z.to_vec();
        inputs.resize(self.nf + self.ns + self.psi_roots.len() - 1, 0.0);
        self.f_prog.forward(&self.graph, &mut self.f_ws, &inputs)?;
        let vals: Vec<f64> = self
            .f_roots
            .iter()
            .map(|&r| self.f_ws.scalar(&self.graph, r))
            .collect();
        Ok((vals[0], vals[1..1 + self.nf].to_vec()))
    }

    /// `f''(z)` of a free energy with one input.
    pub fn free_energy_curvature(&mut self, z: f64) -> Result<f64, PotentialError> {
        arity("free energy curvature", 1, self.nf)?;
        self.free_energy(&[z])?;
        Ok(self.f_ws.scalar(&self.graph, self.f_roots[2]))
    }

    /// `(psi, dpsi/dw)` at `(z, w)`.
    pub fn dissipation(&mut self, z: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>), PotentialError> {
        arity("dissipation state", self.ns, z.len())?;
        arity("dissipation rate", self.psi_roots.len() - 1, w.len())?;
        let mut inputs = vec![0.0; self.nf];
        inputs.extend_from_slice(z);
        inputs.extend_from_slice(w);
        self.psi_prog.forward(&self.graph, &mut self.psi_ws, &inputs)?;
        let vals: Vec<f64> = self
            .psi_roots
            .iter()
            .map(|&r| self.psi_ws.scalar(&self.graph, r))
            .collect();
        Ok((vals[0], vals[1..].to_vec()))
    }
}

/// Evaluates a scalar node built by `build` over fresh inputs, for tests and
/// diagnostics.
pub fn evaluate_once(
    params: &[f64],
    inputs: &[f64],
    build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId, PotentialError>,
) -> Result<f64, PotentialError> {
    let mut g = Graph::new();
    let xs: Vec<NodeId> = (0..inputs.len()).map(|i| g.input(i)).collect();
    let root = build(&mut g, &xs)?;
    Ok(g.evaluate(root, &Bindings::new(inputs, params))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(mean: f64, std: f64) -> Normalization {
        Normalization { mean, std }
    }

    fn phase_pair() -> PotentialPair {
        PotentialPair::new(
            Experiment::Phase,
            &[25, 25],
            vec![norm(0.01, 0.008)],
            vec![],
            vec![norm(0.5, 12.0)],
            (3.0, 0.7),
        )
        .unwrap()
    }

    fn visco_pair() -> PotentialPair {
        PotentialPair::new(
            Experiment::Visco,
            &[25, 25],
            vec![norm(0.002, 0.004), norm(0.001, 0.003)],
            vec![],
            vec![norm(0.0, 0.2)],
            (200.0, 4.0),
        )
        .unwrap()
    }

    fn diffusion_pair() -> PotentialPair {
        PotentialPair::new(
            Experiment::DiffusionNonlinear,
            &[10, 10],
            vec![norm(0.5, 0.3)],
            vec![norm(0.5, 0.3)],
            vec![norm(0.1, 2.0)],
            (1.0, 1.8),
        )
        .unwrap()
    }

    #[test]
    fn free_energy_vanishes_at_origin() {
        let pp = phase_pair();
        let p = pp.init_params(3);
        let v = evaluate_once(&p, &[0.0], |g, x| pp.free_energy(g, x)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn free_energy_matches_definition() {
        let pp = phase_pair();
        let p = pp.init_params(4);
        let z = 0.017;
        let got = evaluate_once(&p, &[z], |g, x| pp.free_energy(g, x)).unwrap();
        let raw = |zv: f64| {
            evaluate_once(&p, &[pp.f_norm[0].apply(zv)], |g, x| Ok(pp.f_net.build(g, x, &[])?)).unwrap()
        };
        let want = pp.f_scale * (raw(z) - raw(0.0));
        assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0));
    }

    #[test]
    fn free_energy_is_linear_in_scale() {
        let pp = phase_pair();
        let p = pp.init_params(5);
        let mut doubled = pp.clone();
        doubled.f_scale *= 2.0;
        let a = evaluate_once(&p, &[0.02], |g, x| pp.free_energy(g, x)).unwrap();
        let b = evaluate_once(&p, &[0.02], |g, x| doubled.free_energy(g, x)).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn viscoelastic_free_energy_has_zero_stress_at_origin() {
        let pp = visco_pair();
        let p = pp.init_params(6);
        let mut probe = Probe::new(&pp, &p).unwrap();
        let (f, d) = probe.free_energy(&[0.0, 0.0]).unwrap();
        assert_eq!(f, 0.0);
        assert!(d[0].abs() < 1e-12 * pp.f_scale, "{}", d[0]);
        assert!(d[1].abs() > 1e-6, "viscous derivative should not be cancelled");
    }

    #[test]
    fn dissipation_constraints_hold_exactly() {
        for pp in [phase_pair(), diffusion_pair()] {
            let p = pp.init_params(8);
            let mut probe = Probe::new(&pp, &p).unwrap();
            for &c in &[0.05, 0.4, 0.93] {
                let z: Vec<f64> = pp.psi_state_norm.iter().map(|_| c).collect();
                let (v, d) = probe.dissipation(&z, &[0.0]).unwrap();
                assert_eq!(v, 0.0);
                assert!(d[0].abs() < 1e-13, "{}", d[0]);
            }
        }
    }

    #[test]
    fn dissipation_is_non_negative() {
        let pp = diffusion_pair();
        let p = pp.init_params(9);
        let mut probe = Probe::new(&pp, &p).unwrap();
        for k in 0..200 {
            let c = 0.01 + 0.98 * (k as f64 * 0.37).fract();
            let j = -6.0 + 12.0 * (k as f64 * 0.61).fract();
            let (v, _) = probe.dissipation(&[c], &[j]).unwrap();
            assert!(v >= -1e-12, "psi({c}, {j}) = {v}");
        }
    }

    #[test]
    fn affine_part_in_rate_is_cancelled() {
        // shifting the output bias and adding a linear term in the rate leave psi unchanged
        let pp = phase_pair();
        let mut p = pp.init_params(10);
        let v0 = evaluate_once(&p, &[3.0], |g, x| pp.dissipation(g, &[], x)).unwrap();
        let b = pp.psi_net.block("b2").unwrap().offset;
        let ww = pp.psi_net.block("Ww2").unwrap().offset;
        p[b] += 1.3;
        p[ww] -= 0.4;
        let v1 = evaluate_once(&p, &[3.0], |g, x| pp.dissipation(g, &[], x)).unwrap();
        assert!((v0 - v1).abs() < 1e-12 * v0.abs().max(1.0));
    }

    #[test]
    fn scales_follow_formulas() {
        let (f, psi) = characteristic_scales(&ScaleInputs::Phase {
            traction_std: 2.0,
            bc_strain_std: 0.1,
            velocity_std: 3.0,
            length: 9.0,
        })
        .unwrap();
        assert!((f - 0.2).abs() < 1e-15);
        assert!((psi - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            characteristic_scales(&ScaleInputs::Diffusion { max_abs_flux: 1.8 }).unwrap(),
            (1.0, 1.8)
        );
        let (f, _) = characteristic_scales(&ScaleInputs::Visco {
            traction_range: 1e4,
            bc_strain_range: 0.02,
            viscous_strain_range: 0.01,
            viscous_rate_range: 0.5,
        })
        .unwrap();
        assert!((f - 200.0).abs() < 1e-12);
        assert!(characteristic_scales(&ScaleInputs::Diffusion { max_abs_flux: 0.0 }).is_err());
    }

    #[test]
    fn normalization_fit() {
        let n = Normalization::fit("x", &[1.0, 3.0]).unwrap();
        assert_eq!((n.mean, n.std), (2.0, 1.0));
        assert!(Normalization::fit("x", &[2.0, 2.0]).is_err());
        assert!(Normalization::fit("x", &[]).is_err());
    }

    #[test]
    fn record_round_trip() {
        let pp = diffusion_pair();
        let p = pp.init_params(1);
        let rec = pp.to_record(&p);
        let (pp2, p2) = PotentialPair::from_record(&rec).unwrap();
        assert_eq!(pp2, pp);
        assert_eq!(p2, p);
    }
}
