//! One-dimensional standard linear solid under a prescribed end displacement.
//!
//! Nodes `0..=N` carry displacement and velocity (lumped mass `rho dX`),
//! element `e` carries strain and viscous strain. The wave part is advanced
//! with kick-drift-kick leapfrog, the viscous strain with forward Euler.

use serde::{Deserialize, Serialize};

use super::{positions, Field, SimError, TrajectoryField};
use crate::potentials::Experiment;

/// Material constants of the three-dimensional model (SI units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscoMaterial {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    pub viscous_shear_modulus: f64,
    pub relaxation_time: f64,
}

impl Default for ViscoMaterial {
    fn default() -> Self {
        ViscoMaterial {
            youngs_modulus: 7.5e5,
            poisson_ratio: 0.49,
            density: 970.0,
            viscous_shear_modulus: 7.5e4,
            relaxation_time: 0.01,
        }
    }
}

/// Uniaxial-strain reduction of [`ViscoMaterial`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViscoConstants {
    pub bulk_modulus: f64,
    pub shear_modulus: f64,
    pub viscous_shear_modulus: f64,
    pub relaxation_time: f64,
    pub density: f64,
    pub theta: f64,
    pub elastic_modulus: f64,
    pub viscous_modulus: f64,
    pub viscosity: f64,
}

impl ViscoConstants {
    pub fn new(m: &ViscoMaterial) -> Self {
        let k = m.youngs_modulus / (3.0 * (1.0 - 2.0 * m.poisson_ratio));
        let g = m.youngs_modulus / (2.0 * (1.0 + m.poisson_ratio));
        let gv = m.viscous_shear_modulus;
        let theta = 1.0 + (g + gv) / (3.0 * k);
        ViscoConstants {
            bulk_modulus: k,
            shear_modulus: g,
            viscous_shear_modulus: gv,
            relaxation_time: m.relaxation_time,
            density: m.density,
            theta,
            elastic_modulus: 3.0 * g / theta,
            viscous_modulus: 3.0 * gv / theta,
            viscosity: 3.0 * gv * m.relaxation_time,
        }
    }

    /// Instantaneous longitudinal wave speed.
    pub fn wave_speed(&self) -> f64 {
        ((self.elastic_modulus + self.viscous_modulus) / self.density).sqrt()
    }

    #[inline]
    pub fn stress(&self, e: f64, ev: f64) -> f64 {
        self.elastic_modulus * e + self.viscous_modulus * (e - ev)
    }

    /// Viscous strain rate from the internal-variable evolution law.
    #[inline]
    pub fn viscous_rate(&self, e: f64, ev: f64) -> f64 {
        if self.relaxation_time == 0.0 || self.viscous_shear_modulus == 0.0 {
            return 0.0;
        }
        (e - self.stress(e, ev) / (9.0 * self.bulk_modulus) - ev) / self.relaxation_time
    }

    pub fn free_energy(&self, e: f64, ev: f64) -> f64 {
        let s = self.stress(e, ev);
        0.5 * self.theta * self.elastic_modulus * e * e
            + 0.5 * self.theta * self.viscous_modulus * (e - ev).powi(2)
            - self.theta / (18.0 * self.bulk_modulus) * s * s
    }

    /// Configurational stress, the derivative of the free energy with
    /// respect to the viscous strain.
    pub fn configurational_stress(&self, e: f64, ev: f64) -> f64 {
        -3.0 * self.viscous_shear_modulus * (e - ev)
            + self.viscous_shear_modulus * self.stress(e, ev) / (3.0 * self.bulk_modulus)
    }

    pub fn dissipation(&self, rate: f64) -> f64 {
        0.5 * self.viscosity * rate * rate
    }

    pub fn dissipative_force(&self, rate: f64) -> f64 {
        self.viscosity * rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscoConfig {
    pub material: ViscoMaterial,
    pub length: f64,
    pub n_x: usize,
    /// Integration step (s).
    pub dt: f64,
    /// Spacing of the recorded states (s); a multiple of `dt`.
    pub output_dt: f64,
    /// Number of recorded rows; one extra state is simulated for the
    /// forward-differenced viscous strain rate.
    pub n_output: usize,
    /// Amplitude of `u(L, t) = a [1 - cos(2 pi (f0 + k t) t)]` (m).
    pub bc_amplitude: f64,
    pub bc_start_frequency: f64,
    pub bc_sweep_rate: f64,
}

impl Default for ViscoConfig {
    fn default() -> Self {
        ViscoConfig {
            material: ViscoMaterial::default(),
            length: 1.0,
            n_x: 250,
            dt: 1e-4,
            output_dt: 1e-3,
            n_output: 1000,
            bc_amplitude: 0.01,
            bc_start_frequency: 1.0,
            bc_sweep_rate: 9.0,
        }
    }
}

impl ViscoConfig {
    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    pub fn constants(&self) -> ViscoConstants {
        ViscoConstants::new(&self.material)
    }

    pub fn boundary_displacement(&self, t: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (self.bc_start_frequency + self.bc_sweep_rate * t) * t;
        self.bc_amplitude * (1.0 - phase.cos())
    }

    pub fn cfl_limit(&self) -> f64 {
        self.dx() / self.constants().wave_speed()
    }

    fn substeps(&self) -> Result<usize, SimError> {
        if self.n_x < 2 || self.n_output == 0 || !(self.dt > 0.0 && self.length > 0.0) {
            return Err(SimError::Invalid(
                "need at least two elements, one output row and positive sizes".into(),
            ));
        }
        let limit = self.cfl_limit();
        if self.dt > limit {
            return Err(SimError::StepTooLarge {
                dt: self.dt,
                limit,
            });
        }
        let k = (self.output_dt / self.dt).round();
        if k < 1.0 || ((k * self.dt - self.output_dt) / self.output_dt).abs() > 1e-9 {
            return Err(SimError::Invalid(format!(
                "output spacing {} is not a multiple of the step {}",
                self.output_dt, self.dt
            )));
        }
        Ok(k as usize)
    }
}

/// Mutable state of the discretized bar.
#[derive(Debug, Clone)]
pub struct ViscoSolver {
    pub constants: ViscoConstants,
    pub dx: f64,
    pub dt: f64,
    pub time: f64,
    pub displacement: Vec<f64>,
    pub velocity: Vec<f64>,
    pub viscous_strain: Vec<f64>,
    strain: Vec<f64>,
    stress: Vec<f64>,
    acceleration: Vec<f64>,
}

impl ViscoSolver {
    pub fn new(cfg: &ViscoConfig) -> Result<Self, SimError> {
        cfg.substeps()?;
        let n = cfg.n_x;
        let mut s = ViscoSolver {
            constants: cfg.constants(),
            dx: cfg.dx(),
            dt: cfg.dt,
            time: 0.0,
            displacement: vec![0.0; n + 1],
            velocity: vec![0.0; n + 1],
            viscous_strain: vec![0.0; n],
            strain: vec![0.0; n],
            stress: vec![0.0; n],
            acceleration: vec![0.0; n + 1],
        };
        s.displacement[n] = cfg.boundary_displacement(0.0);
        s.refresh();
        Ok(s)
    }

    pub fn n_x(&self) -> usize {
        self.strain.len()
    }

    /// Recomputes strain, stress and acceleration from the current
    /// displacement; call after editing the state by hand.
    pub fn refresh(&mut self) {
        let n = self.n_x();
        let c = &self.constants;
        for e in 0..n {
            self.strain[e] = (self.displacement[e + 1] - self.displacement[e]) / self.dx;
            self.stress[e] = c.stress(self.strain[e], self.viscous_strain[e]);
        }
        let m = c.density * self.dx;
        for i in 1..n {
            self.acceleration[i] = (self.stress[i] - self.stress[i - 1]) / m;
        }
    }

    pub fn strain(&self) -> &[f64] {
        &self.strain
    }

    pub fn stress(&self) -> &[f64] {
        &self.stress
    }

    /// Accelerations of the interior nodes `1..N`.
    pub fn acceleration(&self) -> &[f64] {
        &self.acceleration[1..self.n_x()]
    }

    pub fn traction(&self) -> f64 {
        self.stress[self.n_x() - 1]
    }

    /// Kinetic plus stored energy of the bar.
    pub fn energy(&self) -> f64 {
        let n = self.n_x();
        let c = &self.constants;
        let kinetic: f64 = self.velocity[1..n].iter().map(|v| v * v).sum::<f64>()
            * 0.5
            * c.density
            * self.dx;
        let stored: f64 = (0..n)
            .map(|e| c.free_energy(self.strain[e], self.viscous_strain[e]))
            .sum::<f64>()
            * self.dx;
        kinetic + stored
    }

    /// Advances by one step; the far end follows `boundary`.
    pub fn step(&mut self, boundary: impl Fn(f64) -> f64) {
        let n = self.n_x();
        let h = self.dt;
        let c = self.constants;
        for e in 0..n {
            self.viscous_strain[e] += h * c.viscous_rate(self.strain[e], self.viscous_strain[e]);
        }
        for i in 1..n {
            self.velocity[i] += 0.5 * h * self.acceleration[i];
            self.displacement[i] += h * self.velocity[i];
        }
        self.time += h;
        self.displacement[n] = boundary(self.time);
        self.refresh();
        for i in 1..n {
            self.velocity[i] += 0.5 * h * self.acceleration[i];
        }
    }
}

pub fn simulate_visco(cfg: &ViscoConfig) -> Result<TrajectoryField, SimError> {
    let sub = cfg.substeps()?;
    let mut solver = ViscoSolver::new(cfg)?;
    let n = cfg.n_x;
    let dx = cfg.dx();
    let c = solver.constants;

    let elements = positions(n, 0.5 * dx, dx);
    let mut tf = TrajectoryField::new(Experiment::Visco, n, dx);
    let mut f_disp = Field::new("m", positions(n + 1, 0.0, dx));
    let mut f_strain = Field::new("1", elements.clone());
    let mut f_visc = Field::new("1", elements.clone());
    let mut f_rate = Field::new("1/s", elements.clone());
    let mut f_rate_exact = Field::new("1/s", elements);
    let mut f_acc = Field::new("m/s^2", positions(n - 1, dx, dx));
    let mut f_trac = Field::new("Pa", vec![cfg.length]);

    let mut prev_visc: Vec<f64> = Vec::new();
    let mut rate = vec![0.0; n];
    let mut exact = vec![0.0; n];
    for k in 0..=cfg.n_output {
        if k > 0 {
            for _ in 0..sub {
                solver.step(|t| cfg.boundary_displacement(t));
            }
            for e in 0..n {
                rate[e] = (solver.viscous_strain[e] - prev_visc[e]) / cfg.output_dt;
            }
            f_rate.push_row(&rate);
        }
        if solver.strain().iter().any(|v| !v.is_finite()) {
            return Err(SimError::Unstable {
                what: "strain",
                value: f64::NAN,
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
                step: k * sub,
            });
        }
        if k == cfg.n_output {
            break;
        }
        tf.times.push(solver.time);
        f_disp.push_row(&solver.displacement);
        f_strain.push_row(solver.strain());
        f_visc.push_row(&solver.viscous_strain);
        for e in 0..n {
            exact[e] = c.viscous_rate(solver.strain()[e], solver.viscous_strain[e]);
        }
        f_rate_exact.push_row(&exact);
        f_acc.push_row(solver.acceleration());
        f_trac.push_row(&[solver.traction()]);
        prev_visc.clone_from(&solver.viscous_strain);
    }
    for (name, f) in [
        ("displacement", f_disp),
        ("strain", f_strain),
        ("viscous_strain", f_visc),
        ("viscous_rate", f_rate),
        ("viscous_rate_exact", f_rate_exact),
        ("acceleration", f_acc),
        ("traction", f_trac),
    ] {
        tf.fields.insert(name.into(), f);
    }
    tf.set_meta("config", cfg);
    tf.set_meta("constants", c);
    tf.set_meta("units", "SI");
    tf.set_meta(
        "scheme",
        "leapfrog for the momentum balance, forward Euler for the viscous strain, forward-differenced viscous strain rate",
    );
    tf.set_meta("cfl_limit", cfg.cfl_limit());
    tf.set_meta("wave_speed", c.wave_speed());
    Ok(tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn derived_constants() {
        let c = ViscoConstants::new(&ViscoMaterial::default());
        let (e, nu, gv, tau): (f64, f64, f64, f64) = (7.5e5, 0.49, 7.5e4, 0.01);
        let k = e / (3.0 * (1.0 - 2.0 * nu));
        let g = e / (2.0 * (1.0 + nu));
        assert!((k - 1.25e7).abs() < 1e-6);
        assert!((g - 2.52e5).abs() < 0.01 * 2.52e5);
        let theta = 1.0 + (g + gv) / (3.0 * k);
        assert!((c.theta - theta).abs() < 1e-15);
        assert!((c.elastic_modulus - 3.0 * g / theta).abs() < 1e-9);
        assert!((c.viscous_modulus - 3.0 * gv / theta).abs() < 1e-9);
        assert!((c.viscosity - 3.0 * gv * tau).abs() < 1e-9);
    }

    #[test]
    fn reference_potentials() {
        let c = ViscoConstants::new(&ViscoMaterial::default());
        assert_eq!(c.free_energy(0.0, 0.0), 0.0);
        assert_eq!(c.dissipation(0.0), 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let e: f64 = rng.gen_range(-0.02..0.02);
            let ev: f64 = rng.gen_range(-0.01..0.01);
            // d/de of each quadratic term, evaluated independently
            let s = c.stress(e, ev);
            let ds = c.elastic_modulus + c.viscous_modulus;
            let df = c.theta * c.elastic_modulus * e + c.theta * c.viscous_modulus * (e - ev)
                - c.theta / (9.0 * c.bulk_modulus) * s * ds;
            assert!((df - s).abs() < 1e-12 * s.abs().max(1.0));
            let h = 1e-7;
            let fd = (c.free_energy(e, ev + h) - c.free_energy(e, ev - h)) / (2.0 * h);
            let cs = c.configurational_stress(e, ev);
            assert!((fd - cs).abs() < 1e-6 * cs.abs().max(1.0), "{fd} vs {cs}");
        }
    }

    #[test]
    fn step_above_cfl_refused() {
        let cfg = ViscoConfig {
            dt: 2e-4,
            output_dt: 2e-3,
            ..ViscoConfig::default()
        };
        assert!(matches!(simulate_visco(&cfg), Err(SimError::StepTooLarge { .. })));
    }

    #[test]
    fn zero_excitation_stays_at_rest() {
        let cfg = ViscoConfig {
            bc_amplitude: 0.0,
            n_output: 20,
            ..ViscoConfig::default()
        };
        let tf = simulate_visco(&cfg).unwrap();
        for f in tf.fields.values() {
            assert!(f.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = ViscoConfig {
            n_output: 30,
            ..ViscoConfig::default()
        };
        let tf = simulate_visco(&cfg).unwrap();
        tf.check_consistent().unwrap();
        assert_eq!(tf.n_times(), 30);
        assert_eq!(tf.field("displacement").unwrap().stations(), 251);
        assert_eq!(tf.field("strain").unwrap().stations(), 250);
        assert_eq!(tf.field("acceleration").unwrap().stations(), 249);
        assert!((tf.times[29] - 0.029).abs() < 1e-12);
        let t = tf.field("traction").unwrap();
        assert!(t.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn elastic_limit_conserves_energy() {
        let cfg = ViscoConfig {
            material: ViscoMaterial {
                viscous_shear_modulus: 0.0,
                ..ViscoMaterial::default()
            },
            bc_amplitude: 0.0,
            ..ViscoConfig::default()
        };
        let mut s = ViscoSolver::new(&cfg).unwrap();
        let n = s.n_x();
        for i in 0..=n {
            let x = i as f64 / n as f64;
            s.displacement[i] = 1e-3 * (std::f64::consts::PI * x).sin() * (3.0 * std::f64::consts::PI * x).sin();
        }
        s.displacement[n] = 0.0;
        s.refresh();
        let e0 = s.energy();
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            s.step(|_| 0.0);
            worst = worst.max((s.energy() - e0).abs() / e0);
        }
        assert!(worst < 5e-3, "energy drift {worst}");
    }
}
