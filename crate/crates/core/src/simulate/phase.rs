//! Overdamped bar pulled at one end, with a possibly non-convex free energy.
//!
//! Nodes `0..=N` carry displacements, element `e` (between nodes `e` and
//! `e + 1`) carries the strain, and interior node `i` moves with velocity
//! `v_i = (f'(eps_i+1) - f'(eps_i)) / (eta dX)` (elements on its right and
//! left). Units are nm, ns and pN throughout.

use serde::{Deserialize, Serialize};

use super::{positions, Field, SimError, TrajectoryField};
use crate::potentials::Experiment;

/// Ground-truth free energy per unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhaseFreeEnergy {
    /// `depth (e - first)^2 (e - second)^2`, shifted so that `f(0) = 0`.
    DoubleWell {
        depth: f64,
        first_well: f64,
        second_well: f64,
    },
    /// `stiffness e^2 / 2`.
    Quadratic { stiffness: f64 },
}

impl PhaseFreeEnergy {
    pub fn default_double_well() -> Self {
        PhaseFreeEnergy::DoubleWell {
            depth: 1.0e7,
            first_well: 0.0,
            second_well: 0.02,
        }
    }

    pub fn value(&self, e: f64) -> f64 {
        match *self {
            PhaseFreeEnergy::DoubleWell {
                depth,
                first_well: a,
                second_well: b,
            } => depth * ((e - a) * (e - b)).powi(2) - depth * (a * b).powi(2),
            PhaseFreeEnergy::Quadratic { stiffness } => 0.5 * stiffness * e * e,
        }
    }

    #[inline]
    pub fn slope(&self, e: f64) -> f64 {
        match *self {
            PhaseFreeEnergy::DoubleWell {
                depth,
                first_well: a,
                second_well: b,
            } => 2.0 * depth * (e - a) * (e - b) * (2.0 * e - a - b),
            PhaseFreeEnergy::Quadratic { stiffness } => stiffness * e,
        }
    }

    pub fn curvature(&self, e: f64) -> f64 {
        match *self {
            PhaseFreeEnergy::DoubleWell {
                depth,
                first_well: a,
                second_well: b,
            } => {
                let s = 2.0 * e - a - b;
                2.0 * depth * ((e - b) * s + (e - a) * s + 2.0 * (e - a) * (e - b))
            }
            PhaseFreeEnergy::Quadratic { stiffness } => stiffness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub free_energy: PhaseFreeEnergy,
    /// Dissipation coefficient `eta` in `psi = eta v^2 / 2` (pN ns / nm^2).
    pub viscosity: f64,
    /// Bar length (nm).
    pub length: f64,
    /// Pulling speed; the end moves as `v_p t / 2` (nm/ns).
    pub pull_speed: f64,
    pub n_x: usize,
    /// Time step (ns).
    pub dt: f64,
    /// Duration (ns).
    pub t_end: f64,
    /// Uniform strain of the initial state.
    #[serde(default)]
    pub initial_strain: f64,
    /// Any strain outside this interval aborts the run.
    pub strain_bounds: [f64; 2],
    /// Every `output_stride`-th step is stored in the returned trajectory.
    pub output_stride: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            free_energy: PhaseFreeEnergy::default_double_well(),
            viscosity: 8.0,
            length: 9.0,
            pull_speed: 9.5,
            n_x: 150,
            dt: 9e-9,
            t_end: 0.028,
            initial_strain: 0.0,
            strain_bounds: [-0.1, 0.2],
            output_stride: 3000,
        }
    }
}

impl PhaseConfig {
    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    /// Number of recorded time levels `n = 0..n_t`.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn end_displacement(&self, t: f64) -> f64 {
        self.initial_strain * self.length + 0.5 * self.pull_speed * t
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_x < 2 {
            return Err(SimError::Invalid("the bar needs at least two elements".into()));
        }
        if !(self.viscosity > 0.0 && self.length > 0.0 && self.dt > 0.0 && self.t_end > 0.0) {
            return Err(SimError::Invalid(
                "viscosity, length, time step and duration must be positive".into(),
            ));
        }
        if self.output_stride == 0 {
            return Err(SimError::Invalid("output stride must be at least one".into()));
        }
        let [lo, hi] = self.strain_bounds;
        if !(lo < self.initial_strain && self.initial_strain < hi) {
            return Err(SimError::Invalid("initial strain lies outside the strain bounds".into()));
        }
        Ok(())
    }
}

/// State at one time level, handed to observers.
pub struct PhaseStep<'a> {
    pub step: usize,
    pub time: f64,
    /// Element strains, length `N`.
    pub strain: &'a [f64],
    /// Interior node velocities, length `N - 1`.
    pub velocity: &'a [f64],
    /// Traction at the pulled end, `f'(eps_N)`.
    pub traction: f64,
}

/// Runs the scheme, calling `observe` at every time level `n = 0..n_t - 1`,
/// and returns the strided trajectory.
pub fn simulate_phase_observed(
    cfg: &PhaseConfig,
    mut observe: impl FnMut(&PhaseStep),
) -> Result<TrajectoryField, SimError> {
    cfg.validate()?;
    let n = cfg.n_x;
    let dx = cfg.dx();
    let fe = cfg.free_energy;
    let n_t = cfg.n_steps();
    let [lo, hi] = cfg.strain_bounds;

    let mut u: Vec<f64> = (0..=n).map(|i| cfg.initial_strain * i as f64 * dx).collect();
    let mut strain = vec![0.0; n];
    let mut slope = vec![0.0; n];
    let mut vel = vec![0.0; n - 1];

    let mut tf = TrajectoryField::new(Experiment::Phase, n, dx);
    let mut f_strain = Field::new("1", positions(n, 0.5 * dx, dx));
    let mut f_vel = Field::new("nm/ns", positions(n - 1, dx, dx));
    let mut f_trac = Field::new("pN", vec![cfg.length]);
    let mut f_disp = Field::new("nm", positions(n + 1, 0.0, dx));
    let rate = 1.0 / (cfg.viscosity * dx);
    let mut max_speed: f64 = 0.0;

    for step in 0..n_t {
        let t = step as f64 * cfg.dt;
        for e in 0..n {
            let s = (u[e + 1] - u[e]) / dx;
            if !(s >= lo && s <= hi) {
                return Err(SimError::Unstable {
                    what: "strain",
                    value: s,
                    lo,
                    hi,
                    step,
                });
            }
            strain[e] = s;
            slope[e] = fe.slope(s);
        }
        for i in 0..n - 1 {
            vel[i] = (slope[i + 1] - slope[i]) * rate;
            max_speed = max_speed.max(vel[i].abs());
        }
        let traction = slope[n - 1];
        observe(&PhaseStep {
            step,
            time: t,
            strain: &strain,
            velocity: &vel,
            traction,
        });
        if step % cfg.output_stride == 0 {
            tf.times.push(t);
            f_strain.push_row(&strain);
            f_vel.push_row(&vel);
            f_trac.push_row(&[traction]);
            f_disp.push_row(&u);
        }
        for i in 1..n {
            u[i] += cfg.dt * vel[i - 1];
        }
        u[n] = cfg.end_displacement(t + cfg.dt);
    }
    tf.fields.insert("strain".into(), f_strain);
    tf.fields.insert("velocity".into(), f_vel);
    tf.fields.insert("traction".into(), f_trac);
    tf.fields.insert("displacement".into(), f_disp);
    tf.set_meta("config", cfg);
    tf.set_meta("units", "length nm, time ns, force pN");
    tf.set_meta("scheme", "explicit Euler for overdamped node motion, one-sided strain differences");
    tf.set_meta("n_steps", n_t);
    tf.set_meta("max_node_speed", max_speed);
    Ok(tf)
}

pub fn simulate_phase(cfg: &PhaseConfig) -> Result<TrajectoryField, SimError> {
    simulate_phase_observed(cfg, |_| {})
}
