//! Explicit conservative schemes for linear and nonlinear diffusion on the
//! periodic unit interval.
//!
//! Fluxes carry the physical sign, `j = -grad c` for the linear model and
//! `j = -m grad log(2m)` for the nonlinear one, so that `dc/dt = -div j`.

use serde::{Deserialize, Serialize};

use super::bessel::{dm_dc, invert_m};
use super::{positions, Field, SimError, TrajectoryField};
use crate::potentials::Experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionModel {
    Linear,
    Nonlinear,
}

impl DiffusionModel {
    pub fn experiment(self) -> Experiment {
        match self {
            DiffusionModel::Linear => Experiment::DiffusionLinear,
            DiffusionModel::Nonlinear => Experiment::DiffusionNonlinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub model: DiffusionModel,
    pub n_x: usize,
    pub dt: f64,
    pub t_end: f64,
    pub snapshots: usize,
    /// Initial profile `mean + amplitude sin(2 pi waves x)`.
    pub initial_mean: f64,
    pub initial_amplitude: f64,
    pub initial_waves: f64,
    /// Upper end of the concentration range for the mobility inversion.
    pub c_max: f64,
}

impl DiffusionConfig {
    pub fn linear() -> Self {
        DiffusionConfig {
            model: DiffusionModel::Linear,
            n_x: 99,
            dt: 2.55e-5,
            t_end: 0.025,
            snapshots: 201,
            initial_mean: 0.5,
            initial_amplitude: 0.49,
            initial_waves: 2.0,
            c_max: 1.2,
        }
    }

    pub fn nonlinear() -> Self {
        DiffusionConfig {
            model: DiffusionModel::Nonlinear,
            dt: 1.01e-5,
            ..Self::linear()
        }
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n_x as f64
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn initial_profile(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_x)
            .map(|i| {
                let x = i as f64 * dx;
                self.initial_mean
                    + self.initial_amplitude
                        * (2.0 * std::f64::consts::PI * self.initial_waves * x).sin()
            })
            .collect()
    }

    /// Step indices at which snapshots are recorded.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let n = self.n_steps();
        let k = self.snapshots.max(2) - 1;
        (0..=k)
            .map(|s| ((s * n) as f64 / k as f64).round() as usize)
            .collect()
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_x < 3 {
            return Err(SimError::Invalid("diffusion needs at least 3 cells".into()));
        }
        if !(self.dt > 0.0 && self.t_end > 0.0) {
            return Err(SimError::Invalid("time step and duration must be positive".into()));
        }
        if self.snapshots < 2 {
            return Err(SimError::Invalid("at least two snapshots are required".into()));
        }
        Ok(())
    }
}

/// Fluxes `j[i]` at the faces `i + 1/2` (periodic).
pub fn fluxes(model: DiffusionModel, c: &[f64], dx: f64, c_max: f64) -> Result<Vec<f64>, SimError> {
    let n = c.len();
    match model {
        DiffusionModel::Linear => Ok((0..n).map(|i| -(c[(i + 1) % n] - c[i]) / dx).collect()),
        DiffusionModel::Nonlinear => {
            let m = c
                .iter()
                .map(|&ci| invert_m(ci, c_max))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((0..n)
                .map(|i| {
                    let k = (i + 1) % n;
                    let face = 0.5 * (m[i] + m[k]);
                    -face * ((2.0 * m[k]).ln() - (2.0 * m[i]).ln()) / dx
                })
                .collect())
        }
    }
}

/// Largest stable step. For the nonlinear model the effective diffusivity
/// `m'(c)` of the initial state is used.
pub fn stability_limit(cfg: &DiffusionConfig, c: &[f64]) -> Result<f64, SimError> {
    let dx = cfg.dx();
    let d_max = match cfg.model {
        DiffusionModel::Linear => 1.0,
        DiffusionModel::Nonlinear => {
            let mut d: f64 = 0.0;
            // m grad log(2m) = m'(c) grad c
            for &ci in c {
                d = d.max(dm_dc(ci, cfg.c_max)?);
            }
            d
        }
    };
    Ok(dx * dx / (2.0 * d_max))
}

pub fn simulate_diffusion(cfg: &DiffusionConfig) -> Result<TrajectoryField, SimError> {
    simulate_diffusion_from(cfg, cfg.initial_profile())
}

/// Runs the scheme from an arbitrary initial profile.
pub fn simulate_diffusion_from(cfg: &DiffusionConfig, mut c: Vec<f64>) -> Result<TrajectoryField, SimError> {
    cfg.validate()?;
    if c.len() != cfg.n_x {
        return Err(SimError::Invalid(format!(
            "initial profile has {} values, expected {}",
            c.len(),
            cfg.n_x
        )));
    }
    let dx = cfg.dx();
    let limit = stability_limit(cfg, &c)?;
    if cfg.dt > limit {
        return Err(SimError::StepTooLarge { dt: cfg.dt, limit });
    }
    let n_steps = cfg.n_steps();
    let snaps = cfg.snapshot_steps();

    let mut tf = TrajectoryField::new(cfg.model.experiment(), cfg.n_x, dx);
    let mut conc = Field::new("1", positions(cfg.n_x, 0.0, dx));
    let mut flux = Field::new("1", positions(cfg.n_x, 0.5 * dx, dx));
    let mut next_snap = 0;
    for step in 0..=n_steps {
        let j = fluxes(cfg.model, &c, dx, cfg.c_max).map_err(|e| match e {
            SimError::OutOfRange { value, lo, hi, .. } => SimError::Unstable {
                what: "concentration",
                value,
                lo,
                hi,
                step,
            },
            other => other,
        })?;
        while next_snap < snaps.len() && snaps[next_snap] == step {
            tf.times.push(step as f64 * cfg.dt);
            conc.push_row(&c);
            flux.push_row(&j);
            next_snap += 1;
        }
        if step == n_steps {
            break;
        }
        let n = c.len();
        let r = cfg.dt / dx;
        for i in 0..n {
            let left = j[(i + n - 1) % n];
            c[i] -= r * (j[i] - left);
        }
    }
    tf.fields.insert("concentration".into(), conc);
    tf.fields.insert("flux".into(), flux);
    tf.set_meta("model", cfg.model);
    tf.set_meta("config", cfg);
    tf.set_meta("scheme", "forward time, conservative central space, periodic");
    tf.set_meta("flux_sign", "j = -grad c (linear), j = -m grad log(2m) (nonlinear), dc/dt = -div j");
    tf.set_meta("face_mobility", "arithmetic mean of neighbouring cells");
    tf.set_meta("stability_limit", limit);
    tf.set_meta("n_steps", n_steps);
    tf.set_meta("snapshot_steps", &snaps);
    Ok(tf)
}

/// Closed-form reference potentials.
pub mod reference {
    use super::*;

    /// Free energy density with unit inverse temperature.
    pub fn free_energy(model: DiffusionModel, c: f64, c_max: f64) -> Result<f64, SimError> {
        Ok(match model {
            DiffusionModel::Linear => c * c.ln() - c,
            DiffusionModel::Nonlinear => {
                let m = invert_m(c, c_max)?;
                let (i0, _) = super::super::bessel::i0_i1(2.0 * (2.0 * m).sqrt());
                c * (2.0 * m).ln() - i0.ln()
            }
        })
    }

    pub fn free_energy_slope(model: DiffusionModel, c: f64, c_max: f64) -> Result<f64, SimError> {
        Ok(match model {
            DiffusionModel::Linear => c.ln(),
            DiffusionModel::Nonlinear => (2.0 * invert_m(c, c_max)?).ln(),
        })
    }

    /// Dissipation potential `j^2 / (2 mobility)`.
    pub fn dissipation(model: DiffusionModel, c: f64, j: f64, c_max: f64) -> Result<f64, SimError> {
        let mob = match model {
            DiffusionModel::Linear => c,
            DiffusionModel::Nonlinear => invert_m(c, c_max)?,
        };
        Ok(j * j / (2.0 * mob))
    }

    /// Auxiliary function `psi / f''`: `j^2 / 2` (linear) or
    /// `j^2 / (2 m'(c))` (nonlinear).
    pub fn psi_hat(model: DiffusionModel, c: f64, j: f64, c_max: f64) -> Result<f64, SimError> {
        Ok(match model {
            DiffusionModel::Linear => 0.5 * j * j,
            DiffusionModel::Nonlinear => j * j / (2.0 * dm_dc(c, c_max)?),
        })
    }
}
