//! Error tables and plot-ready grids comparing a trained pair with the
//! closed-form potentials the data were generated from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::potentials::{PotentialError, PotentialPair, Probe};
use crate::preprocess::Dataset;
use crate::simulate::diffusion::{reference as diffusion_reference, DiffusionModel};
use crate::simulate::phase::PhaseFreeEnergy;
use crate::simulate::visco::ViscoConstants;
use crate::simulate::SimError;
use crate::train::{relative_l2_error, relative_l2_error_2d, ZeroReference};

/// Default quadrature points per direction.
pub const QUADRATURE: usize = 201;
/// Concentration bins of the data-covered region.
pub const COVER_BINS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("error of {0} is undefined: {1}")]
    Undefined(String, String),
    #[error("reference of kind {reference} cannot be compared with a {experiment} pair")]
    Mismatch { reference: &'static str, experiment: &'static str },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

/// Closed-form potentials behind a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reference {
    Phase {
        free_energy: PhaseFreeEnergy,
        viscosity: f64,
    },
    Visco {
        constants: ViscoConstants,
    },
    Diffusion {
        model: DiffusionModel,
        c_max: f64,
    },
}

impl Reference {
    fn kind(&self) -> &'static str {
        match self {
            Reference::Phase { .. } => "phase",
            Reference::Visco { .. } => "visco",
            Reference::Diffusion { .. } => "diffusion",
        }
    }
}

/// Relative errors in percent, one value per quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub experiment: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ErrorTable {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.values[k])
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let err = |e: csv::Error| EvalError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut head = vec!["experiment".to_string()];
        head.extend(self.names.iter().cloned());
        w.write_record(&head).map_err(err)?;
        let mut row = vec![self.experiment.clone()];
        row.extend(self.values.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
        w.flush().map_err(|e| EvalError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn span(parts: &[Vec<f64>]) -> (f64, f64) {
    parts
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

fn column(ds: &Dataset, bc: bool, name: &str) -> Vec<f64> {
    let t = if bc { ds.bc_train.as_ref() } else { Some(&ds.pde_train) };
    t.and_then(|t| t.column(name)).unwrap_or_default()
}

/// Integration domains read off the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domains {
    /// State ranges of the free energy inputs.
    pub state: Vec<(f64, f64)>,
    /// Range of the dissipation rate input.
    pub rate: (f64, f64),
    /// Per concentration bin `(c_lo, c_hi, j_lo, j_hi)` (diffusion only).
    pub covered: Vec<(f64, f64, f64, f64)>,
}

pub fn domains(ds: &Dataset) -> Domains {
    use crate::potentials::Experiment::*;
    match ds.experiment {
        Phase => Domains {
            state: vec![span(&[
                column(ds, false, "strain"),
                column(ds, false, "strain_next"),
                column(ds, true, "strain"),
            ])],
            rate: span(&[column(ds, false, "velocity")]),
            covered: vec![],
        },
        Visco => Domains {
            state: vec![
                span(&[
                    column(ds, false, "strain"),
                    column(ds, false, "strain_next"),
                    column(ds, true, "strain"),
                ]),
                span(&[
                    column(ds, false, "viscous_strain"),
                    column(ds, false, "viscous_strain_next"),
                    column(ds, true, "viscous_strain"),
                ]),
            ],
            rate: span(&[column(ds, false, "viscous_rate")]),
            covered: vec![],
        },
        DiffusionLinear | DiffusionNonlinear => {
            let c = column(ds, false, "concentration");
            let j = column(ds, false, "flux");
            let (lo, hi) = span(&[c.clone()]);
            let jmax = j.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            let w = (hi - lo) / COVER_BINS as f64;
            let mut env = vec![(f64::INFINITY, f64::NEG_INFINITY); COVER_BINS];
            for (&ci, &ji) in c.iter().zip(&j) {
                let b = (((ci - lo) / w) as usize).min(COVER_BINS - 1);
                env[b] = (env[b].0.min(ji), env[b].1.max(ji));
            }
            let covered = env
                .iter()
                .enumerate()
                .filter(|(_, e)| e.1 > e.0)
                .map(|(b, e)| (lo + b as f64 * w, lo + (b + 1) as f64 * w, e.0, e.1))
                .collect();
            Domains {
                state: vec![(lo, hi)],
                rate: (-jmax, jmax),
                covered,
            }
        }
    }
}

fn finite_or(name: &str, v: Result<f64, ZeroReference>) -> Result<f64, EvalError> {
    match v {
        Ok(x) if x.is_finite() => Ok(x),
        Ok(x) => Err(EvalError::Undefined(name.into(), format!("value {x}"))),
        Err(e) => Err(EvalError::Undefined(name.into(), e.to_string())),
    }
}

/// `100 * int |A - B|^2 / int |A|^2` over the data-covered region.
fn covered_error(
    cells: &[(f64, f64, f64, f64)],
    n: usize,
    mut reference: impl FnMut(f64, f64) -> f64,
    mut predicted: impl FnMut(f64, f64) -> f64,
) -> Result<f64, ZeroReference> {
    let (mut num, mut den) = (0.0, 0.0);
    for &(c0, c1, j0, j1) in cells {
        let c = 0.5 * (c0 + c1);
        let h = (j1 - j0) / (n - 1) as f64;
        for k in 0..n {
            let j = j0 + k as f64 * h;
            let w = (c1 - c0) * if k == 0 || k == n - 1 { 0.5 * h } else { h };
            let r = reference(c, j);
            let d = r - predicted(c, j);
            num += w * d * d;
            den += w * r * r;
        }
    }
    if den == 0.0 {
        return Err(ZeroReference);
    }
    Ok(100.0 * num / den)
}

fn mismatch(r: &Reference, pp: &PotentialPair) -> EvalError {
    EvalError::Mismatch {
        reference: r.kind(),
        experiment: pp.experiment.name(),
    }
}

/// Relative errors of the trained pair against the reference over the
/// data ranges of `ds`.
pub fn error_table(
    pp: &PotentialPair,
    params: &[f64],
    ds: &Dataset,
    reference: &Reference,
    n: usize,
) -> Result<ErrorTable, EvalError> {
    let mut probe = Probe::new(pp, params)?;
    let d = domains(ds);
    let nan = f64::NAN;
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut push = |name: &str, v: Result<f64, ZeroReference>| -> Result<(), EvalError> {
        values.push(finite_or(name, v)?);
        names.push(name.to_string());
        Ok(())
    };
    match (*reference, pp.experiment.is_diffusion()) {
        (Reference::Phase { free_energy: fe, viscosity: eta }, false) if d.state.len() == 1 => {
            let (a, b) = d.state[0];
            let (va, vb) = d.rate;
            let f = relative_l2_error(|e| fe.value(e), |e| probe.free_energy(&[e]).map_or(nan, |r| r.0), a, b, n);
            push("f", f)?;
            let df = relative_l2_error(|e| fe.slope(e), |e| probe.free_energy(&[e]).map_or(nan, |r| r.1[0]), a, b, n);
            push("f_prime", df)?;
            let psi = relative_l2_error(
                |v| 0.5 * eta * v * v,
                |v| probe.dissipation(&[], &[v]).map_or(nan, |r| r.0),
                va,
                vb,
                n,
            );
            push("psi", psi)?;
            let dpsi = relative_l2_error(
                |v| eta * v,
                |v| probe.dissipation(&[], &[v]).map_or(nan, |r| r.1[0]),
                va,
                vb,
                n,
            );
            push("psi_prime", dpsi)?;
        }
        (Reference::Visco { constants: c }, false) if d.state.len() == 2 => {
            let (ex, evx) = (d.state[0], d.state[1]);
            let f = relative_l2_error_2d(
                |e, v| c.free_energy(e, v),
                |e, v| probe.free_energy(&[e, v]).map_or(nan, |r| r.0),
                ex,
                evx,
                n,
            );
            push("f", f)?;
            let s = relative_l2_error_2d(
                |e, v| c.stress(e, v),
                |e, v| probe.free_energy(&[e, v]).map_or(nan, |r| r.1[0]),
                ex,
                evx,
                n,
            );
            push("sigma", s)?;
            let sv = relative_l2_error_2d(
                |e, v| c.configurational_stress(e, v),
                |e, v| probe.free_energy(&[e, v]).map_or(nan, |r| r.1[1]),
                ex,
                evx,
                n,
            );
            push("sigma_v", sv)?;
            let (ra, rb) = d.rate;
            let psi = relative_l2_error(
                |r| c.dissipation(r),
                |r| probe.dissipation(&[], &[r]).map_or(nan, |x| x.0),
                ra,
                rb,
                n,
            );
            push("psi", psi)?;
            let dpsi = relative_l2_error(
                |r| c.dissipative_force(r),
                |r| probe.dissipation(&[], &[r]).map_or(nan, |x| x.1[0]),
                ra,
                rb,
                n,
            );
            push("psi_prime", dpsi)?;
        }
        (Reference::Diffusion { model, c_max }, true) => {
            let reference_hat = |c: f64, j: f64| diffusion_reference::psi_hat(model, c, j, c_max).unwrap_or(nan);
            let mut predicted_hat = |c: f64, j: f64| -> f64 {
                let curv = probe.free_energy_curvature(c).unwrap_or(nan);
                let psi = probe.dissipation(&[c], &[j]).map_or(nan, |r| r.0);
                psi / curv
            };
            let cov = covered_error(&d.covered, 101, reference_hat, &mut predicted_hat);
            push("psi_hat_covered", cov)?;
            let ext = relative_l2_error_2d(reference_hat, &mut predicted_hat, d.state[0], d.rate, n);
            push("psi_hat_extrapolated", ext)?;
        }
        (r, _) => return Err(mismatch(&r, pp)),
    }
    Ok(ErrorTable {
        experiment: pp.experiment.name().to_string(),
        names,
        values,
    })
}

/// Writes grids of the learned and reference potentials and their
/// derivatives over the evaluation domains into `dir`.
pub fn write_surfaces(
    pp: &PotentialPair,
    params: &[f64],
    ds: &Dataset,
    reference: &Reference,
    dir: &Path,
    n: usize,
) -> Result<(), EvalError> {
    let mut probe = Probe::new(pp, params)?;
    let d = domains(ds);
    let grid = |(a, b): (f64, f64)| -> Vec<f64> { (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect() };
    let file_err = |path: &Path, e: String| EvalError::File {
        path: path.display().to_string(),
        msg: e,
    };
    let write = |name: &str, head: &[&str], rows: Vec<Vec<f64>>| -> Result<(), EvalError> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| file_err(&path, e.to_string()))?;
        w.write_record(head).map_err(|e| file_err(&path, e.to_string()))?;
        for r in rows {
            w.write_record(r.iter().map(|v| v.to_string()))
                .map_err(|e| file_err(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| file_err(&path, e.to_string()))
    };
    match *reference {
        Reference::Phase { free_energy: fe, viscosity: eta } => {
            let mut rows = Vec::new();
            for e in grid(d.state[0]) {
                let (f, g) = probe.free_energy(&[e])?;
                rows.push(vec![e, f, fe.value(e), g[0], fe.slope(e)]);
            }
            write("free_energy.csv", &["strain", "f", "f_ref", "f_prime", "f_prime_ref"], rows)?;
            let mut rows = Vec::new();
            for v in grid(d.rate) {
                let (p, g) = probe.dissipation(&[], &[v])?;
                rows.push(vec![v, p, 0.5 * eta * v * v, g[0], eta * v]);
            }
            write("dissipation.csv", &["velocity", "psi", "psi_ref", "psi_prime", "psi_prime_ref"], rows)?;
        }
        Reference::Visco { constants: c } => {
            let mut rows = Vec::new();
            for e in grid(d.state[0]) {
                for v in grid(d.state[1]) {
                    let (f, g) = probe.free_energy(&[e, v])?;
                    rows.push(vec![
                        e,
                        v,
                        f,
                        c.free_energy(e, v),
                        g[0],
                        c.stress(e, v),
                        g[1],
                        c.configurational_stress(e, v),
                    ]);
                }
            }
            write(
                "free_energy.csv",
                &["strain", "viscous_strain", "f", "f_ref", "sigma", "sigma_ref", "sigma_v", "sigma_v_ref"],
                rows,
            )?;
            let mut rows = Vec::new();
            for r in grid(d.rate) {
                let (p, g) = probe.dissipation(&[], &[r])?;
                rows.push(vec![r, p, c.dissipation(r), g[0], c.dissipative_force(r)]);
            }
            write(
                "dissipation.csv",
                &["viscous_rate", "psi", "psi_ref", "psi_prime", "psi_prime_ref"],
                rows,
            )?;
        }
        Reference::Diffusion { model, c_max } => {
            let mut rows = Vec::new();
            for c in grid(d.state[0]) {
                let curv = probe.free_energy_curvature(c)?;
                let (f, g) = probe.free_energy(&[c])?;
                let f_ref = diffusion_reference::free_energy(model, c, c_max)?;
                let df_ref = diffusion_reference::free_energy_slope(model, c, c_max)?;
                for j in grid(d.rate) {
                    let (p, pg) = probe.dissipation(&[c], &[j])?;
                    let covered = d
                        .covered
                        .iter()
                        .any(|&(c0, c1, j0, j1)| c >= c0 && c <= c1 && j >= j0 && j <= j1);
                    rows.push(vec![
                        c,
                        j,
                        f,
                        f_ref,
                        g[0],
                        df_ref,
                        p,
                        diffusion_reference::dissipation(model, c, j, c_max)?,
                        pg[0],
                        p / curv,
                        diffusion_reference::psi_hat(model, c, j, c_max)?,
                        if covered { 1.0 } else { 0.0 },
                    ]);
                }
            }
            write(
                "psi_hat.csv",
                &[
                    "concentration",
                    "flux",
                    "f",
                    "f_ref",
                    "f_prime",
                    "f_prime_ref",
                    "psi",
                    "psi_ref",
                    "psi_prime",
                    "psi_hat",
                    "psi_hat_ref",
                    "covered",
                ],
                rows,
            )?;
        }
    }
    Ok(())
}
