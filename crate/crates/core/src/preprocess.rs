//! Training sets: sample packing with neighbour values, selection that is
//! uniform in the value of a key quantity, seeded train/test splits and the
//! normalization statistics of the potentials.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::potentials::{
    characteristic_scales, max_min, Experiment, Normalization, PotentialError, PotentialPair, ScaleInputs,
};
use crate::residuals::{SampleTable, DIFFUSION_PDE, PHASE_BC, PHASE_PDE, VISCO_BC, VISCO_PDE};
use crate::simulate::phase::{simulate_phase_observed, PhaseConfig};
use crate::simulate::{SimError, TrajectoryField};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("no samples selected for {0}")]
    Empty(&'static str),
    #[error("trajectory is for {found:?}, expected {expected:?}")]
    WrongExperiment { expected: Experiment, found: Experiment },
    #[error("train fraction {0} outside (0, 1)")]
    Fraction(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("dataset file {path}: {msg}")]
    File { path: String, msg: String },
}

/// How phase-transformation samples are drawn from the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Uniform in boundary strain (boundary samples) and node velocity
    /// (bulk samples) over every time step.
    PhaseSpace,
    /// Every state of a coarse time grid.
    UniformTime,
}

impl std::str::FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phase-space" => Ok(Sampling::PhaseSpace),
            "uniform-time" => Ok(Sampling::UniformTime),
            other => Err(format!("unknown sampling '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    /// Samples drawn per set before the split (phase experiment).
    #[serde(default = "default_target")]
    pub target: usize,
    /// Growth factor of the selection grid when deduplication leaves fewer
    /// than `target` samples.
    #[serde(default = "default_growth")]
    pub grid_growth: f64,
    /// Coarse time grid of uniform-time sampling, in simulation steps.
    #[serde(default = "default_coarse")]
    pub coarse_stride: usize,
    /// Random subset size applied to each bulk split after splitting.
    #[serde(default)]
    pub max_pde_samples: Option<usize>,
}

fn default_fraction() -> f64 {
    0.8
}
fn default_sampling() -> Sampling {
    Sampling::PhaseSpace
}
fn default_target() -> usize {
    4170
}
fn default_growth() -> f64 {
    1.25
}
fn default_coarse() -> usize {
    3000
}

impl PreprocessConfig {
    pub fn new(seed: u64) -> Self {
        PreprocessConfig {
            seed,
            train_fraction: default_fraction(),
            sampling: default_sampling(),
            target: default_target(),
            grid_growth: default_growth(),
            coarse_stride: default_coarse(),
            max_pde_samples: None,
        }
    }
}

/// Nearest-value selection on a uniform grid of `m` nodes spanning
/// `[lo, hi]`, fed one value at a time so that the values never need to be
/// held in memory. Per grid cell it keeps the smallest and largest value;
/// ties go to the lower index.
#[derive(Debug, Clone)]
pub struct GridSelector {
    lo: f64,
    h: f64,
    m: usize,
    cell_min: Vec<(f64, u64)>,
    cell_max: Vec<(f64, u64)>,
}

impl GridSelector {
    pub fn new(lo: f64, hi: f64, m: usize) -> Self {
        assert!(m >= 2 && hi > lo, "grid needs two nodes and a positive span");
        GridSelector {
            lo,
            h: (hi - lo) / (m - 1) as f64,
            m,
            cell_min: vec![(f64::INFINITY, u64::MAX); m],
            cell_max: vec![(f64::NEG_INFINITY, u64::MAX); m],
        }
    }

    pub fn nodes(&self) -> usize {
        self.m
    }

    #[inline]
    fn node(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.h
    }

    /// Cell `k` holds values in `[node(k), node(k + 1))`.
    #[inline]
    fn cell(&self, v: f64) -> usize {
        let mut k = (((v - self.lo) / self.h).floor().max(0.0) as usize).min(self.m - 1);
        while k + 1 < self.m && v >= self.node(k + 1) {
            k += 1;
        }
        while k > 0 && v < self.node(k) {
            k -= 1;
        }
        k
    }

    #[inline]
    pub fn offer(&mut self, v: f64, index: u64) {
        let k = self.cell(v);
        let lo = &mut self.cell_min[k];
        if v < lo.0 || (v == lo.0 && index < lo.1) {
            *lo = (v, index);
        }
        let hi = &mut self.cell_max[k];
        if v > hi.0 || (v == hi.0 && index < hi.1) {
            *hi = (v, index);
        }
    }

    /// Index nearest to each node, in node order, first occurrences only.
    pub fn finish(&self) -> Vec<u64> {
        let m = self.m;
        // nearest occupied cell at or above / below each node
        let mut above: Vec<Option<(f64, u64)>> = vec![None; m];
        let mut next = None;
        for k in (0..m).rev() {
            if self.cell_min[k].1 != u64::MAX {
                next = Some(self.cell_min[k]);
            }
            above[k] = next;
        }
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut below: Option<(f64, u64)> = None;
        for k in 0..m {
            let x = self.node(k);
            let pick = match (below, above[k]) {
                (Some(b), Some(a)) => {
                    let (db, da) = (x - b.0, a.0 - x);
                    if db < da || (db == da && b.1 < a.1) {
                        b
                    } else {
                        a
                    }
                }
                (Some(b), None) => b,
                (None, Some(a)) => a,
                (None, None) => unreachable!("selector received no values"),
            };
            if seen.insert(pick.1) {
                out.push(pick.1);
            }
            if self.cell_max[k].1 != u64::MAX {
                below = Some(self.cell_max[k]);
            }
        }
        out
    }
}

/// Indices of the values nearest to `target_count` uniformly spaced nodes
/// between the smallest and largest value, deduplicated (first occurrence
/// kept). All-equal input yields the single index 0.
pub fn uniform_phase_space_select(values: &[f64], target_count: usize) -> Vec<usize> {
    assert!(!values.is_empty() && target_count >= 2, "need values and at least two nodes");
    let (lo, hi) = range(values);
    if lo == hi {
        return vec![0];
    }
    let mut sel = GridSelector::new(lo, hi, target_count);
    for (i, &v) in values.iter().enumerate() {
        sel.offer(v, i as u64);
    }
    sel.finish().into_iter().map(|i| i as usize).collect()
}

fn range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// `target` entries of `picked` at evenly spaced ranks.
fn trim(picked: &[u64], target: usize) -> Vec<u64> {
    if picked.len() <= target {
        return picked.to_vec();
    }
    (0..target).map(|k| picked[k * picked.len() / target]).collect()
}

fn grid_sizes(target: usize, growth: f64, count: usize, start: usize) -> Vec<usize> {
    (start..start + count)
        .map(|k| (target as f64 * growth.powi(k as i32)).ceil() as usize)
        .collect()
}

/// Grows the selection grid until deduplication leaves at least `target`
/// indices, then trims to exactly `target`. `feed` must offer the same
/// stream of values to every selector it is given.
fn select_exact(
    target: usize,
    growth: f64,
    lo: f64,
    hi: f64,
    mut feed: impl FnMut(&mut [GridSelector]) -> Result<(), PreprocessError>,
) -> Result<(Vec<u64>, usize), PreprocessError> {
    const PER_PASS: usize = 3;
    const ROUNDS: usize = 8;
    let mut best: Vec<u64> = Vec::new();
    let mut best_m = 0;
    for round in 0..ROUNDS {
        let mut sels: Vec<GridSelector> = grid_sizes(target, growth, PER_PASS, round * PER_PASS)
            .into_iter()
            .map(|m| GridSelector::new(lo, hi, m))
            .collect();
        feed(&mut sels)?;
        for s in &sels {
            let picked = s.finish();
            if picked.len() >= target {
                return Ok((trim(&picked, target), s.nodes()));
            }
            if picked.len() > best.len() {
                best = picked;
                best_m = s.nodes();
            }
        }
    }
    log::warn!("only {} distinct samples available for {} requested", best.len(), target);
    Ok((best, best_m))
}

/// Fraction of values falling in each tenth of `[lo, hi]`.
pub fn decile_counts(values: &[f64], lo: f64, hi: f64) -> [usize; 10] {
    let mut out = [0usize; 10];
    for &v in values {
        let k = (((v - lo) / (hi - lo)) * 10.0).floor();
        out[(k.max(0.0) as usize).min(9)] += 1;
    }
    out
}

/// Seeded shuffle of `0..n`, the first `round(fraction n)` going to train.
/// Both halves are returned sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), PreprocessError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PreprocessError::Fraction(fraction));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * n as f64).round() as usize;
    let mut train = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn cap(t: SampleTable, max: Option<usize>, seed: u64) -> SampleTable {
    match max {
        Some(m) if t.len() > m => {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut keep = idx[..m].to_vec();
            keep.sort_unstable();
            t.select(&keep)
        }
        _ => t,
    }
}

/// Normalization statistics and characteristic scales, computed on the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub f_norm: Vec<Normalization>,
    pub psi_state_norm: Vec<Normalization>,
    pub psi_rate_norm: Vec<Normalization>,
    pub f_scale: f64,
    pub psi_scale: f64,
}

/// Packed, split samples of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub experiment: Experiment,
    pub dx: f64,
    pub length: f64,
    /// Mass density entering the momentum residual (viscoelastic only).
    pub density: f64,
    pub seed: u64,
    pub sampling: Sampling,
    pub pde_train: SampleTable,
    pub pde_test: SampleTable,
    pub bc_train: Option<SampleTable>,
    pub bc_test: Option<SampleTable>,
    pub stats: DatasetStats,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

fn col(t: &SampleTable, name: &str) -> Vec<f64> {
    t.column(name).expect("column present in packed table")
}

fn pooled(name: &str, parts: &[Vec<f64>]) -> Result<Normalization, PotentialError> {
    let all: Vec<f64> = parts.concat();
    Normalization::fit(name, &all)
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl Dataset {
    fn compute_stats(&mut self) -> Result<(), PreprocessError> {
        let p = &self.pde_train;
        let stats = match self.experiment {
            Experiment::Phase => {
                let bc = self.bc_train.as_ref().ok_or(PreprocessError::Empty("boundary"))?;
                let (bs, bt) = (col(bc, "strain"), col(bc, "traction"));
                let v = col(p, "velocity");
                let f_norm = pooled("strain", &[col(p, "strain"), col(p, "strain_next"), bs.clone()])?;
                let scales = characteristic_scales(&ScaleInputs::Phase {
                    traction_std: std_dev(&bt),
                    bc_strain_std: std_dev(&bs),
                    velocity_std: std_dev(&v),
                    length: self.length,
                })?;
                DatasetStats {
                    f_norm: vec![f_norm],
                    psi_state_norm: vec![],
                    psi_rate_norm: vec![Normalization::fit("velocity", &v)?],
                    f_scale: scales.0,
                    psi_scale: scales.1,
                }
            }
            Experiment::Visco => {
                let bc = self.bc_train.as_ref().ok_or(PreprocessError::Empty("boundary"))?;
                let e = pooled("strain", &[col(p, "strain"), col(p, "strain_next"), col(bc, "strain")])?;
                let ev = pooled(
                    "viscous_strain",
                    &[col(p, "viscous_strain"), col(p, "viscous_strain_next"), col(bc, "viscous_strain")],
                )?;
                let rate = col(p, "viscous_rate");
                let scales = characteristic_scales(&ScaleInputs::Visco {
                    traction_range: max_min(&col(bc, "traction")),
                    bc_strain_range: max_min(&col(bc, "strain")),
                    viscous_strain_range: max_min(&col(p, "viscous_strain")),
                    viscous_rate_range: max_min(&rate),
                })?;
                DatasetStats {
                    f_norm: vec![e, ev],
                    psi_state_norm: vec![],
                    psi_rate_norm: vec![Normalization::fit("viscous_rate", &rate)?],
                    f_scale: scales.0,
                    psi_scale: scales.1,
                }
            }
            Experiment::DiffusionLinear | Experiment::DiffusionNonlinear => {
                let c = pooled("concentration", &[col(p, "concentration"), col(p, "concentration_next")])?;
                let j = col(p, "flux");
                let max_abs = j.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                let scales = characteristic_scales(&ScaleInputs::Diffusion { max_abs_flux: max_abs })?;
                DatasetStats {
                    f_norm: vec![c],
                    psi_state_norm: vec![c],
                    psi_rate_norm: vec![Normalization::fit("flux", &j)?],
                    f_scale: scales.0,
                    psi_scale: scales.1,
                }
            }
        };
        self.stats = stats;
        Ok(())
    }

    /// Untrained potential pair carrying this dataset's statistics.
    pub fn potential_pair(&self, hidden: &[usize]) -> Result<PotentialPair, PotentialError> {
        PotentialPair::new(
            self.experiment,
            hidden,
            self.stats.f_norm.clone(),
            self.stats.psi_state_norm.clone(),
            self.stats.psi_rate_norm.clone(),
            (self.stats.f_scale, self.stats.psi_scale),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        experiment: Experiment,
        dx: f64,
        length: f64,
        density: f64,
        cfg: &PreprocessConfig,
        pde: SampleTable,
        bc: Option<SampleTable>,
        meta: serde_json::Map<String, serde_json::Value>,
    ) -> Result<Self, PreprocessError> {
        if pde.is_empty() {
            return Err(PreprocessError::Empty("bulk"));
        }
        let (tr, te) = split_indices(pde.len(), cfg.train_fraction, cfg.seed)?;
        let pde_train = cap(pde.select(&tr), cfg.max_pde_samples, cfg.seed ^ 0x5eed);
        let pde_test = cap(pde.select(&te), cfg.max_pde_samples, cfg.seed ^ 0x7e57);
        let (bc_train, bc_test) = match bc {
            Some(b) => {
                if b.is_empty() {
                    return Err(PreprocessError::Empty("boundary"));
                }
                let (tr, te) = split_indices(b.len(), cfg.train_fraction, cfg.seed.wrapping_add(1))?;
                (Some(b.select(&tr)), Some(b.select(&te)))
            }
            None => (None, None),
        };
        let mut ds = Dataset {
            experiment,
            dx,
            length,
            density,
            seed: cfg.seed,
            sampling: cfg.sampling,
            pde_train,
            pde_test,
            bc_train,
            bc_test,
            stats: DatasetStats {
                f_norm: vec![],
                psi_state_norm: vec![],
                psi_rate_norm: vec![],
                f_scale: 1.0,
                psi_scale: 1.0,
            },
            meta,
        };
        ds.compute_stats()?;
        Ok(ds)
    }

    pub fn write(&self, dir: &Path) -> Result<(), PreprocessError> {
        let err = |path: &Path, msg: String| PreprocessError::File {
            path: path.display().to_string(),
            msg,
        };
        fs::create_dir_all(dir).map_err(|e| err(dir, e.to_string()))?;
        let mut tables = vec![("pde_train", &self.pde_train), ("pde_test", &self.pde_test)];
        if let (Some(a), Some(b)) = (&self.bc_train, &self.bc_test) {
            tables.push(("bc_train", a));
            tables.push(("bc_test", b));
        }
        for (name, t) in tables {
            let path = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(|e| err(&path, e.to_string()))?;
            w.write_record(&t.columns).map_err(|e| err(&path, e.to_string()))?;
            for i in 0..t.len() {
                w.write_record(t.row(i).iter().map(|v| v.to_string()))
                    .map_err(|e| err(&path, e.to_string()))?;
            }
            w.flush().map_err(|e| err(&path, e.to_string()))?;
        }
        let head = DatasetHead {
            experiment: self.experiment,
            dx: self.dx,
            length: self.length,
            density: self.density,
            seed: self.seed,
            sampling: self.sampling,
            stats: self.stats.clone(),
            has_bc: self.bc_train.is_some(),
            meta: self.meta.clone(),
        };
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(&head).map_err(|e| err(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| err(&path, e.to_string()))
    }

    pub fn read(dir: &Path) -> Result<Self, PreprocessError> {
        let err = |path: &Path, msg: String| PreprocessError::File {
            path: path.display().to_string(),
            msg,
        };
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| err(&path, e.to_string()))?;
        let head: DatasetHead = serde_json::from_str(&text).map_err(|e| err(&path, e.to_string()))?;
        let load = |name: &str| -> Result<SampleTable, PreprocessError> {
            let path = dir.join(format!("{name}.csv"));
            let mut r = csv::Reader::from_path(&path).map_err(|e| err(&path, e.to_string()))?;
            let cols: Vec<String> = r
                .headers()
                .map_err(|e| err(&path, e.to_string()))?
                .iter()
                .map(str::to_string)
                .collect();
            let mut t = SampleTable {
                columns: cols,
                values: Vec::new(),
            };
            for rec in r.records() {
                let rec = rec.map_err(|e| err(&path, e.to_string()))?;
                for f in rec.iter() {
                    t.values
                        .push(f.parse().map_err(|e: std::num::ParseFloatError| err(&path, e.to_string()))?);
                }
            }
            Ok(t)
        };
        let (bc_train, bc_test) = if head.has_bc {
            (Some(load("bc_train")?), Some(load("bc_test")?))
        } else {
            (None, None)
        };
        Ok(Dataset {
            experiment: head.experiment,
            dx: head.dx,
            length: head.length,
            density: head.density,
            seed: head.seed,
            sampling: head.sampling,
            pde_train: load("pde_train")?,
            pde_test: load("pde_test")?,
            bc_train,
            bc_test,
            stats: head.stats,
            meta: head.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHead {
    experiment: Experiment,
    dx: f64,
    length: f64,
    density: f64,
    seed: u64,
    sampling: Sampling,
    stats: DatasetStats,
    has_bc: bool,
    meta: serde_json::Map<String, serde_json::Value>,
}

fn expect(tf: &TrajectoryField, e: Experiment) -> Result<(), PreprocessError> {
    if tf.experiment != e {
        return Err(PreprocessError::WrongExperiment {
            expected: e,
            found: tf.experiment,
        });
    }
    Ok(())
}

/// Bulk and boundary samples of every recorded state of a phase run.
pub fn pack_phase(tf: &TrajectoryField) -> Result<(SampleTable, SampleTable), PreprocessError> {
    expect(tf, Experiment::Phase)?;
    let s = tf.field("strain")?;
    let v = tf.field("velocity")?;
    let t = tf.field("traction")?;
    let mut pde = SampleTable::new(&PHASE_PDE);
    let mut bc = SampleTable::new(&PHASE_BC);
    for n in 0..tf.n_times() {
        let (sr, vr) = (s.row(n), v.row(n));
        for i in 0..vr.len() {
            pde.push(&[sr[i], sr[i + 1], vr[i]]);
        }
        bc.push(&[sr[sr.len() - 1], t.values[n]]);
    }
    Ok((pde, bc))
}

pub fn pack_visco(tf: &TrajectoryField) -> Result<(SampleTable, SampleTable), PreprocessError> {
    expect(tf, Experiment::Visco)?;
    let s = tf.field("strain")?;
    let ev = tf.field("viscous_strain")?;
    let rate = tf.field("viscous_rate")?;
    let acc = tf.field("acceleration")?;
    let t = tf.field("traction")?;
    let mut pde = SampleTable::new(&VISCO_PDE);
    let mut bc = SampleTable::new(&VISCO_BC);
    for n in 0..tf.n_times() {
        let (sr, er, rr, ar) = (s.row(n), ev.row(n), rate.row(n), acc.row(n));
        for i in 0..ar.len() {
            pde.push(&[sr[i], sr[i + 1], er[i], er[i + 1], rr[i], ar[i]]);
        }
        let last = sr.len() - 1;
        bc.push(&[sr[last], er[last], t.values[n]]);
    }
    Ok((pde, bc))
}

/// Periodic packing: cell `i` with its right neighbour and the flux on the
/// face between them.
pub fn pack_diffusion(tf: &TrajectoryField) -> Result<SampleTable, PreprocessError> {
    if !tf.experiment.is_diffusion() {
        return Err(PreprocessError::WrongExperiment {
            expected: Experiment::DiffusionLinear,
            found: tf.experiment,
        });
    }
    let c = tf.field("concentration")?;
    let j = tf.field("flux")?;
    let mut pde = SampleTable::new(&DIFFUSION_PDE);
    for n in 0..tf.n_times() {
        let (cr, jr) = (c.row(n), j.row(n));
        let m = cr.len();
        for i in 0..m {
            pde.push(&[cr[i], cr[(i + 1) % m], jr[i]]);
        }
    }
    Ok(pde)
}

fn meta_of(tf: &TrajectoryField) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("source".into(), serde_json::Value::Object(tf.meta.clone()));
    m
}

/// Dataset from a recorded trajectory with plain random splitting. For the
/// phase experiment this is the uniform-time variant: every recorded state
/// is used for the boundary set and `target` random bulk samples are drawn.
pub fn build_dataset(tf: &TrajectoryField, cfg: &PreprocessConfig) -> Result<Dataset, PreprocessError> {
    let length = tf.dx * tf.n_x as f64;
    match tf.experiment {
        Experiment::Phase => {
            let (pde, bc) = pack_phase(tf)?;
            let pde = cap(pde, Some(cfg.target), cfg.seed ^ 0xc0a5);
            let mut meta = meta_of(tf);
            meta.insert("sampling".into(), "uniform-time".into());
            let cfg = PreprocessConfig {
                sampling: Sampling::UniformTime,
                ..cfg.clone()
            };
            Dataset::assemble(tf.experiment, tf.dx, length, 0.0, &cfg, pde, Some(bc), meta)
        }
        Experiment::Visco => {
            let (pde, bc) = pack_visco(tf)?;
            let density = tf
                .meta
                .get("constants")
                .and_then(|c| c.get("density"))
                .and_then(|d| d.as_f64())
                .ok_or_else(|| SimError::Invalid("trajectory lacks the material density".into()))?;
            Dataset::assemble(tf.experiment, tf.dx, length, density, cfg, pde, Some(bc), meta_of(tf))
        }
        _ => {
            let pde = pack_diffusion(tf)?;
            Dataset::assemble(tf.experiment, tf.dx, length, 0.0, cfg, pde, None, meta_of(tf))
        }
    }
}

/// Phase dataset selected uniformly in boundary strain and node velocity
/// over every time step of the run. The run is repeated instead of stored:
/// once for ranges and boundary traces, once per batch of grid sizes and
/// once to extract the chosen bulk samples.
pub fn phase_space_dataset(sim: &PhaseConfig, cfg: &PreprocessConfig) -> Result<Dataset, PreprocessError> {
    let n_x = sim.n_x;
    let per_step = (n_x - 1) as u64;
    let mut bc_strain = Vec::with_capacity(sim.n_steps());
    let mut bc_traction = Vec::with_capacity(sim.n_steps());
    let (mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut tf = simulate_phase_observed(sim, |s| {
        bc_strain.push(s.strain[n_x - 1]);
        bc_traction.push(s.traction);
        for &v in s.velocity {
            vlo = vlo.min(v);
            vhi = vhi.max(v);
        }
    })?;
    tf.fields.clear();

    let (slo, shi) = range(&bc_strain);
    let (bc_pick, bc_grid) = select_exact(cfg.target, cfg.grid_growth, slo, shi, |sels| {
        for (i, &v) in bc_strain.iter().enumerate() {
            for s in sels.iter_mut() {
                s.offer(v, i as u64);
            }
        }
        Ok(())
    })?;
    let mut bc = SampleTable::new(&PHASE_BC);
    for &n in &bc_pick {
        bc.push(&[bc_strain[n as usize], bc_traction[n as usize]]);
    }
    let picked_strain: Vec<f64> = bc_pick.iter().map(|&n| bc_strain[n as usize]).collect();

    let (pde_pick, pde_grid) = select_exact(cfg.target, cfg.grid_growth, vlo, vhi, |sels| {
        simulate_phase_observed(sim, |s| {
            let base = s.step as u64 * per_step;
            for (i, &v) in s.velocity.iter().enumerate() {
                for sel in sels.iter_mut() {
                    sel.offer(v, base + i as u64);
                }
            }
        })?;
        Ok(())
    })?;
    let mut wanted = pde_pick.clone();
    wanted.sort_unstable();
    let mut pde = SampleTable::new(&PHASE_PDE);
    let mut cursor = 0;
    simulate_phase_observed(sim, |s| {
        let base = s.step as u64 * per_step;
        while cursor < wanted.len() && wanted[cursor] < base + per_step {
            let i = (wanted[cursor] - base) as usize;
            pde.push(&[s.strain[i], s.strain[i + 1], s.velocity[i]]);
            cursor += 1;
        }
    })?;

    let mut meta = serde_json::Map::new();
    meta.insert("source".into(), serde_json::Value::Object(tf.meta.clone()));
    meta.insert("sampling".into(), "phase-space".into());
    meta.insert("bc_grid_nodes".into(), bc_grid.into());
    meta.insert("pde_grid_nodes".into(), pde_grid.into());
    meta.insert("bc_strain_range".into(), serde_json::json!([slo, shi]));
    meta.insert(
        "bc_strain_deciles".into(),
        serde_json::json!(decile_counts(&picked_strain, slo, shi)),
    );
    let cfg = PreprocessConfig {
        sampling: Sampling::PhaseSpace,
        ..cfg.clone()
    };
    Dataset::assemble(Experiment::Phase, sim.dx(), sim.length, 0.0, &cfg, pde, Some(bc), meta)
}

/// Phase dataset from every `coarse_stride`-th step of the run.
pub fn uniform_time_dataset(sim: &PhaseConfig, cfg: &PreprocessConfig) -> Result<Dataset, PreprocessError> {
    let coarse = PhaseConfig {
        output_stride: cfg.coarse_stride,
        ..sim.clone()
    };
    let tf = crate::simulate::phase::simulate_phase(&coarse)?;
    let mut ds = build_dataset(&tf, cfg)?;
    let bc = tf.field("strain")?;
    let strain: Vec<f64> = (0..tf.n_times()).map(|n| bc.row(n)[sim.n_x - 1]).collect();
    let (lo, hi) = range(&strain);
    ds.meta.insert("coarse_stride".into(), cfg.coarse_stride.into());
    ds.meta.insert("bc_strain_deciles".into(), serde_json::json!(decile_counts(&strain, lo, hi)));
    Ok(ds)
}

pub fn phase_dataset(sim: &PhaseConfig, cfg: &PreprocessConfig) -> Result<Dataset, PreprocessError> {
    match cfg.sampling {
        Sampling::PhaseSpace => phase_space_dataset(sim, cfg),
        Sampling::UniformTime => uniform_time_dataset(sim, cfg),
    }
}
