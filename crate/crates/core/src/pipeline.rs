//! Experiment configuration and the simulate, preprocess, train, evaluate
//! and ablate stages, each reading and writing a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluate::{error_table, write_surfaces, ErrorTable, EvalError, Reference, QUADRATURE};
use crate::potentials::{Experiment, PotentialError, PotentialPair, Probe};
use crate::preprocess::{build_dataset, phase_dataset, Dataset, PreprocessConfig, PreprocessError, Sampling};
use crate::residuals::{weights_from_traces, LossAssembly, ResidualError, SampleTable};
use crate::simulate::diffusion::{simulate_diffusion, DiffusionConfig};
use crate::simulate::phase::{simulate_phase, PhaseConfig};
use crate::simulate::visco::{simulate_visco, ViscoConfig};
use crate::simulate::{read_trajectory, write_trajectory, SimError, TrajectoryField};
use crate::train::{gradient_check, train, Checkpoint, TrainConfig, TrainError, TrainOutcome, WeightMode};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numeric(_) => 3,
            PipelineError::Io(_) => 1,
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invalid(_) | SimError::StepTooLarge { .. } => PipelineError::Config(e.to_string()),
            SimError::Unstable { .. } | SimError::OutOfRange { .. } => PipelineError::Numeric(e.to_string()),
            SimError::Io { .. } | SimError::Format { .. } | SimError::MissingField(_) => PipelineError::Io(e.to_string()),
        }
    }
}

impl From<PotentialError> for PipelineError {
    fn from(e: PotentialError) -> Self {
        PipelineError::Numeric(e.to_string())
    }
}

impl From<ResidualError> for PipelineError {
    fn from(e: ResidualError) -> Self {
        match e {
            ResidualError::Columns { .. } | ResidualError::WeightCount { .. } => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<PreprocessError> for PipelineError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::Sim(s) => s.into(),
            PreprocessError::Fraction(_) | PreprocessError::WrongExperiment { .. } => {
                PipelineError::Config(e.to_string())
            }
            PreprocessError::File { .. } => PipelineError::Io(e.to_string()),
            PreprocessError::Empty(_) | PreprocessError::Potential(_) => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => PipelineError::Config(format!("train: {m}")),
            TrainError::File { .. } => PipelineError::Io(e.to_string()),
            TrainError::Residual(r) => r.into(),
            TrainError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Sim(s) => s.into(),
            EvalError::Mismatch { .. } => PipelineError::Config(e.to_string()),
            EvalError::File { .. } => PipelineError::Io(e.to_string()),
            EvalError::Potential(_) | EvalError::Undefined(..) => PipelineError::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Quadrature points per direction of the error integrals.
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
    /// Grid points per direction of the surface tables.
    #[serde(default = "default_surface")]
    pub surface_points: usize,
}

fn default_quadrature() -> usize {
    QUADRATURE
}
fn default_surface() -> usize {
    101
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            quadrature: default_quadrature(),
            surface_points: default_surface(),
        }
    }
}

/// Everything that determines one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhaseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visco: Option<ViscoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionConfig>,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    /// Fixed loss weights used with the constant weight mode; defaults to
    /// weights that make every term dimensionless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub weight_mode: Option<WeightMode>,
    pub sampling: Option<Sampling>,
    pub max_ntk_samples: Option<usize>,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Defaults of each experiment; the shipped config files match these.
    pub fn default_for(experiment: Experiment) -> Self {
        let (epochs, lr) = if experiment.is_diffusion() { (12_000, 8e-4) } else { (30_000, 1e-4) };
        let mut cfg = ExperimentConfig {
            experiment,
            output_dir: PathBuf::from("runs").join(experiment.name()),
            phase: None,
            visco: None,
            diffusion: None,
            preprocess: PreprocessConfig::new(1),
            train: TrainConfig::new(epochs, lr, 2),
            constant_weights: None,
            evaluate: EvaluateConfig::default(),
        };
        match experiment {
            Experiment::Phase => cfg.phase = Some(PhaseConfig::default()),
            Experiment::Visco => {
                cfg.visco = Some(ViscoConfig::default());
                cfg.preprocess.max_pde_samples = Some(5000);
            }
            Experiment::DiffusionLinear => cfg.diffusion = Some(DiffusionConfig::linear()),
            Experiment::DiffusionNonlinear => cfg.diffusion = Some(DiffusionConfig::nonlinear()),
        }
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), PipelineError> {
        if let Some(s) = o.seed {
            self.preprocess.seed = s;
            self.train.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(m) = o.weight_mode {
            self.train.weight_mode = m;
            if m == WeightMode::Periodic && self.train.weight_period.is_none() {
                self.train.weight_period = Some(1000);
            }
        }
        if let Some(s) = o.sampling {
            self.preprocess.sampling = s;
        }
        if let Some(n) = o.max_ntk_samples {
            self.train.max_ntk_samples = Some(n);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let sections = [
            ("phase", self.phase.is_some()),
            ("visco", self.visco.is_some()),
            ("diffusion", self.diffusion.is_some()),
        ];
        let want = if self.experiment.is_diffusion() { "diffusion" } else { self.experiment.name() };
        for (name, present) in sections {
            if name == want && !present {
                return Err(config_err(name, "section required for this experiment"));
            }
            if name != want && present {
                return Err(config_err(name, format!("section not used by experiment {}", self.experiment.name())));
            }
        }
        if let Some(d) = &self.diffusion {
            if d.model.experiment() != self.experiment {
                return Err(config_err("diffusion.model", "does not match the experiment"));
            }
        }
        if let Some(p) = &self.phase {
            if !(p.dt > 0.0) {
                return Err(config_err("phase.dt", "must be positive"));
            }
            if p.n_x < 2 {
                return Err(config_err("phase.n_x", "must be at least 2"));
            }
        }
        if let Some(v) = &self.visco {
            if v.n_x < 2 {
                return Err(config_err("visco.n_x", "must be at least 2"));
            }
        }
        let p = &self.preprocess;
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return Err(config_err("preprocess.train_fraction", "must lie in (0, 1)"));
        }
        if p.target < 2 {
            return Err(config_err("preprocess.target", "must be at least 2"));
        }
        if !(p.grid_growth > 1.0) {
            return Err(config_err("preprocess.grid_growth", "must exceed 1"));
        }
        if p.coarse_stride == 0 {
            return Err(config_err("preprocess.coarse_stride", "must be at least 1"));
        }
        if p.max_pde_samples == Some(0) {
            return Err(config_err("preprocess.max_pde_samples", "must be at least 1"));
        }
        self.train.validate().map_err(PipelineError::from)?;
        if let Some(h) = &self.train.hidden {
            if h.is_empty() || h.contains(&0) {
                return Err(config_err("train.hidden", "needs at least one non-empty layer"));
            }
        }
        if let Some(w) = &self.constant_weights {
            if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(config_err("constant_weights", "must be positive and finite"));
            }
        }
        if self.evaluate.quadrature < 2 {
            return Err(config_err("evaluate.quadrature", "must be at least 2"));
        }
        if self.evaluate.surface_points < 2 {
            return Err(config_err("evaluate.surface_points", "must be at least 2"));
        }
        Ok(())
    }

    /// Closed-form potentials the simulated data follow.
    pub fn reference(&self) -> Reference {
        match self.experiment {
            Experiment::Phase => {
                let p = self.phase.as_ref().expect("validated");
                Reference::Phase {
                    free_energy: p.free_energy,
                    viscosity: p.viscosity,
                }
            }
            Experiment::Visco => Reference::Visco {
                constants: self.visco.as_ref().expect("validated").constants(),
            },
            _ => {
                let d = self.diffusion.as_ref().expect("validated");
                Reference::Diffusion {
                    model: d.model,
                    c_max: d.c_max,
                }
            }
        }
    }
}

fn sha256_of(v: &impl Serialize) -> String {
    let text = serde_json::to_string(v).expect("serializable");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Hashes of the parts of a config that each stage depends on. The output
/// directory does not enter any of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigHashes {
    pub simulation: String,
    pub data: String,
    pub config: String,
}

impl ConfigHashes {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        let sim = (cfg.experiment, &cfg.phase, &cfg.visco, &cfg.diffusion);
        let data = (&sim, &cfg.preprocess);
        let all = (&data, &cfg.train, &cfg.constant_weights, &cfg.evaluate);
        ConfigHashes {
            simulation: sha256_of(&sim),
            data: sha256_of(&data),
            config: sha256_of(&all),
        }
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    ConfigHashes::of(cfg).config
}

/// Recorded run of the configured simulator.
pub fn simulate(cfg: &ExperimentConfig) -> Result<TrajectoryField, PipelineError> {
    let tf = match cfg.experiment {
        Experiment::Phase => simulate_phase(cfg.phase.as_ref().expect("validated"))?,
        Experiment::Visco => simulate_visco(cfg.visco.as_ref().expect("validated"))?,
        _ => simulate_diffusion(cfg.diffusion.as_ref().expect("validated"))?,
    };
    Ok(tf)
}

/// Dataset of the configured experiment. The phase experiment selects its
/// samples from every time step and so reruns the simulator; the other
/// experiments use the recorded trajectory.
pub fn make_dataset(cfg: &ExperimentConfig, tf: Option<&TrajectoryField>) -> Result<Dataset, PipelineError> {
    let ds = match cfg.experiment {
        Experiment::Phase => phase_dataset(cfg.phase.as_ref().expect("validated"), &cfg.preprocess)?,
        _ => {
            let owned;
            let tf = match tf {
                Some(t) => t,
                None => {
                    owned = simulate(cfg)?;
                    &owned
                }
            };
            build_dataset(tf, &cfg.preprocess)?
        }
    };
    Ok(ds)
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Loss weights that make each residual term dimensionless: bulk balance
/// residuals carry traction per length, the others traction.
pub fn dimensional_weights(ds: &Dataset) -> Result<Vec<f64>, PipelineError> {
    let bc_col = |name: &str| -> Result<Vec<f64>, PipelineError> {
        ds.bc_train
            .as_ref()
            .and_then(|t| t.column(name))
            .ok_or_else(|| PipelineError::Numeric(format!("boundary column {name} missing")))
    };
    let positive = |s: f64, what: &str| {
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(PipelineError::Numeric(format!("{what} is zero; dimensional weights undefined")))
        }
    };
    match ds.experiment {
        Experiment::Phase => {
            let s = positive(std_dev(&bc_col("traction")?), "traction spread")?;
            Ok(vec![(ds.length / s).powi(2), 1.0 / (s * s)])
        }
        Experiment::Visco => {
            let t = bc_col("traction")?;
            let hi = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = t.iter().cloned().fold(f64::INFINITY, f64::min);
            let s = positive(hi - lo, "traction range")?;
            Ok(vec![(ds.length / s).powi(2), 1.0 / (s * s), 1.0 / (s * s)])
        }
        _ => {
            let j = ds.pde_train.column("flux").unwrap_or_default();
            let s = positive(j.iter().fold(0.0f64, |a, x| a.max(x.abs())), "flux")?;
            Ok(vec![1.0 / (s * s)])
        }
    }
}

/// Trained pair with its training record.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub pair: PotentialPair,
    pub outcome: TrainOutcome,
}

impl Fitted {
    /// Parameters that are evaluated and checkpointed: those after the last
    /// epoch.
    pub fn params(&self) -> &[f64] {
        &self.outcome.params
    }
}

pub fn assemblies(pp: &PotentialPair, ds: &Dataset) -> Result<(LossAssembly, LossAssembly), PipelineError> {
    let la = LossAssembly::for_experiment(pp, ds.dx, ds.density, ds.pde_train.clone(), ds.bc_train.clone())?;
    let test = LossAssembly::for_experiment(pp, ds.dx, ds.density, ds.pde_test.clone(), ds.bc_test.clone())?;
    Ok((la, test))
}

pub fn fit(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Fitted, PipelineError> {
    if ds.experiment != cfg.experiment {
        return Err(PipelineError::Config(format!(
            "dataset is for {}, config for {}",
            ds.experiment.name(),
            cfg.experiment.name()
        )));
    }
    let hidden = cfg.train.hidden.clone().unwrap_or_else(|| cfg.experiment.default_hidden());
    let pair = ds.potential_pair(&hidden)?;
    let init = pair.init_params(cfg.train.seed);
    let (mut la, mut test) = assemblies(&pair, ds)?;
    if cfg.train.weight_mode == WeightMode::Constant {
        let w = match &cfg.constant_weights {
            Some(w) => w.clone(),
            None => dimensional_weights(ds)?,
        };
        la.set_weights(&w)
            .map_err(|e| config_err("constant_weights", e))?;
    }
    let outcome = train(&mut la, Some(&mut test), &init, &cfg.train)?;
    Ok(Fitted { pair, outcome })
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    pair: &PotentialPair,
    params: &[f64],
    ds: &Dataset,
) -> Result<ErrorTable, PipelineError> {
    Ok(error_table(pair, params, ds, &cfg.reference(), cfg.evaluate.quadrature)?)
}

/// Number of empty deciles in the boundary strain histogram of a phase
/// dataset.
pub fn empty_bc_deciles(ds: &Dataset) -> Option<usize> {
    let d = ds.meta.get("bc_strain_deciles")?.as_array()?;
    Some(d.iter().filter(|v| v.as_u64() == Some(0)).count())
}

/// Run directory layout and the stage drivers behind the command line.
pub struct Run {
    pub config: ExperimentConfig,
    pub hashes: ConfigHashes,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunManifest {
    experiment: Option<Experiment>,
    config_hash: String,
    stages: serde_json::Map<String, serde_json::Value>,
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let hashes = ConfigHashes::of(&config);
        Ok(Run { config, hashes })
    }

    pub fn dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn trajectory_dir(&self) -> PathBuf {
        self.dir().join("trajectory")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dir().join("dataset")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir().join("checkpoint.json")
    }

    fn ensure(&self, p: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(p).map_err(|e| io_err(p, e))
    }

    /// Records the files of a stage together with the config hash.
    fn record(&self, stage: &str, files: &[&str], extra: serde_json::Value) -> Result<(), PipelineError> {
        self.ensure(self.dir())?;
        let path = self.dir().join("manifest.json");
        let mut m: RunManifest = match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t).unwrap_or_default(),
            Err(_) => RunManifest::default(),
        };
        if m.config_hash != self.hashes.config {
            m = RunManifest::default();
        }
        m.experiment = Some(self.config.experiment);
        m.config_hash = self.hashes.config.clone();
        m.stages.insert(
            stage.into(),
            serde_json::json!({
                "files": files,
                "config_hash": self.hashes.config,
                "hashes": self.hashes,
                "info": extra,
            }),
        );
        let text = serde_json::to_string_pretty(&m).expect("serializable");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        let cfg_path = self.dir().join("config.toml");
        fs::write(&cfg_path, self.config.to_toml()).map_err(|e| io_err(&cfg_path, e))
    }

    fn stale(&self, what: &str, expected: &str, found: Option<&str>) -> Result<(), PipelineError> {
        match found {
            Some(h) if h == expected => Ok(()),
            Some(_) => Err(PipelineError::Config(format!(
                "{what} was produced from a different configuration; rerun the earlier stages"
            ))),
            None => Err(PipelineError::Config(format!("{what} carries no config hash"))),
        }
    }

    pub fn simulate(&self) -> Result<TrajectoryField, PipelineError> {
        let mut tf = simulate(&self.config)?;
        tf.set_meta("config_hash", &self.hashes.config);
        tf.set_meta("simulation_hash", &self.hashes.simulation);
        let dir = self.trajectory_dir();
        self.ensure(&dir)?;
        write_trajectory(&tf, &dir)?;
        self.record(
            "simulate",
            &["trajectory/manifest.json"],
            serde_json::json!({ "times": tf.n_times(), "n_x": tf.n_x }),
        )?;
        Ok(tf)
    }

    pub fn preprocess(&self) -> Result<Dataset, PipelineError> {
        let tf = read_trajectory(&self.trajectory_dir())?;
        if tf.experiment != self.config.experiment {
            return Err(PipelineError::Config(format!(
                "trajectory is for {}, config for {}",
                tf.experiment.name(),
                self.config.experiment.name()
            )));
        }
        self.stale(
            "trajectory",
            &self.hashes.simulation,
            tf.meta.get("simulation_hash").and_then(|v| v.as_str()),
        )?;
        let mut ds = make_dataset(&self.config, Some(&tf))?;
        ds.meta.insert("config_hash".into(), self.hashes.config.clone().into());
        ds.meta.insert("data_hash".into(), self.hashes.data.clone().into());
        let dir = self.dataset_dir();
        self.ensure(&dir)?;
        ds.write(&dir)?;
        self.record(
            "preprocess",
            &["dataset/dataset.json"],
            serde_json::json!({
                "pde_train": ds.pde_train.len(),
                "pde_test": ds.pde_test.len(),
                "bc_train": ds.bc_train.as_ref().map(SampleTable::len),
                "bc_test": ds.bc_test.as_ref().map(SampleTable::len),
            }),
        )?;
        Ok(ds)
    }

    fn load_dataset(&self) -> Result<Dataset, PipelineError> {
        let ds = Dataset::read(&self.dataset_dir())?;
        self.stale(
            "dataset",
            &self.hashes.data,
            ds.meta.get("data_hash").and_then(|v| v.as_str()),
        )?;
        Ok(ds)
    }

    pub fn train(&self) -> Result<Checkpoint, PipelineError> {
        let ds = self.load_dataset()?;
        let fitted = fit(&self.config, &ds)?;
        let ck = Checkpoint::new(
            &fitted.pair,
            fitted.params(),
            &fitted.outcome,
            &self.config.train,
            &self.hashes.config,
        );
        ck.write(&self.checkpoint_path())?;
        let hist = self.dir().join("history.csv");
        fitted.outcome.history.write_csv(&hist)?;
        self.record(
            "train",
            &["checkpoint.json", "history.csv"],
            serde_json::json!({ "final_loss": ck.final_loss, "best_test": ck.best_test, "weights": ck.weights }),
        )?;
        Ok(ck)
    }

    pub fn evaluate(&self) -> Result<ErrorTable, PipelineError> {
        let ds = self.load_dataset()?;
        let ck = Checkpoint::read(&self.checkpoint_path())?;
        self.stale("checkpoint", &self.hashes.config, Some(&ck.config_hash))?;
        let (pair, params) = PotentialPair::from_record(&ck.potentials)?;
        let table = evaluate(&self.config, &pair, &params, &ds)?;
        let path = self.dir().join("errors.csv");
        table.write_csv(&path)?;
        let surf = self.dir().join("surfaces");
        self.ensure(&surf)?;
        write_surfaces(
            &pair,
            &params,
            &ds,
            &self.config.reference(),
            &surf,
            self.config.evaluate.surface_points,
        )?;
        self.record("evaluate", &["errors.csv", "surfaces/"], serde_json::to_value(&table).expect("serializable"))?;
        Ok(table)
    }
}

/// Alternative training setups compared against the default one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Boundary and bulk samples from a coarse uniform time grid.
    UniformTime,
    /// Fixed dimensional loss weights instead of tangent-kernel weights.
    ConstantWeights,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform-time" => Ok(Ablation::UniformTime),
            "constant-weights" => Ok(Ablation::ConstantWeights),
            other => Err(format!("unknown ablation '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub sampling: Sampling,
    pub weight_mode: WeightMode,
    pub errors: ErrorTable,
    pub empty_bc_deciles: Option<usize>,
}

/// Builds data, trains and evaluates one variant of `cfg`.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: &str,
    sampling: Sampling,
    weight_mode: WeightMode,
) -> Result<AblationRow, PipelineError> {
    let mut c = cfg.clone();
    c.preprocess.sampling = sampling;
    c.train.weight_mode = weight_mode;
    c.validate()?;
    let ds = make_dataset(&c, None)?;
    let fitted = fit(&c, &ds)?;
    let errors = evaluate(&c, &fitted.pair, fitted.params(), &ds)?;
    Ok(AblationRow {
        variant: variant.into(),
        sampling,
        weight_mode,
        errors,
        empty_bc_deciles: empty_bc_deciles(&ds),
    })
}

/// Runs the default setup and the requested ablations and writes
/// `ablation.csv` into the output directory.
pub fn ablate(cfg: &ExperimentConfig, which: &[Ablation]) -> Result<Vec<AblationRow>, PipelineError> {
    if cfg.experiment != Experiment::Phase {
        return Err(config_err("experiment", "ablations are defined for the phase experiment"));
    }
    let mut rows = vec![run_variant(cfg, "baseline", Sampling::PhaseSpace, WeightMode::Adaptive)?];
    for a in which {
        rows.push(match a {
            Ablation::UniformTime => run_variant(cfg, "uniform-time", Sampling::UniformTime, WeightMode::Adaptive)?,
            Ablation::ConstantWeights => {
                run_variant(cfg, "constant-weights", Sampling::PhaseSpace, WeightMode::Constant)?
            }
        });
    }
    let run = Run::new(cfg.clone())?;
    run.ensure(run.dir())?;
    let path = run.dir().join("ablation.csv");
    write_ablation(&rows, &path)?;
    run.record(
        "ablate",
        &["ablation.csv"],
        serde_json::to_value(&rows).expect("serializable"),
    )?;
    Ok(rows)
}

fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let names = rows.first().map(|r| r.errors.names.clone()).unwrap_or_default();
    let mut head = vec!["variant".to_string(), "sampling".into(), "weight_mode".into()];
    head.extend(names.iter().cloned());
    head.push("empty_bc_deciles".into());
    w.write_record(&head).map_err(|e| io_err(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.variant.clone(),
            serde_json::to_value(r.sampling).expect("serializable").as_str().unwrap_or("").to_string(),
            serde_json::to_value(r.weight_mode).expect("serializable").as_str().unwrap_or("").to_string(),
        ];
        rec.extend(r.errors.values.iter().map(|v| v.to_string()));
        rec.push(r.empty_bc_deciles.map_or(String::new(), |n| n.to_string()));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        }
    }
}

fn uniform_stream(seed: u64) -> impl FnMut() -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    move || rng.gen_range(-1.0..1.0)
}

fn micro_pair(experiment: Experiment) -> Result<PotentialPair, PipelineError> {
    use crate::potentials::Normalization;
    let id = Normalization::identity;
    let (ns, _) = experiment.dissipation_widths();
    Ok(PotentialPair::new(
        experiment,
        &[4, 3],
        vec![id(); experiment.free_energy_width()],
        vec![id(); ns],
        vec![id()],
        (1.0, 1.0),
    )?)
}

fn micro_assembly(experiment: Experiment, pp: &PotentialPair, n: usize, seed: u64) -> Result<LossAssembly, PipelineError> {
    use crate::residuals::{DIFFUSION_PDE, PHASE_BC, PHASE_PDE, VISCO_BC, VISCO_PDE};
    let mut r = uniform_stream(seed);
    let mut table = |cols: &[&str]| {
        let mut t = SampleTable::new(cols);
        for _ in 0..n {
            let row: Vec<f64> = cols
                .iter()
                .map(|c| if c.starts_with("concentration") { 0.5 + 0.4 * r() } else { 0.5 * r() })
                .collect();
            t.push(&row);
        }
        t
    };
    let (pde, bc) = match experiment {
        Experiment::Phase => (table(&PHASE_PDE), Some(table(&PHASE_BC))),
        Experiment::Visco => (table(&VISCO_PDE), Some(table(&VISCO_BC))),
        _ => (table(&DIFFUSION_PDE), None),
    };
    Ok(LossAssembly::for_experiment(pp, 0.1, 2.0, pde, bc)?)
}

/// Fast property checks of the differentiation, network constraints, loss
/// weights and simulators; no training.
pub fn selftest() -> Result<Vec<Check>, PipelineError> {
    let mut checks = Vec::new();
    for exp in [Experiment::Phase, Experiment::Visco, Experiment::DiffusionNonlinear] {
        let pp = micro_pair(exp)?;
        let params = pp.init_params(7);
        let mut la = micro_assembly(exp, &pp, 5, 11)?;
        let w: Vec<f64> = (0..la.n_terms()).map(|k| 0.5 + k as f64).collect();
        la.set_weights(&w)?;
        let err = gradient_check(&la, &params, 1e-4)?;
        checks.push(Check::at_most(&format!("loss gradient ({})", exp.name()), err, 1e-4));

        let traces = la.ntk_traces(&params, None)?;
        let alpha = weights_from_traces(&traces, la.names())?;
        let s: f64 = alpha.iter().map(|a| 1.0 / a).sum();
        checks.push(Check::at_most(&format!("inverse weights sum to one ({})", exp.name()), (s - 1.0).abs(), 1e-12));

        let mut probe = Probe::new(&pp, &params)?;
        let mut r = uniform_stream(13);
        let (mut psi0, mut dpsi0, mut convex) = (0.0f64, 0.0f64, 0.0f64);
        let (ns, _) = exp.dissipation_widths();
        for _ in 0..200 {
            let z: Vec<f64> = (0..ns).map(|_| 0.5 + 0.4 * r()).collect();
            let (p, g) = probe.dissipation(&z, &[0.0])?;
            psi0 = psi0.max(p.abs());
            dpsi0 = dpsi0.max(g[0].abs());
            let (w, h) = (r(), 1e-4);
            let gp = probe.dissipation(&z, &[w + h])?.1[0];
            let gm = probe.dissipation(&z, &[w - h])?.1[0];
            convex = convex.max(-(gp - gm) / (2.0 * h));
        }
        checks.push(Check::at_most(&format!("dissipation vanishes at zero rate ({})", exp.name()), psi0, 1e-14));
        checks.push(Check::at_most(&format!("zero dissipative force at zero rate ({})", exp.name()), dpsi0, 1e-14));
        checks.push(Check::at_most(&format!("dissipation convex in rate ({})", exp.name()), convex, 1e-7));
        if !exp.is_diffusion() {
            let z = vec![0.0; exp.free_energy_width()];
            let (f0, g0) = probe.free_energy(&z)?;
            checks.push(Check::at_most(&format!("free energy vanishes at origin ({})", exp.name()), f0.abs(), 1e-14));
            if exp == Experiment::Visco {
                checks.push(Check::at_most("stress vanishes at origin (visco)", g0[0].abs(), 1e-14));
            }
        }
    }

    let cfg = DiffusionConfig {
        t_end: 200.0 * DiffusionConfig::nonlinear().dt,
        snapshots: 201,
        ..DiffusionConfig::nonlinear()
    };
    let tf = simulate_diffusion(&cfg)?;
    let c = tf.field("concentration")?;
    let mass = |n: usize| c.row(n).iter().sum::<f64>() * cfg.dx();
    let drift = (1..tf.n_times()).map(|n| (mass(n) - mass(n - 1)).abs()).fold(0.0, f64::max);
    checks.push(Check::at_most("diffusion mass conserved per step", drift, 1e-12));

    let phase = PhaseConfig {
        pull_speed: 0.0,
        t_end: 1000.0 * PhaseConfig::default().dt,
        output_stride: 100,
        ..PhaseConfig::default()
    };
    let tf = simulate_phase(&phase)?;
    let s = tf.field("strain")?;
    let moved = s.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    checks.push(Check::at_most("phase equilibrium state stationary", moved, 1e-12));

    let k = ViscoConfig::default().constants();
    let mut worst = 0.0f64;
    let mut r = uniform_stream(17);
    let scale = k.stress(0.01, 0.0).abs();
    for _ in 0..100 {
        // the free energy is quadratic, so a central difference is exact
        let (e, ev) = (0.01 * r(), 0.01 * r());
        let fd = (k.free_energy(e + 0.01, ev) - k.free_energy(e - 0.01, ev)) / 0.02;
        worst = worst.max((fd - k.stress(e, ev)).abs() / scale);
    }
    checks.push(Check::at_most("visco free energy slope equals stress", worst, 1e-12));
    Ok(checks)
}

/// Reads back the recorded error table of a finished run.
pub fn read_errors(dir: &Path) -> Result<ErrorTable, PipelineError> {
    let path = dir.join("errors.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| io_err(&path, e))?;
    let head: Vec<String> = r.headers().map_err(|e| io_err(&path, e))?.iter().map(String::from).collect();
    let rec = r
        .records()
        .next()
        .ok_or_else(|| io_err(&path, "no rows"))?
        .map_err(|e| io_err(&path, e))?;
    let values = rec
        .iter()
        .skip(1)
        .map(|v| v.parse::<f64>().map_err(|e| io_err(&path, e)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ErrorTable {
        experiment: rec.get(0).unwrap_or("").into(),
        names: head[1..].to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for e in [
            Experiment::Phase,
            Experiment::Visco,
            Experiment::DiffusionLinear,
            Experiment::DiffusionNonlinear,
        ] {
            let c = ExperimentConfig::default_for(e);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(config_hash(&back), config_hash(&c));
        }
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seeds() {
        let a = ExperimentConfig::default_for(Experiment::Phase);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.apply(&Overrides {
            seed: Some(99),
            ..Overrides::default()
        })
        .unwrap();
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(ConfigHashes::of(&a).simulation, ConfigHashes::of(&b).simulation);
    }

    #[test]
    fn missing_seed_is_a_config_error_with_field_path() {
        let text: String = ExperimentConfig::default_for(Experiment::Phase)
            .to_toml()
            .lines()
            .filter(|l| !l.starts_with("seed ="))
            .collect::<Vec<_>>()
            .join("\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn wrong_section_rejected() {
        let mut c = ExperimentConfig::default_for(Experiment::Phase);
        c.visco = Some(ViscoConfig::default());
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("visco"));
        let mut c = ExperimentConfig::default_for(Experiment::Phase);
        c.preprocess.train_fraction = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("preprocess.train_fraction"));
    }

    #[test]
    fn selftest_passes() {
        for c in selftest().unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
