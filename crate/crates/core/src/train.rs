//! Full-batch Adam training with frozen (or periodically refreshed)
//! adaptive loss weights, test-loss tracking and the relative error metric.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::DiffError;
use crate::potentials::{PotentialPair, PotentialRecord};
use crate::residuals::{LossAssembly, LossValue, ResidualError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at epoch {epoch}")]
    NonFinite {
        epoch: usize,
        /// Parameters of the last epoch with a finite loss.
        last_finite: Vec<f64>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Tangent-kernel weights computed once from the initial parameters.
    Adaptive,
    /// Weights supplied by the caller and kept fixed.
    Constant,
    /// Tangent-kernel weights recomputed every `weight_period` epochs.
    Periodic,
}

impl std::str::FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(WeightMode::Adaptive),
            "constant" => Ok(WeightMode::Constant),
            "periodic" => Ok(WeightMode::Periodic),
            other => Err(format!("unknown weight mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Seed of the network initialization.
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub weight_period: Option<usize>,
    #[serde(default)]
    pub max_ntk_samples: Option<usize>,
    /// Test loss is evaluated every `eval_every` epochs.
    #[serde(default = "default_eval")]
    pub eval_every: usize,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_mode() -> WeightMode {
    WeightMode::Adaptive
}
fn default_eval() -> usize {
    100
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_eps(),
            seed,
            weight_mode: default_mode(),
            weight_period: None,
            max_ntk_samples: None,
            eval_every: default_eval(),
            hidden: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be at least 1".into()));
        }
        if self.weight_mode == WeightMode::Periodic && self.weight_period.unwrap_or(0) == 0 {
            return Err(TrainError::Config("periodic weights need weight_period >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub total: f64,
    pub terms: Vec<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub term_names: Vec<String>,
    pub weights: Vec<f64>,
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let err = |e: csv::Error| TrainError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut head = vec!["epoch".to_string(), "total".to_string()];
        head.extend(self.term_names.iter().map(|n| format!("loss_{n}")));
        head.push("test".into());
        w.write_record(&head).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string(), r.total.to_string()];
            rec.extend(r.terms.iter().map(|v| v.to_string()));
            rec.push(r.test.map_or(String::new(), |t| t.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| TrainError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub params: Vec<f64>,
    /// Parameters with the lowest test loss seen (final ones without a test set).
    pub best_params: Vec<f64>,
    pub best_test: Option<f64>,
    pub history: History,
}

fn finite(lv: &LossValue, grad: &[f64]) -> bool {
    lv.total.is_finite() && grad.iter().all(|g| g.is_finite())
}

fn weights_for(la: &LossAssembly, params: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>, TrainError> {
    Ok(la.ntk_weights(params, cfg.max_ntk_samples)?)
}

/// Runs `cfg.epochs` full-batch Adam steps from `init`. With
/// [`WeightMode::Constant`] the weights already set on `la` are used.
pub fn train(
    la: &mut LossAssembly,
    mut test: Option<&mut LossAssembly>,
    init: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let n = la.n_params();
    if init.len() != n {
        return Err(TrainError::Config(format!("{} initial parameters for {n}", init.len())));
    }
    let mut params = init.to_vec();
    if cfg.weight_mode != WeightMode::Constant {
        let w = weights_for(la, &params, cfg)?;
        la.set_weights(&w)?;
    }
    let mut adam = Adam::new(n, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut grad = vec![0.0; n];
    let mut rows = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last_finite = params.clone();

    let nonfinite = |epoch: usize, last: &[f64]| TrainError::NonFinite {
        epoch,
        last_finite: last.to_vec(),
    };
    for epoch in 0..=cfg.epochs {
        if cfg.weight_mode == WeightMode::Periodic && epoch > 0 && epoch < cfg.epochs {
            if epoch % cfg.weight_period.unwrap_or(1) == 0 {
                let w = weights_for(la, &params, cfg)?;
                la.set_weights(&w)?;
            }
        }
        grad.fill(0.0);
        let lv = match la.loss_and_grad(&params, &mut grad) {
            Ok(lv) => lv,
            Err(ResidualError::Diff(DiffError::NonFinite { .. })) => return Err(nonfinite(epoch, &last_finite)),
            Err(e) => return Err(e.into()),
        };
        if !finite(&lv, &grad) {
            return Err(nonfinite(epoch, &last_finite));
        }
        last_finite.copy_from_slice(&params);
        let record = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let mut test_total = None;
        if let (true, Some(t)) = (record, test.as_deref_mut()) {
            t.set_weights(la.weights())?;
            let tv = t.loss(&params)?.total;
            if tv.is_finite() && best.as_ref().map_or(true, |(b, _)| tv < *b) {
                best = Some((tv, params.clone()));
            }
            test_total = Some(tv);
        }
        rows.push(HistoryRow {
            epoch,
            total: lv.total,
            terms: lv.terms,
            test: test_total,
        });
        if record {
            log::info!(
                "epoch {epoch:>6}  loss {:.6e}  test {}",
                lv.total,
                test_total.map_or("-".into(), |t| format!("{t:.6e}"))
            );
        }
        if epoch < cfg.epochs {
            adam.step(&mut params, &grad);
        }
    }
    let (best_test, best_params) = match best {
        Some((t, p)) => (Some(t), p),
        None => (None, params.clone()),
    };
    Ok(TrainOutcome {
        params,
        best_params,
        best_test,
        history: History {
            term_names: la.names().to_vec(),
            weights: la.weights().to_vec(),
            rows,
        },
    })
}

/// Relative Euclidean error between the assembled loss gradient and
/// fourth-order central differences of the loss.
pub fn gradient_check(la: &LossAssembly, params: &[f64], h: f64) -> Result<f64, TrainError> {
    let mut grad = vec![0.0; params.len()];
    la.loss_and_grad(params, &mut grad)?;
    let mut q = params.to_vec();
    let mut at = |k: usize, d: f64| -> Result<f64, TrainError> {
        q[k] = params[k] + d;
        let v = la.loss(&q)?.total;
        q[k] = params[k];
        Ok(v)
    };
    let mut err = 0.0;
    let mut norm = 0.0;
    for k in 0..params.len() {
        let fd = (8.0 * (at(k, h)? - at(k, -h)?) - (at(k, 2.0 * h)? - at(k, -2.0 * h)?)) / (12.0 * h);
        err += (fd - grad[k]).powi(2);
        norm += grad[k] * grad[k];
    }
    if norm == 0.0 {
        return Ok(err.sqrt());
    }
    Ok((err / norm).sqrt())
}

/// Trapezoid weights for `n` equally spaced points on `[a, b]`.
fn trapezoid(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "quadrature needs two points");
    let h = (b - a) / (n - 1) as f64;
    let x = (0..n).map(|i| a + i as f64 * h).collect();
    let w = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
        .collect();
    (x, w)
}

#[derive(Debug, thiserror::Error)]
#[error("reference function vanishes on the domain")]
pub struct ZeroReference;

/// `100 * int |A - B|^2 / int |A|^2` over `[a, b]` (no square root).
pub fn relative_l2_error(
    mut reference: impl FnMut(f64) -> f64,
    mut predicted: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    n: usize,
) -> Result<f64, ZeroReference> {
    let (x, w) = trapezoid(a, b, n);
    let (mut num, mut den) = (0.0, 0.0);
    for (xi, wi) in x.iter().zip(&w) {
        let r = reference(*xi);
        let d = r - predicted(*xi);
        num += wi * d * d;
        den += wi * r * r;
    }
    if den == 0.0 {
        return Err(ZeroReference);
    }
    Ok(100.0 * num / den)
}

/// Product-domain version of [`relative_l2_error`] over
/// `[x0, x1] x [y0, y1]`.
pub fn relative_l2_error_2d(
    mut reference: impl FnMut(f64, f64) -> f64,
    mut predicted: impl FnMut(f64, f64) -> f64,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    n: usize,
) -> Result<f64, ZeroReference> {
    let (x, wx) = trapezoid(x0, x1, n);
    let (y, wy) = trapezoid(y0, y1, n);
    let (mut num, mut den) = (0.0, 0.0);
    for (xi, wxi) in x.iter().zip(&wx) {
        for (yj, wyj) in y.iter().zip(&wy) {
            let w = wxi * wyj;
            let r = reference(*xi, *yj);
            let d = r - predicted(*xi, *yj);
            num += w * d * d;
            den += w * r * r;
        }
    }
    if den == 0.0 {
        return Err(ZeroReference);
    }
    Ok(100.0 * num / den)
}

/// Trained pair with everything needed to evaluate or resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub potentials: PotentialRecord,
    pub weights: Vec<f64>,
    pub term_names: Vec<String>,
    pub train: TrainConfig,
    pub best_test: Option<f64>,
    pub final_loss: f64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn new(pp: &PotentialPair, params: &[f64], out: &TrainOutcome, cfg: &TrainConfig, hash: &str) -> Self {
        Checkpoint {
            potentials: pp.to_record(params),
            weights: out.history.weights.clone(),
            term_names: out.history.term_names.clone(),
            train: cfg.clone(),
            best_test: out.best_test,
            final_loss: out.history.rows.last().map_or(f64::NAN, |r| r.total),
            config_hash: hash.to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let err = |msg: String| TrainError::File {
            path: path.display().to_string(),
            msg,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let err = |msg: String| TrainError::File {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residuals::SampleTable;

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut a = Adam::new(2, 1e-3, 0.9, 0.999, 1e-8);
        a.m = vec![1.0, -2.0];
        a.v = vec![4.0, 1.0];
        a.t = 5;
        let mut p = vec![0.3, 0.4];
        let before = p.clone();
        let mut probe = a.clone();
        probe.step(&mut p, &[0.0, 0.0]);
        assert_eq!(probe.m, vec![0.9, -1.8]);
        assert!((probe.v[0] - 0.999 * 4.0).abs() < 1e-15);
        // moments decay but remain, so the step itself is nonzero
        assert_ne!(p, before);
        let mut fresh = Adam::new(2, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = before.clone();
        fresh.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_has_learning_rate_size() {
        let mut a = Adam::new(1, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0];
        a.step(&mut p, &[1.0]);
        // m_hat = v_hat = 1
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_l2_error(|x| x.sin(), |x| x.sin(), 0.0, 1.0, 101).unwrap(), 0.0);
        let e = relative_l2_error(|_| 1.0, |_| 1.1, 0.0, 1.0, 101).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let e = relative_l2_error(f64::sin, |_| 0.0, 0.0, std::f64::consts::PI, 1001).unwrap();
        assert!((e - 100.0).abs() < 1e-12);
        assert!(relative_l2_error(|_| 0.0, |_| 1.0, 0.0, 1.0, 11).is_err());
        let e = relative_l2_error_2d(|x, y| x + y, |x, y| 1.1 * (x + y), (0.0, 1.0), (0.0, 2.0), 41).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    /// Fits `r = p0 x - y` (a linear model) so the minimum is known.
    fn linear_problem() -> LossAssembly {
        let mut t = SampleTable::new(&["x", "y"]);
        for i in 0..20 {
            let x = i as f64 / 10.0;
            t.push(&[x, 3.0 * x]);
        }
        let mut la = LossAssembly::new(1);
        la.push_group(&["fit"], t, |g, x| {
            let p = g.param(0, 1);
            let px = g.mul(p, x[0]);
            Ok(vec![g.sub(px, x[1])])
        })
        .unwrap();
        la
    }

    #[test]
    fn zero_epochs_return_initial_parameters() {
        let mut la = linear_problem();
        let out = train(&mut la, None, &[0.5], &TrainConfig::new(0, 1e-2, 1)).unwrap();
        assert_eq!(out.params, vec![0.5]);
        assert_eq!(out.history.rows.len(), 1);
        assert_eq!(out.history.weights, vec![1.0]);
    }

    #[test]
    fn training_is_deterministic_and_converges() {
        let cfg = TrainConfig::new(3000, 1e-2, 1);
        let mut la = linear_problem();
        let a = train(&mut la, None, &[0.0], &cfg).unwrap();
        let mut la = linear_problem();
        let b = train(&mut la, None, &[0.0], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert!((a.params[0] - 3.0).abs() < 1e-3, "{}", a.params[0]);
    }

    #[test]
    fn nan_is_reported_with_last_finite_parameters() {
        let mut t = SampleTable::new(&["x"]);
        t.push(&[10.0]);
        let mut la = LossAssembly::new(1);
        // log(p) turns NaN once p crosses zero
        la.push_group(&["log"], t, |g, x| {
            let p = g.param(0, 1);
            let l = g.log(p);
            Ok(vec![g.add(l, x[0])])
        })
        .unwrap();
        let mut cfg = TrainConfig::new(10_000, 0.05, 1);
        cfg.weight_mode = WeightMode::Constant;
        match train(&mut la, None, &[0.2], &cfg) {
            Err(TrainError::NonFinite { epoch, last_finite }) => {
                assert!(epoch > 0);
                assert!(last_finite[0] > 0.0);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(out) => panic!("no abort, final parameter {}", out.params[0]),
        }
    }

    #[test]
    fn gradient_check_on_linear_problem() {
        let la = linear_problem();
        assert!(gradient_check(&la, &[1.3], 1e-4).unwrap() < 1e-8);
    }
}
