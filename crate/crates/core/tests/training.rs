use proptest::prelude::*;

use vonn::pipeline::{evaluate, fit, make_dataset, ExperimentConfig};
use vonn::potentials::{Experiment, Probe};
use vonn::simulate::phase::PhaseFreeEnergy;

const STIFFNESS: f64 = 2000.0;

/// Small phase run of a bar with `f = E e^2 / 2`.
fn quadratic_bar(epochs: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_for(Experiment::Phase);
    let p = cfg.phase.as_mut().unwrap();
    p.free_energy = PhaseFreeEnergy::Quadratic { stiffness: STIFFNESS };
    p.dt = 1e-6;
    p.output_stride = 100;
    cfg.preprocess.target = 400;
    cfg.preprocess.seed = seed;
    cfg.train.seed = seed;
    cfg.train.epochs = epochs;
    cfg.train.learning_rate = 1e-3;
    cfg.train.hidden = Some(vec![10, 10]);
    cfg.train.eval_every = 500;
    cfg
}

#[test]
fn quadratic_bar_recovers_its_stiffness() {
    let cfg = quadratic_bar(5000, 3);
    let ds = make_dataset(&cfg, None).unwrap();
    let fitted = fit(&cfg, &ds).unwrap();
    let strain = ds.bc_train.as_ref().unwrap().column("strain").unwrap();
    let hi = strain.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probe = Probe::new(&fitted.pair, fitted.params()).unwrap();
    // second difference of the learned free energy across the loaded range
    let mut f = |e: f64| probe.free_energy(&[e]).unwrap().0;
    let (m, h) = (0.5 * hi, 0.25 * hi);
    let curvature = (f(m + h) - 2.0 * f(m) + f(m - h)) / (h * h);
    assert!((curvature / STIFFNESS - 1.0).abs() < 0.02, "f'' = {curvature}");
    let t = evaluate(&cfg, &fitted.pair, fitted.params(), &ds).unwrap();
    assert!(t.get("f_prime").unwrap() < 1.0, "{t:?}");
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let cfg = quadratic_bar(200, 5);
    let ds = make_dataset(&cfg, None).unwrap();
    let a = fit(&cfg, &ds).unwrap();
    let b = fit(&cfg, &ds).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.outcome.history.weights, b.outcome.history.weights);

    let mut other = cfg.clone();
    other.train.seed = 6;
    let c = fit(&other, &ds).unwrap();
    assert_ne!(a.params(), c.params());
    let ds2 = make_dataset(&other, None).unwrap();
    assert_eq!(ds.pde_train, ds2.pde_train, "data depend on the preprocessing seed only");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn training_lowers_the_loss(seed in 0u64..1000) {
        let cfg = quadratic_bar(300, seed);
        let ds = make_dataset(&cfg, None).unwrap();
        let fitted = fit(&cfg, &ds).unwrap();
        let rows = &fitted.outcome.history.rows;
        let first = rows.first().unwrap().total;
        let last = rows.last().unwrap().total;
        prop_assert!(last < 0.5 * first, "loss {first} -> {last}");
        let tests: Vec<f64> = rows.iter().filter_map(|r| r.test).collect();
        prop_assert!(tests.last().unwrap() < tests.first().unwrap());
    }
}
