use std::collections::BTreeMap;

use qpair::bhpe::{estimate_hamiltonian, nrmse};
use qpair::bqss::{adapt, fidelity, restore};
use qpair::harness::{
    bhpe_runs, default_config, parse_config, run_experiment, serialize_config, RunOptions, Task,
};
use qpair::heisenberg::{evolution_matrix, K_B};
use qpair::qstate::random_pure_state;
use qpair::source::{
    Campaign, ExactSource, Measured, MeasurementSource, OfflineSource, SampledSource,
};
use qpair::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Records every campaign it serves.
struct Spy<S> {
    inner: S,
    seen: BTreeMap<String, Campaign>,
}

impl<S: MeasurementSource> MeasurementSource for Spy<S> {
    fn measure(&mut self, c: &Campaign) -> qpair::Result<Measured> {
        assert!(
            self.seen.insert(c.label.clone(), c.clone()).is_none(),
            "label `{}` reused",
            c.label
        );
        self.inner.measure(c)
    }
}

#[test]
fn estimation_uses_distinct_campaigns_with_the_configured_budget() {
    let cfg = default_config();
    let bc = cfg.bhpe_config(5000, 2).unwrap();
    let mut spy = Spy {
        inner: SampledSource::new(cfg.model().unwrap(), 3, 0),
        seen: BTreeMap::new(),
    };
    estimate_hamiltonian(&mut spy, &bc).unwrap();
    assert!(spy.seen.len() >= 8);
    for c in spy.seen.values() {
        assert_eq!((c.states, c.preps), (5000, 2), "{}", c.label);
    }
    for p in ["t11", "t12", "t21", "t22"] {
        assert!(
            spy.seen.keys().any(|k| k.starts_with(p)),
            "no campaign at {p}"
        );
    }
}

#[test]
fn errors_shrink_with_budget() {
    let cfg = default_config();
    let opts = RunOptions::default();
    let small = bhpe_runs(&cfg, 2_000, 1, 20, &opts).unwrap();
    let large = bhpe_runs(&cfg, 50_000, 1, 20, &opts).unwrap();
    let err = |r: &[qpair::harness::RunRecord]| {
        nrmse(
            &r.iter().map(|x| x.jxy_hat_kelvin).collect::<Vec<_>>(),
            cfg.physics.jxy_kelvin,
        )
        .unwrap()
    };
    assert!(err(&large) < err(&small));
}

#[test]
fn results_do_not_depend_on_run_order() {
    let cfg = default_config();
    let all = bhpe_runs(&cfg, 3000, 1, 4, &RunOptions::default()).unwrap();
    let bc = cfg.bhpe_config(3000, 1).unwrap();
    let model = cfg.model().unwrap();
    for id in [3u64, 1] {
        let e = estimate_hamiltonian(&mut SampledSource::new(model, cfg.seed, id), &bc).unwrap();
        assert_eq!(e.jxy_hat / K_B, all[id as usize].jxy_hat_kelvin);
        assert_eq!(e.jz_hat.map(|z| z / K_B), all[id as usize].jz_hat_kelvin);
    }
}

#[test]
fn offline_source_missing_campaign_is_reported() {
    let cfg = default_config();
    let mut off = OfflineSource::default();
    let err = estimate_hamiltonian(&mut off, &cfg.bhpe_config(10, 1).unwrap()).unwrap_err();
    assert!(matches!(err, Error::MissingCampaign(_)), "{err}");
}

#[test]
fn adaptation_then_restoration_on_fresh_states() {
    let cfg = default_config();
    let model = cfg.model().unwrap();
    let mut src = SampledSource::new(model, 9, 0);
    let sep = adapt(
        &mut src,
        &model.known(),
        cfg.tau11(),
        &cfg.ensembles,
        &cfg.protocol_budget(200_000, 1),
    )
    .unwrap();
    let m3 = evolution_matrix(&model, sep.tau3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mean = (0..500)
        .map(|_| {
            let c = random_pure_state(&mut rng);
            fidelity(&restore(&c.evolve(&m3), &sep.unitary), &c)
        })
        .sum::<f64>()
        / 500.0;
    assert!(mean > 0.99, "mean fidelity {mean}");
    let exact = adapt(
        &mut ExactSource { model },
        &model.known(),
        cfg.tau11(),
        &cfg.ensembles,
        &cfg.protocol_budget(1, 1),
    )
    .unwrap();
    assert!((exact.unitary * m3).max_abs_diff(&qpair::Mat4::identity()) < 1e-9);
}

#[test]
fn config_file_drives_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg.budget.n = 1500;
    cfg.budget.runs = 3;
    cfg.seed = 77;
    let cfg = parse_config(&serialize_config(&cfg)).unwrap();
    let opts = RunOptions {
        out_dir: dir.path().into(),
        no_wall_clock: true,
        ..Default::default()
    };
    let rep = run_experiment(&cfg, Task::Bhpe, &opts).unwrap();
    assert_eq!(rep.runs.len(), 3);
    assert_eq!(rep.aggregates[0].n, 1500);
    let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 4);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg.budget.k = 0;
    cfg.priors.jz_kelvin = [2.0, 1.0];
    let err = run_experiment(
        &cfg,
        Task::Bhpe,
        &RunOptions {
            out_dir: dir.path().into(),
            ..Default::default()
        },
    )
    .unwrap_err();
    let Error::Config(list) = err else {
        panic!("{err}")
    };
    assert!(list.len() >= 2, "{list:?}");
    assert!(!dir.path().join("aggregate.csv").exists());
}
