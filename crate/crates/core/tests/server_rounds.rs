//! One federated round at a time, on a small prepared federation.

use mmfl_core::harness::experiment::{initial_params, prepare, Prepared};
use mmfl_core::harness::ExperimentConfig;
use mmfl_core::optim::scheduled_lr;
use mmfl_core::server::{generate_probe, run_round, AggregationMode, ProbeSet, RoundContext, RoundLog};
use mmfl_core::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig { num_clients: 4, rounds: 3, n_train: 160, n_test: 60, master_seed: 5, ..ExperimentConfig::default() };
    cfg.train.local_epochs = 1;
    cfg
}

fn setup(cfg: &ExperimentConfig) -> (Prepared<f64>, ProbeSet<f64>, Vec<f64>) {
    let p = prepare::<f64>(cfg).unwrap();
    let probe = generate_probe(&p.cfg.dataset, p.seeds.probe).unwrap();
    let w = initial_params(&p.dims, &p.seeds);
    (p, probe, w)
}

fn round(p: &mut Prepared<f64>, probe: &ProbeSet<f64>, w: &[f64], r: usize) -> Result<(Vec<f64>, RoundLog), Error> {
    let ctx = RoundContext {
        dims: &p.dims,
        spec: &p.cfg.dataset,
        train: &p.cfg.train,
        loss: &p.cfg.loss,
        server: &p.cfg.server,
        probe,
        test: &p.test,
        total_rounds: p.cfg.rounds,
    };
    run_round(w, &mut p.clients, &ctx, r, p.seeds.round(r))
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn single_sampled_client_becomes_the_global_model() {
    let mut cfg = small_config();
    cfg.server.sample_ratio = 0.01;
    let (mut p, probe, w) = setup(&cfg);
    let (reference, _, _) = setup(&cfg);
    let (next, log) = round(&mut p, &probe, &w, 0).unwrap();
    assert_eq!(log.sampled.len(), 1);
    assert_eq!(log.gamma, vec![1.0]);
    let id = log.sampled[0];
    let mut solo = reference.clients[id].clone();
    let lr = scheduled_lr(cfg.train.learning_rate, cfg.train.scheduler, 0, cfg.train.warmup_rounds, cfg.rounds);
    let u = solo.local_train(&w, &reference.dims, &reference.cfg.train, &reference.cfg.loss, lr, 0, reference.seeds.round(0)).unwrap();
    assert!(bitwise_eq(&next, &u.params));
}

#[test]
fn zero_learning_rate_leaves_the_global_model_unchanged() {
    let mut cfg = small_config();
    cfg.train.learning_rate = 0.0;
    let (mut p, probe, w) = setup(&cfg);
    let (next, log) = round(&mut p, &probe, &w, 0).unwrap();
    assert!(bitwise_eq(&next, &w));
    // Identical uploads make every pairwise similarity equal, hence uniform weights.
    let k = log.sampled.len();
    assert!(log.gamma.iter().all(|&g| g == 1.0 / k as f64), "{:?}", log.gamma);
}

#[test]
fn rounds_are_deterministic() {
    let cfg = small_config();
    let run = || {
        let (mut p, probe, mut w) = setup(&cfg);
        let mut logs = Vec::new();
        for r in 0..2 {
            let (next, mut log) = round(&mut p, &probe, &w, r).unwrap();
            log.wall_seconds = 0.0;
            logs.push(log);
            w = next;
        }
        (w, logs)
    };
    let (wa, la) = run();
    let (wb, lb) = run();
    assert!(bitwise_eq(&wa, &wb));
    assert_eq!(la, lb);
}

#[test]
fn round_log_is_consistent() {
    let (mut p, probe, w) = setup(&small_config());
    let (next, log) = round(&mut p, &probe, &w, 0).unwrap();
    let k = log.sampled.len();
    assert_eq!(k, 3, "ceil(0.7 × 4)");
    assert_eq!(log.gamma.len(), k);
    assert_eq!(log.client_loss.len(), k);
    assert!((log.gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert_eq!(log.similarity.len(), k);
    for i in 0..k {
        assert!((log.similarity[i][i] - 1.0).abs() <= 1e-9);
        let s: f64 = (0..k).filter(|&j| j != i).map(|j| log.similarity[i][j]).sum();
        assert!((s - log.importance[i]).abs() <= 1e-12);
        for j in 0..k {
            assert_eq!(log.similarity[i][j], log.similarity[j][i]);
        }
    }
    assert!(!bitwise_eq(&next, &w));
    for acc in [log.accuracy.complete, log.accuracy.image_only, log.accuracy.text_only] {
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn uniform_mode_skips_similarity() {
    let mut cfg = small_config();
    cfg.server.aggregation = AggregationMode::Uniform;
    let (mut p, probe, w) = setup(&cfg);
    let (_, log) = round(&mut p, &probe, &w, 0).unwrap();
    assert!(log.similarity.is_empty());
    assert!(log.gamma.iter().all(|&g| g == 1.0 / 3.0));
}

#[test]
fn non_finite_global_aborts_the_round() {
    let (mut p, probe, mut w) = setup(&small_config());
    w[3] = f64::INFINITY;
    let err = round(&mut p, &probe, &w, 0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}
