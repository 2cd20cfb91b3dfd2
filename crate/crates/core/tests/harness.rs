//! Experiment runs, ablation grids, output files and figures.

use std::path::Path;

use mmfl_core::harness::experiment::{PARAMS_FILE, RUN_FILE, TIMING_FILE};
use mmfl_core::harness::suite::SUMMARY_FILE;
use mmfl_core::harness::{emit_plots, read_metrics, run_ablation_suite, run_experiment, Ablation, ExperimentConfig, RunManifest, OUT_ROOT_ENV};
use mmfl_core::model::read_param_file;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { num_clients: 3, rounds: 2, n_train: 90, n_test: 40, out: out.to_path_buf(), ..ExperimentConfig::default() };
    cfg.train.local_epochs = 1;
    cfg
}

#[test]
fn zero_rounds_write_empty_metrics_and_initial_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { rounds: 0, ..tiny(dir.path()) };
    let outcome = run_experiment::<f64>(&cfg).unwrap();
    assert!(outcome.logs.is_empty());
    assert!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap().is_empty());
    let (hash, params) = read_param_file::<f64>(&dir.path().join(PARAMS_FILE)).unwrap();
    assert_eq!(hash, cfg.hash_u64());
    assert_eq!(params, outcome.initial_params);
    assert_eq!(outcome.final_params, outcome.initial_params);
}

#[test]
fn run_writes_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let outcome = run_experiment::<f64>(&cfg).unwrap();
    let metrics = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics.iter().map(|m| m.round).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(metrics[1].accuracy, outcome.final_accuracy());
    let timing = std::fs::read_to_string(dir.path().join(TIMING_FILE)).unwrap();
    assert_eq!(timing.lines().count(), 2);
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_FILE)).unwrap()).unwrap();
    assert_eq!(manifest, outcome.manifest);
    assert_eq!(manifest.config_hash, cfg.hash_hex());
    let (_, params) = read_param_file::<f64>(&dir.path().join(PARAMS_FILE)).unwrap();
    assert_eq!(params, outcome.final_params);
}

#[test]
fn equal_configs_produce_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (tiny(a.path()), tiny(b.path()));
    assert_eq!(ca.hash_hex(), cb.hash_hex());
    run_experiment::<f64>(&ca).unwrap();
    run_experiment::<f64>(&cb).unwrap();
    for file in ["metrics.jsonl", PARAMS_FILE] {
        assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let other = ExperimentConfig { master_seed: 1, ..tiny(a.path()) };
    assert_ne!(other.hash_hex(), ca.hash_hex());
}

#[test]
fn without_similarity_weighting_gamma_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { ablation: Ablation::WoCka, ..tiny(dir.path()) };
    let outcome = run_experiment::<f64>(&cfg).unwrap();
    for log in &outcome.logs {
        let k = log.sampled.len() as f64;
        assert!(log.gamma.iter().all(|&g| g == 1.0 / k), "{:?}", log.gamma);
    }
}

#[test]
fn without_matching_loss_its_term_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { ablation: Ablation::WoMcm, ..tiny(dir.path()) };
    let outcome = run_experiment::<f64>(&cfg).unwrap();
    assert!(outcome.logs.iter().flat_map(|l| &l.client_loss).all(|b| b.mcm == 0.0));
    let full = run_experiment::<f64>(&tiny(tempfile::tempdir().unwrap().path())).unwrap();
    assert!(full.logs.iter().flat_map(|l| &l.client_loss).any(|b| b.mcm > 0.0));
}

#[test]
fn plots_render_from_a_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment::<f64>(&tiny(dir.path())).unwrap();
    let figs = tempfile::tempdir().unwrap();
    let paths = emit_plots(&dir.path().join("metrics.jsonl"), figs.path()).unwrap();
    assert_eq!(paths.len(), 2);
    let accuracy = std::fs::read_to_string(figs.path().join("accuracy.svg")).unwrap();
    assert!(accuracy.starts_with("<svg"));
    assert_eq!(accuracy.matches(r#"class="point""#).count(), 3 * 2);
    let heat = std::fs::read_to_string(figs.path().join("gamma_heatmap.svg")).unwrap();
    assert!(heat.contains(r#"data-rows="2""#));
    assert!(emit_plots(&dir.path().join("missing.jsonl"), figs.path()).is_err());
}

#[test]
fn ablation_grid_tabulates_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_ablation_suite::<f64>(&tiny(dir.path()), &[1, 2, 3], dir.path()).unwrap();
    assert_eq!(summary.rows.len(), 15);
    assert_eq!(summary.means.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 15 + 5);
    assert_eq!(lines[0], "ablation,seed,complete,image_only,text_only,train_hash,partition_hash,masked_hash");
    assert_eq!(lines.iter().filter(|l| l.contains(",mean,")).count(), 5);
    // Ablations change training, never the data a seed produces.
    for seed in [1, 2, 3] {
        let rows: Vec<_> = summary.rows.iter().filter(|r| r.seed == seed).collect();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert_eq!((&r.train_hash, &r.partition_hash, &r.masked_hash), (&rows[0].train_hash, &rows[0].partition_hash, &rows[0].masked_hash));
        }
    }
    assert_ne!(summary.rows[0].train_hash, summary.rows[1].train_hash);
}

#[test]
fn relative_output_is_rooted_under_the_environment_directory() {
    let root = tempfile::tempdir().unwrap();
    std::env::set_var(OUT_ROOT_ENV, root.path());
    let cfg = ExperimentConfig { rounds: 0, ..tiny(Path::new("relative/run")) };
    let outcome = run_experiment::<f64>(&cfg).unwrap();
    std::env::remove_var(OUT_ROOT_ENV);
    assert_eq!(outcome.out_dir, root.path().join("relative/run"));
    assert!(root.path().join("relative/run").join(RUN_FILE).exists());
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
