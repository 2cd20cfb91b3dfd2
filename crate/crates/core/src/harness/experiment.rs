//! One experiment end to end: data, partition, masking, completion, rounds, outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Partition, Seeds};
use super::metrics::{JsonlWriter, MetricsRecord, TimingRecord};
use crate::client::ClientState;
use crate::completion::{CompletionProvider, NullProvider, SyntheticOracle};
use crate::datagen::{apply_missing, gen_dataset, hex_digest, partition_iid, partition_noniid, records_hash, select, ClientPartition, MultiModalRecord};
use crate::error::Result;
use crate::model::{flatten_params, write_param_file, ClassifierParams, FrozenEncoders, JointModuleParams, ModelDims};
use crate::scalar::Scalar;
use crate::server::{generate_probe, run_round, ModeAccuracy, RoundContext, RoundLog};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const PARAMS_FILE: &str = "final_params.bin";

/// Contents of `run.json`: the resolved configuration and upstream hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub train_hash: String,
    pub test_hash: String,
    pub partition_hash: String,
    pub masked_hash: String,
    pub param_count: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome<T> {
    pub manifest: RunManifest,
    pub logs: Vec<RoundLog>,
    pub final_params: Vec<T>,
    pub initial_params: Vec<T>,
    pub out_dir: PathBuf,
}

impl<T> ExperimentOutcome<T> {
    /// Accuracy after the last round, or zeros when no round ran.
    pub fn final_accuracy(&self) -> ModeAccuracy {
        self.logs.last().map(|l| l.accuracy).unwrap_or_default()
    }
}

fn partition_digest(parts: &[ClientPartition]) -> String {
    let json = serde_json::to_vec(parts).expect("partitions serialize");
    hex_digest(<sha2::Sha256 as sha2::Digest>::new_with_prefix(&json))
}

/// Initial global parameters for a configuration.
pub fn initial_params<T: Scalar>(dims: &ModelDims, seeds: &Seeds) -> Vec<T> {
    let joint = JointModuleParams::init(dims, seeds.joint_init);
    let classifier = ClassifierParams::init(dims, seeds.joint_init ^ 0xC1A5_51F1);
    flatten_params(&joint, &classifier)
}

/// Masked, completed, feature-cached clients plus everything the rounds need.
pub struct Prepared<T> {
    pub cfg: ExperimentConfig,
    pub dims: ModelDims,
    pub seeds: Seeds,
    pub clients: Vec<ClientState<T>>,
    pub test: Vec<MultiModalRecord<T>>,
    pub manifest: RunManifest,
}

/// Builds the data pipeline and preprocesses every client once.
pub fn prepare<T: Scalar>(cfg: &ExperimentConfig) -> Result<Prepared<T>> {
    cfg.validate()?;
    let eff = cfg.effective();
    let seeds = eff.seeds();
    let spec = &eff.dataset;
    let dims = ModelDims::new(&eff.model, spec)?;

    let (train, test) = gen_dataset::<T>(spec, eff.n_train, eff.n_test)?;
    let parts = match eff.partition {
        Partition::Iid => partition_iid(&train, eff.num_clients, seeds.partition)?,
        Partition::Noniid => partition_noniid(&train, eff.num_clients, spec.num_classes, seeds.partition)?,
    };
    let mut shards = Vec::with_capacity(parts.len());
    for p in &parts {
        shards.push(apply_missing(&select(&train, p)?, eff.beta, eff.rho, seeds.missing_for(p.client_id))?);
    }
    let masked_hash = {
        let all: Vec<MultiModalRecord<T>> = shards.iter().flatten().cloned().collect();
        records_hash(&all)
    };

    let provider: Box<dyn CompletionProvider<T>> = if eff.uses_completion() {
        Box::new(SyntheticOracle::<T>::new(spec, eff.oracle.clone(), seeds.completion)?)
    } else {
        Box::new(NullProvider)
    };
    let frozen = FrozenEncoders::<T>::new(&dims, seeds.model);
    let clients: Vec<ClientState<T>> = shards
        .into_par_iter()
        .enumerate()
        .map(|(id, shard)| {
            let mut c = ClientState::new(id, shard, &dims);
            c.local_preprocess(provider.as_ref(), spec, &frozen)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;

    let manifest = RunManifest {
        config: cfg.clone(),
        config_hash: cfg.hash_hex(),
        seeds,
        train_hash: records_hash(&train),
        test_hash: records_hash(&test),
        partition_hash: partition_digest(&parts),
        masked_hash,
        param_count: dims.param_count(),
    };
    Ok(Prepared { cfg: eff, dims, seeds, clients, test, manifest })
}

/// Runs every round and writes `metrics.jsonl`, `timing.jsonl`, `run.json` and
/// `final_params.bin` into the resolved output directory.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentOutcome<T>> {
    let out_dir = cfg.resolved_out();
    std::fs::create_dir_all(&out_dir)?;
    let start = Instant::now();
    let Prepared { cfg: eff, dims, seeds, mut clients, test, manifest } = prepare::<T>(cfg)?;
    std::fs::write(out_dir.join(RUN_FILE), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("config {} -> {}", manifest.config_hash, out_dir.display());

    let probe = generate_probe::<T>(&eff.dataset, seeds.probe)?;
    let initial = initial_params::<T>(&dims, &seeds);
    let ctx = RoundContext {
        dims: &dims,
        spec: &eff.dataset,
        train: &eff.train,
        loss: &eff.loss,
        server: &eff.server,
        probe: &probe,
        test: &test,
        total_rounds: eff.rounds,
    };

    let mut metrics = JsonlWriter::create(&out_dir.join(METRICS_FILE))?;
    let mut timing = JsonlWriter::create(&out_dir.join(TIMING_FILE))?;
    let mut global = initial.clone();
    let mut logs = Vec::with_capacity(eff.rounds);
    for round in 0..eff.rounds {
        let (next, log) = run_round(&global, &mut clients, &ctx, round, seeds.round(round))?;
        global = next;
        metrics.append(&MetricsRecord::from(&log))?;
        timing.append(&TimingRecord { round, elapsed_seconds: start.elapsed().as_secs_f64(), round_seconds: log.wall_seconds })?;
        log::info!(
            "round {round}: acc complete {:.4} image {:.4} text {:.4}, loss {:.4}",
            log.accuracy.complete,
            log.accuracy.image_only,
            log.accuracy.text_only,
            log.mean_loss.total
        );
        logs.push(log);
    }
    write_param_file(&out_dir.join(PARAMS_FILE), &global, cfg.hash_u64())?;
    Ok(ExperimentOutcome { manifest, logs, final_params: global, initial_params: initial, out_dir })
}

/// Path of the metrics file inside an output directory.
pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_FILE)
}
