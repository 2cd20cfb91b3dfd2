//! Ablation grid: every component switch × every seed, tabulated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Ablation, ExperimentConfig};
use super::experiment::run_experiment;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::server::ModeAccuracy;

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub accuracy: ModeAccuracy,
    pub train_hash: String,
    pub partition_hash: String,
    pub masked_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSummary {
    pub rows: Vec<SuiteRow>,
    /// Per-ablation seed-averaged accuracy, in [`Ablation::ALL`] order.
    pub means: Vec<(Ablation, ModeAccuracy)>,
    pub path: PathBuf,
}

impl SuiteSummary {
    pub fn mean(&self, ablation: Ablation) -> Option<ModeAccuracy> {
        self.means.iter().find(|(a, _)| *a == ablation).map(|(_, m)| *m)
    }
}

/// Output directory of one cell.
pub fn cell_dir(out: &Path, ablation: Ablation, seed: u64) -> PathBuf {
    out.join(ablation.name()).join(format!("seed_{seed}"))
}

/// Runs `ablations × seeds` from `base` (cells concurrently, each in its own
/// directory) and writes `summary.csv` with one row per cell plus one mean row
/// per ablation.
pub fn run_suite<T: Scalar>(base: &ExperimentConfig, ablations: &[Ablation], seeds: &[u64], out: &Path) -> Result<SuiteSummary> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    if ablations.is_empty() {
        return Err(Error::config("ablation", "need at least one ablation"));
    }
    std::fs::create_dir_all(out)?;
    let cells: Vec<(Ablation, u64)> = ablations.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let rows: Vec<SuiteRow> = cells
        .par_iter()
        .map(|&(ablation, seed)| {
            let cfg = ExperimentConfig { ablation, master_seed: seed, out: cell_dir(out, ablation, seed), ..base.clone() };
            let outcome = run_experiment::<T>(&cfg)?;
            Ok(SuiteRow {
                ablation,
                seed,
                accuracy: outcome.final_accuracy(),
                train_hash: outcome.manifest.train_hash,
                partition_hash: outcome.manifest.partition_hash,
                masked_hash: outcome.manifest.masked_hash,
            })
        })
        .collect::<Result<_>>()?;

    let means: Vec<(Ablation, ModeAccuracy)> = ablations
        .iter()
        .map(|&a| {
            let sel: Vec<&SuiteRow> = rows.iter().filter(|r| r.ablation == a).collect();
            let n = sel.len() as f64;
            let avg = |f: fn(&ModeAccuracy) -> f64| sel.iter().map(|r| f(&r.accuracy)).sum::<f64>() / n;
            (a, ModeAccuracy { complete: avg(|m| m.complete), image_only: avg(|m| m.image_only), text_only: avg(|m| m.text_only) })
        })
        .collect();

    let mut csv = String::from("ablation,seed,complete,image_only,text_only,train_hash,partition_hash,masked_hash\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{},{},{}",
            r.ablation, r.seed, r.accuracy.complete, r.accuracy.image_only, r.accuracy.text_only, r.train_hash, r.partition_hash, r.masked_hash
        );
    }
    for (a, m) in &means {
        let _ = writeln!(csv, "{a},mean,{:.6},{:.6},{:.6},,,", m.complete, m.image_only, m.text_only);
    }
    let path = out.join(SUMMARY_FILE);
    std::fs::write(&path, csv)?;
    Ok(SuiteSummary { rows, means, path })
}

/// The full grid over every ablation.
pub fn run_ablation_suite<T: Scalar>(base: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<SuiteSummary> {
    run_suite::<T>(base, &Ablation::ALL, seeds, out)
}
