//! Server side: probe set, CKA similarity graph, weighted aggregation, rounds.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{evaluate, ClientState, ClientUpdate, EvalMode, TrainConfig};
use crate::datagen::{gen_prototype_records, DatasetSpec, LatentModel, MultiModalRecord};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::model::{joint_embeddings, load_params, ModelDims};
use crate::optim::scheduled_lr;
use crate::rng::{derive_seed, rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Self-similarity below this marks a representation as degenerate.
pub const CKA_DEGENERATE_EPS: f64 = 1e-12;

/// Server-generated complete pairs, one per class, used to elicit comparable
/// representations from every uploaded model.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet<T> {
    pub records: Vec<MultiModalRecord<T>>,
}

impl<T> ProbeSet<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One record per class from the noise-free class latent, through the usual renderer.
pub fn generate_probe<T: Scalar>(spec: &DatasetSpec, probe_seed: u64) -> Result<ProbeSet<T>> {
    spec.validate()?;
    let latent = LatentModel::new(spec);
    Ok(ProbeSet { records: gen_prototype_records(spec, &latent, probe_seed) })
}

/// Which output of a model is compared across clients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    #[default]
    Joint,
    Logits,
}

/// Row `i` is the chosen representation of probe record `i`.
pub fn model_representations<T: Scalar>(
    flat: &[T],
    dims: &ModelDims,
    probe: &ProbeSet<T>,
    mode: RepresentationMode,
) -> Result<Matrix<T>> {
    let (joint, classifier) = load_params(flat, dims)?;
    let emb = joint_embeddings(dims, &probe.records, &joint)?;
    Ok(match mode {
        RepresentationMode::Joint => emb,
        RepresentationMode::Logits => classifier.logits(&emb),
    })
}

/// Linear centered kernel alignment between two `m × ·` representation matrices.
///
/// Uses `tr(K_X H K_Y H) = ‖X_cᵀ Y_c‖²_F` with column-centered `X_c`, `Y_c`;
/// the normalization constants cancel in the ratio. Returns 0 when either
/// self-term is below [`CKA_DEGENERATE_EPS`].
pub fn cka<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<f64> {
    let m = x.rows();
    if y.rows() != m {
        return Err(Error::Dimension(format!("cka needs equal row counts, got {m} and {}", y.rows())));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("cka needs at least 2 rows, got {m}")));
    }
    let xc = x.cast::<f64>().center_columns();
    let yc = y.cast::<f64>().center_columns();
    let xy = xc.matmul_tn(&yc).frobenius_sq();
    let xx = xc.matmul_tn(&xc).frobenius_sq();
    let yy = yc.matmul_tn(&yc).frobenius_sq();
    if xx < CKA_DEGENERATE_EPS || yy < CKA_DEGENERATE_EPS {
        return Ok(0.0);
    }
    Ok(xy / (xx.sqrt() * yy.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    /// Pairwise CKA, `K × K`, symmetric.
    pub similarity: Vec<Vec<f64>>,
    /// `s_i = Σ_{j≠i} S_ij`.
    pub importance: Vec<f64>,
    /// Softmax of `importance`.
    pub gamma: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn build_graph<T: Scalar>(reps: &[Matrix<T>]) -> Result<SimilarityGraph> {
    let k = reps.len();
    if k == 0 {
        return Err(Error::InvalidArgument("similarity graph needs at least one representation".into()));
    }
    let mut s = vec![vec![0.0; k]; k];
    for i in 0..k {
        s[i][i] = cka(&reps[i], &reps[i])?;
        for j in i + 1..k {
            let v = cka(&reps[i], &reps[j])?;
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    let importance: Vec<f64> = (0..k).map(|i| (0..k).filter(|&j| j != i).map(|j| s[i][j]).sum()).collect();
    let gamma = softmax(&importance);
    Ok(SimilarityGraph { similarity: s, importance, gamma })
}

/// `Σ_i γ_i w_i`, summed in update order. A coordinate on which every update
/// agrees returns that common value exactly.
pub fn aggregate<T: Scalar>(updates: &[ClientUpdate<T>], gamma: &[f64]) -> Result<Vec<T>> {
    let vectors: Vec<&[T]> = updates.iter().map(|u| u.params.as_slice()).collect();
    weighted_sum(&vectors, gamma)
}

/// Equal-weight average, through the same summation as [`aggregate`].
pub fn fedavg<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<Vec<T>> {
    aggregate(updates, &uniform_weights(updates.len()))
}

pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

pub fn weighted_sum<T: Scalar>(vectors: &[&[T]], gamma: &[f64]) -> Result<Vec<T>> {
    let Some(first) = vectors.first() else {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    };
    if gamma.len() != vectors.len() {
        return Err(Error::Dimension(format!("{} weights for {} updates", gamma.len(), vectors.len())));
    }
    let n = first.len();
    if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != n) {
        return Err(Error::Dimension(format!("update {i} has {} parameters, expected {n}", v.len())));
    }
    let weights: Vec<T> = gamma.iter().map(|&g| T::of(g)).collect();
    Ok((0..n)
        .map(|p| {
            let x0 = first[p];
            if vectors.iter().all(|v| v[p] == x0) {
                return x0;
            }
            let mut acc = T::zero();
            for (v, &g) in vectors.iter().zip(&weights) {
                acc += g * v[p];
            }
            acc
        })
        .collect())
}

/// `ceil(ratio·N)` distinct client ids, uniform without replacement, ascending.
pub fn sample_clients(num_clients: usize, ratio: f64, round_seed: u64) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::config("num_clients", "must be at least 1"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config("sample_ratio", format!("must lie in (0, 1], got {ratio}")));
    }
    // The epsilon keeps e.g. 0.7·10 = 7.000000000000001 from rounding up to 8.
    let k = ((ratio * num_clients as f64 - 1e-9).ceil() as usize).clamp(1, num_clients);
    let mut rng = rng_for(round_seed, Stream::Sampling, 0);
    let mut ids = index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Softmax of summed CKA similarity.
    #[default]
    Similarity,
    /// Equal weights (FedAvg).
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub sample_ratio: f64,
    pub representation: RepresentationMode,
    pub aggregation: AggregationMode,
    /// Draw a fresh probe set every round instead of one per experiment.
    pub regenerate_probe: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            sample_ratio: 0.7,
            representation: RepresentationMode::Joint,
            aggregation: AggregationMode::Similarity,
            regenerate_probe: false,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::config("sample_ratio", format!("must lie in (0, 1], got {}", self.sample_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub complete: f64,
    pub image_only: f64,
    pub text_only: f64,
}

impl ModeAccuracy {
    pub fn get(&self, mode: EvalMode) -> f64 {
        match mode {
            EvalMode::Complete => self.complete,
            EvalMode::ImageOnly => self.image_only,
            EvalMode::TextOnly => self.text_only,
        }
    }
}

/// Everything a round needs besides the mutable client states.
#[derive(Clone, Debug)]
pub struct RoundContext<'a, T> {
    pub dims: &'a ModelDims,
    pub spec: &'a DatasetSpec,
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub server: &'a ServerConfig,
    pub probe: &'a ProbeSet<T>,
    pub test: &'a [MultiModalRecord<T>],
    pub total_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub learning_rate: f64,
    pub sampled: Vec<usize>,
    pub gamma: Vec<f64>,
    pub importance: Vec<f64>,
    pub similarity: Vec<Vec<f64>>,
    pub accuracy: ModeAccuracy,
    pub client_loss: Vec<LossBreakdown>,
    pub mean_loss: LossBreakdown,
    /// Wall-clock seconds for the round; excluded from equality-sensitive outputs.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Sample, broadcast, train locally, weight by probe similarity, aggregate, evaluate.
/// Any client failure aborts the round before aggregation.
pub fn run_round<T: Scalar>(
    global: &[T],
    clients: &mut [ClientState<T>],
    ctx: &RoundContext<'_, T>,
    round: usize,
    round_seed: u64,
) -> Result<(Vec<T>, RoundLog)> {
    let start = Instant::now();
    let sampled = sample_clients(clients.len(), ctx.server.sample_ratio, round_seed)?;
    let lr = scheduled_lr(ctx.train.learning_rate, ctx.train.scheduler, round, ctx.train.warmup_rounds, ctx.total_rounds);
    let updates: Vec<ClientUpdate<T>> = clients
        .par_iter_mut()
        .enumerate()
        .filter(|(i, _)| sampled.binary_search(i).is_ok())
        .map(|(_, c)| c.local_train(global, ctx.dims, ctx.train, ctx.loss, lr, round, round_seed))
        .collect::<Result<_>>()?;

    let graph = match ctx.server.aggregation {
        AggregationMode::Uniform => {
            let k = updates.len();
            SimilarityGraph { similarity: Vec::new(), importance: vec![0.0; k], gamma: uniform_weights(k) }
        }
        AggregationMode::Similarity => {
            let fresh;
            let probe = if ctx.server.regenerate_probe {
                fresh = generate_probe(ctx.spec, derive_seed(round_seed, Stream::Probe, 0))?;
                &fresh
            } else {
                ctx.probe
            };
            let reps: Vec<Matrix<T>> = updates
                .par_iter()
                .map(|u| model_representations(&u.params, ctx.dims, probe, ctx.server.representation))
                .collect::<Result<_>>()?;
            build_graph(&reps)?
        }
    };
    let new_global = aggregate(&updates, &graph.gamma)?;
    if new_global.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("round {round}: aggregated parameters are not finite")));
    }
    let accuracy = ModeAccuracy {
        complete: evaluate(&new_global, ctx.dims, ctx.spec, ctx.test, EvalMode::Complete)?,
        image_only: evaluate(&new_global, ctx.dims, ctx.spec, ctx.test, EvalMode::ImageOnly)?,
        text_only: evaluate(&new_global, ctx.dims, ctx.spec, ctx.test, EvalMode::TextOnly)?,
    };
    let client_loss: Vec<LossBreakdown> = updates.iter().map(|u| u.loss).collect();
    let log = RoundLog {
        round,
        learning_rate: lr,
        sampled,
        gamma: graph.gamma,
        importance: graph.importance,
        similarity: graph.similarity,
        accuracy,
        mean_loss: LossBreakdown::mean(&client_loss),
        client_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((new_global, log))
}
