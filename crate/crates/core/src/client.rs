//! Client lifecycle: one-off completion, local training, evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::completion::{complete_dataset, CompletionProvider};
use crate::datagen::{fill_placeholders, placeholder_image, placeholder_text, DatasetSpec, MultiModalRecord};
use crate::error::{Error, Result};
use crate::losses::{total_on_tape, LossBreakdown, LossConfig};
use crate::model::{flatten_grads, forward_batch_on_tape, joint_embeddings, load_params, FrozenEncoders, FrozenFeatures, ModelDims};
use crate::optim::{AdamWParams, AdamWState, SchedulerMode};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Desk-scale 3; the full-scale setting is 10.
    pub local_epochs: usize,
    /// Desk-scale 16; the full-scale setting is 64.
    pub batch_size: usize,
    /// Desk-scale 2e-3; full-scale runs used 2e-4 (2e-5 in some reports).
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerMode,
    pub warmup_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 3,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            scheduler: SchedulerMode::WarmupCosine,
            warmup_rounds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite nonnegative real"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be a finite nonnegative real"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams { weight_decay: self.weight_decay, ..AdamWParams::default() }
    }
}

/// What a client uploads after a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub round: usize,
    pub params: Vec<T>,
    pub num_samples: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub client_id: usize,
    records: Vec<MultiModalRecord<T>>,
    features: Option<FrozenFeatures<T>>,
    pub optimizer: AdamWState<T>,
    /// Parameters after the most recent local training.
    pub params: Vec<T>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(client_id: usize, records: Vec<MultiModalRecord<T>>, dims: &ModelDims) -> Self {
        Self {
            client_id,
            records,
            features: None,
            optimizer: AdamWState::new(dims.param_count()),
            params: Vec::new(),
        }
    }

    pub fn records(&self) -> &[MultiModalRecord<T>] {
        &self.records
    }

    pub fn is_preprocessed(&self) -> bool {
        self.features.is_some()
    }

    /// Completes missing modalities once and caches frozen-encoder features.
    pub fn local_preprocess<P: CompletionProvider<T> + ?Sized>(&mut self, provider: &P, spec: &DatasetSpec, frozen: &FrozenEncoders<T>) -> Result<()> {
        if self.is_preprocessed() {
            return Err(Error::InvalidArgument(format!("client {} already preprocessed", self.client_id)));
        }
        let completed = complete_dataset(&self.records, provider, spec)?;
        self.records = completed.iter().map(|r| fill_placeholders(r, spec)).collect();
        self.features = Some(frozen.features(&self.records)?);
        Ok(())
    }

    /// Loads `global`, runs the configured epochs of mini-batch AdamW on the
    /// local objective, and returns the upload. Deterministic in
    /// `(round_seed, client_id)`; terminal batches smaller than two are dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn local_train(
        &mut self,
        global: &[T],
        dims: &ModelDims,
        train: &TrainConfig,
        loss_cfg: &LossConfig,
        lr: f64,
        round: usize,
        round_seed: u64,
    ) -> Result<ClientUpdate<T>> {
        let features = self
            .features
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("client {} not preprocessed", self.client_id)))?;
        if global.len() != dims.param_count() {
            return Err(Error::Dimension(format!("global vector has {} entries, expected {}", global.len(), dims.param_count())));
        }
        let hp = train.adamw();
        let mut flat = global.to_vec();
        let mut losses = Vec::new();
        let labels_all: Vec<usize> = self.records.iter().map(|r| r.label).collect();
        let mut order: Vec<usize> = (0..self.records.len()).collect();

        for epoch in 0..train.local_epochs {
            let mut rng = rng_for(round_seed, Stream::Shuffle, ((self.client_id as u64) << 20) | epoch as u64);
            order.shuffle(&mut rng);
            for batch in order.chunks(train.batch_size) {
                if batch.len() < 2 {
                    continue;
                }
                let (joint, classifier) = load_params(&flat, dims)?;
                let mut tape = Tape::new();
                let jv = joint.on_tape(&mut tape);
                let cv = classifier.on_tape(&mut tape);
                let bv = forward_batch_on_tape(&mut tape, dims, &self.records, features, batch, &jv, &cv)?;
                let labels: Vec<usize> = batch.iter().map(|&i| labels_all[i]).collect();
                let (total, breakdown) = total_on_tape(&mut tape, bv.image, bv.text, bv.joint, bv.logits, &labels, &classifier, loss_cfg)?;
                if !breakdown.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "client {} round {round} epoch {epoch}: sup={} mcm={} ram={} total={}",
                        self.client_id, breakdown.sup, breakdown.mcm, breakdown.ram, breakdown.total
                    )));
                }
                let grads = flatten_grads(&tape.backward(total), &jv, &cv);
                self.optimizer.step(&mut flat, &grads, lr, &hp);
                losses.push(breakdown);
            }
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("client {} round {round}: parameters diverged", self.client_id)));
        }
        self.params = flat.clone();
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            params: flat,
            num_samples: self.records.len(),
            loss: LossBreakdown::mean(&losses),
        })
    }

    /// Per-epoch mean losses of a training pass; used by tests and diagnostics.
    #[allow(clippy::too_many_arguments)]
    pub fn epoch_losses(
        &mut self,
        global: &[T],
        dims: &ModelDims,
        train: &TrainConfig,
        loss_cfg: &LossConfig,
        lr: f64,
        round_seed: u64,
    ) -> Result<Vec<f64>> {
        let single = TrainConfig { local_epochs: 1, ..train.clone() };
        let mut params = global.to_vec();
        let mut out = Vec::with_capacity(train.local_epochs);
        for epoch in 0..train.local_epochs {
            let seed = crate::rng::derive_seed(round_seed, Stream::Round, epoch as u64);
            let upd = self.local_train(&params, dims, &single, loss_cfg, lr, epoch, seed)?;
            out.push(upd.loss.total);
            params = upd.params;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Complete,
    ImageOnly,
    TextOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Complete, EvalMode::ImageOnly, EvalMode::TextOnly];
}

/// Test view of a record under `mode`: the dropped modality becomes its placeholder.
pub fn eval_view<T: Scalar>(record: &MultiModalRecord<T>, mode: EvalMode, spec: &DatasetSpec) -> MultiModalRecord<T> {
    let mut r = record.clone();
    match mode {
        EvalMode::Complete => {}
        EvalMode::ImageOnly => {
            r.text = Some(placeholder_text(spec));
            r.text_present = false;
            r.text_synthetic = false;
        }
        EvalMode::TextOnly => {
            r.image = Some(placeholder_image(spec, r.id));
            r.image_present = false;
            r.image_synthetic = false;
        }
    }
    fill_placeholders(&r, spec)
}

const EVAL_CHUNK: usize = 64;

/// Top-1 accuracy of the flat model on `test` under `mode`.
pub fn evaluate<T: Scalar>(flat: &[T], dims: &ModelDims, spec: &DatasetSpec, test: &[MultiModalRecord<T>], mode: EvalMode) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let (joint, classifier) = load_params(flat, dims)?;
    let views: Vec<MultiModalRecord<T>> = test.iter().map(|r| eval_view(r, mode, spec)).collect();
    let correct: Result<Vec<usize>> = views
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let emb = joint_embeddings(dims, chunk, &joint)?;
            let logits = classifier.logits(&emb);
            Ok((0..chunk.len()).filter(|&i| argmax(logits.row(i)) == chunk[i].label).count())
        })
        .collect();
    Ok(correct?.into_iter().sum::<usize>() as f64 / test.len() as f64)
}

/// Index of the first maximal entry.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
