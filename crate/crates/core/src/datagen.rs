//! Procedural paired image/text dataset with a known latent structure.
//!
//! Each class `c` owns a prototype latent `z_c ∈ R^{d_z}`. An instance draws
//! `u = z_c + σ·ε`, renders an image `W_img·u + σ_img·ε'` on a `P×P` grid and a
//! text of `d_z` tokens, one per latent attribute: token `j` is `j·Q + bin(u_j)`
//! with `Q` equal-width bins over `[-3, 3]`. Vocabulary layout:
//!
//! | ids                          | meaning                 |
//! |------------------------------|-------------------------|
//! | `0 .. d_z·Q`                 | attribute/bin tokens    |
//! | `d_z·Q .. d_z·Q + C`         | class-name tokens       |
//! | `d_z·Q + C`                  | placeholder token       |

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub type Token = u32;

const BIN_LO: f64 = -3.0;
const BIN_HI: f64 = 3.0;

/// Which coarse category the synthetic data imitates; selects the caption template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    #[default]
    Bird,
    Flower,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bird" => Ok(Domain::Bird),
            "flower" => Ok(Domain::Flower),
            other => Err(Error::InvalidArgument(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub grid_side: usize,
    pub bins_per_dim: usize,
    pub intra_class_sigma: f64,
    pub image_noise_sigma: f64,
    pub token_dropout_prob: f64,
    pub dataset_seed: u64,
    pub domain: Domain,
    /// Coarse names per class; empty means "use the domain name".
    pub class_names: Vec<String>,
    /// Fine-grained names per class; empty means `"category {c}"`.
    pub fine_labels: Vec<String>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            latent_dim: 8,
            grid_side: 8,
            bins_per_dim: 5,
            intra_class_sigma: 0.3,
            image_noise_sigma: 0.1,
            token_dropout_prob: 0.1,
            dataset_seed: 0,
            domain: Domain::Bird,
            class_names: Vec::new(),
            fine_labels: Vec::new(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("latent_dim", self.latent_dim),
            ("grid_side", self.grid_side),
            ("bins_per_dim", self.bins_per_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [("intra_class_sigma", self.intra_class_sigma), ("image_noise_sigma", self.image_noise_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite nonnegative real, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.token_dropout_prob) {
            return Err(Error::config("token_dropout_prob", "must lie in [0, 1]"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::config("class_names", "needs one entry per class"));
        }
        if !self.fine_labels.is_empty() && self.fine_labels.len() != self.num_classes {
            return Err(Error::config("fine_labels", "needs one entry per class"));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn vocab_size(&self) -> usize {
        self.latent_dim * self.bins_per_dim + self.num_classes + 1
    }

    pub fn placeholder_token(&self) -> Token {
        (self.latent_dim * self.bins_per_dim + self.num_classes) as Token
    }

    pub fn class_token(&self, class: usize) -> Token {
        (self.latent_dim * self.bins_per_dim + class) as Token
    }

    pub fn bin_width(&self) -> f64 {
        (BIN_HI - BIN_LO) / self.bins_per_dim as f64
    }

    /// Bin index of a latent coordinate, clamped into range.
    pub fn bin_of(&self, value: f64) -> usize {
        let b = ((value - BIN_LO) / self.bin_width()).floor();
        b.clamp(0.0, (self.bins_per_dim - 1) as f64) as usize
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        BIN_LO + (bin as f64 + 0.5) * self.bin_width()
    }

    pub fn class_name(&self, class: usize) -> String {
        match self.class_names.get(class) {
            Some(n) => n.clone(),
            None => match self.domain {
                Domain::Bird => "bird".to_string(),
                Domain::Flower => "flower".to_string(),
            },
        }
    }

    pub fn fine_label(&self, class: usize) -> String {
        self.fine_labels.get(class).cloned().unwrap_or_else(|| format!("category {class}"))
    }

    /// Tokens for a latent vector without dropout.
    pub fn quantize<T: Scalar>(&self, latent: &[T]) -> Vec<Token> {
        latent
            .iter()
            .enumerate()
            .map(|(j, &u)| (j * self.bins_per_dim + self.bin_of(u.as_f64())) as Token)
            .collect()
    }

    /// Bin-center latent for a token sequence; placeholder or foreign tokens decode to 0.
    pub fn decode_tokens<T: Scalar>(&self, tokens: &[Token]) -> Vec<T> {
        let mut out = vec![T::zero(); self.latent_dim];
        for (j, &t) in tokens.iter().enumerate().take(self.latent_dim) {
            let t = t as usize;
            let lo = j * self.bins_per_dim;
            if (lo..lo + self.bins_per_dim).contains(&t) {
                out[j] = T::of(self.bin_center(t - lo));
            }
        }
        out
    }

    /// Human-readable attribute summary of a token sequence.
    pub fn describe_tokens(&self, tokens: &[Token]) -> String {
        let words: Vec<String> = tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let t = t as usize;
                let lo = j * self.bins_per_dim;
                if (lo..lo + self.bins_per_dim).contains(&t) {
                    format!("attribute {j} {}", self.level_word(t - lo))
                } else {
                    format!("attribute {j} unknown")
                }
            })
            .collect();
        words.join(", ")
    }

    pub fn level_word(&self, bin: usize) -> String {
        const FIVE: [&str; 5] = ["very low", "low", "medium", "high", "very high"];
        if self.bins_per_dim == 5 {
            FIVE[bin].to_string()
        } else {
            format!("level {bin}")
        }
    }
}

/// Class prototypes and the image render map, a pure function of `dataset_seed`.
#[derive(Clone, Debug)]
pub struct LatentModel<T> {
    /// `C × d_z`
    pub prototypes: Matrix<T>,
    /// `P² × d_z`
    pub render: Matrix<T>,
}

impl<T: Scalar> LatentModel<T> {
    pub fn new(spec: &DatasetSpec) -> Self {
        let mut rng = rng_for(spec.dataset_seed, Stream::Dataset, 0);
        let prototypes = Matrix::from_fn(spec.num_classes, spec.latent_dim, |_, _| {
            T::of(rng.sample::<f64, _>(StandardNormal))
        });
        let mut rng = rng_for(spec.dataset_seed, Stream::Dataset, 1);
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let render = Matrix::from_fn(spec.image_len(), spec.latent_dim, |_, _| {
            T::of(rng.sample::<f64, _>(StandardNormal) * scale)
        });
        Self { prototypes, render }
    }

    /// `W_img · u`
    pub fn render_image(&self, latent: &[T]) -> Vec<T> {
        (0..self.render.rows()).map(|p| crate::tensor::dot(self.render.row(p), latent)).collect()
    }

    /// Index of the prototype nearest (Euclidean) to `latent`.
    pub fn nearest_prototype(&self, latent: &[T]) -> usize {
        let mut best = (0, T::infinity());
        for c in 0..self.prototypes.rows() {
            let d: T = self.prototypes.row(c).iter().zip(latent).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MultiModalRecord<T> {
    pub id: u64,
    pub label: usize,
    pub image_present: bool,
    pub text_present: bool,
    pub image_synthetic: bool,
    pub text_synthetic: bool,
    /// `P²` pixels, row-major. May hold a placeholder while `image_present` is false.
    pub image: Option<Vec<T>>,
    /// `d_z` tokens. May hold a placeholder while `text_present` is false.
    pub text: Option<Vec<Token>>,
    pub description: String,
}

impl<T: Scalar> MultiModalRecord<T> {
    pub fn is_complete(&self) -> bool {
        self.image_present && self.text_present
    }

    pub fn has_slot(&self, m: Modality) -> bool {
        match m {
            Modality::Image => self.image.is_some(),
            Modality::Text => self.text.is_some(),
        }
    }

    pub fn is_present(&self, m: Modality) -> bool {
        match m {
            Modality::Image => self.image_present,
            Modality::Text => self.text_present,
        }
    }

    /// Missing modality of an incomplete record, if any.
    pub fn missing(&self) -> Option<Modality> {
        if !self.image_present {
            Some(Modality::Image)
        } else if !self.text_present {
            Some(Modality::Text)
        } else {
            None
        }
    }

    /// Copy with every non-present slot emptied.
    pub fn stripped(&self) -> Self {
        let mut r = self.clone();
        if !r.image_present {
            r.image = None;
        }
        if !r.text_present {
            r.text = None;
        }
        r
    }

    pub fn check_invariants(&self, num_classes: usize) -> Result<()> {
        if !(self.image_present || self.text_present) {
            return Err(Error::record(self.id, "no modality present"));
        }
        if (self.image_synthetic && !self.image_present) || (self.text_synthetic && !self.text_present) {
            return Err(Error::record(self.id, "synthetic flag without presence"));
        }
        if (self.image_present && self.image.is_none()) || (self.text_present && self.text.is_none()) {
            return Err(Error::record(self.id, "present modality has no data"));
        }
        if self.label >= num_classes {
            return Err(Error::record(self.id, format!("label {} out of range", self.label)));
        }
        Ok(())
    }
}

fn gen_records<T: Scalar>(spec: &DatasetSpec, latent: &LatentModel<T>, n: usize, stream_index: u64, id_base: u64) -> Vec<MultiModalRecord<T>> {
    let mut rng = rng_for(spec.dataset_seed, Stream::Dataset, stream_index);
    let placeholder = spec.placeholder_token();
    (0..n)
        .map(|i| {
            let label = rng.random_range(0..spec.num_classes);
            let u: Vec<T> = latent
                .prototypes
                .row(label)
                .iter()
                .map(|&z| z + T::of(spec.intra_class_sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let image: Vec<T> = latent
                .render_image(&u)
                .into_iter()
                .map(|p| p + T::of(spec.image_noise_sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let text: Vec<Token> = spec
                .quantize(&u)
                .into_iter()
                .map(|t| if rng.random::<f64>() < spec.token_dropout_prob { placeholder } else { t })
                .collect();
            MultiModalRecord {
                id: id_base + i as u64,
                label,
                image_present: true,
                text_present: true,
                image_synthetic: false,
                text_synthetic: false,
                description: spec.describe_tokens(&text),
                image: Some(image),
                text: Some(text),
            }
        })
        .collect()
}

/// Offset separating test ids from train ids.
pub const TEST_ID_BASE: u64 = 1 << 32;

/// `(train, test)` record sets.
pub type Split<T> = (Vec<MultiModalRecord<T>>, Vec<MultiModalRecord<T>>);

/// Generates `(train, test)`; all records complete, deterministic given `spec` and the sizes.
pub fn gen_dataset<T: Scalar>(spec: &DatasetSpec, n_train: usize, n_test: usize) -> Result<Split<T>> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("n_train and n_test must be positive".into()));
    }
    let latent = LatentModel::new(spec);
    let train = gen_records(spec, &latent, n_train, 2, 0);
    let test = gen_records(spec, &latent, n_test, 3, TEST_ID_BASE);
    Ok((train, test))
}

/// One probe record per class, rendered from the noise-free class latent.
pub(crate) fn gen_prototype_records<T: Scalar>(spec: &DatasetSpec, latent: &LatentModel<T>, seed: u64) -> Vec<MultiModalRecord<T>> {
    let mut rng = rng_for(seed, Stream::Probe, 0);
    (0..spec.num_classes)
        .map(|c| {
            let z = latent.prototypes.row(c);
            let image: Vec<T> = latent
                .render_image(z)
                .into_iter()
                .map(|p| p + T::of(spec.image_noise_sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let text = spec.quantize(z);
            MultiModalRecord {
                id: c as u64,
                label: c,
                image_present: true,
                text_present: true,
                image_synthetic: false,
                text_synthetic: false,
                description: spec.describe_tokens(&text),
                image: Some(image),
                text: Some(text),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub record_ids: Vec<u64>,
}

/// Balanced random split; sizes differ by at most one.
pub fn partition_iid<T: Scalar>(records: &[MultiModalRecord<T>], num_clients: usize, seed: u64) -> Result<Vec<ClientPartition>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let mut ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    ids.shuffle(&mut rng_for(seed, Stream::Partition, 0));
    let base = ids.len() / num_clients;
    let extra = ids.len() % num_clients;
    let mut out = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let size = base + usize::from(k < extra);
        out.push(ClientPartition { client_id: k, record_ids: ids[start..start + size].to_vec() });
        start += size;
    }
    Ok(out)
}

/// Class-shard split: the `C` classes are shuffled and dealt round-robin, so
/// client `k` owns shards `k, k+N, k+2N, …`. When `N` does not divide `C` the
/// first `C mod N` clients get one extra shard.
pub fn partition_noniid<T: Scalar>(records: &[MultiModalRecord<T>], num_clients: usize, num_classes: usize, seed: u64) -> Result<Vec<ClientPartition>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut rng_for(seed, Stream::Partition, 1));
    let mut owner = vec![0usize; num_classes];
    for (pos, &c) in classes.iter().enumerate() {
        owner[c] = pos % num_clients;
    }
    let mut out: Vec<ClientPartition> = (0..num_clients).map(|k| ClientPartition { client_id: k, record_ids: Vec::new() }).collect();
    for r in records {
        if r.label >= num_classes {
            return Err(Error::record(r.id, "label out of range"));
        }
        out[owner[r.label]].record_ids.push(r.id);
    }
    Ok(out)
}

/// Records of `partition`, in partition order.
pub fn select<T: Scalar>(records: &[MultiModalRecord<T>], partition: &ClientPartition) -> Result<Vec<MultiModalRecord<T>>> {
    let index: std::collections::HashMap<u64, &MultiModalRecord<T>> = records.iter().map(|r| (r.id, r)).collect();
    partition
        .record_ids
        .iter()
        .map(|id| index.get(id).map(|r| (*r).clone()).ok_or_else(|| Error::record(*id, "not in record set")))
        .collect()
}

/// Makes exactly `round(beta·n)` records incomplete; `round(rho·k)` of those lose
/// the image and the rest lose the text.
pub fn apply_missing<T: Scalar>(records: &[MultiModalRecord<T>], beta: f64, image_ratio: f64, seed: u64) -> Result<Vec<MultiModalRecord<T>>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !(0.0..=1.0).contains(&image_ratio) {
        return Err(Error::InvalidArgument(format!("image ratio must lie in [0, 1], got {image_ratio}")));
    }
    if let Some(r) = records.iter().find(|r| !r.is_complete()) {
        return Err(Error::record(r.id, "already incomplete"));
    }
    let n = records.len();
    let k = (beta * n as f64).round() as usize;
    let k_image = (image_ratio * k as f64).round() as usize;

    let mut rng = rng_for(seed, Stream::Missing, 0);
    let mut chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
    chosen.shuffle(&mut rng);

    let mut out = records.to_vec();
    for (pos, &idx) in chosen.iter().enumerate() {
        let r = &mut out[idx];
        if pos < k_image {
            r.image = None;
            r.image_present = false;
            r.image_synthetic = false;
        } else {
            r.text = None;
            r.text_present = false;
            r.text_synthetic = false;
            r.description.clear();
        }
    }
    Ok(out)
}

/// Base seed for image placeholders; the per-record stream index is the record id.
const PLACEHOLDER_SEED: u64 = 0x5EED_D0D0;

/// Unit-variance Gaussian grid, a pure function of the record id.
pub fn placeholder_image<T: Scalar>(spec: &DatasetSpec, record_id: u64) -> Vec<T> {
    let mut rng = rng_for(PLACEHOLDER_SEED, Stream::Placeholder, record_id);
    (0..spec.image_len()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

pub fn placeholder_text(spec: &DatasetSpec) -> Vec<Token> {
    vec![spec.placeholder_token(); spec.latent_dim]
}

/// Fills the absent `modality` with its dummy input. The presence flag stays false.
pub fn make_placeholder<T: Scalar>(record: &MultiModalRecord<T>, modality: Modality, spec: &DatasetSpec) -> Result<MultiModalRecord<T>> {
    if record.is_present(modality) {
        return Err(Error::record(record.id, format!("{modality:?} already present")));
    }
    let mut r = record.clone();
    match modality {
        Modality::Image => r.image = Some(placeholder_image(spec, record.id)),
        Modality::Text => r.text = Some(placeholder_text(spec)),
    }
    Ok(r)
}

/// Fills every absent slot with its placeholder.
pub fn fill_placeholders<T: Scalar>(record: &MultiModalRecord<T>, spec: &DatasetSpec) -> MultiModalRecord<T> {
    let mut r = record.clone();
    if !r.image_present && r.image.is_none() {
        r.image = Some(placeholder_image(spec, r.id));
    }
    if !r.text_present && r.text.is_none() {
        r.text = Some(placeholder_text(spec));
    }
    r
}

pub fn label_set(records: &[MultiModalRecord<impl Scalar>]) -> BTreeSet<usize> {
    records.iter().map(|r| r.label).collect()
}

/// Writes one JSON object per line.
pub fn write_records<T: Scalar>(path: &Path, records: &[MultiModalRecord<T>]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<T: Scalar>(path: &Path) -> Result<Vec<MultiModalRecord<T>>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Hex SHA-256 of the records' line-delimited serialization.
pub fn records_hash<T: Scalar>(records: &[MultiModalRecord<T>]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("records serialize"));
        h.update(b"\n");
    }
    hex_digest(h)
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
