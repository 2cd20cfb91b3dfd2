//! Missing-modality completion.
//!
//! Generation goes through the [`CompletionProvider`] trait. The crate ships
//! [`SyntheticOracle`], which inverts the dataset's known latent structure, and
//! [`NullProvider`], which only inserts placeholders. Prompt strings a real
//! text-to-image or captioning service would receive are still built and
//! logged for every completion.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_placeholder, DatasetSpec, LatentModel, Modality, MultiModalRecord, Token};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `"A photo of {fine}, a kind of {class}, {description}."`
pub fn build_t2i_prompt(fine_label: &str, class_label: &str, description: &str) -> String {
    format!("A photo of {fine_label}, a kind of {class_label}, {description}.")
}

/// `"A {a1} with {a2} {part} and {a3} {part}. {caption}."` — the three answers
/// and the caption joined into the synthetic text.
///
/// `domain` selects the body-part nouns: `bird` uses wings/belly, `flower`
/// uses petals/pistil.
pub fn build_i2t_text(answer1: &str, answer2: &str, answer3: &str, caption: &str, domain: &str) -> Result<String> {
    let (part2, part3) = match domain {
        "bird" => ("wings", "belly"),
        "flower" => ("petals", "pistil"),
        other => return Err(Error::InvalidArgument(format!("unknown domain `{other}`"))),
    };
    Ok(format!("A {answer1} with {answer2} {part2} and {answer3} {part3}. {caption}."))
}

/// Cross-modal generator. Implementations receive records whose absent slot is
/// already emptied, so they cannot read the modality they are asked to produce.
pub trait CompletionProvider<T: Scalar>: Send + Sync {
    fn complete_image(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec) -> Result<Vec<T>>;

    fn complete_text(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec) -> Result<Vec<Token>>;

    /// `false` for providers whose output is a dummy input rather than real
    /// content; such slots keep their presence flag false.
    fn produces_content(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub gen_image_sigma: f64,
    pub token_error_prob: f64,
    /// Fill placeholder tokens from the labelled class prototype when decoding text.
    pub use_label: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { gen_image_sigma: 0.5, token_error_prob: 0.05, use_label: false }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gen_image_sigma >= 0.0 && self.gen_image_sigma.is_finite()) {
            return Err(Error::config("gen_image_sigma", "must be a finite nonnegative real"));
        }
        if !(0.0..=1.0).contains(&self.token_error_prob) {
            return Err(Error::config("token_error_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generator built from the dataset's render map and its pseudo-inverse.
#[derive(Clone, Debug)]
pub struct SyntheticOracle<T> {
    latent: LatentModel<T>,
    /// `d_z × P²`, Moore–Penrose inverse of the render map.
    decoder: Matrix<T>,
    cfg: OracleConfig,
    seed: u64,
}

impl<T: Scalar> SyntheticOracle<T> {
    pub fn new(spec: &DatasetSpec, cfg: OracleConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let latent = LatentModel::<T>::new(spec);
        let decoder = pseudo_inverse(&latent.render)?;
        Ok(Self { latent, decoder, cfg, seed })
    }

    pub fn latent(&self) -> &LatentModel<T> {
        &self.latent
    }

    pub fn decoder(&self) -> &Matrix<T> {
        &self.decoder
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    /// `decoder · image`
    pub fn decode_image(&self, image: &[T]) -> Vec<T> {
        (0..self.decoder.rows()).map(|j| crate::tensor::dot(self.decoder.row(j), image)).collect()
    }

    /// Renders the bin-center latent of the record's text plus Gaussian noise.
    pub fn text_to_image(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec, seed: u64) -> Result<Vec<T>> {
        if record.image_present {
            return Err(Error::record(record.id, "image already present"));
        }
        let text = match (&record.text, record.text_present) {
            (Some(t), true) => t,
            _ => return Err(Error::record(record.id, "text-to-image needs text")),
        };
        let mut latent: Vec<T> = spec.decode_tokens(text);
        if self.cfg.use_label {
            let placeholder = spec.placeholder_token();
            for (j, &t) in text.iter().enumerate().take(spec.latent_dim) {
                if t == placeholder {
                    latent[j] = self.latent.prototypes.get(record.label, j);
                }
            }
        }
        let mut rng = rng_for(seed, Stream::Completion, record.id.wrapping_mul(2));
        let sigma = self.cfg.gen_image_sigma;
        Ok(self
            .latent
            .render_image(&latent)
            .into_iter()
            .map(|p| p + T::of(sigma * rng.sample::<f64, _>(StandardNormal)))
            .collect())
    }

    /// Decodes the image back to latent space, quantizes, and corrupts each
    /// token independently with probability `token_error_prob`.
    pub fn image_to_text(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec, seed: u64) -> Result<Vec<Token>> {
        if record.text_present {
            return Err(Error::record(record.id, "text already present"));
        }
        let image = match (&record.image, record.image_present) {
            (Some(i), true) => i,
            _ => return Err(Error::record(record.id, "image-to-text needs an image")),
        };
        if image.len() != spec.image_len() {
            return Err(Error::Dimension(format!("image has {} pixels, expected {}", image.len(), spec.image_len())));
        }
        let latent = self.decode_image(image);
        let mut rng = rng_for(seed, Stream::Completion, record.id.wrapping_mul(2).wrapping_add(1));
        let q = spec.bins_per_dim;
        Ok(spec
            .quantize(&latent)
            .into_iter()
            .enumerate()
            .map(|(j, t)| {
                if rng.random::<f64>() < self.cfg.token_error_prob {
                    (j * q + rng.random_range(0..q)) as Token
                } else {
                    t
                }
            })
            .collect())
    }
}

impl<T: Scalar> CompletionProvider<T> for SyntheticOracle<T> {
    fn complete_image(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec) -> Result<Vec<T>> {
        self.text_to_image(record, spec, self.seed)
    }

    fn complete_text(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec) -> Result<Vec<Token>> {
        self.image_to_text(record, spec, self.seed)
    }
}

/// Returns the placeholder inputs; used when completion is ablated away.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullProvider;

impl<T: Scalar> CompletionProvider<T> for NullProvider {
    fn complete_image(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec) -> Result<Vec<T>> {
        Ok(make_placeholder(record, Modality::Image, spec)?.image.expect("placeholder fills slot"))
    }

    fn complete_text(&self, record: &MultiModalRecord<T>, spec: &DatasetSpec) -> Result<Vec<Token>> {
        Ok(make_placeholder(record, Modality::Text, spec)?.text.expect("placeholder fills slot"))
    }

    fn produces_content(&self) -> bool {
        false
    }
}

/// Fills every missing modality through `provider`. Complete records pass
/// through untouched; filled slots are flagged synthetic. With a provider that
/// does not produce content the slot holds the dummy input and stays non-present.
pub fn complete_dataset<T: Scalar, P: CompletionProvider<T> + ?Sized>(
    records: &[MultiModalRecord<T>],
    provider: &P,
    spec: &DatasetSpec,
) -> Result<Vec<MultiModalRecord<T>>> {
    let real = provider.produces_content();
    records
        .iter()
        .map(|r| {
            let Some(missing) = r.missing() else {
                return Ok(r.clone());
            };
            let view = r.stripped();
            let mut out = r.clone();
            match missing {
                Modality::Image => {
                    let prompt = build_t2i_prompt(&spec.fine_label(r.label), &spec.class_name(r.label), &r.description);
                    log::debug!("record {}: text-to-image prompt: {prompt}", r.id);
                    let image = provider.complete_image(&view, spec)?;
                    if image.len() != spec.image_len() {
                        return Err(Error::Dimension(format!("provider returned {} pixels", image.len())));
                    }
                    out.image = Some(image);
                    out.image_present = real;
                    out.image_synthetic = real;
                }
                Modality::Text => {
                    let text = provider.complete_text(&view, spec)?;
                    if text.len() != spec.latent_dim {
                        return Err(Error::Dimension(format!("provider returned {} tokens", text.len())));
                    }
                    if real {
                        out.description = synthetic_description(spec, r.label, &text)?;
                        log::debug!("record {}: image-to-text output: {}", r.id, out.description);
                    }
                    out.text = Some(text);
                    out.text_present = real;
                    out.text_synthetic = real;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Caption-style summary of generated tokens in the image-to-text output format.
fn synthetic_description(spec: &DatasetSpec, label: usize, tokens: &[Token]) -> Result<String> {
    let level = |j: usize| -> String {
        match tokens.get(j) {
            Some(&t) if (t as usize) / spec.bins_per_dim == j => spec.level_word(t as usize % spec.bins_per_dim),
            _ => "unknown".to_string(),
        }
    };
    let domain = match spec.domain {
        crate::datagen::Domain::Bird => "bird",
        crate::datagen::Domain::Flower => "flower",
    };
    build_i2t_text(&spec.class_name(label), &level(0), &level(1), &spec.describe_tokens(tokens), domain)
}

fn pseudo_inverse<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let dm = DMatrix::<f64>::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j).as_f64());
    let pinv = dm
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("render map has no pseudo-inverse: {e}")))?;
    Ok(Matrix::from_fn(pinv.nrows(), pinv.ncols(), |i, j| T::of(pinv[(i, j)])))
}
