//! Encoders, cross-modal joint encoder, and classifier.
//!
//! Three embeddings live in one `d_latent` space:
//!
//! * `X^I = f_shared(f^I_E(image))` and `X^T = f_shared(f^T_E(text))`, where the
//!   modality encoders `f^I_E`, `f^T_E` are frozen random networks;
//! * `X^joint = f_shared(adapter(mean(SelfAttn(CM_{I→T} ⊕ CM_{T→I}))))`, where
//!   the image enters as non-overlapping patches, the text as a trainable token
//!   embedding, and `⊕` concatenates along the sequence axis.
//!
//! Only [`JointModuleParams`] and [`ClassifierParams`] are trained and
//! transmitted. Their canonical flat ordering is the order of
//! [`JointModuleParams::tensors`] followed by [`ClassifierParams::tensors`],
//! each tensor row-major.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::datagen::{DatasetSpec, MultiModalRecord, Token};
use crate::error::{Error, Result};
use crate::rng::{rng_for, SimRng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_enc: usize,
    /// Desk-scale 16; the full-scale setting is 256.
    pub d_com: usize,
    /// Desk-scale 32; the full-scale setting is 512.
    pub d_latent: usize,
    pub self_attention_heads: usize,
    pub patch_side: usize,
    /// Drop attention streams whose keys come from a placeholder modality.
    pub attention_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_enc: 32, d_com: 16, d_latent: 32, self_attention_heads: 2, patch_side: 4, attention_mask: false }
    }
}

/// Every size the model needs, resolved against a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub grid_side: usize,
    pub patch_side: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub d_enc: usize,
    pub d_com: usize,
    pub d_latent: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub attention_mask: bool,
}

impl ModelDims {
    pub fn new(cfg: &ModelConfig, spec: &DatasetSpec) -> Result<Self> {
        for (key, v) in [
            ("d_enc", cfg.d_enc),
            ("d_com", cfg.d_com),
            ("d_latent", cfg.d_latent),
            ("self_attention_heads", cfg.self_attention_heads),
            ("patch_side", cfg.patch_side),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !spec.grid_side.is_multiple_of(cfg.patch_side) {
            return Err(Error::config("patch_side", format!("must divide grid_side {}", spec.grid_side)));
        }
        if !cfg.d_com.is_multiple_of(cfg.self_attention_heads) {
            return Err(Error::config("self_attention_heads", format!("must divide d_com {}", cfg.d_com)));
        }
        Ok(Self {
            grid_side: spec.grid_side,
            patch_side: cfg.patch_side,
            text_len: spec.latent_dim,
            vocab: spec.vocab_size(),
            num_classes: spec.num_classes,
            d_enc: cfg.d_enc,
            d_com: cfg.d_com,
            d_latent: cfg.d_latent,
            d_hidden: (cfg.d_latent / 2).max(1),
            heads: cfg.self_attention_heads,
            attention_mask: cfg.attention_mask,
        })
    }

    pub fn image_len(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn image_tokens(&self) -> usize {
        let per_side = self.grid_side / self.patch_side;
        per_side * per_side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn param_count(&self) -> usize {
        JointModuleParams::<f64>::shapes(self).iter().chain(ClassifierParams::<f64>::shapes(self).iter()).map(|(_, r, c)| r * c).sum()
    }
}

fn gaussian<T: Scalar>(rng: &mut SimRng, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

fn xavier<T: Scalar>(rng: &mut SimRng, rows: usize, cols: usize) -> Matrix<T> {
    gaussian(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}

/// Frozen modality encoders, identical on every participant.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoders<T> {
    img_w1: Matrix<T>,
    img_b1: Matrix<T>,
    img_w2: Matrix<T>,
    img_b2: Matrix<T>,
    txt_embed: Matrix<T>,
    txt_w: Matrix<T>,
    txt_b: Matrix<T>,
    dims: ModelDims,
}

impl<T: Scalar> FrozenEncoders<T> {
    pub fn new(dims: &ModelDims, model_seed: u64) -> Self {
        let mut rng = rng_for(model_seed, Stream::Model, 0);
        let (p2, d) = (dims.image_len(), dims.d_enc);
        Self {
            img_w1: gaussian(&mut rng, p2, d, 1.0 / (p2 as f64).sqrt()),
            img_b1: gaussian(&mut rng, 1, d, 0.1),
            img_w2: gaussian(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
            img_b2: gaussian(&mut rng, 1, d, 0.1),
            txt_embed: gaussian(&mut rng, dims.vocab, d, 1.0),
            txt_w: gaussian(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
            txt_b: gaussian(&mut rng, 1, d, 0.1),
            dims: dims.clone(),
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    /// `f^I_E`: two tanh layers over the flattened image.
    pub fn encode_image(&self, image: &[T]) -> Result<Vec<T>> {
        check_image(&self.dims, image)?;
        let x = Matrix::row_vector(image.to_vec());
        let h = dense_tanh(&x, &self.img_w1, &self.img_b1);
        Ok(dense_tanh(&h, &self.img_w2, &self.img_b2).into_vec())
    }

    /// `f^T_E`: mean-pooled frozen token embeddings, then one tanh layer.
    pub fn encode_text(&self, tokens: &[Token]) -> Result<Vec<T>> {
        check_tokens(&self.dims, tokens)?;
        let d = self.dims.d_enc;
        let mut pooled = vec![T::zero(); d];
        for &t in tokens {
            for (p, &e) in pooled.iter_mut().zip(self.txt_embed.row(t as usize)) {
                *p += e;
            }
        }
        let inv = T::one() / T::of(tokens.len() as f64);
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(dense_tanh(&Matrix::row_vector(pooled), &self.txt_w, &self.txt_b).into_vec())
    }

    /// Frozen features of every record, row `i` for record `i`.
    pub fn features(&self, records: &[MultiModalRecord<T>]) -> Result<FrozenFeatures<T>> {
        let mut image = Vec::with_capacity(records.len());
        let mut text = Vec::with_capacity(records.len());
        for r in records {
            let (img, txt) = slots(r)?;
            image.push(self.encode_image(img)?);
            text.push(self.encode_text(txt)?);
        }
        let d = self.dims.d_enc;
        Ok(FrozenFeatures {
            image: if records.is_empty() { Matrix::zeros(0, d) } else { Matrix::from_rows(&image)? },
            text: if records.is_empty() { Matrix::zeros(0, d) } else { Matrix::from_rows(&text)? },
        })
    }
}

/// Cached frozen-encoder outputs for a record set.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatures<T> {
    pub image: Matrix<T>,
    pub text: Matrix<T>,
}

impl<T: Scalar> FrozenFeatures<T> {
    fn gather(&self, idx: &[usize]) -> (Matrix<T>, Matrix<T>) {
        let pick = |m: &Matrix<T>| Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j));
        (pick(&self.image), pick(&self.text))
    }
}

fn dense_tanh<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut h = x.matmul(w);
    for i in 0..h.rows() {
        for (v, &bb) in h.row_mut(i).iter_mut().zip(b.row(0)) {
            *v = (*v + bb).tanh();
        }
    }
    h
}

fn check_image<T>(dims: &ModelDims, image: &[T]) -> Result<()> {
    if image.len() != dims.image_len() {
        return Err(Error::Dimension(format!("image has {} pixels, expected {}", image.len(), dims.image_len())));
    }
    Ok(())
}

fn check_tokens(dims: &ModelDims, tokens: &[Token]) -> Result<()> {
    if tokens.len() != dims.text_len {
        return Err(Error::Dimension(format!("text has {} tokens, expected {}", tokens.len(), dims.text_len)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= dims.vocab) {
        return Err(Error::Dimension(format!("token {t} outside vocabulary of {}", dims.vocab)));
    }
    Ok(())
}

fn slots<T>(r: &MultiModalRecord<T>) -> Result<(&[T], &[Token])> {
    match (&r.image, &r.text) {
        (Some(i), Some(t)) => Ok((i, t)),
        _ => Err(Error::record(r.id, "both slots must hold data (real, synthetic, or placeholder)")),
    }
}

/// Trainable, transmitted joint-encoder parameters (including `f_shared`).
#[derive(Clone, Debug, PartialEq)]
pub struct JointModuleParams<T> {
    pub patch_w: Matrix<T>,
    pub patch_b: Matrix<T>,
    pub token_embed: Matrix<T>,
    pub pos_image: Matrix<T>,
    pub pos_text: Matrix<T>,
    pub i2t_query: Matrix<T>,
    pub i2t_key: Matrix<T>,
    pub i2t_value: Matrix<T>,
    pub t2i_query: Matrix<T>,
    pub t2i_key: Matrix<T>,
    pub t2i_value: Matrix<T>,
    pub self_query: Matrix<T>,
    pub self_key: Matrix<T>,
    pub self_value: Matrix<T>,
    pub self_out: Matrix<T>,
    pub adapter_w: Matrix<T>,
    pub adapter_b: Matrix<T>,
    pub shared_w1: Matrix<T>,
    pub shared_b1: Matrix<T>,
    pub shared_w2: Matrix<T>,
    pub shared_b2: Matrix<T>,
}

impl<T: Scalar> JointModuleParams<T> {
    /// `(name, rows, cols)` in canonical order.
    pub fn shapes(d: &ModelDims) -> Vec<(&'static str, usize, usize)> {
        let c = d.d_com;
        vec![
            ("patch_w", d.patch_len(), c),
            ("patch_b", 1, c),
            ("token_embed", d.vocab, c),
            ("pos_image", d.image_tokens(), c),
            ("pos_text", d.text_len, c),
            ("i2t_query", c, c),
            ("i2t_key", c, c),
            ("i2t_value", c, c),
            ("t2i_query", c, c),
            ("t2i_key", c, c),
            ("t2i_value", c, c),
            ("self_query", c, c),
            ("self_key", c, c),
            ("self_value", c, c),
            ("self_out", c, c),
            ("adapter_w", c, d.d_enc),
            ("adapter_b", 1, d.d_enc),
            ("shared_w1", d.d_enc, d.d_latent),
            ("shared_b1", 1, d.d_latent),
            ("shared_w2", d.d_latent, d.d_latent),
            ("shared_b2", 1, d.d_latent),
        ]
    }

    pub fn init(d: &ModelDims, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Model, 1);
        let c = d.d_com;
        let mut x = |r, cc| xavier::<T>(&mut rng, r, cc);
        let patch_w = x(d.patch_len(), c);
        let i2t_query = x(c, c);
        let i2t_key = x(c, c);
        let i2t_value = x(c, c);
        let t2i_query = x(c, c);
        let t2i_key = x(c, c);
        let t2i_value = x(c, c);
        let self_query = x(c, c);
        let self_key = x(c, c);
        let self_value = x(c, c);
        let self_out = x(c, c);
        let adapter_w = x(c, d.d_enc);
        let shared_w1 = x(d.d_enc, d.d_latent);
        let shared_w2 = x(d.d_latent, d.d_latent);
        let mut rng = rng_for(seed, Stream::Model, 2);
        let token_embed = gaussian(&mut rng, d.vocab, c, 1.0);
        let pos_image = gaussian(&mut rng, d.image_tokens(), c, 0.1);
        let pos_text = gaussian(&mut rng, d.text_len, c, 0.1);
        Self {
            patch_w,
            patch_b: Matrix::zeros(1, c),
            token_embed,
            pos_image,
            pos_text,
            i2t_query,
            i2t_key,
            i2t_value,
            t2i_query,
            t2i_key,
            t2i_value,
            self_query,
            self_key,
            self_value,
            self_out,
            adapter_w,
            adapter_b: Matrix::zeros(1, d.d_enc),
            shared_w1,
            shared_b1: Matrix::zeros(1, d.d_latent),
            shared_w2,
            shared_b2: Matrix::zeros(1, d.d_latent),
        }
    }

    pub fn tensors(&self) -> [&Matrix<T>; 21] {
        [
            &self.patch_w,
            &self.patch_b,
            &self.token_embed,
            &self.pos_image,
            &self.pos_text,
            &self.i2t_query,
            &self.i2t_key,
            &self.i2t_value,
            &self.t2i_query,
            &self.t2i_key,
            &self.t2i_value,
            &self.self_query,
            &self.self_key,
            &self.self_value,
            &self.self_out,
            &self.adapter_w,
            &self.adapter_b,
            &self.shared_w1,
            &self.shared_b1,
            &self.shared_w2,
            &self.shared_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 21] {
        [
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.token_embed,
            &mut self.pos_image,
            &mut self.pos_text,
            &mut self.i2t_query,
            &mut self.i2t_key,
            &mut self.i2t_value,
            &mut self.t2i_query,
            &mut self.t2i_key,
            &mut self.t2i_value,
            &mut self.self_query,
            &mut self.self_key,
            &mut self.self_value,
            &mut self.self_out,
            &mut self.adapter_w,
            &mut self.adapter_b,
            &mut self.shared_w1,
            &mut self.shared_b1,
            &mut self.shared_w2,
            &mut self.shared_b2,
        ]
    }

    pub fn on_tape(&self, tape: &mut Tape<T>) -> JointVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| tape.param((*t).clone())).collect();
        JointVars {
            patch_w: v[0],
            patch_b: v[1],
            token_embed: v[2],
            pos_image: v[3],
            pos_text: v[4],
            i2t_query: v[5],
            i2t_key: v[6],
            i2t_value: v[7],
            t2i_query: v[8],
            t2i_key: v[9],
            t2i_value: v[10],
            self_query: v[11],
            self_key: v[12],
            self_value: v[13],
            self_out: v[14],
            adapter_w: v[15],
            adapter_b: v[16],
            shared_w1: v[17],
            shared_b1: v[18],
            shared_w2: v[19],
            shared_b2: v[20],
        }
    }
}

/// Tape handles for [`JointModuleParams`], same field order.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub token_embed: Var,
    pub pos_image: Var,
    pub pos_text: Var,
    pub i2t_query: Var,
    pub i2t_key: Var,
    pub i2t_value: Var,
    pub t2i_query: Var,
    pub t2i_key: Var,
    pub t2i_value: Var,
    pub self_query: Var,
    pub self_key: Var,
    pub self_value: Var,
    pub self_out: Var,
    pub adapter_w: Var,
    pub adapter_b: Var,
    pub shared_w1: Var,
    pub shared_b1: Var,
    pub shared_w2: Var,
    pub shared_b2: Var,
}

impl JointVars {
    pub fn all(&self) -> [Var; 21] {
        [
            self.patch_w,
            self.patch_b,
            self.token_embed,
            self.pos_image,
            self.pos_text,
            self.i2t_query,
            self.i2t_key,
            self.i2t_value,
            self.t2i_query,
            self.t2i_key,
            self.t2i_value,
            self.self_query,
            self.self_key,
            self.self_value,
            self.self_out,
            self.adapter_w,
            self.adapter_b,
            self.shared_w1,
            self.shared_b1,
            self.shared_w2,
            self.shared_b2,
        ]
    }
}

/// Two affine layers `d_latent → d_latent/2 → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn shapes(d: &ModelDims) -> Vec<(&'static str, usize, usize)> {
        vec![
            ("cls_w1", d.d_latent, d.d_hidden),
            ("cls_b1", 1, d.d_hidden),
            ("cls_w2", d.d_hidden, d.num_classes),
            ("cls_b2", 1, d.num_classes),
        ]
    }

    pub fn init(d: &ModelDims, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Model, 3);
        Self {
            w1: xavier(&mut rng, d.d_latent, d.d_hidden),
            b1: Matrix::zeros(1, d.d_hidden),
            w2: xavier(&mut rng, d.d_hidden, d.num_classes),
            b2: Matrix::zeros(1, d.num_classes),
        }
    }

    pub fn zeros(d: &ModelDims) -> Self {
        Self {
            w1: Matrix::zeros(d.d_latent, d.d_hidden),
            b1: Matrix::zeros(1, d.d_hidden),
            w2: Matrix::zeros(d.d_hidden, d.num_classes),
            b2: Matrix::zeros(1, d.num_classes),
        }
    }

    pub fn tensors(&self) -> [&Matrix<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn on_tape(&self, tape: &mut Tape<T>) -> ClassifierVars {
        ClassifierVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    /// Same parameters as constants (gate evaluation, inference).
    pub fn on_tape_frozen(&self, tape: &mut Tape<T>) -> ClassifierVars {
        ClassifierVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }

    /// Logits for each row of `x` (`n × d_latent`), without a tape.
    pub fn logits(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut h = x.matmul(&self.w1);
        add_row_in_place(&mut h, &self.b1);
        let mut o = h.matmul(&self.w2);
        add_row_in_place(&mut o, &self.b2);
        o
    }
}

fn add_row_in_place<T: Scalar>(m: &mut Matrix<T>, row: &Matrix<T>) {
    for i in 0..m.rows() {
        for (v, &b) in m.row_mut(i).iter_mut().zip(row.row(0)) {
            *v += b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ClassifierVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Batched `X^I`, `X^T`, `X^joint`, each `|B| × d_latent`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTriple<T> {
    pub image: Matrix<T>,
    pub text: Matrix<T>,
    pub joint: Matrix<T>,
}

/// Tape handles of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub image: Var,
    pub text: Var,
    pub joint: Var,
    pub logits: Var,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

/// `f_shared`: affine, tanh, affine.
pub fn shared_head<T: Scalar>(tape: &mut Tape<T>, x: Var, jv: &JointVars) -> Var {
    let h = linear(tape, x, jv.shared_w1, jv.shared_b1);
    let h = tape.tanh(h);
    linear(tape, h, jv.shared_w2, jv.shared_b2)
}

pub fn classifier_head<T: Scalar>(tape: &mut Tape<T>, x: Var, cv: &ClassifierVars) -> Var {
    let h = linear(tape, x, cv.w1, cv.b1);
    linear(tape, h, cv.w2, cv.b2)
}

/// `softmax((q·W_Q)(kv·W_K)ᵀ / √d_com) · (kv·W_V)`
pub fn cross_attention_on_tape<T: Scalar>(tape: &mut Tape<T>, query: Var, kv: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let d = tape.value(wq).cols();
    let q = tape.matmul(query, wq);
    let k = tape.matmul(kv, wk);
    let v = tape.matmul(kv, wv);
    let s = tape.matmul_nt(q, k);
    let s = tape.scale(s, T::one() / T::of(d as f64).sqrt());
    let a = tape.softmax_rows(s);
    tape.matmul(a, v)
}

/// Multi-head self-attention with an output projection.
pub fn self_attention_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, jv: &JointVars, heads: usize) -> Var {
    let d = tape.value(jv.self_query).cols();
    let dh = d / heads;
    let q = tape.matmul(x, jv.self_query);
    let k = tape.matmul(x, jv.self_key);
    let v = tape.matmul(x, jv.self_value);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let s = tape.matmul_nt(qh, kh);
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s);
        outs.push(tape.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    tape.matmul(cat, jv.self_out)
}

/// Non-overlapping patches, row-major over patches and within each patch.
pub fn patchify<T: Scalar>(dims: &ModelDims, image: &[T]) -> Matrix<T> {
    let (g, p) = (dims.grid_side, dims.patch_side);
    let per_side = g / p;
    Matrix::from_fn(per_side * per_side, p * p, |patch, k| {
        let (pr, pc) = (patch / per_side, patch % per_side);
        let (r, c) = (k / p, k % p);
        image[(pr * p + r) * g + pc * p + c]
    })
}

/// Pooled fused representation (`1 × d_com`) of one image/text pair.
pub fn joint_pooled_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    dims: &ModelDims,
    image: &[T],
    tokens: &[Token],
    masks: (bool, bool),
    jv: &JointVars,
) -> Var {
    let patches = tape.constant(patchify(dims, image));
    let i_com = linear(tape, patches, jv.patch_w, jv.patch_b);
    let i_com = tape.add(i_com, jv.pos_image);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let t_com = tape.gather_rows(jv.token_embed, &ids);
    let t_com = tape.add(t_com, jv.pos_text);

    let (image_dummy, text_dummy) = masks;
    let mut streams = Vec::with_capacity(2);
    if !(dims.attention_mask && text_dummy) {
        streams.push(cross_attention_on_tape(tape, i_com, t_com, jv.i2t_query, jv.i2t_key, jv.i2t_value));
    }
    if !(dims.attention_mask && image_dummy) {
        streams.push(cross_attention_on_tape(tape, t_com, i_com, jv.t2i_query, jv.t2i_key, jv.t2i_value));
    }
    let fused = if streams.len() == 1 { streams[0] } else { tape.concat_rows(&streams) };
    let attended = self_attention_on_tape(tape, fused, jv, dims.heads);
    tape.mean_rows(attended)
}

/// Batched forward of the three embeddings and the logits of `X^joint`.
///
/// `features` holds cached frozen-encoder outputs for `records`; `batch` indexes both.
pub fn forward_batch_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    dims: &ModelDims,
    records: &[MultiModalRecord<T>],
    features: &FrozenFeatures<T>,
    batch: &[usize],
    jv: &JointVars,
    cv: &ClassifierVars,
) -> Result<BatchVars> {
    let (fi, ft) = features.gather(batch);
    let fi = tape.constant(fi);
    let ft = tape.constant(ft);
    let image = shared_head(tape, fi, jv);
    let text = shared_head(tape, ft, jv);

    let mut pooled = Vec::with_capacity(batch.len());
    for &i in batch {
        let r = &records[i];
        let (img, txt) = slots(r)?;
        check_image(dims, img)?;
        check_tokens(dims, txt)?;
        pooled.push(joint_pooled_on_tape(tape, dims, img, txt, (!r.image_present, !r.text_present), jv));
    }
    let pooled = tape.concat_rows(&pooled);
    let adapted = linear(tape, pooled, jv.adapter_w, jv.adapter_b);
    let adapted = tape.tanh(adapted);
    let joint = shared_head(tape, adapted, jv);
    let logits = classifier_head(tape, joint, cv);
    Ok(BatchVars { image, text, joint, logits })
}

/// `X^I` for one image.
pub fn encode_image_specific<T: Scalar>(image: &[T], frozen: &FrozenEncoders<T>, params: &JointModuleParams<T>) -> Result<Vec<T>> {
    let f = frozen.encode_image(image)?;
    Ok(apply_shared(&f, params))
}

/// `X^T` for one token sequence.
pub fn encode_text_specific<T: Scalar>(tokens: &[Token], frozen: &FrozenEncoders<T>, params: &JointModuleParams<T>) -> Result<Vec<T>> {
    let f = frozen.encode_text(tokens)?;
    Ok(apply_shared(&f, params))
}

fn apply_shared<T: Scalar>(features: &[T], params: &JointModuleParams<T>) -> Vec<T> {
    let mut tape = Tape::new();
    let jv = params.on_tape(&mut tape);
    let x = tape.constant(Matrix::row_vector(features.to_vec()));
    let out = shared_head(&mut tape, x, &jv);
    tape.value(out).as_slice().to_vec()
}

/// Standalone cross-modal attention on value matrices.
pub fn cross_modal_attention<T: Scalar>(
    query_seq: &Matrix<T>,
    kv_seq: &Matrix<T>,
    w_query: &Matrix<T>,
    w_key: &Matrix<T>,
    w_value: &Matrix<T>,
) -> Result<Matrix<T>> {
    if kv_seq.rows() == 0 {
        return Err(Error::InvalidArgument("cross-modal attention needs a nonempty key/value sequence".into()));
    }
    let d = query_seq.cols();
    for (name, w) in [("query", w_query), ("key", w_key), ("value", w_value)] {
        if w.shape() != (d, d) {
            return Err(Error::Dimension(format!("{name} weights are {:?}, expected ({d}, {d})", w.shape())));
        }
    }
    if kv_seq.cols() != d {
        return Err(Error::Dimension(format!("key/value width {} differs from query width {d}", kv_seq.cols())));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query_seq.clone());
    let kv = tape.constant(kv_seq.clone());
    let wq = tape.constant(w_query.clone());
    let wk = tape.constant(w_key.clone());
    let wv = tape.constant(w_value.clone());
    let out = cross_attention_on_tape(&mut tape, q, kv, wq, wk, wv);
    Ok(tape.value(out).clone())
}

/// `X^joint` for one pair; both slots must be populated.
pub fn encode_joint<T: Scalar>(
    dims: &ModelDims,
    image: &[T],
    tokens: &[Token],
    params: &JointModuleParams<T>,
) -> Result<Vec<T>> {
    encode_joint_masked(dims, image, tokens, (false, false), params)
}

/// [`encode_joint`] with explicit placeholder flags `(image_dummy, text_dummy)`.
pub fn encode_joint_masked<T: Scalar>(
    dims: &ModelDims,
    image: &[T],
    tokens: &[Token],
    dummies: (bool, bool),
    params: &JointModuleParams<T>,
) -> Result<Vec<T>> {
    check_image(dims, image)?;
    check_tokens(dims, tokens)?;
    let mut tape = Tape::new();
    let jv = params.on_tape(&mut tape);
    let pooled = joint_pooled_on_tape(&mut tape, dims, image, tokens, dummies, &jv);
    let a = linear(&mut tape, pooled, jv.adapter_w, jv.adapter_b);
    let a = tape.tanh(a);
    let out = shared_head(&mut tape, a, &jv);
    Ok(tape.value(out).as_slice().to_vec())
}

pub fn classify<T: Scalar>(embedding: &[T], classifier: &ClassifierParams<T>) -> Result<Vec<T>> {
    if embedding.len() != classifier.w1.rows() {
        return Err(Error::Dimension(format!("embedding has {} entries, expected {}", embedding.len(), classifier.w1.rows())));
    }
    Ok(classifier.logits(&Matrix::row_vector(embedding.to_vec())).into_vec())
}

/// Embeddings and logits for every record (value-level).
pub fn forward_batch<T: Scalar>(
    dims: &ModelDims,
    records: &[MultiModalRecord<T>],
    frozen: &FrozenEncoders<T>,
    joint: &JointModuleParams<T>,
    classifier: &ClassifierParams<T>,
) -> Result<(EmbeddingTriple<T>, Matrix<T>)> {
    let features = frozen.features(records)?;
    let mut tape = Tape::new();
    let jv = joint.on_tape(&mut tape);
    let cv = classifier.on_tape(&mut tape);
    let idx: Vec<usize> = (0..records.len()).collect();
    let bv = forward_batch_on_tape(&mut tape, dims, records, &features, &idx, &jv, &cv)?;
    Ok((
        EmbeddingTriple {
            image: tape.value(bv.image).clone(),
            text: tape.value(bv.text).clone(),
            joint: tape.value(bv.joint).clone(),
        },
        tape.value(bv.logits).clone(),
    ))
}

/// `X^joint` rows for every record; presence flags drive the optional attention mask.
pub fn joint_embeddings<T: Scalar>(dims: &ModelDims, records: &[MultiModalRecord<T>], joint: &JointModuleParams<T>) -> Result<Matrix<T>> {
    if records.is_empty() {
        return Ok(Matrix::zeros(0, dims.d_latent));
    }
    let mut tape = Tape::new();
    let jv = joint.on_tape(&mut tape);
    let mut pooled = Vec::with_capacity(records.len());
    for r in records {
        let (img, txt) = slots(r)?;
        check_image(dims, img)?;
        check_tokens(dims, txt)?;
        pooled.push(joint_pooled_on_tape(&mut tape, dims, img, txt, (!r.image_present, !r.text_present), &jv));
    }
    let pooled = tape.concat_rows(&pooled);
    let a = linear(&mut tape, pooled, jv.adapter_w, jv.adapter_b);
    let a = tape.tanh(a);
    let out = shared_head(&mut tape, a, &jv);
    Ok(tape.value(out).clone())
}

/// Concatenates joint then classifier tensors in canonical order.
pub fn flatten_params<T: Scalar>(joint: &JointModuleParams<T>, classifier: &ClassifierParams<T>) -> Vec<T> {
    let mut out = Vec::new();
    for t in joint.tensors() {
        out.extend_from_slice(t.as_slice());
    }
    for t in classifier.tensors() {
        out.extend_from_slice(t.as_slice());
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn load_params<T: Scalar>(flat: &[T], dims: &ModelDims) -> Result<(JointModuleParams<T>, ClassifierParams<T>)> {
    let expected = dims.param_count();
    if flat.len() != expected {
        return Err(Error::Dimension(format!("flat parameter vector has {} entries, expected {expected}", flat.len())));
    }
    let mut joint = JointModuleParams::init(dims, 0);
    let mut classifier = ClassifierParams::zeros(dims);
    let mut off = 0;
    for t in joint.tensors_mut().into_iter().chain(classifier.tensors_mut()) {
        let n = t.len();
        t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok((joint, classifier))
}

/// Flat gradient in canonical order.
pub fn flatten_grads<T: Scalar>(grads: &Gradients<T>, jv: &JointVars, cv: &ClassifierVars) -> Vec<T> {
    let mut out = Vec::new();
    for v in jv.all().into_iter().chain(cv.all()) {
        out.extend(grads.wrt(v).into_vec());
    }
    out
}

const PARAM_MAGIC: &[u8; 8] = b"MMFLPRM1";

/// Writes `magic(8) | config_hash u64 LE | length u64 LE | length × f64 LE`.
pub fn write_param_file<T: Scalar>(path: &Path, flat: &[T], config_hash: u64) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * flat.len());
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Returns `(config_hash, values)`.
pub fn read_param_file<T: Scalar>(path: &Path) -> Result<(u64, Vec<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != PARAM_MAGIC {
        return Err(Error::InvalidArgument("not a parameter file".into()));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes"));
    let hash = word(8);
    let len = word(16) as usize;
    if bytes.len() != 24 + 8 * len {
        return Err(Error::Dimension(format!("header says {len} values, file holds {} bytes", bytes.len())));
    }
    let values = (0..len).map(|i| T::of(f64::from_le_bytes(bytes[24 + 8 * i..32 + 8 * i].try_into().expect("8 bytes")))).collect();
    Ok((hash, values))
}
