//! Local training objective.
//!
//! * `sim(a, b) = exp(cos(a, b) / τ)`
//! * contrastive matching: for each sample, the joint embedding is pulled
//!   toward its own image and text embeddings and pushed from every other
//!   sample's embeddings,
//!   `L = -(1/|B|) Σ_i log(sim(X^T_i, X^J_i)/Ω^T_i + sim(X^I_i, X^J_i)/Ω^I_i)` with
//!   `Ω^M_i = Σ_{j≠i} sim(X^M_i, X^M_j) + sim(X^M_i, X^J_j) + sim(X^J_i, X^J_j)`;
//! * margin alignment: `‖X^J_i − X^M_i‖₂` counted only when the classifier does
//!   strictly better on `X^M_i` than on `X^J_i`;
//! * supervised cross-entropy on `X^J`;
//! * `total = sup + mcm_scale·mcm + ram_scale·ram`.
//!
//! A term whose scale is zero is skipped and reported as `0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ClassifierParams, EmbeddingTriple};
use crate::scalar::Scalar;
use crate::tensor::{dot, l2_norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub mcm_scale: f64,
    pub ram_scale: f64,
    /// Treat `X^I`/`X^T` as constants inside the margin term.
    pub ram_stop_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, mcm_scale: 0.01, ram_scale: 0.5, ram_stop_grad: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::config("temperature", "must lie in (0, 1]"));
        }
        for (key, v) in [("mcm_scale", self.mcm_scale), ("ram_scale", self.ram_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite nonnegative real"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub mcm: f64,
    pub ram: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.sup.is_finite() && self.mcm.is_finite() && self.ram.is_finite() && self.total.is_finite()
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        LossBreakdown {
            sup: items.iter().map(|b| b.sup).sum::<f64>() / n,
            mcm: items.iter().map(|b| b.mcm).sum::<f64>() / n,
            ram: items.iter().map(|b| b.ram).sum::<f64>() / n,
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn scaled_sim<T: Scalar>(a: &[T], b: &[T], tau: T) -> Result<T> {
    Ok((cosine(a, b)? / tau).exp())
}

/// Cross-entropy of one logit row against `label`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn check_rows_nonzero<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<()> {
    for i in 0..m.rows() {
        if l2_norm(m.row(i)) == T::zero() {
            return Err(Error::InvalidArgument(format!("{what} embedding {i} has zero norm")));
        }
    }
    Ok(())
}

fn identity_and_offdiag<T: Scalar>(tape: &mut Tape<T>, n: usize) -> (Var, Var) {
    let eye = tape.constant(Matrix::identity(n));
    let off = tape.constant(Matrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { T::one() }));
    (eye, off)
}

/// Contrastive matching loss on tape handles `|B| × d` each.
pub fn mcm_on_tape<T: Scalar>(tape: &mut Tape<T>, image: Var, text: Var, joint: Var, tau: T) -> Result<Var> {
    let b = tape.value(joint).rows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("contrastive matching needs a batch of at least 2, got {b}")));
    }
    check_rows_nonzero(tape.value(image), "image")?;
    check_rows_nonzero(tape.value(text), "text")?;
    check_rows_nonzero(tape.value(joint), "joint")?;

    let inv_tau = T::one() / tau;
    let ni = tape.normalize_rows(image);
    let nt = tape.normalize_rows(text);
    let nj = tape.normalize_rows(joint);
    let sim = |tape: &mut Tape<T>, a: Var, c: Var| {
        let cos = tape.matmul_nt(a, c);
        let s = tape.scale(cos, inv_tau);
        tape.exp(s)
    };
    let s_jj = sim(tape, nj, nj);
    let (eye, off) = identity_and_offdiag(tape, b);

    let term = |tape: &mut Tape<T>, m: Var| {
        let s_mm = sim(tape, m, m);
        let s_mj = sim(tape, m, nj);
        let all = tape.add(s_mm, s_mj);
        let all = tape.add(all, s_jj);
        let neg = tape.mul(all, off);
        let omega = tape.sum_cols(neg);
        let pos = tape.mul(s_mj, eye);
        let pos = tape.sum_cols(pos);
        tape.div(pos, omega)
    };
    let r_t = term(tape, nt);
    let r_i = term(tape, ni);
    let ratio = tape.add(r_t, r_i);
    let logs = tape.ln(ratio);
    let s = tape.sum_all(logs);
    Ok(tape.scale(s, -T::one() / T::of(b as f64)))
}

/// Mean cross-entropy of `logits` (`|B| × C`).
pub fn sup_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).shape();
    if b == 0 || labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {c} classes")));
    }
    let onehot = tape.constant(Matrix::from_fn(b, c, |i, j| if labels[i] == j { T::one() } else { T::zero() }));
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.mul(ls, onehot);
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -T::one() / T::of(b as f64)))
}

/// Open gates `(image, text)` per sample: modality CE strictly below joint CE.
pub fn ram_gates<T: Scalar>(triple: &EmbeddingTriple<T>, labels: &[usize], classifier: &ClassifierParams<T>) -> Result<Vec<(bool, bool)>> {
    let b = triple.joint.rows();
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {b}", labels.len())));
    }
    let li = classifier.logits(&triple.image);
    let lt = classifier.logits(&triple.text);
    let lj = classifier.logits(&triple.joint);
    (0..b)
        .map(|i| {
            let cj = cross_entropy(lj.row(i), labels[i])?;
            let ci = cross_entropy(li.row(i), labels[i])?;
            let ct = cross_entropy(lt.row(i), labels[i])?;
            Ok((ci < cj, ct < cj))
        })
        .collect()
}

/// Margin alignment loss; gates are evaluated on values and carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn ram_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    text: Var,
    joint: Var,
    labels: &[usize],
    classifier: &ClassifierParams<T>,
    stop_grad: bool,
) -> Result<Var> {
    let b = tape.value(joint).rows();
    if b == 0 {
        return Err(Error::InvalidArgument("margin alignment needs a nonempty batch".into()));
    }
    let triple = EmbeddingTriple { image: tape.value(image).clone(), text: tape.value(text).clone(), joint: tape.value(joint).clone() };
    let gates = ram_gates(&triple, labels, classifier)?;
    let gate_i = tape.constant(Matrix::from_fn(b, 1, |i, _| if gates[i].0 { T::one() } else { T::zero() }));
    let gate_t = tape.constant(Matrix::from_fn(b, 1, |i, _| if gates[i].1 { T::one() } else { T::zero() }));

    let dist = |tape: &mut Tape<T>, m: Var| {
        let m = if stop_grad { tape.detach(m) } else { m };
        let d = tape.sub(joint, m);
        let sq = tape.mul(d, d);
        let s = tape.sum_cols(sq);
        tape.sqrt(s)
    };
    let di = dist(tape, image);
    let dt = dist(tape, text);
    let gi = tape.mul(di, gate_i);
    let gt = tape.mul(dt, gate_t);
    let both = tape.add(gi, gt);
    let s = tape.sum_all(both);
    Ok(tape.scale(s, T::one() / T::of(b as f64)))
}

/// `sup + mcm_scale·mcm + ram_scale·ram` on tape, with its value breakdown.
#[allow(clippy::too_many_arguments)]
pub fn total_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    text: Var,
    joint: Var,
    logits: Var,
    labels: &[usize],
    classifier: &ClassifierParams<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let b = tape.value(joint).rows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("local loss needs a batch of at least 2, got {b}")));
    }
    let sup = sup_on_tape(tape, logits, labels)?;
    let mut breakdown = LossBreakdown { sup: tape.value(sup).get(0, 0).as_f64(), ..LossBreakdown::default() };
    let mut total = sup;
    if cfg.mcm_scale > 0.0 {
        let mcm = mcm_on_tape(tape, image, text, joint, T::of(cfg.temperature))?;
        breakdown.mcm = tape.value(mcm).get(0, 0).as_f64();
        let scaled = tape.scale(mcm, T::of(cfg.mcm_scale));
        total = tape.add(total, scaled);
    }
    if cfg.ram_scale > 0.0 {
        let ram = ram_on_tape(tape, image, text, joint, labels, classifier, cfg.ram_stop_grad)?;
        breakdown.ram = tape.value(ram).get(0, 0).as_f64();
        let scaled = tape.scale(ram, T::of(cfg.ram_scale));
        total = tape.add(total, scaled);
    }
    breakdown.total = tape.value(total).get(0, 0).as_f64();
    Ok((total, breakdown))
}

fn triple_on_tape<T: Scalar>(tape: &mut Tape<T>, triple: &EmbeddingTriple<T>) -> Result<(Var, Var, Var)> {
    let shape = triple.joint.shape();
    if triple.image.shape() != shape || triple.text.shape() != shape {
        return Err(Error::Dimension("embedding triple members differ in shape".into()));
    }
    Ok((tape.constant(triple.image.clone()), tape.constant(triple.text.clone()), tape.constant(triple.joint.clone())))
}

pub fn mcm_loss<T: Scalar>(triple: &EmbeddingTriple<T>, tau: T) -> Result<T> {
    let mut tape = Tape::new();
    let (i, t, j) = triple_on_tape(&mut tape, triple)?;
    let l = mcm_on_tape(&mut tape, i, t, j, tau)?;
    Ok(tape.value(l).get(0, 0))
}

pub fn ram_loss<T: Scalar>(triple: &EmbeddingTriple<T>, labels: &[usize], classifier: &ClassifierParams<T>) -> Result<T> {
    let mut tape = Tape::new();
    let (i, t, j) = triple_on_tape(&mut tape, triple)?;
    let l = ram_on_tape(&mut tape, i, t, j, labels, classifier, false)?;
    Ok(tape.value(l).get(0, 0))
}

pub fn sup_loss<T: Scalar>(joint: &Matrix<T>, labels: &[usize], classifier: &ClassifierParams<T>) -> Result<T> {
    if joint.cols() != classifier.w1.rows() {
        return Err(Error::Dimension(format!("joint width {} vs classifier input {}", joint.cols(), classifier.w1.rows())));
    }
    let mut tape = Tape::new();
    let logits = tape.constant(classifier.logits(joint));
    let l = sup_on_tape(&mut tape, logits, labels)?;
    Ok(tape.value(l).get(0, 0))
}

pub fn total_loss<T: Scalar>(triple: &EmbeddingTriple<T>, labels: &[usize], classifier: &ClassifierParams<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let (i, t, j) = triple_on_tape(&mut tape, triple)?;
    let logits = tape.constant(classifier.logits(&triple.joint));
    let (_, breakdown) = total_on_tape(&mut tape, i, t, j, logits, labels, classifier, cfg)?;
    Ok(breakdown)
}
