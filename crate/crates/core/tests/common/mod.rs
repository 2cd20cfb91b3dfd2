//! Shared fixtures and independent reference implementations for integration tests.
//!
//! Every oracle here is written directly from the defining formulas with plain
//! loops over `f64`, sharing no numeric code with the library.

#![allow(dead_code)]

use std::path::PathBuf;

use mmfl_core::autodiff::Tape;
use mmfl_core::datagen::{fill_placeholders, read_records, DatasetSpec, MultiModalRecord};
use mmfl_core::losses::{total_on_tape, LossConfig};
use mmfl_core::model::{
    flatten_grads, forward_batch_on_tape, load_params, ClassifierParams, FrozenEncoders, FrozenFeatures, JointModuleParams, ModelConfig,
    ModelDims,
};
use mmfl_core::Matrix;

// ---------------------------------------------------------------------------
// Fixtures

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Dataset parameters of the committed two-class toy client.
pub fn toy_spec() -> DatasetSpec {
    DatasetSpec { num_classes: 2, dataset_seed: 20_240_601, ..DatasetSpec::default() }
}

pub const TOY_TRAIN: &str = "toy_train.jsonl";
pub const TOY_TEST: &str = "toy_test.jsonl";
pub const TOY_TRAIN_LEN: usize = 40;
pub const TOY_TEST_LEN: usize = 200;

pub fn toy_records(name: &str) -> Vec<MultiModalRecord<f64>> {
    read_records(&fixture_dir().join(name)).expect("committed fixture is readable")
}

/// The smallest configuration used by the gradient checks.
pub fn tiny_spec() -> DatasetSpec {
    DatasetSpec { num_classes: 3, latent_dim: 3, grid_side: 4, bins_per_dim: 3, dataset_seed: 5, ..DatasetSpec::default() }
}

pub fn tiny_model(mask: bool) -> ModelConfig {
    ModelConfig { d_enc: 5, d_com: 4, d_latent: 6, self_attention_heads: 2, patch_side: 2, attention_mask: mask }
}

// ---------------------------------------------------------------------------
// Oracles

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn sim(a: &[f64], b: &[f64], tau: f64) -> f64 {
    (cos(a, b) / tau).exp()
}

/// Contrastive matching loss, every pair term enumerated explicitly.
pub fn mcm_brute(img: &[Vec<f64>], txt: &[Vec<f64>], joint: &[Vec<f64>], tau: f64) -> f64 {
    let b = joint.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut omega_t = 0.0;
        let mut omega_i = 0.0;
        for j in 0..b {
            if j == i {
                continue;
            }
            omega_t += sim(&txt[i], &txt[j], tau) + sim(&txt[i], &joint[j], tau) + sim(&joint[i], &joint[j], tau);
            omega_i += sim(&img[i], &img[j], tau) + sim(&img[i], &joint[j], tau) + sim(&joint[i], &joint[j], tau);
        }
        let r = sim(&txt[i], &joint[i], tau) / omega_t + sim(&img[i], &joint[i], tau) / omega_i;
        total += r.ln();
    }
    -total / b as f64
}

/// Two affine layers, written out per coordinate.
pub fn logits_brute(c: &ClassifierParams<f64>, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = (0..c.w1.cols())
        .map(|k| c.b1.get(0, k) + (0..x.len()).map(|r| x[r] * c.w1.get(r, k)).sum::<f64>())
        .collect();
    (0..c.w2.cols()).map(|k| c.b2.get(0, k) + (0..h.len()).map(|r| h[r] * c.w2.get(r, k)).sum::<f64>()).collect()
}

pub fn ce_brute(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[label]
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Margin alignment loss with the strict-inequality gate, evaluated literally.
pub fn ram_brute(img: &[Vec<f64>], txt: &[Vec<f64>], joint: &[Vec<f64>], labels: &[usize], c: &ClassifierParams<f64>) -> f64 {
    let b = joint.len();
    let mut total = 0.0;
    for i in 0..b {
        let cj = ce_brute(&logits_brute(c, &joint[i]), labels[i]);
        for m in [&img[i], &txt[i]] {
            if ce_brute(&logits_brute(c, m), labels[i]) < cj {
                total += l2_dist(&joint[i], m);
            }
        }
    }
    total / b as f64
}

/// `(m−1)² tr(X Xᵀ H Y Yᵀ H)` with an explicit centering matrix.
pub fn cov_brute(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let m = x.len();
    let gram = |a: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..m).map(|i| (0..m).map(|j| dot(&a[i], &a[j])).collect()).collect() };
    let h: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64).collect()).collect();
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..m).map(|i| (0..m).map(|j| (0..m).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
    };
    let p = mul(&mul(&mul(&gram(x), &h), &gram(y)), &h);
    let tr: f64 = (0..m).map(|i| p[i][i]).sum();
    ((m - 1) as f64).powi(2) * tr
}

pub fn cka_brute(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    cov_brute(x, y) / (cov_brute(x, x) * cov_brute(y, y)).sqrt()
}

pub fn softmax_brute(xs: &[f64]) -> Vec<f64> {
    let z: f64 = xs.iter().map(|x| x.exp()).sum();
    xs.iter().map(|x| x.exp() / z).collect()
}

pub fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Random orthogonal `d × d` via Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(d: usize, mut gauss: impl FnMut() -> f64) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gauss()).collect();
        for c in &cols {
            let p = dot(&v, c);
            for k in 0..d {
                v[k] -= p * c[k];
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    (0..d).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect()
}

pub fn matmul_brute(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b[0].len();
    a.iter().map(|r| (0..cols).map(|j| (0..inner).map(|k| r[k] * b[k][j]).sum()).collect()).collect()
}

// ---------------------------------------------------------------------------
// Gradient checking

/// The local objective as a function of the flat parameter vector.
pub struct Objective<'a> {
    pub dims: &'a ModelDims,
    pub records: &'a [MultiModalRecord<f64>],
    pub features: &'a FrozenFeatures<f64>,
    pub labels: Vec<usize>,
    pub loss: LossConfig,
}

impl<'a> Objective<'a> {
    pub fn value(&self, flat: &[f64]) -> f64 {
        self.value_and_grad(flat).0
    }

    pub fn value_and_grad(&self, flat: &[f64]) -> (f64, Vec<f64>) {
        let (joint, classifier) = load_params(flat, self.dims).unwrap();
        let mut tape = Tape::new();
        let jv = joint.on_tape(&mut tape);
        let cv = classifier.on_tape(&mut tape);
        let batch: Vec<usize> = (0..self.records.len()).collect();
        let bv = forward_batch_on_tape(&mut tape, self.dims, self.records, self.features, &batch, &jv, &cv).unwrap();
        let (total, b) =
            total_on_tape(&mut tape, bv.image, bv.text, bv.joint, bv.logits, &self.labels, &classifier, &self.loss).unwrap();
        let g = flatten_grads(&tape.backward(total), &jv, &cv);
        (b.total, g)
    }
}

/// Parameter groups as `(name, offset, len)` in canonical flat order.
pub fn param_groups(dims: &ModelDims) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut off = 0;
    for (name, r, c) in JointModuleParams::<f64>::shapes(dims).into_iter().chain(ClassifierParams::<f64>::shapes(dims)) {
        out.push((name.to_string(), off, r * c));
        off += r * c;
    }
    out
}

/// Per-group relative error `‖fd − analytic‖ / max(‖fd‖, ‖analytic‖)`.
pub fn gradient_errors(obj: &Objective<'_>, flat: &[f64], step: f64) -> Vec<(String, f64)> {
    let (_, analytic) = obj.value_and_grad(flat);
    let mut x = flat.to_vec();
    let mut fd = vec![0.0; flat.len()];
    for k in 0..flat.len() {
        let orig = x[k];
        x[k] = orig + step;
        let up = obj.value(&x);
        x[k] = orig - step;
        let down = obj.value(&x);
        x[k] = orig;
        fd[k] = (up - down) / (2.0 * step);
    }
    param_groups(obj.dims)
        .into_iter()
        .map(|(name, off, len)| {
            let a = &analytic[off..off + len];
            let f = &fd[off..off + len];
            let diff = l2_dist(a, f);
            let scale = dot(a, a).sqrt().max(dot(f, f).sqrt());
            (name, if scale == 0.0 { 0.0 } else { diff / scale })
        })
        .collect()
}

/// Three placeholder-filled records of the tiny configuration and their features.
pub fn tiny_batch(
    dims: &ModelDims,
    spec: &DatasetSpec,
    records: &[MultiModalRecord<f64>],
    model_seed: u64,
) -> (Vec<MultiModalRecord<f64>>, FrozenFeatures<f64>) {
    let filled: Vec<MultiModalRecord<f64>> = records.iter().map(|r| fill_placeholders(r, spec)).collect();
    let frozen = FrozenEncoders::new(dims, model_seed);
    let features = frozen.features(&filled).unwrap();
    (filled, features)
}

// ---------------------------------------------------------------------------
// Completion fidelity

/// Oracle configuration at which completion fidelity is measured.
pub fn fidelity_oracle() -> mmfl_core::completion::OracleConfig {
    mmfl_core::completion::OracleConfig { gen_image_sigma: 0.1, ..mmfl_core::completion::OracleConfig::default() }
}

/// Class-recovery rates over `trials` fresh records: `(image→text, text→image)`.
///
/// image→text: the generated tokens are decoded to bin centers and assigned to
/// the nearest class prototype. text→image: the generated image is mapped back
/// to latent space by the oracle's decoder and assigned the same way.
pub fn completion_fidelity(trials: usize, seed: u64) -> (f64, f64) {
    use mmfl_core::completion::SyntheticOracle;
    use mmfl_core::datagen::{apply_missing, gen_dataset};
    let spec = DatasetSpec { dataset_seed: seed, ..DatasetSpec::default() };
    let (records, _) = gen_dataset::<f64>(&spec, trials, 1).unwrap();
    let oracle = SyntheticOracle::<f64>::new(&spec, fidelity_oracle(), seed ^ 0xF1DE).unwrap();
    let no_text = apply_missing(&records, 1.0, 0.0, seed).unwrap();
    let no_image = apply_missing(&records, 1.0, 1.0, seed).unwrap();
    let mut i2t = 0usize;
    let mut t2i = 0usize;
    for ((a, b), truth) in no_text.iter().zip(&no_image).zip(&records) {
        let tokens = oracle.image_to_text(a, &spec, seed).unwrap();
        if oracle.latent().nearest_prototype(&spec.decode_tokens::<f64>(&tokens)) == truth.label {
            i2t += 1;
        }
        let image = oracle.text_to_image(b, &spec, seed).unwrap();
        if oracle.latent().nearest_prototype(&oracle.decode_image(&image)) == truth.label {
            t2i += 1;
        }
    }
    (i2t as f64 / trials as f64, t2i as f64 / trials as f64)
}
