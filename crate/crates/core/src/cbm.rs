//! Linear concept-bottleneck model.
//!
//! `concept_logits = W_g z + b_g`, `class_logits = W_F sigmoid(concept_logits) + b_F`.
//! Training minimizes `L_C + gamma1 * L_Y + gamma2 * R_beta` where `L_C` is
//! the concept BCE averaged over samples and concept dimensions, `L_Y` the
//! softmax cross entropy and `R_beta = (1 - beta)/2 ||W_F||^2 + beta ||W_F||_1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConceptLabeledSample, ConceptVocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmModel {
    /// Embedding dimension.
    pub d: usize,
    /// Number of concepts (bottleneck width).
    pub k: usize,
    /// Number of classes.
    pub num_classes: usize,
    /// `k x d`, row-major.
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
    /// `num_classes x k`, row-major.
    pub w_f: Vec<f64>,
    pub b_f: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Mode {
    /// Subgradient `beta * sign(w)` with `sign(0) = 0`.
    Subgradient,
    /// Soft-threshold `W_F` after each smooth gradient step.
    Proximal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    pub momentum: f64,
    pub l1_mode: L1Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1e-4,
            beta: 0.5,
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 64,
            rng_seed: 0,
            momentum: 0.0,
            l1_mode: L1Mode::Subgradient,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma1 >= 0.0) || !(self.gamma2 >= 0.0) {
            return bad("gamma1 and gamma2 must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub concept_logits: Vec<f64>,
    pub activations: Vec<f64>,
    pub class_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub concept: f64,
    pub task: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: ObjectiveTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Epoch 0 is the initialization.
    pub epochs: Vec<EpochRecord>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross entropy of `sigmoid(logit)` against `target`, in the logit
/// domain.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    (logit.max(0.0) - target * logit) + (-logit.abs()).exp().ln_1p()
}

/// Max entry and `ln(sum exp(x - max))`, the latter via `ln_1p` over the
/// non-maximal terms so small tails keep full precision.
fn max_and_log_tail(xs: &[f64]) -> (f64, f64) {
    let (arg, m) = xs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    if !m.is_finite() {
        return (m, 0.0);
    }
    let tail: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - m).exp())
        .sum();
    (m, tail.ln_1p())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let (m, t) = max_and_log_tail(xs);
    m + t
}

/// Softmax cross entropy of `logits` against class `target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let (m, t) = max_and_log_tail(logits);
    (m - logits[target]) + t
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl CbmModel {
    pub fn zeros(d: usize, k: usize, num_classes: usize) -> Self {
        Self {
            d,
            k,
            num_classes,
            w_g: vec![0.0; k * d],
            b_g: vec![0.0; k],
            w_f: vec![0.0; num_classes * k],
            b_f: vec![0.0; num_classes],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(d: usize, k: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(d, k, num_classes);
        let bg = 1.0 / (d as f64).sqrt();
        let bf = 1.0 / (k as f64).sqrt();
        m.w_g.iter_mut().chain(m.b_g.iter_mut()).for_each(|w| *w = rng.gen_range(-bg..=bg));
        m.w_f.iter_mut().chain(m.b_f.iter_mut()).for_each(|w| *w = rng.gen_range(-bf..=bf));
        m
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            (self.w_g.len(), self.k * self.d),
            (self.b_g.len(), self.k),
            (self.w_f.len(), self.num_classes * self.k),
            (self.b_f.len(), self.num_classes),
        ];
        for (found, expected) in shapes {
            if found != expected {
                return Err(Error::DimensionMismatch { expected, found });
            }
        }
        if self.params().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w_g.len() + self.b_g.len() + self.w_f.len() + self.b_f.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w_g.iter().chain(&self.b_g).chain(&self.w_f).chain(&self.b_f)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_g
            .iter_mut()
            .chain(self.b_g.iter_mut())
            .chain(self.w_f.iter_mut())
            .chain(self.b_f.iter_mut())
    }

    pub fn concept_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: z.len(),
            });
        }
        Ok((0..self.k)
            .map(|j| {
                let row = &self.w_g[j * self.d..(j + 1) * self.d];
                row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.b_g[j]
            })
            .collect())
    }

    /// Class logits from bottleneck activations only.
    pub fn head(&self, activations: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let row = &self.w_f[c * self.k..(c + 1) * self.k];
                row.iter().zip(activations).map(|(w, a)| w * a).sum::<f64>() + self.b_f[c]
            })
            .collect()
    }

    pub fn forward(&self, z: &[f64]) -> Result<Forward> {
        let concept_logits = self.concept_logits(z)?;
        let activations: Vec<f64> = concept_logits.iter().map(|&c| sigmoid(c)).collect();
        let class_logits = self.head(&activations);
        Ok(Forward {
            concept_logits,
            activations,
            class_logits,
        })
    }
}

pub fn forward(model: &CbmModel, z: &[f64]) -> Result<Forward> {
    model.forward(z)
}

fn check_batch(model: &CbmModel, batch: &[ConceptLabeledSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    for s in batch {
        if s.concept_vector.len() != model.k {
            return Err(Error::DimensionMismatch {
                expected: model.k,
                found: s.concept_vector.len(),
            });
        }
        if s.label.0 >= model.num_classes {
            return Err(Error::UnknownClass(s.label));
        }
    }
    Ok(())
}

/// Mean BCE over samples and concept dimensions.
pub fn loss_concept(model: &CbmModel, batch: &[ConceptLabeledSample]) -> Result<f64> {
    check_batch(model, batch)?;
    let mut total = 0.0;
    for s in batch {
        let logits = model.concept_logits(s.image_embedding.as_slice())?;
        total += logits
            .iter()
            .zip(&s.concept_vector)
            .map(|(&c, &o)| bce_with_logit(c, o as f64))
            .sum::<f64>();
    }
    Ok(total / (batch.len() * model.k) as f64)
}

/// Mean softmax cross entropy of the class logits.
pub fn loss_task(model: &CbmModel, batch: &[ConceptLabeledSample]) -> Result<f64> {
    check_batch(model, batch)?;
    let mut total = 0.0;
    for s in batch {
        let f = model.forward(s.image_embedding.as_slice())?;
        total += cross_entropy(&f.class_logits, s.label.0);
    }
    Ok(total / batch.len() as f64)
}

/// Elastic net on the head weights (biases excluded).
pub fn regularizer(model: &CbmModel, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta {beta} outside [0, 1]")));
    }
    let sq: f64 = model.w_f.iter().map(|w| w * w).sum();
    let abs: f64 = model.w_f.iter().map(|w| w.abs()).sum();
    Ok((1.0 - beta) * 0.5 * sq + beta * abs)
}

pub fn objective(model: &CbmModel, batch: &[ConceptLabeledSample], config: &TrainConfig) -> Result<ObjectiveTerms> {
    let concept = loss_concept(model, batch)?;
    let task = loss_task(model, batch)?;
    let reg = regularizer(model, config.beta)?;
    Ok(ObjectiveTerms {
        concept,
        task,
        regularizer: reg,
        total: concept + config.gamma1 * task + config.gamma2 * reg,
    })
}

/// Analytic gradient of the objective, laid out like the model. With
/// `include_l1 = false` the L1 part of the regularizer is left out (for
/// proximal steps).
fn gradient(
    model: &CbmModel,
    batch: &[ConceptLabeledSample],
    config: &TrainConfig,
    include_l1: bool,
) -> Result<CbmModel> {
    check_batch(model, batch)?;
    let (d, k, l) = (model.d, model.k, model.num_classes);
    let mut g = CbmModel::zeros(d, k, l);
    let n = batch.len() as f64;
    let concept_scale = 1.0 / (n * k as f64);
    let task_scale = config.gamma1 / n;
    let mut softmax = vec![0.0; l];
    let mut dc = vec![0.0; k];
    for s in batch {
        let z = s.image_embedding.as_slice();
        let f = model.forward(z)?;
        let lse = log_sum_exp(&f.class_logits);
        for (p, &y) in softmax.iter_mut().zip(&f.class_logits) {
            *p = (y - lse).exp();
        }
        softmax[s.label.0] -= 1.0;
        for c in 0..l {
            let dy = task_scale * softmax[c];
            g.b_f[c] += dy;
            for j in 0..k {
                g.w_f[c * k + j] += dy * f.activations[j];
            }
        }
        for j in 0..k {
            let a = f.activations[j];
            let mut da = 0.0;
            for c in 0..l {
                da += task_scale * softmax[c] * model.w_f[c * k + j];
            }
            dc[j] = concept_scale * (a - s.concept_vector[j] as f64) + da * a * (1.0 - a);
        }
        for j in 0..k {
            g.b_g[j] += dc[j];
            let row = &mut g.w_g[j * d..(j + 1) * d];
            for (gw, &x) in row.iter_mut().zip(z) {
                *gw += dc[j] * x;
            }
        }
    }
    let beta = config.beta;
    for (gw, &w) in g.w_f.iter_mut().zip(&model.w_f) {
        let mut r = (1.0 - beta) * w;
        if include_l1 {
            r += beta * sign(w);
        }
        *gw += config.gamma2 * r;
    }
    Ok(g)
}

pub fn objective_gradient(
    model: &CbmModel,
    batch: &[ConceptLabeledSample],
    config: &TrainConfig,
) -> Result<CbmModel> {
    gradient(model, batch, config, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator, so near-zero gradient entries
/// are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient with central finite differences of the
/// total objective over every parameter.
pub fn gradient_check(model: &CbmModel, batch: &[ConceptLabeledSample], config: &TrainConfig) -> Result<GradientCheck> {
    let analytic = objective_gradient(model, batch, config)?;
    let analytic: Vec<f64> = analytic.params().copied().collect();
    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.params().nth(i).expect("parameter index in range");
        *probe.params_mut().nth(i).expect("parameter index in range") = orig + FD_STEP;
        let plus = objective(&probe, batch, config)?.total;
        *probe.params_mut().nth(i).expect("parameter index in range") = orig - FD_STEP;
        let minus = objective(&probe, batch, config)?.total;
        *probe.params_mut().nth(i).expect("parameter index in range") = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR));
    }
    Ok(GradientCheck {
        max_relative_error: max_rel,
        max_absolute_error: max_abs,
    })
}

fn soft_threshold(w: f64, t: f64) -> f64 {
    sign(w) * (w.abs() - t).max(0.0)
}

/// Mini-batch gradient descent from a seeded initialization.
pub fn train(
    dataset: &[ConceptLabeledSample],
    vocab: &ConceptVocabulary,
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(CbmModel, TrainingLog)> {
    config.validate()?;
    let k = vocab.len();
    if dataset.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if k == 0 {
        return Err(Error::EmptyVocabulary(f64::NAN));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "training needs at least 2 classes, got {num_classes}"
        )));
    }
    let d = dataset[0].image_embedding.dim();
    if let Some(bad) = dataset.iter().find(|s| s.image_embedding.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.image_embedding.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let model = CbmModel::init(d, k, num_classes, &mut rng);
    train_from(model, dataset, config, &mut rng)
}

/// Continues training `model` in place of a fresh initialization.
pub fn train_from(
    mut model: CbmModel,
    dataset: &[ConceptLabeledSample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(CbmModel, TrainingLog)> {
    config.validate()?;
    model.validate()?;
    check_batch(&model, dataset)?;
    let proximal = config.l1_mode == L1Mode::Proximal;
    let mut velocity = CbmModel::zeros(model.d, model.k, model.num_classes);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch: Vec<ConceptLabeledSample> = Vec::with_capacity(config.batch_size);
    let mut log = TrainingLog {
        epochs: vec![EpochRecord {
            epoch: 0,
            terms: objective(&model, dataset, config)?,
        }],
    };
    let shrink = config.learning_rate * config.gamma2 * config.beta;
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let g = gradient(&model, &batch, config, !proximal)?;
            for ((w, v), gw) in model.params_mut().zip(velocity.params_mut()).zip(g.params()) {
                *v = config.momentum * *v + gw;
                *w -= config.learning_rate * *v;
            }
            if proximal && shrink > 0.0 {
                model.w_f.iter_mut().for_each(|w| *w = soft_threshold(*w, shrink));
            }
        }
        let terms = objective(&model, dataset, config)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!(
                    "L_C = {}, L_Y = {}, R = {}",
                    terms.concept, terms.task, terms.regularizer
                ),
            });
        }
        log.epochs.push(EpochRecord { epoch, terms });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::types::{ClassLabel, ConceptId, Embedding};

    fn ex(z: &[f64], concepts: &[u8], label: usize) -> ConceptLabeledSample {
        ConceptLabeledSample {
            sample_id: "s".into(),
            label: ClassLabel(label),
            concept_vector: concepts.to_vec(),
            image_embedding: Embedding::new(z.to_vec()).unwrap(),
            pixels: None,
            detections: vec![],
            provenance: Provenance::Original,
        }
    }

    #[test]
    fn forward_examples() {
        let m = CbmModel::zeros(3, 2, 2);
        let f = m.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.concept_logits, vec![0.0, 0.0]);
        assert_eq!(f.activations, vec![0.5, 0.5]);
        assert_eq!(f.class_logits, vec![0.0, 0.0]);

        let mut m = CbmModel::zeros(1, 1, 1);
        m.w_g = vec![1.0];
        m.w_f = vec![2.0];
        // the zero embedding is only reachable through the raw forward path
        let f = m.forward(&[0.0]).unwrap();
        assert_eq!(f.concept_logits, vec![0.0]);
        assert_eq!(f.activations, vec![0.5]);
        assert_eq!(f.class_logits, vec![1.0]);
        assert!(matches!(m.forward(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_with_logit(0.0, 1.0) - ln2).abs() < 1e-15);
        assert!((bce_with_logit(0.0, 0.0) - ln2).abs() < 1e-15);
        // softplus(-20) = ln(1 + e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        assert!((bce_with_logit(20.0, 1.0) - expected).abs() < 1e-24);
        // 40-digit reference value
        assert!((expected - 2.061153620314380703e-9).abs() < 1e-23);

        let m = CbmModel::zeros(2, 1, 2);
        let l = loss_concept(&m, &[ex(&[1.0, 0.0], &[1], 0)]).unwrap();
        assert!((l - ln2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[0.0, 0.0], 0) - ln2).abs() < 1e-15);
        // ln(1 + e^-20) and 20 + ln(1 + e^-20)
        let tail = (-20.0f64).exp().ln_1p();
        assert!((cross_entropy(&[10.0, -10.0], 0) - tail).abs() < 1e-18);
        assert!((cross_entropy(&[10.0, -10.0], 1) - (20.0 + tail)).abs() < 1e-12);
        assert!(cross_entropy(&[1000.0, -1000.0], 1).is_finite());
    }

    #[test]
    fn regularizer_examples() {
        let mut m = CbmModel::zeros(1, 2, 1);
        m.w_f = vec![1.0, -2.0];
        assert_eq!(regularizer(&m, 0.5).unwrap(), 2.75);
        assert_eq!(regularizer(&m, 0.0).unwrap(), 0.5 * 5.0);
        assert_eq!(regularizer(&CbmModel::zeros(3, 4, 2), 0.3).unwrap(), 0.0);
        assert!(regularizer(&m, 1.5).is_err());
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        let data = vec![ex(&[1.0], &[1], 0), ex(&[-1.0], &[0], 1)];
        let cfg = TrainConfig {
            gamma1: 0.0,
            gamma2: 1.0,
            beta: 1.0,
            ..Default::default()
        };
        let g = objective_gradient(&CbmModel::zeros(1, 1, 2), &data, &cfg).unwrap();
        assert_eq!(g.w_f, vec![0.0, 0.0]);
    }

    fn vocab2() -> ConceptVocabulary {
        ConceptVocabulary::new([ConceptId(0), ConceptId(1)]).unwrap()
    }

    fn separable() -> Vec<ConceptLabeledSample> {
        let mut out = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            out.push(ex(&[1.0 + t, 0.2 - t * 0.1, 0.3], &[1, 0], 0));
            out.push(ex(&[-1.0 - t, 0.1 + t * 0.2, 0.3], &[0, 1], 1));
        }
        out
    }

    #[test]
    fn learning_rate_zero_keeps_initialization() {
        let data = separable();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let init = CbmModel::init(3, 2, 2, &mut rng);
        let (m, _) = train(&data, &vocab2(), 2, &cfg).unwrap();
        assert_eq!(m, init);
    }

    #[test]
    fn no_task_no_penalty_leaves_head_untouched() {
        let data = separable();
        let cfg = TrainConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            epochs: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let init = CbmModel::init(3, 2, 2, &mut rng);
        let (m, _) = train(&data, &vocab2(), 2, &cfg).unwrap();
        assert_eq!(m.w_f, init.w_f);
        assert_eq!(m.b_f, init.b_f);
        assert_ne!(m.w_g, init.w_g);
    }

    #[test]
    fn small_step_full_batch_is_monotone() {
        let data = separable();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.0,
            epochs: 50,
            batch_size: data.len(),
            ..Default::default()
        };
        let (_, log) = train(&data, &vocab2(), 2, &cfg).unwrap();
        for w in log.epochs.windows(2) {
            assert!(w[1].terms.total <= w[0].terms.total, "{:?}", w);
        }
    }

    #[test]
    fn separable_set_is_fit() {
        let data = separable();
        let cfg = TrainConfig {
            batch_size: data.len(),
            ..Default::default()
        };
        let (m, _) = train(&data, &vocab2(), 2, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|s| {
                let f = m.forward(s.image_embedding.as_slice()).unwrap();
                let pred = if f.class_logits[0] >= f.class_logits[1] { 0 } else { 1 };
                pred == s.label.0
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn proximal_mode_trains_and_shrinks() {
        let data = separable();
        let cfg = TrainConfig {
            gamma2: 0.5,
            beta: 1.0,
            l1_mode: L1Mode::Proximal,
            epochs: 50,
            ..Default::default()
        };
        let (m, log) = train(&data, &vocab2(), 2, &cfg).unwrap();
        assert!(m.validate().is_ok());
        assert!(log.epochs.last().unwrap().terms.total < log.epochs[0].terms.total);
        assert_eq!(soft_threshold(0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-0.8, 0.5), -0.30000000000000004);
    }

    #[test]
    fn divergence_is_reported() {
        let data = separable();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(train(&data, &vocab2(), 2, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data: Vec<_> = separable().into_iter().take(6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = CbmModel::init(3, 2, 2, &mut rng);
        m.w_f.iter_mut().for_each(|w| {
            if w.abs() < 1e-2 {
                *w = 0.05
            }
        });
        let cfg = TrainConfig {
            gamma2: 0.1,
            ..Default::default()
        };
        let check = gradient_check(&m, &data, &cfg).unwrap();
        assert!(check.max_relative_error <= 1e-4, "{check:?}");
    }
}
