//! Overall/worst-class accuracy and concept compliance accuracy (CCA).
//!
//! A test sample is compliant when it is classified correctly and its
//! effective concept set (the `nec` most activated bottleneck concepts of the
//! predicted class) meets all three loss budgets against the true label.

use serde::{Deserialize, Serialize};

use crate::calibration::RiskBudget;
use crate::cbm::CbmModel;
use crate::concept_sets::{ConceptSet, Criterion, LossEvaluator};
use crate::dataset::ConceptVocabulary;
use crate::error::{Error, Result};
use crate::types::{AnnotatedSample, ClassLabel, ConceptCatalog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Number of effective concepts kept per sample.
    pub nec: usize,
    /// Compliance thresholds for the three losses.
    pub budget: RiskBudget,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nec: 10,
            budget: RiskBudget::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIndicators {
    pub sample_id: String,
    pub label: ClassLabel,
    pub predicted: ClassLabel,
    pub correct: bool,
    pub dis_ok: bool,
    pub cov_ok: bool,
    pub div_ok: bool,
    /// Losses of the effective set, ordered dis, cov, div.
    pub losses: [f64; 3],
    pub effective_set_size: usize,
}

impl SampleIndicators {
    pub fn compliant(&self) -> bool {
        self.correct && self.dis_ok && self.cov_ok && self.div_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub worst_class_accuracy: f64,
    pub cca: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_sample_deltas: Vec<SampleIndicators>,
    pub config: EvalConfig,
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &CbmModel, embedding: &[f64]) -> Result<ClassLabel> {
    let f = model.forward(embedding)?;
    Ok(ClassLabel(argmax(&f.class_logits)))
}

/// The `nec` candidates with the largest activation, ties broken by the
/// smaller index. Returned in ranking order.
pub fn top_concepts(activations: &[f64], candidates: &[usize], nec: usize) -> Vec<usize> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| activations[b].total_cmp(&activations[a]).then(a.cmp(&b)));
    ranked.truncate(nec);
    ranked
}

/// Vocabulary positions whose concept belongs to `class`.
pub fn class_positions(vocab: &ConceptVocabulary, catalog: &ConceptCatalog, class: ClassLabel) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (j, &id) in vocab.concepts().iter().enumerate() {
        if catalog.concept(id)?.class_of_origin == class {
            out.push(j);
        }
    }
    Ok(out)
}

/// Predicted class and its effective concept set.
pub fn effective_concept_set(
    model: &CbmModel,
    embedding: &[f64],
    vocab: &ConceptVocabulary,
    catalog: &ConceptCatalog,
    nec: usize,
) -> Result<(ClassLabel, ConceptSet)> {
    if nec == 0 {
        return Err(Error::InvalidConfig("nec must be at least 1".into()));
    }
    if vocab.len() != model.k {
        return Err(Error::DimensionMismatch {
            expected: model.k,
            found: vocab.len(),
        });
    }
    let f = model.forward(embedding)?;
    let predicted = ClassLabel(argmax(&f.class_logits));
    let candidates = class_positions(vocab, catalog, predicted)?;
    let top = top_concepts(&f.activations, &candidates, nec);
    let set = ConceptSet::from_members(top.into_iter().map(|j| vocab.concepts()[j]));
    Ok((predicted, set))
}

fn indicators(
    model: &CbmModel,
    sample: &AnnotatedSample,
    vocab: &ConceptVocabulary,
    evaluator: &LossEvaluator<'_>,
    config: &EvalConfig,
) -> Result<SampleIndicators> {
    let (predicted, set) = effective_concept_set(
        model,
        sample.image_embedding.as_slice(),
        vocab,
        evaluator.catalog(),
        config.nec,
    )?;
    let view = evaluator.view(sample)?;
    let mut losses = [0.0; 3];
    for (k, c) in Criterion::ALL.into_iter().enumerate() {
        losses[k] = view.loss(c, &set)?;
    }
    let b = &config.budget;
    Ok(SampleIndicators {
        sample_id: sample.sample_id.clone(),
        label: sample.label,
        predicted,
        correct: predicted == sample.label,
        dis_ok: losses[0] <= b.alpha_dis,
        cov_ok: losses[1] <= b.alpha_cov,
        div_ok: losses[2] <= b.alpha_div,
        losses,
        effective_set_size: set.len(),
    })
}

/// Summarizes per-sample indicators. Errors when a class has no samples.
pub fn summarize(per_sample_deltas: Vec<SampleIndicators>, num_classes: usize, config: EvalConfig) -> Result<EvalReport> {
    if per_sample_deltas.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for s in &per_sample_deltas {
        if s.label.0 >= num_classes {
            return Err(Error::UnknownClass(s.label));
        }
        totals[s.label.0] += 1;
        hits[s.label.0] += s.correct as usize;
    }
    if let Some(l) = totals.iter().position(|&t| t == 0) {
        return Err(Error::ClassAbsent(ClassLabel(l)));
    }
    let per_class_accuracy: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    let n = per_sample_deltas.len() as f64;
    let overall_accuracy = per_sample_deltas.iter().filter(|s| s.correct).count() as f64 / n;
    let cca = per_sample_deltas.iter().filter(|s| s.compliant()).count() as f64 / n;
    let worst_class_accuracy = per_class_accuracy.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        overall_accuracy,
        worst_class_accuracy,
        cca,
        per_class_accuracy,
        per_sample_deltas,
        config,
    })
}

pub fn accuracy_report(
    model: &CbmModel,
    test_set: &[AnnotatedSample],
    vocab: &ConceptVocabulary,
    catalog: &ConceptCatalog,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.budget.validate()?;
    let evaluator = LossEvaluator::new(catalog)?;
    let per_sample_deltas = test_set
        .iter()
        .map(|s| indicators(model, s, vocab, &evaluator, config))
        .collect::<Result<Vec<_>>>()?;
    summarize(per_sample_deltas, model.num_classes, *config)
}

/// CCA for each `nec` in `necs`.
pub fn cca_curve(
    model: &CbmModel,
    test_set: &[AnnotatedSample],
    vocab: &ConceptVocabulary,
    catalog: &ConceptCatalog,
    budget: &RiskBudget,
    necs: &[usize],
) -> Result<Vec<(usize, f64)>> {
    necs.iter()
        .map(|&nec| {
            let cfg = EvalConfig { nec, budget: *budget };
            accuracy_report(model, test_set, vocab, catalog, &cfg).map(|r| (nec, r.cca))
        })
        .collect()
}
