//! Threshold-parameterized concept sets and the three set-quality losses
//! (discriminability, coverage, diversity).
//!
//! All sums run in concept-id order so repeated evaluations are
//! bit-identical. Empty sets score the maximum loss of 1 on every criterion;
//! sets with fewer than two concepts score 1 on diversity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{phi, sim};
use crate::types::{AnnotatedSample, ClassLabel, ConceptCatalog, ConceptId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Dis,
    Cov,
    Div,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Dis, Criterion::Cov, Criterion::Div];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Dis => "dis",
            Criterion::Cov => "cov",
            Criterion::Div => "div",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConceptSet {
    pub members: BTreeSet<ConceptId>,
    /// Threshold parameter that produced the set; `None` for sets chosen by
    /// other means (e.g. top-k model activations).
    pub lambda_used: Option<f64>,
}

impl ConceptSet {
    pub fn from_members(members: impl IntoIterator<Item = ConceptId>) -> Self {
        Self {
            members: members.into_iter().collect(),
            lambda_used: None,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.members.contains(&id)
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::LambdaOutOfRange(lambda))
    }
}

/// Concepts with at least one detection of confidence `>= 1 - lambda`.
pub fn build_concept_set(sample: &AnnotatedSample, lambda: f64) -> Result<ConceptSet> {
    check_lambda(lambda)?;
    let threshold = 1.0 - lambda;
    let members = sample
        .concept_confidences()
        .into_iter()
        .filter(|&(_, conf)| conf >= threshold)
        .map(|(id, _)| id)
        .collect();
    Ok(ConceptSet {
        members,
        lambda_used: Some(lambda),
    })
}

pub fn set_size(cset: &ConceptSet) -> usize {
    cset.len()
}

pub fn loss_dis(cset: &ConceptSet, sample: &AnnotatedSample, catalog: &ConceptCatalog) -> Result<f64> {
    LossEvaluator::new(catalog)?.view(sample)?.loss_dis(cset)
}

pub fn loss_cov(cset: &ConceptSet, sample: &AnnotatedSample, catalog: &ConceptCatalog) -> Result<f64> {
    LossEvaluator::new(catalog)?.view(sample)?.loss_cov(cset)
}

pub fn loss_div(cset: &ConceptSet, sample: &AnnotatedSample, catalog: &ConceptCatalog) -> Result<f64> {
    LossEvaluator::new(catalog)?.view(sample)?.loss_div(cset)
}

pub fn loss(
    criterion: Criterion,
    cset: &ConceptSet,
    sample: &AnnotatedSample,
    catalog: &ConceptCatalog,
) -> Result<f64> {
    LossEvaluator::new(catalog)?.view(sample)?.loss(criterion, cset)
}

/// Pairwise dissimilarities within one class's candidate pool.
#[derive(Debug, Clone)]
struct ClassGeometry {
    ids: Vec<ConceptId>,
    phi: Vec<f64>,
    pair_sum: f64,
}

impl ClassGeometry {
    fn phi_at(&self, i: usize, j: usize) -> f64 {
        self.phi[i * self.ids.len() + j]
    }
}

/// Catalog-level cache for loss evaluation. Build once and reuse across
/// samples; [`LossEvaluator::view`] adds the per-image similarities.
#[derive(Debug, Clone)]
pub struct LossEvaluator<'a> {
    catalog: &'a ConceptCatalog,
    classes: Vec<ClassGeometry>,
    position: BTreeMap<ConceptId, usize>,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(catalog: &'a ConceptCatalog) -> Result<Self> {
        let mut classes = Vec::with_capacity(catalog.num_classes());
        let mut position = BTreeMap::new();
        for l in 0..catalog.num_classes() {
            let ids = catalog.class_concepts(ClassLabel(l))?.to_vec();
            let n = ids.len();
            let mut table = vec![0.0; n * n];
            let mut pair_sum = 0.0;
            for i in 0..n {
                position.insert(ids[i], i);
                let ei = catalog.embedding(ids[i])?;
                for j in (i + 1)..n {
                    let v = phi(ei.as_slice(), catalog.embedding(ids[j])?.as_slice())?;
                    table[i * n + j] = v;
                    table[j * n + i] = v;
                    pair_sum += v;
                }
            }
            classes.push(ClassGeometry {
                ids,
                phi: table,
                pair_sum,
            });
        }
        Ok(Self {
            catalog,
            classes,
            position,
        })
    }

    pub fn catalog(&self) -> &'a ConceptCatalog {
        self.catalog
    }

    fn phi_between(&self, a: ConceptId, b: ConceptId) -> Result<f64> {
        let ca = self.catalog.concept(a)?;
        let cb = self.catalog.concept(b)?;
        if a == b {
            return Ok(0.0);
        }
        if ca.class_of_origin == cb.class_of_origin {
            let g = &self.classes[ca.class_of_origin.0];
            Ok(g.phi_at(self.position[&a], self.position[&b]))
        } else {
            phi(ca.embedding.as_slice(), cb.embedding.as_slice())
        }
    }

    /// Binds a sample, precomputing its similarity to every catalog concept.
    pub fn view<'s>(&'s self, sample: &'s AnnotatedSample) -> Result<SampleLossView<'s, 'a>> {
        let label = sample.label;
        if label.0 >= self.classes.len() {
            return Err(Error::UnknownClass(label));
        }
        let image = sample.image_embedding.as_slice();
        let mut sims = BTreeMap::new();
        for concept in self.catalog.concepts() {
            sims.insert(concept.id, sim(image, concept.embedding.as_slice())?);
        }
        let mut competing = 0.0;
        for (l, g) in self.classes.iter().enumerate() {
            if l == label.0 {
                continue;
            }
            for id in &g.ids {
                competing += sims[id];
            }
        }
        Ok(SampleLossView {
            evaluator: self,
            sample,
            sims,
            competing,
        })
    }
}

/// Loss evaluation for one fixed sample.
#[derive(Debug)]
pub struct SampleLossView<'s, 'a> {
    evaluator: &'s LossEvaluator<'a>,
    sample: &'s AnnotatedSample,
    sims: BTreeMap<ConceptId, f64>,
    competing: f64,
}

impl SampleLossView<'_, '_> {
    pub fn sample(&self) -> &AnnotatedSample {
        self.sample
    }

    fn own(&self) -> &ClassGeometry {
        &self.evaluator.classes[self.sample.label.0]
    }

    pub fn loss(&self, criterion: Criterion, cset: &ConceptSet) -> Result<f64> {
        match criterion {
            Criterion::Dis => self.loss_dis(cset),
            Criterion::Cov => self.loss_cov(cset),
            Criterion::Div => self.loss_div(cset),
        }
    }

    /// `1 - sum_{s in C} Sim(x, s) / sum_{y != y_i} sum_{s in S_y} Sim(x, s)`.
    /// Bounded above by 1 but may go negative.
    pub fn loss_dis(&self, cset: &ConceptSet) -> Result<f64> {
        if cset.is_empty() {
            return Ok(1.0);
        }
        if self.competing == 0.0 {
            return Err(Error::DegenerateCompetingSimilarity(self.sample.label));
        }
        let mut selected = 0.0;
        for id in &cset.members {
            selected += *self.sims.get(id).ok_or(Error::UnknownConcept(*id))?;
        }
        Ok(1.0 - selected / self.competing)
    }

    /// Mean over the class pool of the nearest-member dissimilarity.
    pub fn loss_cov(&self, cset: &ConceptSet) -> Result<f64> {
        if cset.is_empty() {
            return Ok(1.0);
        }
        let pool = self.own();
        let mut total = 0.0;
        for &s1 in &pool.ids {
            let mut nearest = f64::INFINITY;
            for &s2 in &cset.members {
                nearest = nearest.min(self.evaluator.phi_between(s1, s2)?);
            }
            total += nearest;
        }
        Ok(total / pool.ids.len() as f64)
    }

    /// `1 - (pairwise phi within C) / (pairwise phi within S_y)`, unordered
    /// pairs counted once.
    pub fn loss_div(&self, cset: &ConceptSet) -> Result<f64> {
        if cset.len() < 2 {
            return Ok(1.0);
        }
        let pool = self.own();
        if pool.pair_sum == 0.0 {
            return Err(Error::DegenerateCandidatePool(self.sample.label));
        }
        let members: Vec<ConceptId> = cset.members.iter().copied().collect();
        let mut selected = 0.0;
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                selected += self.evaluator.phi_between(a, b)?;
            }
        }
        Ok(1.0 - selected / pool.pair_sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::fixtures::*;
    use crate::types::Concept;
    use proptest::prelude::*;

    fn three_detections() -> AnnotatedSample {
        sample(
            "bird",
            0,
            &[1.0, 0.0, 0.0],
            vec![det(0, 0.85), det(1, 0.65), det(2, 0.40)],
        )
    }

    fn three_concept_catalog() -> ConceptCatalog {
        ConceptCatalog::new(
            2,
            vec![
                Concept {
                    text: "red beak".into(),
                    ..concept(0, 0, &[1.0, 0.0, 0.0])
                },
                Concept {
                    text: "striped wing".into(),
                    ..concept(1, 0, &[0.0, 1.0, 0.0])
                },
                Concept {
                    text: "yellow eyes".into(),
                    ..concept(2, 0, &[0.0, 0.0, 1.0])
                },
                concept(3, 1, &[0.0, 1.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn build_examples() {
        let s = three_detections();
        let cset = build_concept_set(&s, 0.3).unwrap();
        assert_eq!(cset.members, BTreeSet::from([ConceptId(0)]));
        assert_eq!(build_concept_set(&s, 1.0).unwrap().len(), 3);
        let empty = sample("e", 0, &[1.0, 0.0, 0.0], vec![]);
        assert!(build_concept_set(&empty, 0.7).unwrap().is_empty());
        assert!(matches!(
            build_concept_set(&s, 1.5),
            Err(Error::LambdaOutOfRange(_))
        ));
        assert!(build_concept_set(&s, -0.1).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = sample("t", 0, &[1.0, 0.0, 0.0], vec![det(0, 0.5)]);
        assert_eq!(build_concept_set(&s, 0.5).unwrap().len(), 1);
    }

    #[test]
    fn set_size_examples() {
        assert_eq!(set_size(&ConceptSet::default()), 0);
        assert_eq!(set_size(&ConceptSet::from_members([ConceptId(1)])), 1);
        assert_eq!(
            set_size(&ConceptSet::from_members([ConceptId(1), ConceptId(2), ConceptId(3)])),
            3
        );
    }

    /// Image along e1; own concepts are e1 and e2 (Sim 2 and 1); the
    /// competing class has two concepts orthogonal to the image (Sim 1 each).
    fn dis_fixture() -> (AnnotatedSample, ConceptCatalog) {
        let cat = ConceptCatalog::new(
            2,
            vec![
                concept(0, 0, &[1.0, 0.0, 0.0, 0.0]),
                concept(1, 0, &[0.0, 1.0, 0.0, 0.0]),
                concept(2, 1, &[0.0, 0.0, 1.0, 0.0]),
                concept(3, 1, &[0.0, 0.0, 0.0, 1.0]),
                concept(4, 1, &[0.0, 1.0, 1.0, 0.0]),
                concept(5, 1, &[0.0, 0.0, 1.0, 1.0]),
            ],
        )
        .unwrap();
        (sample("x", 0, &[1.0, 0.0, 0.0, 0.0], vec![]), cat)
    }

    #[test]
    fn dis_examples() {
        let (s, cat) = dis_fixture();
        // numerator 2.0 (concept 0), denominator 4.0
        let half = loss_dis(&ConceptSet::from_members([ConceptId(0)]), &s, &cat).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        assert_eq!(loss_dis(&ConceptSet::default(), &s, &cat).unwrap(), 1.0);
        // numerator 2 + 1 = 3 of 4
        let quarter =
            loss_dis(&ConceptSet::from_members([ConceptId(0), ConceptId(1)]), &s, &cat).unwrap();
        assert!((quarter - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dis_zero_when_numerator_matches_denominator() {
        // own concepts parallel to the image (Sim 2 + 2); four competing
        // concepts orthogonal to it (Sim 1 each).
        let cat = ConceptCatalog::new(
            2,
            vec![
                concept(0, 0, &[1.0, 0.0, 0.0]),
                concept(1, 0, &[2.0, 0.0, 0.0]),
                concept(2, 1, &[0.0, 1.0, 0.0]),
                concept(3, 1, &[0.0, 0.0, 1.0]),
                concept(4, 1, &[0.0, -1.0, 0.0]),
                concept(5, 1, &[0.0, 0.0, -1.0]),
            ],
        )
        .unwrap();
        let s = sample("x", 0, &[3.0, 0.0, 0.0], vec![]);
        let l = loss_dis(&ConceptSet::from_members([ConceptId(0), ConceptId(1)]), &s, &cat);
        assert_eq!(l.unwrap(), 0.0);
    }

    #[test]
    fn dis_degenerate_denominator() {
        let cat = ConceptCatalog::new(
            2,
            vec![concept(0, 0, &[1.0, 0.0]), concept(1, 1, &[-1.0, 0.0])],
        )
        .unwrap();
        let s = sample("x", 0, &[1.0, 0.0], vec![]);
        assert!(matches!(
            loss_dis(&ConceptSet::from_members([ConceptId(0)]), &s, &cat),
            Err(Error::DegenerateCompetingSimilarity(_))
        ));
    }

    #[test]
    fn cov_examples() {
        // s1 = e1, s2 = e2: phi = 0.5. Selected {s1}: (0 + 0.5) / 2.
        let cat = small_catalog();
        let s = sample("x", 0, &[1.0, 1.0, 0.0], vec![]);
        let l = loss_cov(&ConceptSet::from_members([ConceptId(0)]), &s, &cat).unwrap();
        assert_eq!(l, 0.25);
        let full = ConceptSet::from_members([ConceptId(0), ConceptId(1)]);
        assert_eq!(loss_cov(&full, &s, &cat).unwrap(), 0.0);
        assert_eq!(loss_cov(&ConceptSet::default(), &s, &cat).unwrap(), 1.0);
    }

    #[test]
    fn div_examples() {
        let cat = three_concept_catalog();
        let s = three_detections();
        let two = ConceptSet::from_members([ConceptId(0), ConceptId(1)]);
        assert!((loss_div(&two, &s, &cat).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let all = ConceptSet::from_members([ConceptId(0), ConceptId(1), ConceptId(2)]);
        assert_eq!(loss_div(&all, &s, &cat).unwrap(), 0.0);
        let one = ConceptSet::from_members([ConceptId(2)]);
        assert_eq!(loss_div(&one, &s, &cat).unwrap(), 1.0);
        assert_eq!(loss_div(&ConceptSet::default(), &s, &cat).unwrap(), 1.0);
    }

    #[test]
    fn div_degenerate_pool() {
        let cat = ConceptCatalog::new(
            2,
            vec![
                concept(0, 0, &[1.0, 0.0]),
                concept(1, 0, &[2.0, 0.0]),
                concept(2, 1, &[0.0, 1.0]),
            ],
        )
        .unwrap();
        let s = sample("x", 0, &[1.0, 0.0], vec![]);
        let both = ConceptSet::from_members([ConceptId(0), ConceptId(1)]);
        assert!(matches!(
            loss_div(&both, &s, &cat),
            Err(Error::DegenerateCandidatePool(_))
        ));
    }

    #[test]
    fn empty_set_scores_one_everywhere() {
        let cat = three_concept_catalog();
        let s = three_detections();
        for c in Criterion::ALL {
            assert_eq!(loss(c, &ConceptSet::default(), &s, &cat).unwrap(), 1.0);
        }
    }

    fn random_instance() -> impl Strategy<Value = (ConceptCatalog, AnnotatedSample)> {
        (2usize..5, 3usize..6).prop_flat_map(|(k, d)| {
            let n = 2 * k;
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
                prop::collection::vec(-1.0f64..1.0, d),
                prop::collection::vec(0.0f64..1.0, k),
            )
                .prop_filter_map("nonzero vectors", move |(cvecs, img, confs)| {
                    let concepts: Vec<Concept> = cvecs
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            Some(Concept {
                                id: ConceptId(i as u32),
                                text: format!("c{i}"),
                                class_of_origin: ClassLabel(i / k),
                                embedding: crate::types::Embedding::new(v.clone()).ok()?,
                            })
                        })
                        .collect::<Option<_>>()?;
                    let cat = ConceptCatalog::new(2, concepts).ok()?;
                    let dets = confs
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| det(i as u32, c))
                        .collect();
                    let s = AnnotatedSample {
                        sample_id: "p".into(),
                        label: ClassLabel(0),
                        image_embedding: crate::types::Embedding::new(img).ok()?,
                        detections: dets,
                        pixels: None,
                    };
                    Some((cat, s))
                })
        })
    }

    proptest! {
        #[test]
        fn losses_are_monotone_in_lambda((cat, s) in random_instance()) {
            let ev = LossEvaluator::new(&cat).unwrap();
            let view = ev.view(&s).unwrap();
            let mut prev: Option<(ConceptSet, [f64; 3])> = None;
            for i in 0..=100 {
                let lambda = i as f64 / 100.0;
                let cset = build_concept_set(&s, lambda).unwrap();
                let losses = [
                    view.loss_dis(&cset).unwrap(),
                    view.loss_cov(&cset).unwrap(),
                    view.loss_div(&cset).unwrap(),
                ];
                prop_assert!(losses[0] <= 1.0);
                prop_assert!((0.0..=1.0).contains(&losses[1]));
                prop_assert!((0.0..=1.0).contains(&losses[2]));
                if let Some((pset, pl)) = &prev {
                    prop_assert!(pset.members.is_subset(&cset.members));
                    for k in 0..3 {
                        prop_assert!(losses[k] <= pl[k]);
                    }
                }
                prev = Some((cset, losses));
            }
        }
    }
}
