use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::concept_sets::build_concept_set;
use crate::error::{Error, Result};
use crate::types::{
    AnnotatedSample, BoundingBox, ClassLabel, ConceptCatalog, ConceptId, Detection, Embedding,
    ImageTensor,
};

/// The global concept vocabulary, sorted by concept id. Position `j` is the
/// `j`-th bottleneck unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    concepts: Vec<ConceptId>,
    index_of: BTreeMap<ConceptId, usize>,
}

impl ConceptVocabulary {
    pub fn new(concepts: impl IntoIterator<Item = ConceptId>) -> Result<Self> {
        let set: BTreeSet<ConceptId> = concepts.into_iter().collect();
        if set.is_empty() {
            return Err(Error::EmptyVocabulary(f64::NAN));
        }
        let concepts: Vec<ConceptId> = set.into_iter().collect();
        let index_of = concepts.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { concepts, index_of })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[ConceptId] {
        &self.concepts
    }

    pub fn index_of(&self, id: ConceptId) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn get(&self, index: usize) -> Option<ConceptId> {
        self.concepts.get(index).copied()
    }
}

impl Serialize for ConceptVocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.concepts.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConceptVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ids = Vec::<ConceptId>::deserialize(d)?;
        let n = ids.len();
        let vocab = ConceptVocabulary::new(ids).map_err(serde::de::Error::custom)?;
        if vocab.len() != n {
            return Err(serde::de::Error::custom("duplicate concept in vocabulary"));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    /// Composite of `target_id` with a patch of `inserted_concept` cropped
    /// from `source_id`, pasted at `placement`.
    Augmented {
        source_id: String,
        target_id: String,
        inserted_concept: ConceptId,
        placement: BoundingBox,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLabeledSample {
    pub sample_id: String,
    pub label: ClassLabel,
    /// Entries in `{0, 1}`, one per vocabulary concept.
    pub concept_vector: Vec<u8>,
    pub image_embedding: Embedding,
    pub pixels: Option<Arc<ImageTensor>>,
    pub detections: Vec<Detection>,
    pub provenance: Provenance,
}

impl ConceptLabeledSample {
    pub fn is_original(&self) -> bool {
        matches!(self.provenance, Provenance::Original)
    }

    pub fn has_concept(&self, index: usize) -> bool {
        self.concept_vector.get(index).copied() == Some(1)
    }

    /// The record as an annotated sample (for loss evaluation).
    pub fn to_annotated(&self) -> AnnotatedSample {
        AnnotatedSample {
            sample_id: self.sample_id.clone(),
            label: self.label,
            image_embedding: self.image_embedding.clone(),
            detections: self.detections.clone(),
            pixels: self.pixels.clone(),
        }
    }
}

/// Union of the calibrated concept sets over `samples`.
pub fn build_vocabulary(
    samples: &[AnnotatedSample],
    catalog: &ConceptCatalog,
    lambda_hat: f64,
) -> Result<ConceptVocabulary> {
    let mut union = BTreeSet::new();
    for sample in samples {
        let cset = build_concept_set(sample, lambda_hat)?;
        union.extend(cset.members.into_iter().filter(|id| catalog.contains(*id)));
    }
    ConceptVocabulary::new(union).map_err(|_| Error::EmptyVocabulary(lambda_hat))
}

/// One-hot concept label `(o_i)_j = 1(s_j in C_lambda_hat(x_i))`. Concepts
/// outside the vocabulary are ignored.
pub fn label_sample(
    sample: &AnnotatedSample,
    vocab: &ConceptVocabulary,
    lambda_hat: f64,
) -> Result<ConceptLabeledSample> {
    let cset = build_concept_set(sample, lambda_hat)?;
    let mut concept_vector = vec![0u8; vocab.len()];
    for id in &cset.members {
        if let Some(j) = vocab.index_of(*id) {
            concept_vector[j] = 1;
        }
    }
    Ok(ConceptLabeledSample {
        sample_id: sample.sample_id.clone(),
        label: sample.label,
        concept_vector,
        image_embedding: sample.image_embedding.clone(),
        pixels: sample.pixels.clone(),
        detections: sample.detections.clone(),
        provenance: Provenance::Original,
    })
}

pub fn label_dataset(
    samples: &[AnnotatedSample],
    vocab: &ConceptVocabulary,
    lambda_hat: f64,
) -> Result<Vec<ConceptLabeledSample>> {
    samples
        .iter()
        .map(|s| label_sample(s, vocab, lambda_hat))
        .collect()
}
