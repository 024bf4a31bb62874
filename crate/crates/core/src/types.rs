//! Shared domain types: labels, concepts, embeddings, detections and the
//! annotated image records every other module consumes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index in `[0, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub usize);

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Integer handle of a candidate concept, unique within a catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A precomputed encoder output. Entries are finite and the vector is not
/// all-zero; values are kept exactly as ingested (no renormalization).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if crate::similarity::norm(&values) < crate::similarity::ZERO_NORM_TOL {
            return Err(Error::ZeroVector);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(de)?;
        Embedding::new(values).map_err(serde::de::Error::custom)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Axis-aligned box in pixel units, corners `(x1, y1)` and `(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 < self.x2 && self.y1 < self.y2)
    }

    /// Area of the intersection; zero when the boxes are disjoint or only
    /// share an edge.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.intersection_area(other) > 0.0
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// One detector output for a prompted concept.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub concept: ConceptId,
}

/// Row-major `H x W x C` float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// An image record: class label, image embedding and candidate detections.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub sample_id: String,
    pub label: ClassLabel,
    pub image_embedding: Embedding,
    pub detections: Vec<Detection>,
    /// Only needed for augmentation.
    pub pixels: Option<Arc<ImageTensor>>,
}

impl AnnotatedSample {
    /// Max confidence per concept, ordered by concept id.
    pub fn concept_confidences(&self) -> BTreeMap<ConceptId, f64> {
        let mut best = BTreeMap::new();
        for det in &self.detections {
            best.entry(det.concept)
                .and_modify(|c: &mut f64| *c = c.max(det.confidence))
                .or_insert(det.confidence);
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub id: ConceptId,
    pub text: String,
    pub class_of_origin: ClassLabel,
    pub embedding: Embedding,
}

/// Per-class candidate concept lists with their text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptCatalog {
    per_class: Vec<Vec<ConceptId>>,
    concepts: BTreeMap<ConceptId, Concept>,
    dim: usize,
}

impl ConceptCatalog {
    /// Builds a catalog over classes `0..num_classes`. Every class needs at
    /// least one concept; ids must be unique and texts nonempty.
    pub fn new(num_classes: usize, concepts: Vec<Concept>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidCatalog("no classes".into()));
        }
        let dim = concepts
            .first()
            .map(|c| c.embedding.dim())
            .ok_or_else(|| Error::InvalidCatalog("no concepts".into()))?;
        let mut per_class = vec![Vec::new(); num_classes];
        let mut map = BTreeMap::new();
        for concept in concepts {
            if concept.text.trim().is_empty() {
                return Err(Error::InvalidCatalog(format!(
                    "concept {} has empty text",
                    concept.id
                )));
            }
            if concept.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: concept.embedding.dim(),
                });
            }
            let class = concept.class_of_origin;
            if class.0 >= num_classes {
                return Err(Error::UnknownClass(class));
            }
            if map.contains_key(&concept.id) {
                return Err(Error::InvalidCatalog(format!(
                    "duplicate concept id {}",
                    concept.id
                )));
            }
            per_class[class.0].push(concept.id);
            map.insert(concept.id, concept);
        }
        for (l, ids) in per_class.iter_mut().enumerate() {
            if ids.is_empty() {
                return Err(Error::InvalidCatalog(format!("class {l} has no concepts")));
            }
            ids.sort_unstable();
        }
        Ok(Self {
            per_class,
            concepts: map,
            dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Candidate concepts `S_l`, sorted by id.
    pub fn class_concepts(&self, label: ClassLabel) -> Result<&[ConceptId]> {
        self.per_class
            .get(label.0)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(label))
    }

    pub fn concept(&self, id: ConceptId) -> Result<&Concept> {
        self.concepts.get(&id).ok_or(Error::UnknownConcept(id))
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.concepts.contains_key(&id)
    }

    pub fn embedding(&self, id: ConceptId) -> Result<&Embedding> {
        self.concept(id).map(|c| &c.embedding)
    }

    /// All concepts in id order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    ConfidenceOutOfRange(f64),
    DegenerateBox,
    BoxOutsideImage,
    UnknownConcept(ConceptId),
    ConceptNotInClass { concept: ConceptId, class: ClassLabel },
    UnknownClass(ClassLabel),
    DimensionMismatch { expected: usize, found: usize },
    PixelShape(String),
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ConfidenceOutOfRange(c) => write!(f, "confidence out of [0,1] ({c})"),
            Self::DegenerateBox => write!(f, "degenerate box"),
            Self::BoxOutsideImage => write!(f, "box outside image"),
            Self::UnknownConcept(id) => write!(f, "unknown concept {id}"),
            Self::ConceptNotInClass { concept, class } => {
                write!(f, "concept {concept} not a candidate of class {class}")
            }
            Self::UnknownClass(l) => write!(f, "unknown class {l}"),
            Self::DimensionMismatch { expected, found } => {
                write!(f, "embedding dimension {found}, expected {expected}")
            }
            Self::PixelShape(msg) => write!(f, "pixel tensor: {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sample_id: String,
    pub detection: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.detection {
            Some(j) => write!(f, "sample {} detection {}: {}", self.sample_id, j, self.kind),
            None => write!(f, "sample {}: {}", self.sample_id, self.kind),
        }
    }
}

/// Lists every structural problem in `samples` against `catalog`. An empty
/// report means the dataset is valid.
pub fn validate_dataset(samples: &[AnnotatedSample], catalog: &ConceptCatalog) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |sample: &AnnotatedSample, detection: Option<usize>, kind| {
        report.push(Violation {
            sample_id: sample.sample_id.clone(),
            detection,
            kind,
        })
    };
    for sample in samples {
        if sample.image_embedding.dim() != catalog.dim() {
            push(
                sample,
                None,
                ViolationKind::DimensionMismatch {
                    expected: catalog.dim(),
                    found: sample.image_embedding.dim(),
                },
            );
        }
        let candidates = catalog.class_concepts(sample.label).ok();
        if candidates.is_none() {
            push(sample, None, ViolationKind::UnknownClass(sample.label));
        }
        if let Some(px) = &sample.pixels {
            if px.channels != 3 {
                push(
                    sample,
                    None,
                    ViolationKind::PixelShape(format!("{} channels, expected 3", px.channels)),
                );
            }
            if px.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                push(
                    sample,
                    None,
                    ViolationKind::PixelShape("values outside [0,1]".into()),
                );
            }
        }
        for (j, det) in sample.detections.iter().enumerate() {
            if !(0.0..=1.0).contains(&det.confidence) {
                push(
                    sample,
                    Some(j),
                    ViolationKind::ConfidenceOutOfRange(det.confidence),
                );
            }
            let b = &det.bbox;
            let finite = b.to_array().iter().all(|v| v.is_finite());
            if !finite || b.is_degenerate() {
                push(sample, Some(j), ViolationKind::DegenerateBox);
            } else {
                let (w, h) = match &sample.pixels {
                    Some(px) => (px.width as f64, px.height as f64),
                    None => (f64::INFINITY, f64::INFINITY),
                };
                if !b.fits_within(w, h) {
                    push(sample, Some(j), ViolationKind::BoxOutsideImage);
                }
            }
            if !catalog.contains(det.concept) {
                push(sample, Some(j), ViolationKind::UnknownConcept(det.concept));
            } else if let Some(cands) = candidates {
                if cands.binary_search(&det.concept).is_err() {
                    push(
                        sample,
                        Some(j),
                        ViolationKind::ConceptNotInClass {
                            concept: det.concept,
                            class: sample.label,
                        },
                    );
                }
            }
        }
    }
    report
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    pub fn concept(id: u32, class: usize, v: &[f64]) -> Concept {
        Concept {
            id: ConceptId(id),
            text: format!("concept {id}"),
            class_of_origin: ClassLabel(class),
            embedding: emb(v),
        }
    }

    pub fn det(concept: u32, confidence: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(1.0, 1.0, 5.0, 5.0),
            confidence,
            concept: ConceptId(concept),
        }
    }

    pub fn sample(id: &str, label: usize, v: &[f64], detections: Vec<Detection>) -> AnnotatedSample {
        AnnotatedSample {
            sample_id: id.into(),
            label: ClassLabel(label),
            image_embedding: emb(v),
            detections,
            pixels: None,
        }
    }

    /// Two classes in 3-d, two concepts each.
    pub fn small_catalog() -> ConceptCatalog {
        ConceptCatalog::new(
            2,
            vec![
                concept(0, 0, &[1.0, 0.0, 0.0]),
                concept(1, 0, &[0.0, 1.0, 0.0]),
                concept(2, 1, &[0.0, 0.0, 1.0]),
                concept(3, 1, &[-1.0, 0.0, 0.0]),
            ],
        )
        .unwrap()
    }
}
