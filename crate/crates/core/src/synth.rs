//! Seeded synthetic worlds standing in for the encoder and detector outputs,
//! plus the train/calibration split.
//!
//! Each class has a random unit prototype. A concept's text embedding mixes
//! its class prototype with a random direction; an image embedding is the
//! prototype plus Gaussian noise. Every class concept gets a detection with
//! high confidence when the concept is present in the image and a low-confidence
//! false positive, or nothing, when it is absent.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::SampleSource;
use crate::error::{Error, Result};
use crate::types::{
    AnnotatedSample, BoundingBox, ClassLabel, Concept, ConceptCatalog, ConceptId, Detection,
    Embedding, ImageTensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub concepts_per_class: usize,
    pub samples_per_class: usize,
    pub d: usize,
    /// Norm of the image noise relative to the unit prototype.
    pub noise: f64,
    pub seed: u64,
    /// Weight of the random direction in each concept embedding.
    pub concept_spread: f64,
    /// Probability that a class concept is visibly present in an image.
    pub presence: f64,
    /// Probability that a present concept is detected.
    pub detect_rate: f64,
    /// Probability of a low-confidence detection for an absent concept.
    pub false_positive_rate: f64,
    pub image_size: usize,
    pub with_pixels: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            concepts_per_class: 6,
            samples_per_class: 50,
            d: 32,
            noise: 0.5,
            seed: 0,
            concept_spread: 1.0,
            presence: 0.85,
            detect_rate: 0.97,
            false_positive_rate: 0.9,
            image_size: 64,
            with_pixels: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.concepts_per_class == 0 || self.samples_per_class == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("synthetic counts must be positive".into()));
        }
        for (name, p) in [
            ("presence", self.presence),
            ("detect_rate", self.detect_rate),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise >= 0.0) || !(self.concept_spread >= 0.0) {
            return Err(Error::InvalidConfig("noise and concept_spread must be non-negative".into()));
        }
        if self.with_pixels && self.image_size < 8 {
            return Err(Error::InvalidConfig("image_size must be at least 8".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic RGB color for a concept.
fn concept_color(id: ConceptId) -> [f32; 3] {
    let h = (id.0 as f32 * 0.618_034).fract();
    let k = |n: f32| {
        let t = (n + h * 6.0) % 6.0;
        1.0 - t.min(4.0 - t).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// A fixed synthetic world: prototypes and catalog drawn once from the seed.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    prototypes: Vec<Vec<f64>>,
    catalog: ConceptCatalog,
    /// Multiplies present-concept confidences in drawn targets.
    target_confidence_scale: f64,
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let prototypes: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit(&mut rng, spec.d)).collect();
        let mut concepts = Vec::new();
        for (l, p) in prototypes.iter().enumerate() {
            for j in 0..spec.concepts_per_class {
                let u = unit(&mut rng, spec.d);
                let v: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a + spec.concept_spread * b).collect();
                concepts.push(Concept {
                    id: ConceptId((l * spec.concepts_per_class + j) as u32),
                    text: format!("class {l} concept {j}"),
                    class_of_origin: ClassLabel(l),
                    embedding: Embedding::new(v)?,
                });
            }
        }
        let catalog = ConceptCatalog::new(spec.classes, concepts)?;
        Ok(Self {
            spec,
            prototypes,
            catalog,
            target_confidence_scale: 1.0,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn catalog(&self) -> &ConceptCatalog {
        &self.catalog
    }

    pub fn prototype(&self, label: ClassLabel) -> &[f64] {
        &self.prototypes[label.0]
    }

    /// A copy whose target draws come from a shifted detector: present
    /// concepts get their confidence multiplied by `scale`. Calibration
    /// draws are unchanged, so the two are no longer exchangeable.
    pub fn shifted(&self, scale: f64) -> Self {
        Self {
            target_confidence_scale: scale,
            ..self.clone()
        }
    }

    fn random_box(&self, rng: &mut impl Rng) -> BoundingBox {
        let s = self.spec.image_size.max(8);
        let lo = (s / 8).max(2);
        let hi = (s / 4).max(lo + 1);
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x = rng.gen_range(0..=s - w);
        let y = rng.gen_range(0..=s - h);
        BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
    }

    fn render(&self, dets: &[Detection], rng: &mut impl Rng) -> ImageTensor {
        let s = self.spec.image_size;
        let mut img = ImageTensor::filled(s, s, 3, 0.0);
        for v in img.data.iter_mut() {
            *v = 0.15 + 0.1 * rng.gen::<f32>();
        }
        for det in dets {
            let color = concept_color(det.concept);
            let a = det.confidence as f32;
            let b = &det.bbox;
            for r in b.y1 as usize..b.y2 as usize {
                for c in b.x1 as usize..b.x2 as usize {
                    for (ch, &col) in color.iter().enumerate() {
                        let old = img.get(r, c, ch);
                        img.set(r, c, ch, (1.0 - a) * old + a * col);
                    }
                }
            }
        }
        img
    }

    fn draw(
        &self,
        rng: &mut impl Rng,
        label: ClassLabel,
        sample_id: String,
        with_pixels: bool,
        confidence_scale: f64,
    ) -> Result<AnnotatedSample> {
        let spec = &self.spec;
        let scale = spec.noise / (spec.d as f64).sqrt();
        let z: Vec<f64> = self.prototypes[label.0]
            .iter()
            .map(|p| p + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut detections = Vec::new();
        for &id in self.catalog.class_concepts(label)? {
            let present = rng.gen_bool(spec.presence);
            let (emit, confidence) = if present {
                (rng.gen_bool(spec.detect_rate), rng.gen_range(0.55..1.0) * confidence_scale)
            } else {
                (rng.gen_bool(spec.false_positive_rate), rng.gen_range(0.02..0.45))
            };
            let bbox = self.random_box(rng);
            if emit {
                detections.push(Detection {
                    bbox,
                    confidence: confidence.clamp(0.0, 1.0),
                    concept: id,
                });
            }
        }
        let pixels = if with_pixels {
            Some(Arc::new(self.render(&detections, rng)))
        } else {
            None
        };
        Ok(AnnotatedSample {
            sample_id,
            label,
            image_embedding: Embedding::new(z)?,
            detections,
            pixels,
        })
    }

    /// `per_class` samples of every class, in class order. Sample draws use
    /// their own stream so they never disturb the world's geometry.
    pub fn generate(&self, per_class: usize, seed: u64, prefix: &str) -> Result<Vec<AnnotatedSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut out = Vec::with_capacity(per_class * self.spec.classes);
        for l in 0..self.spec.classes {
            for i in 0..per_class {
                let id = format!("{prefix}{l}-{i:04}");
                out.push(self.draw(&mut rng, ClassLabel(l), id, self.spec.with_pixels, 1.0)?);
            }
        }
        Ok(out)
    }

    fn draw_random_class(&self, rng: &mut ChaCha8Rng, confidence_scale: f64) -> Result<AnnotatedSample> {
        let label = ClassLabel(rng.gen_range(0..self.spec.classes));
        self.draw(rng, label, "mc".into(), false, confidence_scale)
    }
}

impl SampleSource for SyntheticWorld {
    fn catalog(&self) -> &ConceptCatalog {
        &self.catalog
    }

    fn draw_calibration(&self, rng: &mut ChaCha8Rng) -> Result<AnnotatedSample> {
        self.draw_random_class(rng, 1.0)
    }

    fn draw_target(&self, rng: &mut ChaCha8Rng) -> Result<AnnotatedSample> {
        self.draw_random_class(rng, self.target_confidence_scale)
    }

    fn exchangeable(&self) -> bool {
        self.target_confidence_scale == 1.0
    }
}

/// Samples and catalog of a fresh world; samples use `spec.samples_per_class`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<AnnotatedSample>, ConceptCatalog)> {
    let world = SyntheticWorld::new(*spec)?;
    let samples = world.generate(spec.samples_per_class, spec.seed, "s")?;
    Ok((samples, world.catalog))
}

/// Seeded shuffle split with `|train| = round(fraction * N)`, kept within
/// `[1, N - 1]` so neither part is empty.
pub fn split_train_cal<T: Clone>(samples: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {fraction} outside (0, 1)")));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(a), pick(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 2,
            concepts_per_class: 3,
            samples_per_class: 5,
            d: 8,
            image_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_validity() {
        let (s, cat) = generate_synthetic(&small()).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(cat.num_classes(), 2);
        assert_eq!(cat.class_concepts(ClassLabel(1)).unwrap().len(), 3);
        assert!(validate_dataset(&s, &cat).is_empty());
        assert!(s.iter().all(|x| x.pixels.as_ref().unwrap().height == 16));
    }

    #[test]
    fn zero_noise_gives_prototypes() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let world = SyntheticWorld::new(spec).unwrap();
        for s in world.generate(3, 9, "x").unwrap() {
            assert_eq!(s.image_embedding.as_slice(), world.prototype(s.label));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn shifted_world_is_not_exchangeable() {
        let w = SyntheticWorld::new(small()).unwrap();
        assert!(w.exchangeable());
        assert!(!w.shifted(0.5).exchangeable());
    }

    #[test]
    fn split_sizes() {
        let v: Vec<usize> = (0..10).collect();
        let (tr, cal) = split_train_cal(&v, 0.8, 0).unwrap();
        assert_eq!((tr.len(), cal.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&cal).copied().collect();
        all.sort_unstable();
        assert_eq!(all, v);
        assert_eq!(split_train_cal(&v, 0.8, 0).unwrap(), (tr, cal));
        let (a, b) = split_train_cal(&[1, 2, 3], 0.5, 4).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(matches!(split_train_cal(&[1], 0.5, 0), Err(Error::TooFewSamples { .. })));
        assert!(split_train_cal(&v, 1.0, 0).is_err());
    }
}
