//! Copy-paste augmentation for concepts whose reliable occurrences are rare.
//!
//! A patch of the rare concept is cropped from a source image whose
//! calibrated set contains it, resized, and pasted into a same-class target
//! image at a window that has zero-area intersection with every reliable
//! box of a different concept in the target.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocabulary::{ConceptLabeledSample, ConceptVocabulary, Provenance};
use crate::error::{Error, Result};
use crate::types::{BoundingBox, ConceptCatalog, ConceptId, Detection, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Concepts with fewer positive labels than this are augmented.
    pub min_count: usize,
    pub max_placement_attempts: usize,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            min_count: 10,
            max_placement_attempts: 100,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count == 0 || self.max_placement_attempts == 0 {
            return Err(Error::InvalidConfig(
                "min_count and max_placement_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }
}

/// Positive-label count per vocabulary position.
fn concept_counts(dataset: &[ConceptLabeledSample], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for s in dataset {
        for (j, &v) in s.concept_vector.iter().enumerate().take(k) {
            counts[j] += v as usize;
        }
    }
    counts
}

/// Vocabulary concepts with fewer than `min_count` positive labels, sorted
/// ascending by count (ties by vocabulary order).
pub fn find_sparse_concepts(
    dataset: &[ConceptLabeledSample],
    vocab: &ConceptVocabulary,
    config: &AugmentationConfig,
) -> Vec<(ConceptId, usize)> {
    let counts = concept_counts(dataset, vocab.len());
    let mut sparse: Vec<(ConceptId, usize)> = vocab
        .concepts()
        .iter()
        .zip(counts)
        .filter(|&(_, c)| c < config.min_count)
        .map(|(&id, c)| (id, c))
        .collect();
    sparse.sort_by_key(|&(_, c)| c);
    sparse
}

/// Reliable boxes of concepts other than `rare_concept`: confidence at least
/// `1 - lambda_hat`.
pub fn reliable_boxes(detections: &[Detection], rare_concept: ConceptId, lambda_hat: f64) -> Vec<BoundingBox> {
    let threshold = 1.0 - lambda_hat;
    detections
        .iter()
        .filter(|d| d.confidence >= threshold && d.concept != rare_concept)
        .map(|d| d.bbox)
        .collect()
}

/// Rejection-samples an integer-aligned window inside a `width x height`
/// image that does not overlap any reliable box of `detections`. The window
/// keeps `source_box`'s aspect ratio at a uniform scale in `[0.5, 1]`,
/// shrunk if needed to fit. Returns `None` after `max_attempts` rejections.
pub fn sample_placement(
    width: usize,
    height: usize,
    detections: &[Detection],
    rare_concept: ConceptId,
    lambda_hat: f64,
    source_box: &BoundingBox,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<Option<BoundingBox>> {
    if source_box.is_degenerate() {
        return Err(Error::ShapeMismatch("degenerate source box".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::ShapeMismatch("empty target image".into()));
    }
    let blocked = reliable_boxes(detections, rare_concept, lambda_hat);
    let (sw, sh) = (source_box.width(), source_box.height());
    let (fw, fh) = (width as f64, height as f64);
    for _ in 0..max_attempts {
        let scale: f64 = rng.gen_range(0.5..=1.0);
        let mut w = (sw * scale).round().max(1.0);
        let mut h = (sh * scale).round().max(1.0);
        if w > fw || h > fh {
            let fit = (fw / w).min(fh / h);
            w = (w * fit).floor().max(1.0);
            h = (h * fit).floor().max(1.0);
        }
        let (w, h) = (w as usize, h as usize);
        let x = rng.gen_range(0..=width - w);
        let y = rng.gen_range(0..=height - h);
        let window = BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        if blocked.iter().all(|b| !window.overlaps(b)) {
            return Ok(Some(window));
        }
    }
    Ok(None)
}

/// Crops the pixel-aligned hull of `bbox` from `pixels`. The mask is set
/// where the pixel centre lies inside the box.
pub fn crop_source(pixels: &ImageTensor, bbox: &BoundingBox) -> Result<(ImageTensor, BinaryMask)> {
    let c0 = bbox.x1.floor().max(0.0) as usize;
    let r0 = bbox.y1.floor().max(0.0) as usize;
    let c1 = (bbox.x2.ceil() as usize).min(pixels.width);
    let r1 = (bbox.y2.ceil() as usize).min(pixels.height);
    if c0 >= c1 || r0 >= r1 {
        return Err(Error::ShapeMismatch(format!(
            "box {:?} has no pixels inside a {}x{} image",
            bbox.to_array(),
            pixels.height,
            pixels.width
        )));
    }
    let (h, w, ch) = (r1 - r0, c1 - c0, pixels.channels);
    let mut data = Vec::with_capacity(h * w * ch);
    let mut mask = Vec::with_capacity(h * w);
    for r in r0..r1 {
        for c in c0..c1 {
            for k in 0..ch {
                data.push(pixels.get(r, c, k));
            }
            let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
            mask.push(cx >= bbox.x1 && cx <= bbox.x2 && cy >= bbox.y1 && cy <= bbox.y2);
        }
    }
    if !mask.iter().any(|&m| m) {
        // thin boxes can miss every pixel centre; keep the whole hull
        mask.iter_mut().for_each(|m| *m = true);
    }
    Ok((
        ImageTensor::new(h, w, ch, data)?,
        BinaryMask {
            height: h,
            width: w,
            data: mask,
        },
    ))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let mut out = ImageTensor::filled(height, width, src.channels, 0.0);
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    for r in 0..height {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let wy = (fy - y0 as f64) as f32;
        for c in 0..width {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let wx = (fx - x0 as f64) as f32;
            for k in 0..src.channels {
                let top = src.get(y0, x0, k) * (1.0 - wx) + src.get(y0, x1, k) * wx;
                let bottom = src.get(y1, x0, k) * (1.0 - wx) + src.get(y1, x1, k) * wx;
                out.set(r, c, k, (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Nearest-neighbour resize; the result stays binary.
pub fn resize_nearest(src: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let sr = ((r * src.height) / height).min(src.height - 1);
        for c in 0..width {
            let sc = ((c * src.width) / width).min(src.width - 1);
            data.push(src.get(sr, sc));
        }
    }
    BinaryMask {
        height,
        width,
        data,
    }
}

fn window_extent(placement: &BoundingBox) -> Result<(usize, usize, usize, usize)> {
    let coords = placement.to_array();
    if coords.iter().any(|v| v.fract() != 0.0 || *v < 0.0) || placement.is_degenerate() {
        return Err(Error::ShapeMismatch(format!(
            "placement {coords:?} is not a pixel-aligned window"
        )));
    }
    Ok((
        placement.x1 as usize,
        placement.y1 as usize,
        placement.width() as usize,
        placement.height() as usize,
    ))
}

/// `mask * source + (1 - mask) * target` inside `placement`; every other
/// pixel is copied from `target` unchanged.
pub fn composite_patch(
    target: &ImageTensor,
    source_patch: &ImageTensor,
    source_mask: &BinaryMask,
    placement: &BoundingBox,
) -> Result<ImageTensor> {
    let (x0, y0, w, h) = window_extent(placement)?;
    if x0 + w > target.width || y0 + h > target.height {
        return Err(Error::ShapeMismatch("placement exceeds target image".into()));
    }
    if source_patch.width != w || source_patch.height != h || source_patch.channels != target.channels {
        return Err(Error::ShapeMismatch(format!(
            "patch {}x{}x{} does not match window {h}x{w}x{}",
            source_patch.height, source_patch.width, source_patch.channels, target.channels
        )));
    }
    if source_mask.width != w || source_mask.height != h || source_mask.data.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} does not match window {h}x{w}",
            source_mask.height, source_mask.width
        )));
    }
    let mut out = target.clone();
    for r in 0..h {
        for c in 0..w {
            if source_mask.get(r, c) {
                for k in 0..target.channels {
                    out.set(y0 + r, x0 + c, k, source_patch.get(r, c, k));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStatus {
    Reached,
    Exhausted,
    Unseedable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOutcome {
    pub concept: ConceptId,
    pub initial_count: usize,
    pub final_count: usize,
    pub added: usize,
    pub failed_placements: usize,
    pub status: AugmentStatus,
}

struct SourcePatch {
    sample: usize,
    bbox: BoundingBox,
}

/// Appends augmented composites for `rare_concept` until its positive count
/// reaches `min_count` or the pool of same-class targets lacking the concept
/// is exhausted. Existing records are never modified.
pub fn augment_rare_concept(
    dataset: &mut Vec<ConceptLabeledSample>,
    rare_concept: ConceptId,
    vocab: &ConceptVocabulary,
    lambda_hat: f64,
    catalog: &ConceptCatalog,
    config: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentOutcome> {
    config.validate()?;
    let idx = vocab
        .index_of(rare_concept)
        .ok_or(Error::UnknownConcept(rare_concept))?;
    let class = catalog.concept(rare_concept)?.class_of_origin;
    let threshold = 1.0 - lambda_hat;

    let sources: Vec<SourcePatch> = dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_original() && s.has_concept(idx) && s.pixels.is_some())
        .filter_map(|(i, s)| {
            s.detections
                .iter()
                .filter(|d| d.concept == rare_concept && d.confidence >= threshold)
                .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
                .map(|d| SourcePatch { sample: i, bbox: d.bbox })
        })
        .collect();
    if sources.is_empty() {
        return Err(Error::UnseedableConcept(rare_concept));
    }

    let initial_count = dataset.iter().filter(|s| s.has_concept(idx)).count();
    let mut count = initial_count;
    let mut targets: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_original() && s.label == class && !s.has_concept(idx) && s.pixels.is_some())
        .map(|(i, _)| i)
        .collect();
    targets.shuffle(rng);

    let mut added = Vec::new();
    let mut failed = 0;
    for t in targets {
        if count >= config.min_count {
            break;
        }
        let source = &sources[rng.gen_range(0..sources.len())];
        let target = &dataset[t];
        let target_px = target.pixels.as_deref().expect("targets carry pixels");
        let Some(window) = sample_placement(
            target_px.width,
            target_px.height,
            &target.detections,
            rare_concept,
            lambda_hat,
            &source.bbox,
            config.max_placement_attempts,
            rng,
        )?
        else {
            failed += 1;
            continue;
        };
        let src = &dataset[source.sample];
        let src_px = src.pixels.as_deref().expect("sources carry pixels");
        let (patch, mask) = crop_source(src_px, &source.bbox)?;
        let (w, h) = (window.width() as usize, window.height() as usize);
        let patch = resize_bilinear(&patch, h, w);
        let mask = resize_nearest(&mask, h, w);
        let pixels = composite_patch(target_px, &patch, &mask, &window)?;

        let mut concept_vector = target.concept_vector.clone();
        concept_vector[idx] = concept_vector[idx].max(1);
        let mut detections = target.detections.clone();
        detections.push(Detection {
            bbox: window,
            confidence: 1.0,
            concept: rare_concept,
        });
        added.push(ConceptLabeledSample {
            sample_id: format!("{}~aug-{}-{}", target.sample_id, rare_concept.0, count),
            label: target.label,
            concept_vector,
            image_embedding: target.image_embedding.clone(),
            pixels: Some(Arc::new(pixels)),
            detections,
            provenance: Provenance::Augmented {
                source_id: src.sample_id.clone(),
                target_id: target.sample_id.clone(),
                inserted_concept: rare_concept,
                placement: window,
            },
        });
        count += 1;
    }
    let n_added = added.len();
    dataset.extend(added);
    let status = if count >= config.min_count {
        AugmentStatus::Reached
    } else {
        log::warn!(
            "concept {rare_concept}: target pool exhausted at {count} of {} positives",
            config.min_count
        );
        AugmentStatus::Exhausted
    };
    Ok(AugmentOutcome {
        concept: rare_concept,
        initial_count,
        final_count: count,
        added: n_added,
        failed_placements: failed,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSummary {
    pub outcomes: Vec<AugmentOutcome>,
    pub original_len: usize,
    pub augmented_len: usize,
}

/// Augments every sparse concept in ascending-count order, sequentially,
/// from one RNG seeded with `config.rng_seed`.
pub fn augment_dataset(
    dataset: &mut Vec<ConceptLabeledSample>,
    vocab: &ConceptVocabulary,
    lambda_hat: f64,
    catalog: &ConceptCatalog,
    config: &AugmentationConfig,
) -> Result<AugmentationSummary> {
    config.validate()?;
    let original_len = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut outcomes = Vec::new();
    for (concept, count) in find_sparse_concepts(dataset, vocab, config) {
        match augment_rare_concept(dataset, concept, vocab, lambda_hat, catalog, config, &mut rng) {
            Ok(outcome) => outcomes.push(outcome),
            Err(Error::UnseedableConcept(_)) => {
                log::warn!("concept {concept}: no source patch available, skipped");
                outcomes.push(AugmentOutcome {
                    concept,
                    initial_count: count,
                    final_count: count,
                    added: 0,
                    failed_placements: 0,
                    status: AugmentStatus::Unseedable,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(AugmentationSummary {
        outcomes,
        original_len,
        augmented_len: dataset.len(),
    })
}
