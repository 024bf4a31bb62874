//! Concept-labeled training data: the calibrated vocabulary, one-hot concept
//! labels, and copy-paste augmentation for sparse concepts.

mod augment;
mod vocabulary;

pub use augment::{
    augment_dataset, augment_rare_concept, composite_patch, crop_source, find_sparse_concepts,
    reliable_boxes, resize_bilinear, resize_nearest, sample_placement, AugmentOutcome,
    AugmentStatus, AugmentationConfig, AugmentationSummary, BinaryMask,
};
pub use vocabulary::{
    build_vocabulary, label_dataset, label_sample, ConceptLabeledSample, ConceptVocabulary,
    Provenance,
};
