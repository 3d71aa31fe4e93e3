//! Raw images + landmarks + ages in, aligned normalized face tensors,
//! labels, patch crops and identity-disjoint folds out.

mod align;
mod folds;
mod image;
mod label;
mod manifest;
mod patches;

pub use align::{align_and_crop, align_file, fit_similarity, Landmarks5, Similarity, CANONICAL_TEMPLATE};
pub use folds::{read_fold_file, split_folds, write_fold_file, Fold};
pub use image::{FaceImage, FACE_SIZE};
pub use label::{age_to_group, concat_label, labels_tensor, AgeGroup, NUM_AGE_GROUPS};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use patches::{extract_patches, overlap_report, scatter_patch, PatchOverlap, PatchSpec};
