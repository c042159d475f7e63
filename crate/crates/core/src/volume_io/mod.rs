//! Volume and label-map types, NIfTI I/O, conformance and intensity normalization.

mod conform;
mod nifti_io;
mod types;

pub use conform::{
    closest_ras, conform, conform_labels, conformed_affine, normalize_intensity, percentile, Orientation, DEFAULT_MM,
    DEFAULT_SHAPE,
};
pub use nifti_io::{header_affine, list_nifti, load_labels, load_volume, save_labels, save_volume, volume_id};
pub use types::{apply_affine, centered_affine, one_hot, Affine, ClassScheme, LabelMap, Volume, BACKGROUND};
