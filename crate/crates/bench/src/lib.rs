//! Shared fixtures for the benchmarks.

use lodseg_core::phantom::{generate, PhantomSpec};
use lodseg_core::{ClassScheme, LabelMap, Volume};

/// A raw 7-class phantom on a `size`-voxel cube.
pub fn phantom(size: usize, seed: u64) -> (Volume, LabelMap) {
    generate(&PhantomSpec { size, ..PhantomSpec::default() }, &ClassScheme::raw7(), seed)
}
