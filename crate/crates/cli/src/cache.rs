//! Cache of conformed, normalized inputs for `infer --conform`.
//!
//! Lives in `$LODSEG_CACHE`, or `<tmp>/lodseg-cache` when unset. Entries are
//! keyed by the input's canonical path, size, modification time and the
//! target grid, so an edited input is never served stale.

use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use lodseg_core::volume_io::{conform, load_volume, normalize_intensity, save_volume, DEFAULT_MM};
use lodseg_core::{Error, Interp, Result, Volume};

pub const CACHE_ENV: &str = "LODSEG_CACHE";

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map_or_else(|| std::env::temp_dir().join("lodseg-cache"), PathBuf::from)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn key(src: &Path, shape: [usize; 3]) -> Result<String> {
    let canon = src.canonicalize().map_err(|e| Error::Io { path: src.to_path_buf(), source: e })?;
    let meta = std::fs::metadata(&canon).map_err(|e| Error::Io { path: canon.clone(), source: e })?;
    let mtime = meta.modified().ok().and_then(|t| t.duration_since(UNIX_EPOCH).ok()).map_or(0, |d| d.as_nanos());
    let text = format!("{}|{}|{mtime}|{shape:?}|{DEFAULT_MM}", canon.display(), meta.len());
    Ok(format!("{:016x}", fnv1a(text.as_bytes())))
}

/// Conforms `src` onto a `shape` grid at 1 mm and normalizes it, reusing a cached copy when present.
pub fn conformed(src: &Path, shape: [usize; 3]) -> Result<Volume> {
    let path = cache_dir().join(format!("{}.nii.gz", key(src, shape)?));
    if path.exists() {
        match load_volume(&path) {
            Ok(v) if v.shape() == shape => {
                log::debug!("cache hit {}", path.display());
                return Ok(v);
            }
            _ => log::warn!("ignoring unreadable cache entry {}", path.display()),
        }
    }
    let v = normalize_intensity(&conform(&load_volume(src)?, DEFAULT_MM, shape, Interp::Linear)?)?;
    if let Err(e) = save_volume(&v, &path) {
        log::warn!("could not write cache entry {}: {e}", path.display());
    }
    Ok(v)
}
