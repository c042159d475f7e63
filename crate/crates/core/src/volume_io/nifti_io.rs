//! NIfTI-1 reading and writing (`.nii`, `.nii.gz`).
//!
//! The affine comes from the sform when `sform_code > 0`, else from the qform
//! quaternion when `qform_code > 0`, else from `pixdim` alone. Images are
//! written as little-endian float32, labels as uint16, both with the affine in
//! the sform (code 2, aligned anatomical) and `qform_code = 0`. The header
//! stores the affine in single precision.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array3, ArrayD, Ix3};
use nifti::{Endianness, IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::types::{check_affine, Affine, ClassScheme, LabelMap, Volume};
use crate::error::{Error, Result};

fn read_raw(path: &Path) -> Result<(NiftiHeader, ArrayD<f64>)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?;
    let header = obj.header().clone();
    if header.dim[0] < 3 {
        return Err(Error::Format(format!(
            "{}: expected a 3D image, header has {} dimension(s)",
            path.display(),
            header.dim[0]
        )));
    }
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((header, data))
}

fn to_3d(path: &Path, mut data: ArrayD<f64>) -> Result<Array3<f64>> {
    let shape = data.shape().to_vec();
    if shape.len() > 3 && shape[3..].iter().any(|&d| d > 1) {
        return Err(Error::Format(format!(
            "{}: non-3D payload with shape {shape:?}",
            path.display()
        )));
    }
    while data.ndim() > 3 {
        let last = data.ndim() - 1;
        data = data.index_axis_move(ndarray::Axis(last), 0);
    }
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(data.as_standard_layout().into_owned())
}

/// Volume ID of a NIfTI path: the file name without `.nii` / `.nii.gz`.
pub fn volume_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    (!stem.is_empty()).then(|| stem.to_string())
}

/// NIfTI files directly inside `dir`, sorted by volume ID.
pub fn list_nifti(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if let Some(id) = volume_id(&path).filter(|id| !id.starts_with('.') && path.is_file()) {
            out.push((id, path));
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Config(format!("{}: volume ID `{}` appears twice", dir.display(), w[0].0)));
    }
    Ok(out)
}

/// Loads a scalar image. Non-finite voxels are rejected.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, data) = read_raw(path)?;
    let data = to_3d(path, data)?;
    let bad = data.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Sanitation {
            path: path.to_path_buf(),
            count: bad,
        });
    }
    let affine = header_affine(&header);
    check_affine(&affine)?;
    Ok(Volume {
        data: data.mapv(|v| v as f32),
        affine,
    })
}

/// Loads an integer label image and validates it against `scheme`.
pub fn load_labels(path: impl AsRef<Path>, scheme: &ClassScheme) -> Result<LabelMap> {
    let path = path.as_ref();
    let (header, data) = read_raw(path)?;
    let data = to_3d(path, data)?;
    let mut out = Array3::<u16>::zeros(data.raw_dim());
    for (o, &v) in out.iter_mut().zip(data.iter()) {
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
            return Err(Error::Format(format!(
                "{}: label value {v} is not a non-negative integer",
                path.display()
            )));
        }
        *o = v as u16;
    }
    let affine = header_affine(&header);
    LabelMap::new(out, affine, scheme.clone())
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = make_header(&v.affine, 16, 32);
    write_atomic(path.as_ref(), |tmp| {
        nifti::writer::WriterOptions::new(tmp)
            .reference_header(&header)
            .write_nifti(&v.data)
    })
}

pub fn save_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let header = make_header(&l.affine, 512, 16);
    write_atomic(path.as_ref(), |tmp| {
        nifti::writer::WriterOptions::new(tmp)
            .reference_header(&header)
            .write_nifti(&l.data)
    })
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes through a sibling temp file and renames it into place.
fn write_atomic(
    path: &Path,
    write: impl FnOnce(&Path) -> std::result::Result<(), nifti::NiftiError>,
) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ext = if is_gz(path) { "nii.gz" } else { "nii" };
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".lodseg_tmp_{}_{n}.{ext}", std::process::id()));
    write(&tmp).map_err(|e| match e {
        nifti::NiftiError::Io(io) => Error::io(&tmp, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn make_header(affine: &Affine, datatype: i16, bitpix: i16) -> NiftiHeader {
    let mut h = NiftiHeader {
        datatype,
        bitpix,
        scl_slope: 1.0,
        scl_inter: 0.0,
        xyzt_units: 2, // mm
        qform_code: 0,
        sform_code: 2,
        endianness: Endianness::Little,
        ..NiftiHeader::default()
    };
    for ax in 0..3 {
        let col = affine.fixed_view::<3, 1>(0, ax);
        h.pixdim[ax + 1] = col.norm() as f32;
    }
    h.pixdim[0] = 1.0;
    for c in 0..4 {
        h.srow_x[c] = affine[(0, c)] as f32;
        h.srow_y[c] = affine[(1, c)] as f32;
        h.srow_z[c] = affine[(2, c)] as f32;
    }
    h
}

/// Voxel-to-world affine following the sform > qform > pixdim precedence.
pub fn header_affine(h: &NiftiHeader) -> Affine {
    if h.sform_code > 0 {
        let mut a = Affine::identity();
        for c in 0..4 {
            a[(0, c)] = h.srow_x[c] as f64;
            a[(1, c)] = h.srow_y[c] as f64;
            a[(2, c)] = h.srow_z[c] as f64;
        }
        return a;
    }
    let pix = |i: usize| {
        let p = h.pixdim[i] as f64;
        if p > 0.0 {
            p
        } else {
            1.0
        }
    };
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let zoom = [pix(1), pix(2), pix(3) * qfac];
        let mut m = Affine::identity();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = r[i][j] * zoom[j];
            }
        }
        m[(0, 3)] = h.quatern_x as f64;
        m[(1, 3)] = h.quatern_y as f64;
        m[(2, 3)] = h.quatern_z as f64;
        return m;
    }
    let mut m = Affine::identity();
    for ax in 0..3 {
        m[(ax, ax)] = pix(ax + 1);
    }
    m
}
