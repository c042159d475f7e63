//! Isosurfaces of label maps.
//!
//! Marching cubes is built face by face instead of from a fixed case table.
//! Each cube face with a sign change contributes one or two oriented segments
//! between edge crossings; an ambiguous face (inside corners on a diagonal)
//! always separates the inside corners. The rule depends only on the four
//! face values, so the two cubes sharing a face agree on it. The segments
//! of a cube close into loops, and each loop becomes triangles. The result is
//! a closed, consistently oriented surface with normals pointing out of the
//! foreground.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::volume_io::{apply_affine, LabelMap};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMesh {
    /// World coordinates in mm (index coordinates for [`marching_cubes`]).
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

type V3 = Vector3<f64>;

const CORNERS: [[usize; 3]; 8] = {
    let mut c = [[0; 3]; 8];
    let mut i = 0;
    while i < 8 {
        c[i] = [i & 1, (i >> 1) & 1, (i >> 2) & 1];
        i += 1;
    }
    c
};

/// Corners of each face in cyclic order, with the face's axis and side.
fn faces() -> [(usize, usize, [usize; 4]); 6] {
    std::array::from_fn(|f| {
        let (axis, side) = (f / 2, f % 2);
        let (b, c) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let corner = |ub: usize, uc: usize| (side << axis) | (ub << b) | (uc << c);
        (axis, side, [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)])
    })
}

/// Cube-local edge between two corners that differ in exactly one bit.
fn local_edge(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl SurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    fn tri(&self, f: &[u32; 3]) -> [V3; 3] {
        f.map(|i| V3::from(self.vertices[i as usize]))
    }

    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = self.tri(f);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Undirected edge -> number of incident faces.
    pub fn edge_use(&self) -> BTreeMap<(u32, u32), usize> {
        let mut m = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_use().values().all(|&n| n == 2)
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_use().len() as i64 + self.faces.len() as i64
    }

    /// Signed enclosed volume (positive for outward-facing normals).
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = self.tri(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    fn neighbours(&self) -> Vec<Vec<u32>> {
        let mut nb: Vec<Vec<u32>> = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in self.edge_use().keys() {
            nb[a as usize].push(b);
            nb[b as usize].push(a);
        }
        nb
    }

    /// Taubin smoothing: each iteration is a Laplacian step with `lambda`
    /// followed by an inflating step with `mu`, which keeps the enclosed
    /// volume close to the original.
    pub fn smooth_taubin(&mut self, iterations: usize, lambda: f64, mu: f64) {
        let nb = self.neighbours();
        for _ in 0..iterations {
            for w in [lambda, mu] {
                let old = self.vertices.clone();
                for (v, n) in self.vertices.iter_mut().zip(&nb) {
                    if n.is_empty() {
                        continue;
                    }
                    let p = V3::from(*v);
                    let mean = n.iter().map(|&j| V3::from(old[j as usize])).sum::<V3>() / n.len() as f64;
                    *v = (p + w * (mean - p)).into();
                }
            }
        }
    }

    /// Drops zero-area faces and unreferenced vertices.
    pub fn clean(&mut self) {
        let keep: Vec<[u32; 3]> = self
            .faces
            .iter()
            .copied()
            .filter(|f| {
                let [a, b, c] = self.tri(f);
                (b - a).cross(&(c - a)).norm() > 1e-12
            })
            .collect();
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        let faces = keep
            .iter()
            .map(|f| {
                f.map(|i| {
                    if remap[i as usize] == u32::MAX {
                        remap[i as usize] = verts.len() as u32;
                        verts.push(self.vertices[i as usize]);
                    }
                    remap[i as usize]
                })
            })
            .collect();
        self.vertices = verts;
        self.faces = faces;
    }

    /// ASCII PLY: `element vertex` with float `x y z` (mm), then
    /// `element face` with a `uchar`-counted `int` index list.
    pub fn to_ply(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let _ = write!(
            out,
            "ply\nformat ascii 1.0\ncomment lodseg surface, world mm\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        );
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v[0] as f32, v[1] as f32, v[2] as f32);
        }
        for f in &self.faces {
            let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
        }
        out
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_ply())
    }
}

/// Isosurface `{field = iso}` in index coordinates; `field > iso` is inside.
/// Pad the field if the surface must close at the grid border.
pub fn marching_cubes(field: &Array3<f32>, iso: f32) -> SurfaceMesh {
    let s = [field.shape()[0], field.shape()[1], field.shape()[2]];
    let face_table = faces();
    let mut mesh = SurfaceMesh::default();
    let mut ids: HashMap<(usize, usize, usize, usize), u32> = HashMap::new();
    if s.iter().any(|&n| n < 2) {
        return mesh;
    }
    for i in 0..s[0] - 1 {
        for j in 0..s[1] - 1 {
            for k in 0..s[2] - 1 {
                let val: [f32; 8] = CORNERS.map(|c| field[[i + c[0], j + c[1], k + c[2]]]);
                let inside: [bool; 8] = val.map(|v| v > iso);
                if inside.iter().all(|&x| x) || inside.iter().all(|&x| !x) {
                    continue;
                }
                let pos = |c: usize| V3::new((i + CORNERS[c][0]) as f64, (j + CORNERS[c][1]) as f64, (k + CORNERS[c][2]) as f64);
                let point = |e: (usize, usize)| {
                    let t = ((iso - val[e.0]) / (val[e.1] - val[e.0])) as f64;
                    pos(e.0) + t * (pos(e.1) - pos(e.0))
                };

                // Directed segments between edge crossings, keyed by start edge.
                let mut next: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
                for &(axis, side, cyc) in &face_table {
                    let mut normal = V3::zeros();
                    normal[axis] = if side == 1 { 1.0 } else { -1.0 };
                    let crossing = |t: usize| inside[cyc[t]] != inside[cyc[(t + 1) % 4]];
                    let edge = |t: usize| local_edge(cyc[t], cyc[(t + 1) % 4]);
                    let crossings: Vec<usize> = (0..4).filter(|&t| crossing(t)).collect();
                    // Each segment carries the corners that may decide its direction:
                    // all four for a single crossing pair (the line splits them into
                    // two uniform groups), only the cut-off corner otherwise.
                    let pairs: Vec<((usize, usize), (usize, usize), Vec<usize>)> = match crossings.len() {
                        0 => vec![],
                        2 => vec![(edge(crossings[0]), edge(crossings[1]), cyc.to_vec())],
                        _ => (0..4)
                            .filter(|&t| inside[cyc[t]])
                            .map(|t| (edge((t + 3) % 4), edge(t), vec![cyc[t]]))
                            .collect(),
                    };
                    for (ea, eb, refs) in pairs {
                        let (pa, pb) = (point(ea), point(eb));
                        let side_of = normal.cross(&(pb - pa));
                        let m = 0.5 * (pa + pb);
                        let (c, score) = refs
                            .iter()
                            .map(|&c| (c, side_of.dot(&(pos(c) - m))))
                            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                            .expect("at least one corner");
                        // `normal x d` must point toward the outside corners.
                        let forward = (score > 0.0) != inside[c];
                        if forward {
                            next.insert(ea, eb);
                        } else {
                            next.insert(eb, ea);
                        }
                    }
                }

                let mut vid = |e: (usize, usize), mesh: &mut SurfaceMesh| {
                    let (a, b) = e;
                    let axis = (a ^ b).trailing_zeros() as usize;
                    let base = CORNERS[a];
                    let key = (i + base[0], j + base[1], k + base[2], axis);
                    *ids.entry(key).or_insert_with(|| {
                        mesh.vertices.push(point(e).into());
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                let mut starts: Vec<(usize, usize)> = next.keys().copied().collect();
                starts.sort();
                let mut used = std::collections::HashSet::new();
                for s0 in starts {
                    if used.contains(&s0) {
                        continue;
                    }
                    let mut lp = Vec::new();
                    let mut e = s0;
                    while used.insert(e) {
                        lp.push(vid(e, &mut mesh));
                        e = next[&e];
                    }
                    triangulate(&mut mesh, &lp);
                }
            }
        }
    }
    mesh
}

fn triangulate(mesh: &mut SurfaceMesh, lp: &[u32]) {
    let p = |i: u32| V3::from(mesh.vertices[i as usize]);
    match lp.len() {
        0..=2 => {}
        3 => mesh.faces.push([lp[0], lp[1], lp[2]]),
        4 => {
            if (p(lp[0]) - p(lp[2])).norm() <= (p(lp[1]) - p(lp[3])).norm() {
                mesh.faces.push([lp[0], lp[1], lp[2]]);
                mesh.faces.push([lp[0], lp[2], lp[3]]);
            } else {
                mesh.faces.push([lp[0], lp[1], lp[3]]);
                mesh.faces.push([lp[1], lp[2], lp[3]]);
            }
        }
        n => {
            let centre = lp.iter().map(|&i| p(i)).sum::<V3>() / n as f64;
            mesh.vertices.push(centre.into());
            let c = (mesh.vertices.len() - 1) as u32;
            for t in 0..n {
                mesh.faces.push([lp[t], lp[(t + 1) % n], c]);
            }
        }
    }
}

/// Class indices behind a surface name: a class of the scheme, `inner_gm`
/// (white-matter boundary) or `outer_gm` (boundary of gray plus white matter).
pub fn surface_classes(l: &LabelMap, name: &str) -> Result<Vec<u16>> {
    let idx = |n: &str| {
        l.scheme
            .index_of(n)
            .map(|i| i as u16)
            .ok_or_else(|| Error::Config(format!("class `{n}` is not in the label scheme {:?}", l.scheme.names())))
    };
    match name {
        "inner_gm" => Ok(vec![idx("white_matter")?]),
        "outer_gm" => Ok(vec![idx("gray_matter")?, idx("white_matter")?]),
        other => Ok(vec![idx(other)?]),
    }
}

/// Smoothed surface of a class (or named surface) in world millimetres.
/// An empty class gives an empty mesh and a warning.
pub fn extract_surface(l: &LabelMap, class_name: &str, smoothing_iters: usize) -> Result<SurfaceMesh> {
    let classes = surface_classes(l, class_name)?;
    let s = l.shape();
    let mut field = Array3::<f32>::zeros((s[0] + 2, s[1] + 2, s[2] + 2));
    let mut any = false;
    for ((i, j, k), &v) in l.data.indexed_iter() {
        if classes.contains(&v) {
            field[[i + 1, j + 1, k + 1]] = 1.0;
            any = true;
        }
    }
    if !any {
        log::warn!("class `{class_name}` is empty; returning an empty mesh");
        return Ok(SurfaceMesh::default());
    }
    let mut mesh = marching_cubes(&field, 0.5);
    mesh.smooth_taubin(smoothing_iters, 0.5, -0.53);
    mesh.clean();
    for v in &mut mesh.vertices {
        *v = apply_affine(&l.affine, [v[0] - 1.0, v[1] - 1.0, v[2] - 1.0]);
    }
    Ok(mesh)
}
