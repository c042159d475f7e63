//! Forward and backward kernels for the layers the network uses.
//!
//! Convolutions are "same"-padded with zeros and run as im2col over chunks of
//! whole x-planes followed by a GEMM. The input gradient gathers the output
//! gradient with mirrored offsets, so no scatter-add is needed. Chunk
//! boundaries depend only on tensor shapes, and partial weight gradients are
//! summed in chunk order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{Scalar, SharedMut, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COLS_BUDGET: usize = 1 << 22;

pub const GN_EPS: f64 = 1e-5;

fn chunks(dims: [usize; 3], rows: usize) -> Vec<(usize, usize)> {
    let plane = dims[1] * dims[2];
    let per = (COLS_BUDGET / (rows * plane).max(1)).clamp(1, dims[0]);
    (0..dims[0])
        .step_by(per)
        .map(|x0| (x0, (x0 + per).min(dims[0])))
        .collect()
}

/// Fills the im2col rows for planes `x0..x1` of a `k`-wide stencil.
///
/// Row `c * k^3 + o` holds `src[c]` shifted by stencil offset `o`; offsets
/// enumerate `(dx, dy, dz)` with dz fastest. `flip` negates every offset.
fn im2col<T: Scalar>(src: &[T], channels: usize, dims: [usize; 3], k: usize, x0: usize, x1: usize, flip: bool) -> Vec<T> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let kk = k * k * k;
    let r = (k / 2) as isize;
    let nv = (x1 - x0) * ny * nz;
    let mut cols = vec![T::zero(); channels * kk * nv];
    cols.par_chunks_mut(nv).enumerate().for_each(|(row, dst)| {
        let c = row / kk;
        let o = row % kk;
        let sgn = if flip { -1 } else { 1 };
        let dx = sgn * ((o / (k * k)) as isize - r);
        let dy = sgn * (((o / k) % k) as isize - r);
        let dz = sgn * ((o % k) as isize - r);
        let chan = &src[c * n..(c + 1) * n];
        for xi in x0..x1 {
            let sx = xi as isize + dx;
            if sx < 0 || sx >= nx as isize {
                continue;
            }
            for yi in 0..ny {
                let sy = yi as isize + dy;
                if sy < 0 || sy >= ny as isize {
                    continue;
                }
                let d = &mut dst[((xi - x0) * ny + yi) * nz..][..nz];
                let s = &chan[(sx as usize * ny + sy as usize) * nz..][..nz];
                let lo = (-dz).max(0) as usize;
                let hi = (nz as isize - dz.max(0)) as usize;
                if lo < hi {
                    let so = (lo as isize + dz) as usize;
                    d[lo..hi].copy_from_slice(&s[so..so + (hi - lo)]);
                }
            }
        }
    });
    cols
}

/// Convolution weights are stored `[cout][cin][k^3]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize, k: usize) -> Tensor<T> {
    let cin = x.channels;
    let kk = k * k * k;
    assert_eq!(w.len(), cout * cin * kk, "conv weight size");
    assert_eq!(b.len(), cout, "conv bias size");
    let n = x.voxels();
    let plane = x.dims[1] * x.dims[2];
    let mut out = Tensor::zeros(cout, x.dims);
    for (co, ch) in out.data.chunks_mut(n).enumerate() {
        ch.fill(b[co]);
    }
    let rows = cin * kk;
    let ptr = SharedMut(out.data.as_mut_ptr());
    chunks(x.dims, rows).into_par_iter().for_each(|(x0, x1)| {
        let nv = (x1 - x0) * plane;
        let off = x0 * plane;
        let p = ptr;
        if k == 1 {
            // The input itself is the column matrix.
            unsafe {
                T::gemm(cout, rows, nv, T::one(), w.as_ptr(), rows as isize, 1, x.data.as_ptr().add(off), n as isize, 1, T::one(), p.0.add(off), n as isize, 1);
            }
        } else {
            let cols = im2col(&x.data, cin, x.dims, k, x0, x1, false);
            unsafe {
                T::gemm(cout, rows, nv, T::one(), w.as_ptr(), rows as isize, 1, cols.as_ptr(), nv as isize, 1, T::one(), p.0.add(off), n as isize, 1);
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dw: Vec<T>,
    pub db: Vec<T>,
    pub dx: Option<Tensor<T>>,
}

/// Gradients of [`conv_forward`]. `want_params` / `want_input` skip unused work.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dout: &Tensor<T>,
    k: usize,
    want_params: bool,
    want_input: bool,
) -> ConvGrads<T> {
    let cin = x.channels;
    let cout = dout.channels;
    let kk = k * k * k;
    let n = x.voxels();
    let plane = x.dims[1] * x.dims[2];
    let rows = cin * kk;

    let (dw, db) = if want_params {
        let db: Vec<T> = dout
            .data
            .chunks(n)
            .map(|c| T::of(c.iter().map(|v| v.f64()).sum::<f64>()))
            .collect();
        let partials: Vec<Vec<T>> = chunks(x.dims, rows)
            .into_par_iter()
            .map(|(x0, x1)| {
                let nv = (x1 - x0) * plane;
                let off = x0 * plane;
                let mut part = vec![T::zero(); cout * rows];
                let owned;
                let (bptr, rsb) = if k == 1 {
                    (unsafe { x.data.as_ptr().add(off) }, n as isize)
                } else {
                    owned = im2col(&x.data, cin, x.dims, k, x0, x1, false);
                    (owned.as_ptr(), nv as isize)
                };
                // dW (cout x rows) = dOut (cout x nv) * cols^T (nv x rows)
                unsafe {
                    T::gemm(cout, nv, rows, T::one(), dout.data.as_ptr().add(off), n as isize, 1, bptr, 1, rsb, T::zero(), part.as_mut_ptr(), rows as isize, 1);
                }
                part
            })
            .collect();
        let mut dw = vec![T::zero(); cout * rows];
        for part in partials {
            for (a, b) in dw.iter_mut().zip(part) {
                *a += b;
            }
        }
        (dw, db)
    } else {
        (Vec::new(), Vec::new())
    };

    let dx = want_input.then(|| {
        // w2[ci][co * kk + o] = w[co][ci][o], paired with mirrored im2col rows
        let rows2 = cout * kk;
        let mut w2 = vec![T::zero(); cin * rows2];
        for co in 0..cout {
            for ci in 0..cin {
                for o in 0..kk {
                    w2[ci * rows2 + co * kk + o] = w[(co * cin + ci) * kk + o];
                }
            }
        }
        let mut dx = Tensor::<T>::zeros(cin, x.dims);
        let ptr = SharedMut(dx.data.as_mut_ptr());
        chunks(x.dims, rows2).into_par_iter().for_each(|(x0, x1)| {
            let nv = (x1 - x0) * plane;
            let off = x0 * plane;
            let p = ptr;
            if k == 1 {
                unsafe {
                    T::gemm(cin, rows2, nv, T::one(), w2.as_ptr(), rows2 as isize, 1, dout.data.as_ptr().add(off), n as isize, 1, T::zero(), p.0.add(off), n as isize, 1);
                }
            } else {
                let g = im2col(&dout.data, cout, x.dims, k, x0, x1, true);
                unsafe {
                    T::gemm(cin, rows2, nv, T::one(), w2.as_ptr(), rows2 as isize, 1, g.as_ptr(), nv as isize, 1, T::zero(), p.0.add(off), n as isize, 1);
                }
            }
        });
        dx
    });
    ConvGrads { dw, db, dx }
}

/// Normalized values and per-group inverse standard deviations kept for backward.
pub struct GnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
}

pub fn group_norm_forward<T: Scalar>(x: &Tensor<T>, groups: usize, gamma: &[T], beta: &[T]) -> (Tensor<T>, GnCache<T>) {
    let c = x.channels;
    assert!(groups > 0 && c % groups == 0, "groups must divide channels");
    let n = x.voxels();
    let glen = (c / groups) * n;
    let mut xhat = vec![T::zero(); x.data.len()];
    let inv_std: Vec<f64> = x
        .data
        .par_chunks(glen)
        .zip(xhat.par_chunks_mut(glen))
        .map(|(src, dst)| {
            let m = glen as f64;
            let mean = src.iter().map(|v| v.f64()).sum::<f64>() / m;
            let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::of((s.f64() - mean) * inv);
            }
            inv
        })
        .collect();
    let mut y = Tensor::zeros(c, x.dims);
    for ch in 0..c {
        let (g, bt) = (gamma[ch], beta[ch]);
        for (o, &h) in y.data[ch * n..(ch + 1) * n].iter_mut().zip(&xhat[ch * n..(ch + 1) * n]) {
            *o = g * h + bt;
        }
    }
    (y, GnCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(dy: &Tensor<T>, cache: &GnCache<T>, groups: usize, gamma: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = dy.channels;
    let n = dy.voxels();
    let cg = c / groups;
    let glen = cg * n;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let d = &dy.data[ch * n..(ch + 1) * n];
        let h = &cache.xhat[ch * n..(ch + 1) * n];
        dgamma[ch] = T::of(d.iter().zip(h).map(|(a, b)| a.f64() * b.f64()).sum());
        dbeta[ch] = T::of(d.iter().map(|a| a.f64()).sum());
    }
    let mut dx = Tensor::zeros(c, dy.dims);
    dx.data
        .par_chunks_mut(glen)
        .enumerate()
        .for_each(|(g, out)| {
            let base = g * glen;
            let d = &dy.data[base..base + glen];
            let h = &cache.xhat[base..base + glen];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in 0..glen {
                let dh = d[i].f64() * gamma[g * cg + i / n].f64();
                s1 += dh;
                s2 += dh * h[i].f64();
            }
            let m = glen as f64;
            let inv = cache.inv_std[g];
            for i in 0..glen {
                let dh = d[i].f64() * gamma[g * cg + i / n].f64();
                out[i] = T::of(inv * (dh - s1 / m - h[i].f64() * s2 / m));
            }
        });
    (dx, dgamma, dbeta)
}

pub fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Inverted dropout; returns the keep mask (empty when `p == 0`).
pub fn dropout_in_place<T: Scalar, R: Rng>(x: &mut Tensor<T>, p: f64, rng: &mut R) -> Vec<bool> {
    if p <= 0.0 {
        return Vec::new();
    }
    let scale = T::of(1.0 / (1.0 - p));
    let mask: Vec<bool> = (0..x.data.len()).map(|_| rng.gen::<f64>() >= p).collect();
    for (v, &keep) in x.data.iter_mut().zip(&mask) {
        *v = if keep { *v * scale } else { T::zero() };
    }
    mask
}

pub fn dropout_backward<T: Scalar>(d: &mut Tensor<T>, mask: &[bool], p: f64) {
    if mask.is_empty() {
        return;
    }
    let scale = T::of(1.0 / (1.0 - p));
    for (v, &keep) in d.data.iter_mut().zip(mask) {
        *v = if keep { *v * scale } else { T::zero() };
    }
}

/// Non-overlapping max pool with window and stride `f`.
///
/// Also returns, for each output, the channel-local index of the selected
/// input (first maximum in x, y, z scan order).
pub fn max_pool_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> (Tensor<T>, Vec<u32>) {
    let [nx, ny, nz] = x.dims;
    assert!(nx % f == 0 && ny % f == 0 && nz % f == 0, "pool factor must divide dims");
    let od = [nx / f, ny / f, nz / f];
    let n = x.voxels();
    let on = od[0] * od[1] * od[2];
    let mut out = Tensor::zeros(x.channels, od);
    let mut arg = vec![0u32; x.channels * on];
    out.data
        .par_chunks_mut(on)
        .zip(arg.par_chunks_mut(on))
        .enumerate()
        .for_each(|(c, (o, a))| {
            let src = &x.data[c * n..(c + 1) * n];
            for ox in 0..od[0] {
                for oy in 0..od[1] {
                    for oz in 0..od[2] {
                        let mut best = T::neg_infinity();
                        let mut bi = 0usize;
                        for ix in ox * f..ox * f + f {
                            for iy in oy * f..oy * f + f {
                                let row = (ix * ny + iy) * nz;
                                for iz in oz * f..oz * f + f {
                                    let v = src[row + iz];
                                    if v > best {
                                        best = v;
                                        bi = row + iz;
                                    }
                                }
                            }
                        }
                        let oi = (ox * od[1] + oy) * od[2] + oz;
                        o[oi] = best;
                        a[oi] = bi as u32;
                    }
                }
            }
        });
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(dout: &Tensor<T>, arg: &[u32], in_dims: [usize; 3]) -> Tensor<T> {
    let mut dx = Tensor::zeros(dout.channels, in_dims);
    let n = dx.voxels();
    let on = dout.voxels();
    for c in 0..dout.channels {
        for i in 0..on {
            dx.data[c * n + arg[c * on + i] as usize] += dout.data[c * on + i];
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [nx, ny, nz] = x.dims;
    let od = [nx * f, ny * f, nz * f];
    let n = x.voxels();
    let mut out = Tensor::zeros(x.channels, od);
    let on = out.voxels();
    out.data.par_chunks_mut(on).enumerate().for_each(|(c, o)| {
        let src = &x.data[c * n..(c + 1) * n];
        for ox in 0..od[0] {
            for oy in 0..od[1] {
                let srow = ((ox / f) * ny + oy / f) * nz;
                let orow = (ox * od[1] + oy) * od[2];
                for oz in 0..od[2] {
                    o[orow + oz] = src[srow + oz / f];
                }
            }
        }
    });
    out
}

pub fn upsample_backward<T: Scalar>(dout: &Tensor<T>, f: usize) -> Tensor<T> {
    let od = dout.dims;
    let id = [od[0] / f, od[1] / f, od[2] / f];
    let mut dx = Tensor::zeros(dout.channels, id);
    let n = dx.voxels();
    let on = dout.voxels();
    dx.data.par_chunks_mut(n).enumerate().for_each(|(c, d)| {
        let src = &dout.data[c * on..(c + 1) * on];
        for ox in 0..od[0] {
            for oy in 0..od[1] {
                let drow = ((ox / f) * id[1] + oy / f) * id[2];
                let orow = (ox * od[1] + oy) * od[2];
                for oz in 0..od[2] {
                    d[drow + oz / f] += src[orow + oz];
                }
            }
        }
    });
    dx
}

/// Softmax across channels at every voxel.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.channels;
    let n = logits.voxels();
    let mut out = Tensor::zeros(c, logits.dims);
    for v in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for ch in 0..c {
            mx = mx.max(logits.data[ch * n + v].f64());
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (logits.data[ch * n + v].f64() - mx).exp();
            out.data[ch * n + v] = T::of(e);
            sum += e;
        }
        for ch in 0..c {
            out.data[ch * n + v] = T::of(out.data[ch * n + v].f64() / sum);
        }
    }
    out
}

/// Maps `dL/dp` to `dL/dlogits` through the channel softmax.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let c = probs.channels;
    let n = probs.voxels();
    let mut out = Tensor::zeros(c, probs.dims);
    for v in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += probs.data[ch * n + v].f64() * dprobs.data[ch * n + v].f64();
        }
        for ch in 0..c {
            let p = probs.data[ch * n + v].f64();
            out.data[ch * n + v] = T::of(p * (dprobs.data[ch * n + v].f64() - dot));
        }
    }
    out
}
