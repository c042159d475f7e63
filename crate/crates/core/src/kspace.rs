//! 3D discrete Fourier transform over channel-less `[x][y][z]` grids.

use ndarray::Array3;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::nn::SharedMut;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Inverse, normalized by `1 / N` so a round trip is the identity.
    Inverse,
}

pub fn to_complex(v: &Array3<f32>) -> Array3<Complex64> {
    v.mapv(|x| Complex64::new(x as f64, 0.0))
}

/// In-place 3D FFT of a standard-layout array.
pub fn fft3(data: &mut Array3<Complex64>, dir: Direction) {
    assert!(data.is_standard_layout(), "fft3 needs standard layout");
    let [nx, ny, nz] = [data.shape()[0], data.shape()[1], data.shape()[2]];
    let mut planner = FftPlanner::<f64>::new();
    let plan = |n: usize, planner: &mut FftPlanner<f64>| match dir {
        Direction::Forward => planner.plan_fft_forward(n),
        Direction::Inverse => planner.plan_fft_inverse(n),
    };
    let buf = data.as_slice_mut().expect("standard layout");

    let fz = plan(nz, &mut planner);
    buf.par_chunks_mut(nz).for_each(|line| fz.process(line));

    let fy = plan(ny, &mut planner);
    buf.par_chunks_mut(ny * nz).for_each(|slab| {
        let mut line = vec![Complex64::default(); ny];
        for z in 0..nz {
            for y in 0..ny {
                line[y] = slab[y * nz + z];
            }
            fy.process(&mut line);
            for y in 0..ny {
                slab[y * nz + z] = line[y];
            }
        }
    });

    let fx = plan(nx, &mut planner);
    let plane = ny * nz;
    let ptr = SharedMut(buf.as_mut_ptr());
    (0..plane).into_par_iter().for_each(|yz| {
        let p = ptr;
        let mut line = vec![Complex64::default(); nx];
        // SAFETY: each task touches only column `yz` of every x-plane.
        unsafe {
            for (x, l) in line.iter_mut().enumerate() {
                *l = *p.0.add(x * plane + yz);
            }
            fx.process(&mut line);
            for (x, l) in line.iter().enumerate() {
                *p.0.add(x * plane + yz) = *l;
            }
        }
    });

    if dir == Direction::Inverse {
        let s = 1.0 / (nx * ny * nz) as f64;
        buf.par_iter_mut().for_each(|c| *c *= s);
    }
}

/// Index of DFT bin `i` of `n` in centred order (DC in the middle).
pub fn centred_rank(i: usize, n: usize) -> usize {
    (i + n / 2) % n
}
