use std::collections::{BTreeMap, HashMap};

use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::Rng;

use super::ops::{self, GnCache};
use super::state::{layer_specs, Level, LayerSpec, NetworkState};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::volume_io::Volume;

/// Per-voxel class probabilities, shape (X, Y, Z, C).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    pub probs: Array4<f32>,
}

impl SegmentationOutput {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let [x, y, z] = t.dims;
        let cm = ArrayView4::from_shape((t.channels, x, y, z), &t.data).expect("tensor layout");
        Self {
            probs: cm.permuted_axes([1, 2, 3, 0]).as_standard_layout().into_owned(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len_of(Axis(3))
    }

    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Array3<u16> {
        self.probs.map_axis(Axis(3), |lane| first_max(lane.iter().copied()))
    }
}

fn first_max(it: impl Iterator<Item = f32>) -> u16 {
    let mut best = (0u16, f32::NEG_INFINITY);
    for (c, p) in it.enumerate() {
        if p > best.1 {
            best = (c as u16, p);
        }
    }
    best.0
}

/// Argmax over the channels of a channel-major probability tensor.
pub fn argmax_cm(t: &Tensor<f32>) -> Array3<u16> {
    let n = t.voxels();
    let labels: Vec<u16> = (0..n).map(|v| first_max((0..t.channels).map(|c| t.data[c * n + v]))).collect();
    Array3::from_shape_vec(t.dims, labels).expect("tensor dims")
}

/// Single-channel input tensor from a volume's voxels.
pub fn volume_tensor<T: Scalar>(v: &Volume) -> Tensor<T> {
    let s = v.shape();
    Tensor::from_vec(1, s, v.data.iter().map(|&x| T::of(x as f64)).collect())
}

pub(crate) struct BlockCache<T> {
    input: Tensor<T>,
    gn: Option<GnCache<T>>,
    mask: Vec<bool>,
}

/// Everything the backward pass needs from a training forward pass.
pub struct Trace<T> {
    blocks: HashMap<String, BlockCache<T>>,
    arg_c0: Vec<u32>,
    dims_b0: [usize; 3],
    arg_a1: Vec<u32>,
    dims_a1: [usize; 3],
    arg_c1: Vec<u32>,
    dims_q1: [usize; 3],
    pub probs: Tensor<T>,
}

/// Network evaluation in precision `T` over a parameter snapshot.
pub struct Net<'s, T> {
    state: &'s NetworkState,
    specs: HashMap<String, LayerSpec>,
    params: HashMap<&'s str, Vec<T>>,
}

impl<'s, T: Scalar> Net<'s, T> {
    pub fn new(state: &'s NetworkState) -> Self {
        let specs = layer_specs(&state.config).into_iter().map(|s| (s.name.clone(), s)).collect();
        let params = state
            .params
            .iter()
            .map(|(k, p)| (k.as_str(), p.data.iter().map(|&v| T::of(v as f64)).collect()))
            .collect();
        Self { state, specs, params }
    }

    /// Overrides one parameter (gradient checks perturb parameters in `T`).
    pub fn param_mut(&mut self, name: &str) -> &mut Vec<T> {
        self.params.get_mut(name).expect("known parameter")
    }

    fn p(&self, name: &str) -> &[T] {
        &self.params[name]
    }

    fn block<R: Rng>(&self, name: &str, x: Tensor<T>, rng: &mut Option<&mut R>, trace: &mut Option<HashMap<String, BlockCache<T>>>) -> Tensor<T> {
        let spec = &self.specs[name];
        let mut y = ops::conv_forward(&x, self.p(&format!("{name}.w")), self.p(&format!("{name}.b")), spec.cout, spec.kernel);
        let mut gn = None;
        let mut mask = Vec::new();
        if spec.normalized {
            let (g, cache) = ops::group_norm_forward(
                &y,
                self.state.config.groupnorm_groups,
                self.p(&format!("{name}.gn.gamma")),
                self.p(&format!("{name}.gn.beta")),
            );
            y = g;
            ops::relu_in_place(&mut y);
            if let Some(r) = rng.as_mut() {
                if !self.state.is_frozen(spec.level) {
                    mask = ops::dropout_in_place(&mut y, self.state.config.dropout_rate, *r);
                }
            }
            gn = Some(cache);
        }
        if let Some(t) = trace.as_mut() {
            t.insert(name.to_string(), BlockCache { input: x, gn, mask });
        }
        y
    }

    fn block_backward(&self, name: &str, cache: &BlockCache<T>, mut dy: Tensor<T>, want_input: bool, grads: &mut BTreeMap<String, Vec<T>>) -> Option<Tensor<T>> {
        let spec = &self.specs[name];
        let want_params = !self.state.is_frozen(spec.level);
        if let Some(gn) = &cache.gn {
            ops::dropout_backward(&mut dy, &cache.mask, self.state.config.dropout_rate);
            let gamma = self.p(&format!("{name}.gn.gamma"));
            let beta = self.p(&format!("{name}.gn.beta"));
            let n = dy.voxels();
            for c in 0..dy.channels {
                for i in c * n..(c + 1) * n {
                    if gamma[c] * gn.xhat[i] + beta[c] <= T::zero() {
                        dy.data[i] = T::zero();
                    }
                }
            }
            let (dx, dg, db) = ops::group_norm_backward(&dy, gn, self.state.config.groupnorm_groups, gamma);
            if want_params {
                grads.insert(format!("{name}.gn.gamma"), dg);
                grads.insert(format!("{name}.gn.beta"), db);
            }
            dy = dx;
        }
        let g = ops::conv_backward(&cache.input, self.p(&format!("{name}.w")), &dy, spec.kernel, want_params, want_input);
        if want_params {
            grads.insert(format!("{name}.w"), g.dw);
            grads.insert(format!("{name}.b"), g.db);
        }
        g.dx
    }

    /// Inference-mode forward pass (no dropout, no trace).
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run::<rand_chacha::ChaCha8Rng>(x, None, false).0
    }

    /// Forward pass. Dropout is active (in unfrozen levels) iff `rng` is given.
    pub fn run<R: Rng>(&self, x: &Tensor<T>, mut rng: Option<&mut R>, keep_trace: bool) -> (Tensor<T>, Option<Trace<T>>) {
        let cfg = &self.state.config;
        let (p, d, nb) = (cfg.level0_entry_pool, cfg.level0_inner_reduction, cfg.blocks_per_stage);
        let mut tr: Option<HashMap<String, BlockCache<T>>> = keep_trace.then(HashMap::new);

        let (p0, _) = ops::max_pool_forward(x, p);
        let a0 = self.block("l0.entry", p0, &mut rng, &mut tr);
        let mut h = a0.clone();
        for i in 0..nb {
            h = self.block(&format!("l0.enc.{i}"), h, &mut rng, &mut tr);
        }
        let dims_b0 = h.dims;
        let (c0, arg_c0) = ops::max_pool_forward(&h, d);
        drop(h);
        let mut o0 = self.block("l0.dec", ops::upsample_forward(&c0, d), &mut rng, &mut tr);
        o0.add_assign(&a0);
        drop(a0);

        let a1 = self.block("l1.entry", x.clone(), &mut rng, &mut tr);
        let dims_a1 = a1.dims;
        let (mut q1, arg_a1) = ops::max_pool_forward(&a1, p);
        q1.add_assign(&o0);
        drop(o0);
        let dims_q1 = q1.dims;
        let (c1, arg_c1) = ops::max_pool_forward(&q1, d);
        let mut h = c1;
        for i in 0..nb {
            h = self.block(&format!("l1.mid.{i}"), h, &mut rng, &mut tr);
        }
        let mut u1 = self.block("l1.dec.0", ops::upsample_forward(&h, d), &mut rng, &mut tr);
        drop(h);
        u1.add_assign(&q1);
        drop(q1);
        let mut v1 = self.block("l1.dec.1", ops::upsample_forward(&u1, p), &mut rng, &mut tr);
        drop(u1);
        v1.add_assign(&a1);
        drop(a1);
        let logits = self.block("head", v1, &mut rng, &mut tr);
        let probs = ops::softmax_channels(&logits);

        let trace = tr.map(|blocks| Trace {
            blocks,
            arg_c0,
            dims_b0,
            arg_a1,
            dims_a1,
            arg_c1,
            dims_q1,
            probs: probs.clone(),
        });
        (probs, trace)
    }

    /// Parameter gradients given `dL/dprobs`. Frozen levels get no entry;
    /// level 0 is skipped entirely when frozen because nothing upstream of it
    /// is trainable.
    pub fn backward(&self, trace: &Trace<T>, dprobs: &Tensor<T>) -> BTreeMap<String, Vec<T>> {
        let cfg = &self.state.config;
        let (p, d, nb) = (cfg.level0_entry_pool, cfg.level0_inner_reduction, cfg.blocks_per_stage);
        let mut g = BTreeMap::new();
        let b = |n: &str| &trace.blocks[n];

        let dlogits = ops::softmax_backward(&trace.probs, dprobs);
        let dv1 = self.block_backward("head", b("head"), dlogits, true, &mut g).expect("input grad");
        let mut da1 = dv1.clone();
        let dup = self.block_backward("l1.dec.1", b("l1.dec.1"), dv1, true, &mut g).expect("input grad");
        let du1 = ops::upsample_backward(&dup, p);
        let mut dq1 = du1.clone();
        let dh = self.block_backward("l1.dec.0", b("l1.dec.0"), du1, true, &mut g).expect("input grad");
        let mut dh = ops::upsample_backward(&dh, d);
        for i in (0..nb).rev() {
            let name = format!("l1.mid.{i}");
            dh = self.block_backward(&name, b(&name), dh, true, &mut g).expect("input grad");
        }
        dq1.add_assign(&ops::max_pool_backward(&dh, &trace.arg_c1, trace.dims_q1));
        da1.add_assign(&ops::max_pool_backward(&dq1, &trace.arg_a1, trace.dims_a1));
        self.block_backward("l1.entry", b("l1.entry"), da1, false, &mut g);

        if !self.state.is_frozen(Level::L0) {
            let do0 = dq1;
            let mut da0 = do0.clone();
            let dh = self.block_backward("l0.dec", b("l0.dec"), do0, true, &mut g).expect("input grad");
            let dh = ops::upsample_backward(&dh, d);
            let mut dh = ops::max_pool_backward(&dh, &trace.arg_c0, trace.dims_b0);
            for i in (0..nb).rev() {
                let name = format!("l0.enc.{i}");
                dh = self.block_backward(&name, b(&name), dh, true, &mut g).expect("input grad");
            }
            da0.add_assign(&dh);
            self.block_backward("l0.entry", b("l0.entry"), da0, false, &mut g);
        }
        g
    }
}

/// Inference-mode forward pass on a volume of the configured input shape.
pub fn forward(state: &NetworkState, v: &Volume) -> Result<SegmentationOutput> {
    check_input(state, v)?;
    let x = volume_tensor::<f32>(v);
    Ok(SegmentationOutput::from_tensor(&Net::new(state).infer(&x)))
}

pub(crate) fn check_input(state: &NetworkState, v: &Volume) -> Result<()> {
    if v.shape() != state.config.input_shape {
        return Err(Error::Contract(format!(
            "volume shape {:?} does not match network input shape {:?}",
            v.shape(),
            state.config.input_shape
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::soft_dice_cm;
    use crate::nn::NetworkConfig;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(c: usize) -> NetworkConfig {
        NetworkConfig {
            input_shape: [8, 8, 8],
            num_classes: c,
            level0_entry_filters: 4,
            level0_block_filters: 4,
            level1_block_filters: 8,
            level0_inner_reduction: 2,
            level0_entry_pool: 2,
            blocks_per_stage: 2,
            dropout_rate: 0.0,
            groupnorm_groups: 2,
            init_seed: 3,
        }
    }

    fn input(seed: u64, dims: [usize; 3]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(1, dims, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn zero_input_gives_distribution_and_is_deterministic() {
        let s = NetworkState::build(NetworkConfig::desk(16, 4)).unwrap();
        let v = Volume::with_identity_geometry(Array3::zeros((16, 16, 16)));
        let a = forward(&s, &v).unwrap();
        let b = forward(&s, &v).unwrap();
        assert_eq!(a.probs.shape(), &[16, 16, 16, 4]);
        assert_eq!(a, b);
        for lane in a.probs.lanes(Axis(3)) {
            assert!((lane.sum() - 1.0).abs() < 1e-5);
            assert!(lane.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let wrong = Volume::with_identity_geometry(Array3::zeros((8, 16, 16)));
        assert!(matches!(forward(&s, &wrong), Err(Error::Contract(_))));
    }

    /// Whole-network gradient against central differences of the Dice loss, in f64.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut state = NetworkState::build(small_cfg(3)).unwrap();
        // Non-trivial GN affine parameters so every path is exercised.
        for (k, p) in state.params.iter_mut() {
            if k.ends_with(".gn.beta") {
                for (i, v) in p.data.iter_mut().enumerate() {
                    *v = 0.1 * ((i % 3) as f32 - 1.0);
                }
            }
        }
        let x = input(7, [8, 8, 8]);
        let n = 512;
        let target: Vec<f64> = (0..3 * n).map(|i| if (i % n) % 3 == i / n { 1.0 } else { 0.0 }).collect();
        let mut net = Net::<f64>::new(&state);
        let loss = |net: &Net<f64>| soft_dice_cm(&net.infer(&x).data, &target, 3, true).0;
        let (_, tr) = net.run::<ChaCha8Rng>(&x, None, true);
        let tr = tr.unwrap();
        let (_, dp) = soft_dice_cm(&tr.probs.data, &target, 3, true);
        let grads = net.backward(&tr, &Tensor::from_vec(3, [8, 8, 8], dp));
        assert_eq!(grads.len(), state.params.len());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for name in ["l0.entry.w", "l0.enc.1.gn.gamma", "l0.dec.b", "l1.entry.w", "l1.mid.0.w", "l1.dec.1.gn.beta", "head.w", "head.b"] {
            let len = net.param_mut(name).len();
            for i in (0..len).step_by((len / 6).max(1)) {
                let o = net.param_mut(name)[i];
                net.param_mut(name)[i] = o + h;
                let lp = loss(&net);
                net.param_mut(name)[i] = o - h;
                let lm = loss(&net);
                net.param_mut(name)[i] = o;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[name][i];
                let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
        state.set_frozen([Level::L0]);
        let net = Net::<f64>::new(&state);
        let grads = net.backward(&tr, &Tensor::from_vec(3, [8, 8, 8], soft_dice_cm(&tr.probs.data, &target, 3, true).1));
        assert!(grads.keys().all(|k| !k.starts_with("l0.")));
        assert!(grads.contains_key("l1.entry.w"));
    }

    #[test]
    fn dropout_is_seed_reproducible() {
        let mut cfg = small_cfg(2);
        cfg.dropout_rate = 0.3;
        let state = NetworkState::build(cfg).unwrap();
        let net = Net::<f32>::new(&state);
        let x = input(1, [8, 8, 8]).cast::<f32>();
        let run = |seed| net.run(&x, Some(&mut ChaCha8Rng::seed_from_u64(seed)), false).0;
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        assert_eq!(net.infer(&x), net.infer(&x));
    }
}
