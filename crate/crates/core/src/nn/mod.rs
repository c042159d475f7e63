//! The two-level level-of-detail segmentation network.

mod adam;
mod checkpoint;
mod config;
mod model;
pub mod ops;
mod state;
mod tensor;

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;

pub use adam::Adam;
pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::NetworkConfig;
pub use model::{argmax_cm, forward, volume_tensor, Net, SegmentationOutput, Trace};
pub use state::{layer_specs, param_count, Level, LayerSpec, NetworkState, Param};
pub use tensor::{Scalar, Tensor};
pub(crate) use tensor::SharedMut;

use crate::losses::soft_dice_cm;

/// Channel-major one-hot encoding of a label grid.
pub fn onehot_cm(labels: &Array3<u16>, num_classes: usize) -> Vec<f32> {
    let n = labels.len();
    let mut t = vec![0.0f32; num_classes * n];
    for (v, &l) in labels.iter().enumerate() {
        t[l as usize * n + v] = 1.0;
    }
    t
}

/// One training forward/backward pass: soft Dice loss and gradients of all
/// unfrozen parameters. Dropout draws from `rng`.
pub fn loss_and_grads<R: Rng>(
    state: &NetworkState,
    x: &Tensor<f32>,
    target_cm: &[f32],
    include_background: bool,
    rng: &mut R,
) -> (f64, BTreeMap<String, Vec<f32>>) {
    let net = Net::<f32>::new(state);
    let (probs, trace) = net.run(x, Some(rng), true);
    let (loss, dp) = soft_dice_cm(&probs.data, target_cm, state.num_classes(), include_background);
    let grads = net.backward(&trace.expect("trace requested"), &Tensor::from_vec(probs.channels, probs.dims, dp));
    (loss, grads)
}

/// Soft Dice loss of an inference-mode pass.
pub fn eval_loss(state: &NetworkState, x: &Tensor<f32>, target_cm: &[f32], include_background: bool) -> (f64, Tensor<f32>) {
    let probs = Net::<f32>::new(state).infer(x);
    let (loss, _) = soft_dice_cm(&probs.data, target_cm, state.num_classes(), include_background);
    (loss, probs)
}
