//! Bundled topologies with seeded random weights, so experiments run without
//! external model files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{build_network, ConvGeometry, ConvWeights, DenseNetwork, LayerKind, NetworkSpec};
use crate::tensor::{PoolSpec, Shape3};

/// Input resolution at which the scene-labelling topology's unpadded first
/// layer yields a 541x871 map and the two ceil-mode pools 271x436 and
/// 136x218.
pub const SCENE_LABELLING_INPUT: Shape3 = Shape3::new(3, 547, 877);

fn conv(cin: usize, cout: usize, k: usize, padding: usize, fuse_relu: bool) -> LayerKind {
    LayerKind::Conv(ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel_h: k,
        kernel_w: k,
        stride: 1,
        padding,
        fuse_relu,
    })
}

fn pool() -> LayerKind {
    LayerKind::MaxPool(PoolSpec {
        size: 2,
        stride: 2,
        ceil_mode: true,
    })
}

/// Five-convolution scene-labelling network (8 classes) on a
/// `height x width` RGB input: 7x7 convolutions with 16, 64 and 256
/// channels separated by 2x2 pools, then two 1x1 layers.
pub fn scene_labelling(height: usize, width: usize) -> NetworkSpec {
    NetworkSpec::sequential(
        Shape3::new(3, height, width),
        vec![
            ("conv1".into(), conv(3, 16, 7, 0, true)),
            ("pool2".into(), pool()),
            ("conv3".into(), conv(16, 64, 7, 3, true)),
            ("pool4".into(), pool()),
            ("conv5".into(), conv(64, 256, 7, 3, true)),
            ("conv6".into(), conv(256, 64, 1, 0, true)),
            ("conv7".into(), conv(64, 8, 1, 0, false)),
        ],
    )
}

/// A small 3x3-kernel segmentation network with a short receptive field,
/// used for desk-scale experiments.
pub fn compact(height: usize, width: usize) -> NetworkSpec {
    NetworkSpec::sequential(
        Shape3::new(3, height, width),
        vec![
            ("conv1".into(), conv(3, 8, 3, 1, true)),
            ("conv2".into(), conv(8, 16, 3, 1, true)),
            ("pool3".into(), pool()),
            ("conv4".into(), conv(16, 16, 3, 1, true)),
            ("conv5".into(), conv(16, 4, 1, 0, false)),
        ],
    )
}

/// He-uniform weights and small uniform biases, seeded.
pub fn random_weights(spec: &NetworkSpec, seed: u64) -> Vec<ConvWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.conv_layers()
        .iter()
        .map(|&i| {
            let LayerKind::Conv(g) = &spec.layers[i].kind else {
                unreachable!()
            };
            let bound = (6.0 / g.patch_len() as f32).sqrt();
            ConvWeights {
                weights: (0..g.weight_len()).map(|_| rng.random_range(-bound..bound)).collect(),
                bias: (0..g.out_channels).map(|_| rng.random_range(-0.05..0.05)).collect(),
            }
        })
        .collect()
}

/// `spec` with seeded random weights.
pub fn random_network(spec: &NetworkSpec, seed: u64) -> Result<DenseNetwork> {
    build_network(spec, random_weights(spec, seed))
}

/// Looks up a bundled topology by name: `scene` or `compact`.
pub fn by_name(name: &str, height: usize, width: usize) -> Option<NetworkSpec> {
    match name {
        "scene" | "scene_labelling" => Some(scene_labelling(height, width)),
        "compact" => Some(compact(height, width)),
        _ => None,
    }
}
