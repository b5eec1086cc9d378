//! Seeded generators shared by the integration tests.

#![allow(dead_code)]

use changenet::network::{build_network, ConvGeometry, ConvWeights, DenseNetwork, LayerKind, NetworkSpec};
use changenet::{DetectionPolicy, PoolSpec, Shape3, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random network with per-layer policies and a frame sequence for it.
pub struct Case {
    pub net: DenseNetwork,
    pub policies: Vec<DetectionPolicy>,
    pub frames: Vec<Tensor3>,
}

impl Case {
    pub fn n_conv(&self) -> usize {
        self.policies.len()
    }
}

fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    loop {
        let input = Shape3::new(
            rng.random_range(1..=4),
            rng.random_range(8..=32),
            rng.random_range(8..=32),
        );
        let n_conv = rng.random_range(2..=5);
        let mut layers = Vec::new();
        let mut channels = input.channels;
        for c in 0..n_conv {
            let k = [1, 3, 5, 7][rng.random_range(0..4)];
            let out = rng.random_range(1..=8);
            let last = c + 1 == n_conv;
            layers.push((
                format!("conv{c}"),
                LayerKind::Conv(ConvGeometry {
                    in_channels: channels,
                    out_channels: out,
                    kernel_h: k,
                    kernel_w: k,
                    stride: if rng.random_bool(0.2) { 2 } else { 1 },
                    padding: rng.random_range(0..=k / 2),
                    fuse_relu: !last && rng.random_bool(0.8),
                }),
            ));
            channels = out;
            if !last && rng.random_bool(0.2) {
                layers.push((
                    format!("pool{c}"),
                    LayerKind::MaxPool(PoolSpec {
                        size: 2,
                        stride: 2,
                        ceil_mode: rng.random_bool(0.5),
                    }),
                ));
            }
        }
        let spec = NetworkSpec::sequential(input, layers);
        if spec.shapes().is_ok() {
            return spec;
        }
    }
}

pub fn random_weights(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Vec<ConvWeights> {
    spec.conv_layers()
        .iter()
        .map(|&i| {
            let LayerKind::Conv(g) = &spec.layers[i].kind else {
                unreachable!()
            };
            let bound = (6.0 / g.patch_len() as f32).sqrt();
            ConvWeights {
                weights: (0..g.weight_len()).map(|_| rng.random_range(-bound..bound)).collect(),
                bias: (0..g.out_channels).map(|_| rng.random_range(-0.1..0.1)).collect(),
            }
        })
        .collect()
}

fn random_policies(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Vec<DetectionPolicy> {
    spec.conv_layers()
        .iter()
        .map(|&i| {
            let LayerKind::Conv(g) = &spec.layers[i].kind else {
                unreachable!()
            };
            if i == 0 {
                return DetectionPolicy::Detect;
            }
            let pointwise = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
            match rng.random_range(0..10) {
                0..=5 => DetectionPolicy::Detect,
                6..=7 => DetectionPolicy::Propagate,
                _ if pointwise => DetectionPolicy::Reuse1x1,
                _ => DetectionPolicy::Propagate,
            }
        })
        .collect()
}

/// A sequence mixing local edits, tiny perturbations, repeats and cuts.
pub fn random_sequence(shape: Shape3, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor3> {
    let fresh = |rng: &mut ChaCha8Rng| {
        Tensor3::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let mut frames = vec![fresh(rng)];
    for _ in 1..n {
        let mut f = frames.last().unwrap().clone();
        match rng.random_range(0..10) {
            0 => {}
            1 => f = fresh(rng),
            _ => {
                for _ in 0..rng.random_range(1..=3) {
                    let h = rng.random_range(1..=shape.height.div_ceil(3));
                    let w = rng.random_range(1..=shape.width.div_ceil(3));
                    let r0 = rng.random_range(0..=shape.height - h);
                    let c0 = rng.random_range(0..=shape.width - w);
                    for c in 0..shape.channels {
                        for r in r0..r0 + h {
                            for col in c0..c0 + w {
                                f.set(c, r, col, rng.random_range(0.0..1.0));
                            }
                        }
                    }
                }
                for _ in 0..rng.random_range(0..6) {
                    let (c, r, col) = (
                        rng.random_range(0..shape.channels),
                        rng.random_range(0..shape.height),
                        rng.random_range(0..shape.width),
                    );
                    let delta = [1e-6, 0.01, 0.2][rng.random_range(0..3)];
                    f.set(c, r, col, f.get(c, r, col) + delta);
                }
            }
        }
        frames.push(f);
    }
    frames
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng);
    let weights = random_weights(&spec, &mut rng);
    let policies = random_policies(&spec, &mut rng);
    let frames = random_sequence(spec.input, 10, &mut rng);
    Case {
        net: build_network(&spec, weights).unwrap(),
        policies,
        frames,
    }
}

/// Positive per-layer thresholds derived from `seed`.
pub fn random_thresholds(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.random_range(0.01..0.3)).collect()
}
