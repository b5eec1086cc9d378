//! Seeded static-camera sequences: a fixed textured background with moving
//! rectangles and optional per-pixel Gaussian noise.
//!
//! Background samples lie in `[0, 0.5)` and object colours in `[0.6, 1)`,
//! so before noise every pixel an object covers differs from the background
//! by more than 0.1 in every channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub n_objects: usize,
    /// Side length of the square objects.
    pub object_size: usize,
    /// Per-frame displacement `(dx, dy)`, shared by all objects; objects
    /// bounce off the frame border.
    pub velocity: (i64, i64),
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            channels: 3,
            height: 128,
            width: 128,
            n_frames: 20,
            n_objects: 2,
            object_size: 10,
            velocity: (1, 0),
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.channels, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.n_frames == 0 {
            return Err(Error::invalid("channels, resolution and frame count must be positive"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid(format!(
                "noise std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if self.n_objects > 0 {
            if self.object_size == 0 || self.object_size > self.height || self.object_size > self.width {
                return Err(Error::invalid(format!(
                    "{0}x{0} objects do not fit in {1}x{2} frames",
                    self.object_size, self.height, self.width
                )));
            }
            let (dx, dy) = self.velocity;
            let span_x = (self.width - self.object_size) as u64;
            let span_y = (self.height - self.object_size) as u64;
            if dx.unsigned_abs() > span_x || dy.unsigned_abs() > span_y {
                return Err(Error::invalid(format!(
                    "velocity ({dx}, {dy}) exceeds the free range ({span_x}, {span_y})"
                )));
            }
        }
        Ok(())
    }
}

/// One axis of bouncing motion within `[0, span]`.
fn step(pos: i64, vel: i64, span: i64) -> (i64, i64) {
    let next = pos + vel;
    if next < 0 {
        (-next, -vel)
    } else if next > span {
        (2 * span - next, -vel)
    } else {
        (next, vel)
    }
}

struct Object {
    x: i64,
    y: i64,
    vx: i64,
    vy: i64,
    color: Vec<f32>,
}

/// Generates the sequence; identical configurations give bit-identical
/// frames.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Tensor3>> {
    cfg.validate()?;
    let shape = cfg.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background: Vec<f32> = (0..shape.len()).map(|_| rng.random_range(0.0..0.5)).collect();
    let span_x = (cfg.width - cfg.object_size.min(cfg.width)) as i64;
    let span_y = (cfg.height - cfg.object_size.min(cfg.height)) as i64;
    let mut objects: Vec<Object> = (0..cfg.n_objects)
        .map(|_| Object {
            x: rng.random_range(0..=span_x),
            y: rng.random_range(0..=span_y),
            vx: cfg.velocity.0,
            vy: cfg.velocity.1,
            color: (0..cfg.channels).map(|_| rng.random_range(0.6..1.0)).collect(),
        })
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let plane = shape.pixels();

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for f in 0..cfg.n_frames {
        if f > 0 {
            for o in &mut objects {
                (o.x, o.vx) = step(o.x, o.vx, span_x);
                (o.y, o.vy) = step(o.y, o.vy, span_y);
            }
        }
        let mut data = background.clone();
        for o in &objects {
            for (c, &color) in o.color.iter().enumerate() {
                for r in o.y as usize..o.y as usize + cfg.object_size {
                    let row = c * plane + r * cfg.width;
                    data[row + o.x as usize..row + o.x as usize + cfg.object_size].fill(color);
                }
            }
        }
        if cfg.noise_std > 0.0 {
            for v in &mut data {
                *v += noise.sample(&mut rng);
            }
        }
        frames.push(Tensor3::from_vec(shape, data)?);
    }
    Ok(frames)
}
