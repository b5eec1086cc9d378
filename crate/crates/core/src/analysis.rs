//! Operation counting, fine-grained estimates, change statistics and memory
//! accounting.
//!
//! Counts cover convolution arithmetic only, with one multiply-accumulate
//! counted as two operations. Bias additions, change detection, pooling and
//! data movement are not counted.

use crate::change::{changed_pixels, dilate_window, ChangeMap, InputState};
use crate::error::{Error, Result};
use crate::network::{LayerKind, NetworkSpec, RunStats};
use crate::tensor::{ConvSpec, Tensor3};

/// `2 · pixels · C_out · C_in · k_h · k_w`.
pub fn conv_ops(spec: &ConvSpec, pixels: usize) -> u64 {
    2 * pixels as u64 * spec.out_channels as u64 * spec.patch_len() as u64
}

/// Dense per-layer operation counts; non-convolution layers count 0.
pub fn count_ops_dense(spec: &NetworkSpec) -> Result<Vec<u64>> {
    let shapes = spec.shapes()?;
    Ok(spec
        .layers
        .iter()
        .zip(&shapes)
        .map(|(layer, out)| match &layer.kind {
            LayerKind::Conv(g) => 2 * out.pixels() as u64 * g.out_channels as u64 * g.patch_len() as u64,
            _ => 0,
        })
        .collect())
}

/// Change-based per-frame, per-layer operation counts rebuilt from the
/// recorded changed-pixel counts.
pub fn count_ops_cb(stats: &RunStats, spec: &NetworkSpec) -> Result<Vec<Vec<u64>>> {
    if stats.layer_names.len() != spec.layers.len() {
        return Err(Error::invalid(format!(
            "run has {} layers, network has {}",
            stats.layer_names.len(),
            spec.layers.len()
        )));
    }
    Ok(stats
        .frames
        .iter()
        .map(|f| {
            f.layers
                .iter()
                .zip(&spec.layers)
                .map(|(l, desc)| match &desc.kind {
                    LayerKind::Conv(g) => 2 * l.changed_px as u64 * g.out_channels as u64 * g.patch_len() as u64,
                    _ => 0,
                })
                .collect()
        })
        .collect())
}

/// Per-row prefix counts of a change map, `(h + 1) × (w + 1)`.
fn integral(m: &ChangeMap) -> Vec<u64> {
    let (h, w) = (m.height(), m.width());
    let mut s = vec![0u64; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0u64;
        for c in 0..w {
            row += m.get(r, c) as u64;
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

/// Spatially fine-grained estimate for an input-frame change map: each output
/// pixel pays one `C_out × C_in` update per flagged tap in its window.
pub fn fg_sp_ops(input_map: &ChangeMap, spec: &ConvSpec) -> u64 {
    let window = spec.window();
    let (h, w) = (input_map.height(), input_map.width());
    let Some((oh, ow)) = window.output_dims(h, w) else {
        return 0;
    };
    if input_map.is_empty() {
        return 0;
    }
    let s = integral(input_map);
    let at = |r: usize, c: usize| s[r * (w + 1) + c];
    let mut taps = 0u64;
    for or in 0..oh {
        let (r0, r1) = window.input_span(or, spec.kernel_h, h);
        for oc in 0..ow {
            let (c0, c1) = window.input_span(oc, spec.kernel_w, w);
            taps += at(r1, c1) + at(r0, c0) - at(r0, c1) - at(r1, c0);
        }
    }
    2 * spec.out_channels as u64 * spec.in_channels as u64 * taps
}

/// Feature-map fine-grained estimate from per-channel input maps: each output
/// pixel pays one `C_out × k_h × k_w` update per input channel with a flagged
/// tap in its window.
pub fn fg_fm_ops(channel_maps: &[ChangeMap], spec: &ConvSpec) -> u64 {
    let window = spec.window();
    let mut hits = 0u64;
    for m in channel_maps {
        let Some((oh, ow)) = window.output_dims(m.height(), m.width()) else {
            return 0;
        };
        hits += dilate_window(m, &window, oh, ow).count() as u64;
    }
    2 * spec.out_channels as u64 * (spec.kernel_h * spec.kernel_w) as u64 * hits
}

/// Both fine-grained estimates for one detection step (counts only; the state
/// is not touched). Returns `(fg_sp_ops, fg_fm_ops)`.
pub fn estimate_fg_ops(x: &Tensor3, state: &InputState, spec: &ConvSpec, tau: f32) -> Result<(u64, u64)> {
    if x.shape() != state.shape() {
        return Err(Error::invalid(format!(
            "input {} does not match state {}",
            x.shape(),
            state.shape()
        )));
    }
    if x.channels() != spec.in_channels {
        return Err(Error::invalid(format!(
            "convolution expects {} channels, got {}",
            spec.in_channels,
            x.channels()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let mut any = ChangeMap::empty(h, w);
    let mut per_channel = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let bits = x.data()[c * n..(c + 1) * n]
            .iter()
            .zip(&state.tensor().data()[c * n..(c + 1) * n])
            .map(|(a, b)| (a - b).abs() > tau)
            .collect();
        let m = ChangeMap::from_bits(h, w, bits)?;
        any.union_with(&m);
        per_channel.push(m);
    }
    debug_assert_eq!(any, changed_pixels(x, state.tensor(), tau));
    Ok((fg_sp_ops(&any, spec), fg_fm_ops(&per_channel, spec)))
}

/// Per-layer operation totals for one network over a set of frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpReport {
    pub layers: Vec<OpRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpRow {
    pub name: String,
    pub dense_ops: u64,
    pub cb_ops: u64,
    pub fg_sp_ops: u64,
    pub fg_fm_ops: u64,
}

impl OpReport {
    /// Sums frames `frames` of `stats`. Layers without fine-grained estimates
    /// are charged at their coarse count.
    pub fn from_run(spec: &NetworkSpec, stats: &RunStats, frames: std::ops::Range<usize>) -> Result<Self> {
        let dense = count_ops_dense(spec)?;
        let frames = frames.start.min(stats.frames.len())..frames.end.min(stats.frames.len());
        let n = frames.len() as u64;
        let mut layers: Vec<OpRow> = spec
            .layers
            .iter()
            .zip(&dense)
            .map(|(l, &d)| OpRow {
                name: l.name.clone(),
                dense_ops: d * n,
                ..Default::default()
            })
            .collect();
        for f in &stats.frames[frames] {
            for (row, l) in layers.iter_mut().zip(&f.layers) {
                row.cb_ops += l.eff_ops;
                row.fg_sp_ops += l.fg_sp_ops.unwrap_or(l.eff_ops);
                row.fg_fm_ops += l.fg_fm_ops.unwrap_or(l.eff_ops);
            }
        }
        Ok(OpReport { layers })
    }

    pub fn total(&self) -> OpRow {
        self.layers.iter().fold(
            OpRow {
                name: "total".into(),
                ..Default::default()
            },
            |mut t, r| {
                t.dense_ops += r.dense_ops;
                t.cb_ops += r.cb_ops;
                t.fg_sp_ops += r.fg_sp_ops;
                t.fg_fm_ops += r.fg_fm_ops;
                t
            },
        )
    }
}

/// Buffer-sharing strategy assumed by [`memory_accounting`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Every intermediate and every patch matrix kept separately.
    Naive,
    /// One shared patch matrix; two ping-pong feature-map buffers.
    Shared,
    /// Shared plus per-layer change-based state and shared scratch.
    ChangeBased,
}

impl MemoryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MemoryMode::Naive => "naive",
            MemoryMode::Shared => "shared",
            MemoryMode::ChangeBased => "cb",
        }
    }
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(MemoryMode::Naive),
            "shared" => Ok(MemoryMode::Shared),
            "cb" => Ok(MemoryMode::ChangeBased),
            other => Err(Error::invalid(format!("unknown memory mode '{other}'"))),
        }
    }
}

/// Stored scalar values by category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemReport {
    pub mode: MemoryMode,
    pub intermediate_values: u64,
    pub x_matrix_values: u64,
    pub param_values: u64,
    /// Input states and previous outputs of change-based layers.
    pub cb_state_values: u64,
    /// Change maps, index list and GEMM result, sized for the largest layer.
    pub cb_scratch_values: u64,
}

impl MemReport {
    pub fn cb_extra_values(&self) -> u64 {
        self.cb_state_values + self.cb_scratch_values
    }

    pub fn total(&self) -> u64 {
        self.intermediate_values + self.x_matrix_values + self.param_values + self.cb_extra_values()
    }
}

pub fn memory_accounting(spec: &NetworkSpec, mode: MemoryMode) -> Result<MemReport> {
    let shapes = spec.shapes()?;
    let input_len = spec.input.len() as u64;
    let out_len: Vec<u64> = shapes.iter().map(|s| s.len() as u64).collect();

    let mut x_sizes = Vec::new();
    let mut params = 0u64;
    for (layer, out) in spec.layers.iter().zip(&shapes) {
        if let LayerKind::Conv(g) = &layer.kind {
            x_sizes.push(g.patch_len() as u64 * out.pixels() as u64);
            params += g.param_len() as u64;
        }
    }

    let (intermediate_values, x_matrix_values) = match mode {
        MemoryMode::Naive => (input_len + out_len.iter().sum::<u64>(), x_sizes.iter().sum()),
        MemoryMode::Shared | MemoryMode::ChangeBased => {
            let mut pair_max = 0u64;
            let mut prev = input_len;
            for &cur in &out_len {
                pair_max = pair_max.max(prev + cur);
                prev = cur;
            }
            (pair_max, x_sizes.iter().copied().max().unwrap_or(0))
        }
    };

    let (mut cb_state_values, mut cb_scratch_values) = (0u64, 0u64);
    if mode == MemoryMode::ChangeBased {
        let (mut maps, mut idx, mut y) = (0u64, 0u64, 0u64);
        for (i, (layer, out)) in spec.layers.iter().zip(&shapes).enumerate() {
            let in_shape = spec.input_shape_of(i, &shapes);
            cb_state_values += out.len() as u64;
            if let LayerKind::Conv(_) = layer.kind {
                cb_state_values += in_shape.len() as u64;
                y = y.max(out.len() as u64);
            }
            maps = maps.max((in_shape.pixels() + out.pixels()) as u64);
            idx = idx.max(out.pixels() as u64);
        }
        cb_scratch_values = maps + idx + y;
    }

    Ok(MemReport {
        mode,
        intermediate_values,
        x_matrix_values,
        param_values: params,
        cb_state_values,
        cb_scratch_values,
    })
}

/// Change fraction and worst-case-to-detected ratio for one layer and frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangeStat {
    pub frame: usize,
    pub layer: usize,
    pub fraction: f64,
    /// `propagated / detected` output pixels; `None` when the run did not
    /// record the worst-case map for this layer. `0/0` reads as 1.
    pub ratio: Option<f64>,
}

pub fn change_stats(run: &RunStats) -> Vec<ChangeStat> {
    let mut out = Vec::new();
    for (f, frame) in run.frames.iter().enumerate() {
        for (l, s) in frame.layers.iter().enumerate() {
            let ratio = s.propagated_px.map(|p| match (p, s.changed_px) {
                (0, 0) => 1.0,
                (_, 0) => f64::INFINITY,
                (p, d) => p as f64 / d as f64,
            });
            out.push(ChangeStat {
                frame: f,
                layer: l,
                fraction: s.change_fraction(),
                ratio,
            });
        }
    }
    out
}
