//! Change-based layer executors.
//!
//! A convolution frame runs five steps: change detection (or propagation of
//! the upstream map), index extraction, partial column generation from the
//! input state, GEMM against the kernel matrix, and an in-place output update
//! with optional fused ReLU. Pooling, standalone ReLU and join layers reuse
//! the upstream map and recompute only the flagged output pixels.

use std::sync::Arc;
use std::time::Instant;

use crate::analysis;
use crate::change::{
    detect_changes, dilate_change_map, dilate_window, extract_indexes, propagate_changes, ChangeMap, DetectionMode,
    IndexList, InputState,
};
use crate::error::{Error, Result};
use crate::gemm::PackedKernel;
use crate::tensor::{
    conv_pixels, pool_at, relu_scalar, write_pixel, ColumnMatrix, ConvSpec, PoolSpec, Shape3, Tensor3,
};

/// Where a convolution layer gets its change map from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DetectionPolicy {
    /// Threshold the input against the layer's own input state.
    #[default]
    Detect,
    /// Dilate the upstream layer's output map (no thresholding).
    Propagate,
    /// Take the upstream map and index list verbatim; pointwise layers only.
    Reuse1x1,
}

impl DetectionPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectionPolicy::Detect => "detect",
            DetectionPolicy::Propagate => "propagate",
            DetectionPolicy::Reuse1x1 => "reuse",
        }
    }
}

impl std::str::FromStr for DetectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(DetectionPolicy::Detect),
            "propagate" => Ok(DetectionPolicy::Propagate),
            "reuse" | "reuse_1x1" | "reuse1x1" => Ok(DetectionPolicy::Reuse1x1),
            other => Err(Error::invalid(format!("unknown detection policy '{other}'"))),
        }
    }
}

/// The upstream layer's output-frame change map and its index list.
#[derive(Clone, Copy, Debug)]
pub struct Upstream<'a> {
    pub map: &'a ChangeMap,
    pub indexes: &'a IndexList,
}

/// Per-frame switches passed down from the network.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameOptions {
    /// Recompute every output pixel and load the whole input into the state.
    pub force_full: bool,
    /// For detecting layers, also compute the worst-case propagated map.
    pub track_propagation: bool,
    /// Count fine-grained operation estimates.
    pub estimate_fg: bool,
    pub timing: bool,
}

/// What one layer did on one frame.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerFrameStats {
    /// Output pixels recomputed.
    pub changed_px: usize,
    pub output_px: usize,
    /// Input pixels flagged by thresholded detection.
    pub detected_input_px: Option<usize>,
    /// Output pixels worst-case propagation would have flagged.
    pub propagated_px: Option<usize>,
    /// Convolution arithmetic actually performed (1 MAC = 2 ops).
    pub eff_ops: u64,
    pub fg_sp_ops: Option<u64>,
    pub fg_fm_ops: Option<u64>,
    pub wall_ns: u64,
}

impl LayerFrameStats {
    pub fn change_fraction(&self) -> f64 {
        if self.output_px == 0 {
            0.0
        } else {
            self.changed_px as f64 / self.output_px as f64
        }
    }
}

fn elapsed_ns(start: Option<Instant>) -> u64 {
    start.map_or(0, |t| t.elapsed().as_nanos() as u64)
}

fn check_input(x: &Tensor3, expected: Shape3, what: &str) -> Result<()> {
    if x.shape() != expected {
        return Err(Error::invalid(format!(
            "{what} expects input {expected}, got {}",
            x.shape()
        )));
    }
    Ok(())
}

fn check_upstream(up: &Upstream<'_>, shape: Shape3) -> Result<()> {
    if (up.map.height(), up.map.width()) != (shape.height, shape.width) {
        return Err(Error::invalid(format!(
            "upstream change map {}x{} does not match input {}x{}",
            up.map.height(),
            up.map.width(),
            shape.height,
            shape.width
        )));
    }
    Ok(())
}

/// Writes `act(Y[:, k] + bias)` into `prev_output` at the `k`-th indexed
/// pixel; every other pixel is left untouched.
pub fn update_output(
    prev_output: &mut Tensor3,
    y_partial: &ColumnMatrix,
    indexes: &IndexList,
    bias: &[f32],
    fuse_relu: bool,
) -> Result<()> {
    if y_partial.cols != indexes.count() {
        return Err(Error::invalid(format!(
            "{} result columns for {} indexes",
            y_partial.cols,
            indexes.count()
        )));
    }
    if y_partial.rows != prev_output.channels() || bias.len() != prev_output.channels() {
        return Err(Error::invalid(format!(
            "{} result rows and {} biases for {} output channels",
            y_partial.rows,
            bias.len(),
            prev_output.channels()
        )));
    }
    let shape = prev_output.shape();
    if let Some(p) = indexes
        .iter()
        .find(|p| p.row as usize >= shape.height || p.col as usize >= shape.width)
    {
        return Err(Error::invalid(format!(
            "index ({}, {}) outside output {shape}",
            p.row, p.col
        )));
    }
    for (k, px) in indexes.iter().enumerate() {
        write_pixel(prev_output, *px, y_partial.column(k), bias, fuse_relu);
    }
    Ok(())
}

/// Change-based convolution with its persistent per-stream state.
#[derive(Clone, Debug)]
pub struct CbConvLayer {
    spec: Arc<ConvSpec>,
    kernel: Arc<PackedKernel>,
    threshold: f32,
    fuse_relu: bool,
    policy: DetectionPolicy,
    mode: DetectionMode,
    state: InputState,
    prev_output: Tensor3,
    map: ChangeMap,
    indexes: IndexList,
    propagated: Option<ChangeMap>,
}

impl CbConvLayer {
    pub fn new(
        spec: ConvSpec,
        input: Shape3,
        threshold: f32,
        fuse_relu: bool,
        policy: DetectionPolicy,
    ) -> Result<Self> {
        let kernel = Arc::new(PackedKernel::new(&spec.kernel_matrix()));
        Self::with_shared(Arc::new(spec), kernel, input, threshold, fuse_relu, policy)
    }

    pub(crate) fn with_shared(
        spec: Arc<ConvSpec>,
        kernel: Arc<PackedKernel>,
        input: Shape3,
        threshold: f32,
        fuse_relu: bool,
        policy: DetectionPolicy,
    ) -> Result<Self> {
        spec.validate()?;
        let out = spec.output_shape(input)?;
        check_threshold(threshold)?;
        if policy == DetectionPolicy::Reuse1x1 && !spec.is_pointwise() {
            return Err(Error::config(format!(
                "index reuse needs a 1x1 stride-1 unpadded convolution, got {}x{} stride {} padding {}",
                spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
            )));
        }
        Ok(CbConvLayer {
            spec,
            kernel,
            threshold,
            fuse_relu,
            policy,
            mode: DetectionMode::ClosedLoop,
            state: InputState::zeros(input),
            prev_output: Tensor3::zeros(out),
            map: ChangeMap::empty(out.height, out.width),
            indexes: IndexList::default(),
            propagated: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f32) -> Result<()> {
        check_threshold(threshold)?;
        self.threshold = threshold;
        Ok(())
    }

    pub fn policy(&self) -> DetectionPolicy {
        self.policy
    }

    pub fn fuse_relu(&self) -> bool {
        self.fuse_relu
    }

    pub fn mode(&self) -> DetectionMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: DetectionMode) {
        self.mode = mode;
    }

    pub fn state(&self) -> &InputState {
        &self.state
    }

    pub fn output(&self) -> &Tensor3 {
        &self.prev_output
    }

    /// Output-frame map of the last frame.
    pub fn change_map(&self) -> &ChangeMap {
        &self.map
    }

    pub fn indexes(&self) -> &IndexList {
        &self.indexes
    }

    /// Worst-case propagated map of the last frame, when tracking was on.
    pub fn propagated_map(&self) -> Option<&ChangeMap> {
        self.propagated.as_ref()
    }

    pub fn reset(&mut self) {
        self.state.reset();
        self.prev_output.data_mut().fill(0.0);
        self.map = ChangeMap::empty(self.map.height(), self.map.width());
        self.indexes = IndexList::default();
        self.propagated = None;
    }

    fn ops_for(&self, pixels: usize) -> u64 {
        analysis::conv_ops(&self.spec, pixels)
    }

    /// Advances the layer by one frame. `x` is the current input; `upstream`
    /// is required for the propagate and reuse policies, and is used by the
    /// detect policy only for worst-case tracking.
    pub fn forward(
        &mut self,
        x: &Tensor3,
        upstream: Option<Upstream<'_>>,
        opts: &FrameOptions,
    ) -> Result<LayerFrameStats> {
        let start = opts.timing.then(Instant::now);
        let in_shape = self.state.shape();
        check_input(x, in_shape, "convolution")?;
        if let Some(up) = &upstream {
            check_upstream(up, in_shape)?;
        }
        let upstream_required = self.policy != DetectionPolicy::Detect && !opts.force_full;
        if upstream_required && upstream.is_none() {
            return Err(Error::config(format!(
                "policy '{}' needs an upstream change map",
                self.policy.as_str()
            )));
        }
        let mut stats = LayerFrameStats {
            output_px: self.prev_output.shape().pixels(),
            ..Default::default()
        };

        // (1) change detection / propagation, (2) index extraction.
        self.propagated = None;
        if opts.force_full {
            self.state.overwrite(x);
            let out = self.prev_output.shape();
            self.map = ChangeMap::full(out.height, out.width);
            self.indexes = IndexList::all(out.height, out.width);
        } else {
            match (self.policy, upstream) {
                (DetectionPolicy::Detect, up) => {
                    if opts.estimate_fg {
                        let (sp, fm) = analysis::estimate_fg_ops(x, &self.state, &self.spec, self.threshold)?;
                        stats.fg_sp_ops = Some(sp);
                        stats.fg_fm_ops = Some(fm);
                    }
                    let m = detect_changes(x, &mut self.state, self.threshold, self.mode)?;
                    stats.detected_input_px = Some(m.count());
                    self.map = dilate_change_map(&m, &self.spec);
                    self.indexes = extract_indexes(&self.map);
                    if opts.track_propagation {
                        if let Some(up) = up {
                            let worst = propagate_changes(up.map, &self.spec);
                            stats.propagated_px = Some(worst.count());
                            self.propagated = Some(worst);
                        }
                    }
                }
                (DetectionPolicy::Propagate, Some(up)) => {
                    self.state.accept(x, up.map);
                    self.map = propagate_changes(up.map, &self.spec);
                    self.indexes = extract_indexes(&self.map);
                    stats.fg_sp_ops = opts.estimate_fg.then(|| analysis::fg_sp_ops(up.map, &self.spec));
                }
                (DetectionPolicy::Reuse1x1, Some(up)) => {
                    self.state.accept(x, up.map);
                    self.map = up.map.clone();
                    self.indexes = up.indexes.clone();
                    stats.fg_sp_ops = opts.estimate_fg.then(|| analysis::fg_sp_ops(up.map, &self.spec));
                }
                (_, None) => unreachable!("checked above"),
            }
        }

        // (3) partial column generation, (4) GEMM, (5) output update.
        let CbConvLayer {
            spec,
            kernel,
            state,
            prev_output,
            indexes,
            fuse_relu,
            ..
        } = self;
        conv_pixels(state.tensor(), spec, kernel, indexes, |px, vals| {
            write_pixel(prev_output, px, vals, &spec.bias, *fuse_relu)
        });

        stats.changed_px = self.indexes.count();
        stats.eff_ops = self.ops_for(stats.changed_px);
        if opts.estimate_fg {
            // Full updates and layers without per-channel detection are
            // charged at the coarse cost.
            stats.fg_sp_ops.get_or_insert(stats.eff_ops);
            stats.fg_fm_ops.get_or_insert(stats.eff_ops);
        }
        stats.wall_ns = elapsed_ns(start);
        Ok(stats)
    }
}

fn check_threshold(threshold: f32) -> Result<()> {
    if threshold.is_nan() || threshold < 0.0 || threshold.is_infinite() {
        return Err(Error::config(format!(
            "threshold must be finite and non-negative, got {threshold}"
        )));
    }
    Ok(())
}

/// Change-based max pooling driven by the producing layer's change map.
#[derive(Clone, Debug)]
pub struct CbPoolLayer {
    pool: PoolSpec,
    input: Shape3,
    prev_output: Tensor3,
    map: ChangeMap,
    indexes: IndexList,
}

impl CbPoolLayer {
    pub fn new(pool: PoolSpec, input: Shape3) -> Result<Self> {
        let out = pool.output_shape(input)?;
        Ok(CbPoolLayer {
            pool,
            input,
            prev_output: Tensor3::zeros(out),
            map: ChangeMap::empty(out.height, out.width),
            indexes: IndexList::default(),
        })
    }

    pub fn pool(&self) -> PoolSpec {
        self.pool
    }

    pub fn output(&self) -> &Tensor3 {
        &self.prev_output
    }

    pub fn change_map(&self) -> &ChangeMap {
        &self.map
    }

    pub fn indexes(&self) -> &IndexList {
        &self.indexes
    }

    pub fn reset(&mut self) {
        self.prev_output.data_mut().fill(0.0);
        self.map = ChangeMap::empty(self.map.height(), self.map.width());
        self.indexes = IndexList::default();
    }

    pub fn forward(
        &mut self,
        x: &Tensor3,
        upstream: Option<Upstream<'_>>,
        opts: &FrameOptions,
    ) -> Result<LayerFrameStats> {
        let start = opts.timing.then(Instant::now);
        check_input(x, self.input, "pooling")?;
        let out = self.prev_output.shape();
        if opts.force_full {
            self.map = ChangeMap::full(out.height, out.width);
        } else {
            let up = upstream.ok_or_else(|| Error::config("pooling needs an upstream change map"))?;
            check_upstream(&up, self.input)?;
            self.map = dilate_window(up.map, &self.pool.window(), out.height, out.width);
        }
        self.indexes = extract_indexes(&self.map);
        let window = self.pool.window();
        let plane = out.pixels();
        for px in self.indexes.iter() {
            let (r, c) = (px.row as usize, px.col as usize);
            for ch in 0..out.channels {
                self.prev_output.data_mut()[ch * plane + r * out.width + c] = pool_at(x, &window, ch, r, c);
            }
        }
        Ok(LayerFrameStats {
            changed_px: self.indexes.count(),
            output_px: plane,
            wall_ns: elapsed_ns(start),
            ..Default::default()
        })
    }
}

/// Elementwise layers: standalone ReLU and multi-input joins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    /// Elementwise sum of all inputs.
    Add,
    /// Channel concatenation in input order.
    Concat,
}

/// Change-based elementwise layer; a pixel is recomputed if it changed in any
/// parent.
#[derive(Clone, Debug)]
pub struct CbElementwise {
    op: ElementwiseOp,
    prev_output: Tensor3,
    map: ChangeMap,
    indexes: IndexList,
}

impl CbElementwise {
    pub fn new(op: ElementwiseOp, output: Shape3) -> Self {
        CbElementwise {
            op,
            prev_output: Tensor3::zeros(output),
            map: ChangeMap::empty(output.height, output.width),
            indexes: IndexList::default(),
        }
    }

    pub fn op(&self) -> ElementwiseOp {
        self.op
    }

    pub fn output(&self) -> &Tensor3 {
        &self.prev_output
    }

    pub fn change_map(&self) -> &ChangeMap {
        &self.map
    }

    pub fn indexes(&self) -> &IndexList {
        &self.indexes
    }

    pub fn reset(&mut self) {
        self.prev_output.data_mut().fill(0.0);
        self.map = ChangeMap::empty(self.map.height(), self.map.width());
        self.indexes = IndexList::default();
    }

    pub fn forward(
        &mut self,
        inputs: &[&Tensor3],
        upstream: &[Upstream<'_>],
        opts: &FrameOptions,
    ) -> Result<LayerFrameStats> {
        let start = opts.timing.then(Instant::now);
        let out = self.prev_output.shape();
        if inputs.is_empty() {
            return Err(Error::invalid("elementwise layer without inputs"));
        }
        for x in inputs {
            if (x.height(), x.width()) != (out.height, out.width) {
                return Err(Error::invalid(format!(
                    "elementwise input {} does not match output {out}",
                    x.shape()
                )));
            }
        }
        if opts.force_full {
            self.map = ChangeMap::full(out.height, out.width);
            self.indexes = IndexList::all(out.height, out.width);
        } else if upstream.len() == 1 {
            self.map = upstream[0].map.clone();
            self.indexes = upstream[0].indexes.clone();
        } else {
            if upstream.len() != inputs.len() {
                return Err(Error::config("join needs one upstream change map per input"));
            }
            let mut m = ChangeMap::empty(out.height, out.width);
            for up in upstream {
                if (up.map.height(), up.map.width()) != (out.height, out.width) {
                    return Err(Error::invalid("join parents have different spatial sizes"));
                }
                m.union_with(up.map);
            }
            self.indexes = extract_indexes(&m);
            self.map = m;
        }
        let plane = out.pixels();
        let dst = self.prev_output.data_mut();
        for px in self.indexes.iter() {
            let p = px.row as usize * out.width + px.col as usize;
            match self.op {
                ElementwiseOp::Relu => {
                    for c in 0..out.channels {
                        dst[c * plane + p] = relu_scalar(inputs[0].data()[c * plane + p]);
                    }
                }
                ElementwiseOp::Add => {
                    for c in 0..out.channels {
                        dst[c * plane + p] = inputs.iter().fold(0.0, |acc, x| acc + x.data()[c * plane + p]);
                    }
                }
                ElementwiseOp::Concat => {
                    let mut base = 0;
                    for x in inputs {
                        for c in 0..x.channels() {
                            dst[(base + c) * plane + p] = x.data()[c * plane + p];
                        }
                        base += x.channels();
                    }
                }
            }
        }
        Ok(LayerFrameStats {
            changed_px: self.indexes.count(),
            output_px: plane,
            wall_ns: elapsed_ns(start),
            ..Default::default()
        })
    }
}
