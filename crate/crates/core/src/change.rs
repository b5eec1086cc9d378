//! Change detection, change-map dilation and index extraction.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Pixel, Shape3, Tensor3, Window};

/// Per-pixel change flags in the coordinate frame of the tensor they annotate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ChangeMap {
    pub fn empty(height: usize, width: usize) -> Self {
        ChangeMap {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        ChangeMap {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} change map needs {} flags, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(ChangeMap { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    pub fn is_subset_of(&self, other: &ChangeMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// In-place OR. Panics on a dimension mismatch.
    pub fn union_with(&mut self, other: &ChangeMap) {
        assert_eq!((self.height, self.width), (other.height, other.width));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

/// Row-major ordered coordinates of changed pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexList {
    pixels: Vec<Pixel>,
}

impl IndexList {
    pub fn count(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub(crate) fn all(height: usize, width: usize) -> Self {
        IndexList {
            pixels: crate::tensor::all_pixels(height, width).collect(),
        }
    }
}

impl Deref for IndexList {
    type Target = [Pixel];

    fn deref(&self) -> &[Pixel] {
        &self.pixels
    }
}

/// Per-layer copy of the last accepted input values.
#[derive(Clone, Debug, PartialEq)]
pub struct InputState {
    state: Tensor3,
}

impl InputState {
    pub fn zeros(shape: Shape3) -> Self {
        InputState {
            state: Tensor3::zeros(shape),
        }
    }

    pub fn from_tensor(state: Tensor3) -> Self {
        InputState { state }
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.state
    }

    pub fn shape(&self) -> Shape3 {
        self.state.shape()
    }

    pub(crate) fn reset(&mut self) {
        self.state.data_mut().fill(0.0);
    }

    /// Copies every channel of `x` at the pixels flagged in `m`.
    pub(crate) fn accept(&mut self, x: &Tensor3, m: &ChangeMap) {
        let n = x.shape().pixels();
        let dst = self.state.data_mut();
        for c in 0..x.channels() {
            let (src, dst) = (&x.data()[c * n..(c + 1) * n], &mut dst[c * n..(c + 1) * n]);
            for (p, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
                dst[p] = src[p];
            }
        }
    }

    pub(crate) fn overwrite(&mut self, x: &Tensor3) {
        self.state.data_mut().copy_from_slice(x.data());
    }
}

/// How the input state advances after detection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DetectionMode {
    /// State follows the input only where a change was accepted.
    #[default]
    ClosedLoop,
    /// State is replaced by the whole input every frame.
    FeedForward,
}

/// Flags pixels where any channel moved by more than `tau` from the state,
/// then advances the state according to `mode`.
pub fn detect_changes(x: &Tensor3, state: &mut InputState, tau: f32, mode: DetectionMode) -> Result<ChangeMap> {
    if x.shape() != state.shape() {
        return Err(Error::invalid(format!(
            "input {} does not match state {}",
            x.shape(),
            state.shape()
        )));
    }
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::invalid(format!("threshold must be non-negative, got {tau}")));
    }
    let m = changed_pixels(x, state.tensor(), tau);
    match mode {
        DetectionMode::ClosedLoop => state.accept(x, &m),
        DetectionMode::FeedForward => state.overwrite(x),
    }
    Ok(m)
}

/// The detection predicate without any state update.
pub(crate) fn changed_pixels(x: &Tensor3, reference: &Tensor3, tau: f32) -> ChangeMap {
    let shape = x.shape();
    let n = shape.pixels();
    let mut m = ChangeMap::empty(shape.height, shape.width);
    for c in 0..shape.channels {
        let (a, b) = (&x.data()[c * n..(c + 1) * n], &reference.data()[c * n..(c + 1) * n]);
        for ((flag, &u), &v) in m.bits.iter_mut().zip(a).zip(b) {
            *flag |= (u - v).abs() > tau;
        }
    }
    m
}

/// Maps an input-frame change map to the `out_h × out_w` output frame: an
/// output pixel is flagged iff its (clipped) window contains a flagged input
/// pixel. Computed separably with prefix counts.
pub fn dilate_window(m: &ChangeMap, window: &Window, out_h: usize, out_w: usize) -> ChangeMap {
    let mut out = ChangeMap::empty(out_h, out_w);
    if out_h == 0 || out_w == 0 || m.is_empty() {
        return out;
    }
    let (h, w) = (m.height, m.width);
    // Horizontal pass: rows stay in input frame, columns move to output frame.
    let mut horiz = vec![0u32; (h + 1) * out_w];
    let mut prefix = vec![0u32; w + 1];
    for r in 0..h {
        let row = &m.bits[r * w..(r + 1) * w];
        if !row.iter().any(|&b| b) {
            continue;
        }
        for (i, &b) in row.iter().enumerate() {
            prefix[i + 1] = prefix[i] + b as u32;
        }
        for oc in 0..out_w {
            let (c0, c1) = window.input_span(oc, window.kernel_w, w);
            horiz[(r + 1) * out_w + oc] = (prefix[c1] > prefix[c0]) as u32;
        }
    }
    // Running column sums so horiz[(r) * out_w + oc] counts rows < r.
    for r in 1..=h {
        for oc in 0..out_w {
            horiz[r * out_w + oc] += horiz[(r - 1) * out_w + oc];
        }
    }
    for or in 0..out_h {
        let (r0, r1) = window.input_span(or, window.kernel_h, h);
        for oc in 0..out_w {
            out.bits[or * out_w + oc] = horiz[r1 * out_w + oc] > horiz[r0 * out_w + oc];
        }
    }
    out
}

/// Marks every output pixel of `spec` whose receptive field holds a change.
/// A kernel that does not fit the map yields a `0 × 0` map.
pub fn dilate_change_map(m: &ChangeMap, spec: &ConvSpec) -> ChangeMap {
    let window = spec.window();
    let (oh, ow) = window.output_dims(m.height, m.width).unwrap_or((0, 0));
    dilate_window(m, &window, oh, ow)
}

/// Worst-case propagation of the previous layer's output map through this
/// layer. Pointwise stride-1 layers pass the map through unchanged.
pub fn propagate_changes(prev: &ChangeMap, spec: &ConvSpec) -> ChangeMap {
    if spec.is_pointwise() {
        prev.clone()
    } else {
        dilate_change_map(prev, spec)
    }
}

pub fn extract_indexes(m: &ChangeMap) -> IndexList {
    let w = m.width.max(1);
    IndexList {
        pixels: m
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| Pixel::new(i / w, i % w))
            .collect(),
    }
}
