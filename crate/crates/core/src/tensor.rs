//! Tensor types and the dense reference operators.
//!
//! Everything here is the correctness oracle for the change-based paths: the
//! direct convolution [`conv2d_dense`] and the lowered form
//! `gemm(kernel_matrix, im2col(x))` accumulate in the same order (input
//! channel, then kernel row, then kernel column, starting from zero, bias
//! added last) and therefore agree bit for bit.

use crate::error::{Error, Result};
use crate::gemm;

/// `channels × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape3 {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A `(row, col)` pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pixel {
    pub row: u32,
    pub col: u32,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Pixel {
            row: row as u32,
            col: col as u32,
        }
    }
}

/// Channel-major, row-major-within-channel `f32` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(shape: Shape3) -> Self {
        Tensor3 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        Tensor3 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Wraps `data`, rejecting a length mismatch or any non-finite value.
    pub fn from_vec(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at element {pos}")));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.shape.height + row) * self.shape.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f32) {
        let idx = self.index(c, row, col);
        self.data[idx] = value;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Largest absolute elementwise difference, relative to `max(1, |other|)`.
    pub fn max_rel_diff(&self, other: &Tensor3) -> f32 {
        assert_eq!(self.shape, other.shape, "max_rel_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f32::max)
    }
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// Round the output size up; the last window may hang over the border
    /// but always starts inside the (left-padded) input.
    pub ceil_mode: bool,
}

impl Window {
    fn axis_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if kernel == 0 || self.stride == 0 || padded < kernel {
            return None;
        }
        let span = padded - kernel;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        if self.ceil_mode && (out - 1) * self.stride >= input + self.padding {
            out -= 1;
        }
        Some(out)
    }

    /// Output `(height, width)` or `None` when the window does not fit.
    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Option<(usize, usize)> {
        Some((self.axis_len(in_h, self.kernel_h)?, self.axis_len(in_w, self.kernel_w)?))
    }

    /// Half-open input range `[start, end)` read by output index `out` along
    /// one axis, clipped to `[0, input)`.
    #[inline]
    pub fn input_span(&self, out: usize, kernel: usize, input: usize) -> (usize, usize) {
        let start = (out * self.stride) as isize - self.padding as isize;
        let end = start + kernel as isize;
        (
            start.clamp(0, input as isize) as usize,
            end.clamp(0, input as isize) as usize,
        )
    }

    /// Inclusive output range whose windows read input index `pos` along one
    /// axis, clipped to `[0, output)`; `None` if no window covers it.
    #[inline]
    pub fn output_span(&self, pos: usize, kernel: usize, output: usize) -> Option<(usize, usize)> {
        let shifted = pos + self.padding;
        let lo = (shifted + 1).saturating_sub(kernel).div_ceil(self.stride);
        let hi = (shifted / self.stride).min(output.checked_sub(1)?);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Convolution layer parameters: zero padding, square stride, no groups or
/// dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × in × kernel_h × kernel_w`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Zero weights and bias with the given geometry.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            kernel,
            kernel,
            stride,
            padding,
            vec![0.0; out_channels * in_channels * kernel * kernel],
            vec![0.0; out_channels],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(
                "convolution needs at least one input and output channel",
            ));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel size and stride must be positive"));
        }
        if self.weights.len() != self.weight_len() {
            return Err(Error::invalid(format!(
                "weights: expected {} values, got {}",
                self.weight_len(),
                self.weights.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::invalid(format!(
                "bias: expected {} values, got {}",
                self.out_channels,
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite convolution parameter"));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Rows of the column matrix: `in_channels × kernel_h × kernel_w`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn window(&self) -> Window {
        Window {
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
            ceil_mode: false,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        if input.channels != self.in_channels {
            return Err(Error::invalid(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (h, w) = self.window().output_dims(input.height, input.width).ok_or_else(|| {
            Error::invalid(format!(
                "{}x{} kernel (stride {}, padding {}) does not fit a {}x{} input",
                self.kernel_h, self.kernel_w, self.stride, self.padding, input.height, input.width
            ))
        })?;
        Ok(Shape3::new(self.out_channels, h, w))
    }

    pub fn kernel_matrix(&self) -> KernelMatrix {
        // Row-major `out × (in·kh·kw)` is exactly the weight tensor layout.
        KernelMatrix {
            rows: self.out_channels,
            cols: self.patch_len(),
            data: self.weights.clone(),
        }
    }
}

/// Flattened filters, `out_channels × (in_channels·kernel_h·kernel_w)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl KernelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(KernelMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        KernelMatrix { rows: n, cols: n, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }
}

/// Column-major matrix. Holds both the patch matrix fed to GEMM (one column
/// per output pixel) and the GEMM result (one column of output channels per
/// pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ColumnMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ColumnMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(ColumnMatrix { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[col * self.rows + row]
    }

    pub fn column(&self, col: usize) -> &[f32] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }
}

#[inline]
pub(crate) fn relu_scalar(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Direct evaluation of the convolution sum, the reference for every other
/// convolution path in the crate.
pub fn conv2d_dense(x: &Tensor3, spec: &ConvSpec) -> Result<Tensor3> {
    spec.validate()?;
    let out_shape = spec.output_shape(x.shape())?;
    let mut y = Tensor3::zeros(out_shape);
    let (h, w) = (x.height() as isize, x.width() as isize);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    for o in 0..spec.out_channels {
        let filt = &spec.weights[o * spec.patch_len()..(o + 1) * spec.patch_len()];
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                let mut acc = 0.0f32;
                for c in 0..spec.in_channels {
                    for j in 0..kh {
                        for i in 0..kw {
                            let (yy, xx) = (y0 + j as isize, x0 + i as isize);
                            let v = if yy < 0 || xx < 0 || yy >= h || xx >= w {
                                0.0
                            } else {
                                x.get(c, yy as usize, xx as usize)
                            };
                            acc += filt[(c * kh + j) * kw + i] * v;
                        }
                    }
                }
                y.set(o, oy, ox, acc + spec.bias[o]);
            }
        }
    }
    Ok(y)
}

/// Writes one patch column per pixel into `out` (column-major,
/// `spec.patch_len()` rows). Out-of-bounds taps become 0.
pub(crate) fn fill_columns<I>(x: &Tensor3, spec: &ConvSpec, pixels: I, out: &mut [f32])
where
    I: IntoIterator<Item = Pixel>,
{
    let rows = spec.patch_len();
    let (h, w) = (x.height() as isize, x.width() as isize);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    for (col, px) in out.chunks_exact_mut(rows).zip(pixels) {
        let y0 = px.row as isize * spec.stride as isize - spec.padding as isize;
        let x0 = px.col as isize * spec.stride as isize - spec.padding as isize;
        let fully_inside = y0 >= 0 && x0 >= 0 && y0 + kh as isize <= h && x0 + kw as isize <= w;
        let mut r = 0;
        for c in 0..spec.in_channels {
            let plane = x.plane(c);
            for j in 0..kh {
                let yy = y0 + j as isize;
                if fully_inside {
                    let start = yy as usize * w as usize + x0 as usize;
                    col[r..r + kw].copy_from_slice(&plane[start..start + kw]);
                } else {
                    for i in 0..kw {
                        let xx = x0 + i as isize;
                        col[r + i] = if yy < 0 || xx < 0 || yy >= h || xx >= w {
                            0.0
                        } else {
                            plane[yy as usize * w as usize + xx as usize]
                        };
                    }
                }
                r += kw;
            }
        }
    }
}

fn check_pixels(pixels: &[Pixel], out: Shape3) -> Result<()> {
    match pixels
        .iter()
        .find(|p| p.row as usize >= out.height || p.col as usize >= out.width)
    {
        Some(p) => Err(Error::invalid(format!(
            "output pixel ({}, {}) outside {}x{} output",
            p.row, p.col, out.height, out.width
        ))),
        None => Ok(()),
    }
}

/// Builds the patch matrix. With `selected`, one column per listed output
/// pixel in list order; otherwise every output pixel in row-major order.
pub fn im2col(x: &Tensor3, spec: &ConvSpec, selected: Option<&[Pixel]>) -> Result<ColumnMatrix> {
    let out = spec.output_shape(x.shape())?;
    let rows = spec.patch_len();
    match selected {
        Some(pixels) => {
            check_pixels(pixels, out)?;
            let mut m = ColumnMatrix::zeros(rows, pixels.len());
            fill_columns(x, spec, pixels.iter().copied(), &mut m.data);
            Ok(m)
        }
        None => {
            let mut m = ColumnMatrix::zeros(rows, out.pixels());
            fill_columns(x, spec, all_pixels(out.height, out.width), &mut m.data);
            Ok(m)
        }
    }
}

pub(crate) fn all_pixels(height: usize, width: usize) -> impl Iterator<Item = Pixel> {
    (0..height).flat_map(move |r| (0..width).map(move |c| Pixel::new(r, c)))
}

/// `Y = K X`; each output element is a single in-order reduction over the
/// shared dimension.
pub fn gemm(k: &KernelMatrix, x: &ColumnMatrix) -> Result<ColumnMatrix> {
    if k.cols != x.rows {
        return Err(Error::invalid(format!(
            "gemm shape mismatch: {}x{} times {}x{}",
            k.rows, k.cols, x.rows, x.cols
        )));
    }
    let mut y = ColumnMatrix::zeros(k.rows, x.cols);
    gemm::gemm_into(&gemm::PackedKernel::new(k), &x.data, x.cols, &mut y.data);
    Ok(y)
}

/// Columns built per GEMM call when lowering a large pixel set; bounds the
/// patch matrix size without changing any result.
pub(crate) const COLUMN_CHUNK: usize = 1024;

/// Computes output pixels `pixels` of the convolution of `x` via chunked
/// im2col + GEMM and hands each pixel's raw channel vector (bias not yet
/// added) to `sink` in order.
pub(crate) fn conv_pixels<F>(x: &Tensor3, spec: &ConvSpec, kernel: &gemm::PackedKernel, pixels: &[Pixel], mut sink: F)
where
    F: FnMut(Pixel, &[f32]),
{
    let rows = spec.patch_len();
    let m = spec.out_channels;
    let mut cols = Vec::new();
    let mut y = Vec::new();
    for chunk in pixels.chunks(COLUMN_CHUNK) {
        cols.resize(rows * chunk.len(), 0.0);
        y.resize(m * chunk.len(), 0.0);
        fill_columns(x, spec, chunk.iter().copied(), &mut cols);
        gemm::gemm_into(kernel, &cols, chunk.len(), &mut y);
        for (px, yc) in chunk.iter().zip(y.chunks_exact(m)) {
            sink(*px, yc);
        }
    }
}

/// Full-frame convolution through im2col + GEMM, optionally with ReLU.
/// Bit-identical to [`conv2d_dense`] (followed by [`relu`] when `fuse_relu`).
pub fn conv2d_gemm(x: &Tensor3, spec: &ConvSpec, fuse_relu: bool) -> Result<Tensor3> {
    spec.validate()?;
    let out = spec.output_shape(x.shape())?;
    let kernel = gemm::PackedKernel::new(&spec.kernel_matrix());
    let pixels: Vec<Pixel> = all_pixels(out.height, out.width).collect();
    let mut y = Tensor3::zeros(out);
    conv_pixels(x, spec, &kernel, &pixels, |px, vals| {
        write_pixel(&mut y, px, vals, &spec.bias, fuse_relu)
    });
    Ok(y)
}

#[inline]
pub(crate) fn write_pixel(y: &mut Tensor3, px: Pixel, vals: &[f32], bias: &[f32], fuse_relu: bool) {
    let plane = y.shape().pixels();
    let base = px.row as usize * y.width() + px.col as usize;
    let data = y.data_mut();
    for (o, (&v, &b)) in vals.iter().zip(bias).enumerate() {
        let s = v + b;
        data[o * plane + base] = if fuse_relu { relu_scalar(s) } else { s };
    }
}

/// Max-pooling geometry (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
    pub ceil_mode: bool,
}

impl PoolSpec {
    pub fn new(size: usize, stride: usize) -> Self {
        PoolSpec {
            size,
            stride,
            ceil_mode: false,
        }
    }

    pub fn window(&self) -> Window {
        Window {
            kernel_h: self.size,
            kernel_w: self.size,
            stride: self.stride,
            padding: 0,
            ceil_mode: self.ceil_mode,
        }
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::invalid("pool size and stride must be positive"));
        }
        let (h, w) = self.window().output_dims(input.height, input.width).ok_or_else(|| {
            Error::invalid(format!(
                "{0}x{0} pooling does not fit a {1}x{2} input",
                self.size, input.height, input.width
            ))
        })?;
        Ok(Shape3::new(input.channels, h, w))
    }
}

/// Max over the (clipped) window of output pixel `(row, col)`, channel `c`.
#[inline]
pub(crate) fn pool_at(x: &Tensor3, window: &Window, c: usize, row: usize, col: usize) -> f32 {
    let (r0, r1) = window.input_span(row, window.kernel_h, x.height());
    let (c0, c1) = window.input_span(col, window.kernel_w, x.width());
    let plane = x.plane(c);
    let mut best = f32::NEG_INFINITY;
    for r in r0..r1 {
        for v in &plane[r * x.width() + c0..r * x.width() + c1] {
            best = best.max(*v);
        }
    }
    best
}

pub fn maxpool(x: &Tensor3, pool: &PoolSpec) -> Result<Tensor3> {
    let out = pool.output_shape(x.shape())?;
    let window = pool.window();
    let mut y = Tensor3::zeros(out);
    for c in 0..out.channels {
        for r in 0..out.height {
            for col in 0..out.width {
                y.set(c, r, col, pool_at(x, &window, c, r, col));
            }
        }
    }
    Ok(y)
}

/// Floor-mode max pooling with a `size × size` window.
pub fn maxpool_dense(x: &Tensor3, size: usize, stride: usize) -> Result<Tensor3> {
    maxpool(x, &PoolSpec::new(size, stride))
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    Tensor3 {
        shape: x.shape,
        data: x.data.iter().map(|&v| relu_scalar(v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (1..=c * h * w).map(|v| v as f32).collect();
        Tensor3::from_vec(Shape3::new(c, h, w), data).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape3) -> Tensor3 {
        let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor3::from_vec(shape, data).unwrap()
    }

    fn random_spec(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
        let weights = (0..cout * cin * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        ConvSpec::new(cin, cout, k, k, stride, pad, weights, bias).unwrap()
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let x = ramp(1, 3, 4);
        let spec = ConvSpec::new(1, 1, 1, 1, 1, 0, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d_dense(&x, &spec).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = ramp(2, 4, 4);
        let mut spec = ConvSpec::zeros(2, 3, 3, 1, 1).unwrap();
        spec.bias = vec![0.5, -1.0, 2.0];
        let y = conv2d_dense(&x, &spec).unwrap();
        for o in 0..3 {
            assert!(y.plane(o).iter().all(|&v| v == spec.bias[o]));
        }
    }

    #[test]
    fn ramp_with_ones_kernel() {
        let x = ramp(1, 3, 3);
        let spec = ConvSpec::new(1, 1, 3, 3, 1, 1, vec![1.0; 9], vec![0.0]).unwrap();
        let y = conv2d_dense(&x, &spec).unwrap();
        assert_eq!(y.get(0, 1, 1), 45.0);
        assert_eq!(y.get(0, 0, 0), 12.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = ramp(2, 3, 3);
        let spec = ConvSpec::zeros(3, 1, 1, 1, 0).unwrap();
        assert!(matches!(conv2d_dense(&x, &spec), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let x = ramp(1, 2, 2);
        let spec = ConvSpec::zeros(1, 1, 3, 1, 0).unwrap();
        assert!(conv2d_dense(&x, &spec).is_err());
    }

    #[test]
    fn spec_rejects_wrong_weight_count() {
        assert!(ConvSpec::new(1, 2, 3, 3, 1, 0, vec![0.0; 9], vec![0.0; 2]).is_err());
        assert!(ConvSpec::new(1, 1, 3, 3, 1, 0, vec![0.0; 9], vec![]).is_err());
        assert!(ConvSpec::new(1, 1, 3, 3, 0, 0, vec![0.0; 9], vec![0.0]).is_err());
    }

    #[test]
    fn tensor_rejects_nan_and_bad_length() {
        let s = Shape3::new(1, 1, 2);
        assert!(Tensor3::from_vec(s, vec![0.0]).is_err());
        assert!(Tensor3::from_vec(s, vec![0.0, f32::NAN]).is_err());
        assert!(Tensor3::from_vec(s, vec![0.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn im2col_pointwise_is_reshape() {
        let x = ramp(2, 2, 3);
        let spec = ConvSpec::zeros(2, 1, 1, 1, 0).unwrap();
        let m = im2col(&x, &spec, None).unwrap();
        assert_eq!((m.rows, m.cols), (2, 6));
        for p in 0..6 {
            assert_eq!(m.column(p), &[x.data()[p], x.data()[6 + p]]);
        }
    }

    #[test]
    fn im2col_corner_column_has_padding_zeros() {
        let x = ramp(1, 3, 3);
        let spec = ConvSpec::zeros(1, 1, 3, 1, 1).unwrap();
        let m = im2col(&x, &spec, None).unwrap();
        assert_eq!(m.column(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn im2col_single_selected_pixel() {
        let x = ramp(2, 5, 5);
        let spec = ConvSpec::zeros(2, 4, 3, 1, 0).unwrap();
        let m = im2col(&x, &spec, Some(&[Pixel::new(1, 1)])).unwrap();
        assert_eq!((m.rows, m.cols), (18, 1));
        // Output (1,1) without padding reads input rows/cols 1..4.
        assert_eq!(m.get(0, 0), x.get(0, 1, 1));
        assert_eq!(m.get(17, 0), x.get(1, 3, 3));
    }

    #[test]
    fn im2col_rejects_out_of_range_pixel() {
        let x = ramp(1, 5, 5);
        let spec = ConvSpec::zeros(1, 1, 3, 1, 0).unwrap();
        assert!(im2col(&x, &spec, Some(&[Pixel::new(3, 0)])).is_err());
    }

    #[test]
    fn im2col_strided_drops_positions() {
        let x = ramp(1, 5, 5);
        let spec = ConvSpec::zeros(1, 1, 3, 2, 0).unwrap();
        let m = im2col(&x, &spec, None).unwrap();
        assert_eq!(m.cols, 4);
        // Output (1,1) window starts at input (2,2).
        assert_eq!(m.get(0, 3), x.get(0, 2, 2));
    }

    #[test]
    fn gemm_examples() {
        let k = KernelMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = ColumnMatrix::new(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(gemm(&k, &x).unwrap().data, vec![17.0, 39.0]);

        let x = ColumnMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(gemm(&KernelMatrix::identity(3), &x).unwrap(), x);

        let k = KernelMatrix::new(2, 3, vec![1.0; 6]).unwrap();
        let zero = ColumnMatrix::zeros(3, 5);
        assert!(gemm(&k, &zero).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_rejects_shape_mismatch() {
        let k = KernelMatrix::identity(3);
        assert!(gemm(&k, &ColumnMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor3::from_vec(Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool_dense(&x, 2, 2).unwrap().data(), &[4.0]);

        let x = Tensor3::filled(Shape3::new(2, 4, 6), 0.25);
        let y = maxpool_dense(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape3::new(2, 2, 3));
        assert!(y.data().iter().all(|&v| v == 0.25));

        let y = maxpool_dense(&ramp(1, 4, 4), 2, 2).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn maxpool_rejects_small_input() {
        let x = Tensor3::zeros(Shape3::new(1, 1, 4));
        assert!(maxpool_dense(&x, 2, 2).is_err());
    }

    #[test]
    fn ceil_mode_pool_keeps_partial_window() {
        let pool = PoolSpec {
            size: 2,
            stride: 2,
            ceil_mode: true,
        };
        assert_eq!(
            pool.output_shape(Shape3::new(1, 541, 871)).unwrap(),
            Shape3::new(1, 271, 436)
        );
        let y = maxpool(&ramp(1, 3, 3), &pool).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor3::from_vec(Shape3::new(1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor3::filled(Shape3::new(2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_spans_are_inverse() {
        for k in 1..=7 {
            for s in 1..=3 {
                for p in 0..=3 {
                    for ceil_mode in [false, true] {
                        let w = Window {
                            kernel_h: k,
                            kernel_w: k,
                            stride: s,
                            padding: p,
                            ceil_mode,
                        };
                        let n = 11;
                        let Some((out, _)) = w.output_dims(n, n) else { continue };
                        for pos in 0..n {
                            let covering: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let (a, b) = w.input_span(o, k, n);
                                    (a..b).contains(&pos)
                                })
                                .collect();
                            let span = w.output_span(pos, k, out);
                            match span {
                                None => assert!(covering.is_empty()),
                                Some((lo, hi)) => assert_eq!(covering, (lo..=hi).collect::<Vec<_>>()),
                            }
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gemm_lowering_matches_direct_conv_exactly(
            seed in any::<u64>(),
            k in prop::sample::select(vec![1usize, 2, 3, 5, 7]),
            cin in 1usize..=8,
            cout in 1usize..=8,
            stride in 1usize..=2,
            pad in 0usize..=3,
            h in 7usize..=16,
            w in 7usize..=16,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, cin, cout, k, stride, pad);
            let x = random_tensor(&mut rng, Shape3::new(cin, h, w));
            let dense = conv2d_dense(&x, &spec).unwrap();

            let cols = im2col(&x, &spec, None).unwrap();
            prop_assert_eq!(cols.cols, dense.shape().pixels());
            let y = gemm(&spec.kernel_matrix(), &cols).unwrap();
            for o in 0..cout {
                for p in 0..dense.shape().pixels() {
                    prop_assert_eq!(y.get(o, p) + spec.bias[o], dense.plane(o)[p]);
                }
            }
            prop_assert_eq!(conv2d_gemm(&x, &spec, false).unwrap(), dense.clone());
            prop_assert_eq!(conv2d_gemm(&x, &spec, true).unwrap(), relu(&dense));
        }

        #[test]
        fn conv_is_linear(seed in any::<u64>(), k in 1usize..=5, cin in 1usize..=4, cout in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, cin, cout, k, 1, k / 2);
            let shape = Shape3::new(cin, 9, 9);
            let (a, b) = (random_tensor(&mut rng, shape), random_tensor(&mut rng, shape));
            let sum = Tensor3::from_vec(shape, a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect()).unwrap();
            let lin = |t: &Tensor3| {
                let y = conv2d_dense(t, &spec).unwrap();
                let n = y.shape().pixels();
                y.data().iter().enumerate().map(|(i, v)| v - spec.bias[i / n]).collect::<Vec<f32>>()
            };
            let (ya, yb, ys) = (lin(&a), lin(&b), lin(&sum));
            for i in 0..ys.len() {
                let expect = ya[i] + yb[i];
                prop_assert!((ys[i] - expect).abs() <= 1e-5 * expect.abs().max(1.0));
            }
        }

        #[test]
        fn relu_is_idempotent(values in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let x = Tensor3::from_vec(Shape3::new(1, 1, values.len()), values).unwrap();
            let once = relu(&x);
            prop_assert_eq!(relu(&once), once);
        }
    }
}
