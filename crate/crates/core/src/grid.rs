//! Dense multi-channel 2-D arrays and the numeric primitives built on them.
//!
//! Layout is channel-major then row-major: element `(c, y, x)` lives at
//! `(c * height + y) * width + x`. Every public operation returns a fresh
//! [`Grid`]; nothing mutates its inputs.

use std::fmt;

use crate::error::{Error, Result};

/// Channel count and spatial extent of a [`Grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
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

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let shape = Shape::new(channels, height, width);
        Grid {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(channels, height, width);
        if shape.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Grid::from_vec",
                shape,
                format!("{} values", data.len()),
            ));
        }
        Ok(Grid { shape, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let shape = Shape::new(channels, height, width);
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Grid { shape, data }
    }

    /// A 1×1×1 grid holding `value`.
    pub fn scalar(value: f64) -> Self {
        Grid {
            shape: Shape::new(1, 1, 1),
            data: vec![value],
        }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Grid { shape, data }
    }

    pub fn shape(&self) -> Shape {
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane();
        &self.data[c * n..(c + 1) * n]
    }

    /// Value of a 1×1×1 grid.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", self.shape, other.shape));
        }
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Grid {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(a: &Grid, b: &Grid) -> Result<Grid> {
        if a.shape.height != b.shape.height || a.shape.width != b.shape.width {
            return Err(Error::shape("concat_channels", a.shape, b.shape));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Grid {
            shape: Shape::new(a.shape.channels + b.shape.channels, a.shape.height, a.shape.width),
            data,
        })
    }

    /// Channels `start..end` as a new grid.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Grid> {
        if start >= end || end > self.shape.channels {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{end} outside {}",
                self.shape
            )));
        }
        let n = self.shape.plane();
        Ok(Grid {
            shape: Shape::new(end - start, self.shape.height, self.shape.width),
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// 2×2 average pooling with stride 2. Odd trailing rows/columns form
    /// partial windows averaged over the cells they contain, so the output
    /// is `ceil(h/2) × ceil(w/2)`.
    pub fn avg_pool2(&self) -> Grid {
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        let (oh, ow) = (height.div_ceil(2), width.div_ceil(2));
        let mut out = Grid::zeros(channels, oh, ow);
        for c in 0..channels {
            let src = self.plane(c);
            let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                let ys = 2 * oy..(2 * oy + 2).min(height);
                for ox in 0..ow {
                    let xs = 2 * ox..(2 * ox + 2).min(width);
                    let mut acc = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            acc += src[y * width + x];
                        }
                    }
                    dst[oy * ow + ox] = acc / (ys.len() * xs.len()) as f64;
                }
            }
        }
        out
    }

    /// Adjoint of [`Grid::avg_pool2`]: spreads each output gradient evenly over its window.
    pub(crate) fn avg_pool2_backward(grad_out: &Grid, input: Shape) -> Grid {
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let mut out = Grid::zeros(input.channels, input.height, input.width);
        for c in 0..input.channels {
            let g = grad_out.plane(c);
            let dst = &mut out.data[c * input.plane()..(c + 1) * input.plane()];
            for oy in 0..oh {
                let ys = 2 * oy..(2 * oy + 2).min(input.height);
                for ox in 0..ow {
                    let xs = 2 * ox..(2 * ox + 2).min(input.width);
                    let share = g[oy * ow + ox] / (ys.len() * xs.len()) as f64;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            dst[y * input.width + x] += share;
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&self) -> Grid {
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        let (oh, ow) = (height * 2, width * 2);
        let mut data = Vec::with_capacity(channels * oh * ow);
        for c in 0..channels {
            let src = self.plane(c);
            for y in 0..oh {
                let row = &src[(y / 2) * width..(y / 2 + 1) * width];
                for x in 0..ow {
                    data.push(row[x / 2]);
                }
            }
        }
        Grid {
            shape: Shape::new(channels, oh, ow),
            data,
        }
    }

    pub(crate) fn upsample_nearest2_backward(grad_out: &Grid) -> Grid {
        let (c, oh, ow) = (grad_out.channels(), grad_out.height(), grad_out.width());
        let (h, w) = (oh / 2, ow / 2);
        let mut out = Grid::zeros(c, h, w);
        for ch in 0..c {
            let g = grad_out.plane(ch);
            let dst = &mut out.data[ch * h * w..(ch + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[(y / 2) * w + x / 2] += g[y * ow + x];
                }
            }
        }
        out
    }

    /// Cross-correlation with a bank of kernels (no flip), zero padding.
    pub fn conv2d(
        &self,
        kernels: &KernelBank,
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> Result<Grid> {
        let geom = ConvGeometry::new(self.shape, kernels, stride, padding)?;
        if bias.len() != kernels.out_channels {
            return Err(Error::shape(
                "conv2d bias",
                format!("{} output channels", kernels.out_channels),
                format!("{} biases", bias.len()),
            ));
        }
        Ok(conv_forward(self, kernels.as_slice(), Some(bias), &geom))
    }

    /// Bicubic resampling by `scale`; output is `round(h·scale) × round(w·scale)`.
    pub fn bicubic_resample(&self, scale: f64) -> Result<Grid> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "resample scale must be positive, got {scale}"
            )));
        }
        let oh = (self.shape.height as f64 * scale).round() as usize;
        let ow = (self.shape.width as f64 * scale).round() as usize;
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidArgument(format!(
                "scale {scale} maps {} to an empty grid",
                self.shape
            )));
        }
        if scale == 1.0 {
            return Ok(self.clone());
        }
        Ok(self.resize_bicubic(oh, ow))
    }

    /// Bicubic resampling to an explicit output size.
    pub fn resize_bicubic(&self, out_height: usize, out_width: usize) -> Grid {
        ResamplePlan::new(self.shape, out_height, out_width).apply(self)
    }

    /// `blur = resample(resample(self, 1/factor), factor)` back to the original size.
    pub fn down_up(&self, factor: f64) -> Result<Grid> {
        let small = self.bicubic_resample(1.0 / factor)?;
        Ok(small.resize_bicubic(self.shape.height, self.shape.width))
    }
}

/// Convolution kernels laid out `out × in × kh × kw`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    data: Vec<f64>,
}

impl KernelBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let n = out_channels * in_channels * kh * kw;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "kernel bank dimensions must be positive".into(),
            ));
        }
        if data.len() != n {
            return Err(Error::shape(
                "KernelBank::new",
                format!("{out_channels}x{in_channels}x{kh}x{kw}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![0.0; out_channels * in_channels * kh * kw],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    /// Same values viewed as an `out × in × (kh·kw)` grid, which is how the
    /// tape stores kernels.
    pub fn to_grid(&self) -> Grid {
        Grid::from_parts(
            Shape::new(self.out_channels, self.in_channels, self.kh * self.kw),
            self.data.clone(),
        )
    }
}

/// Validated convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub input: Shape,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, kernels: &KernelBank, stride: usize, padding: usize) -> Result<Self> {
        Self::from_dims(
            input,
            kernels.out_channels,
            kernels.in_channels,
            kernels.kh,
            kernels.kw,
            stride,
            padding,
        )
    }

    pub fn from_dims(
        input: Shape,
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels != input.channels {
            return Err(Error::shape(
                "conv2d",
                format!("input {input}"),
                format!("kernels {out_channels}x{in_channels}x{kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let padded_h = input.height + 2 * padding;
        let padded_w = input.width + 2 * padding;
        if padded_h < kh || padded_w < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {input} with padding {padding}"),
                format!("kernels {out_channels}x{in_channels}x{kh}x{kw}"),
            ));
        }
        Ok(ConvGeometry {
            input,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_height: (padded_h - kh) / stride + 1,
            out_width: (padded_w - kw) / stride + 1,
        })
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.out_channels, self.out_height, self.out_width)
    }

    fn patch_len(&self) -> usize {
        self.input.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − padding` lies
/// inside `0..w`.
fn valid_columns(g: &ConvGeometry, kx: usize, w: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox·s + kx − p ≤ w − 1
    let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(g.out_width) } else { 0 };
    (lo.min(hi), hi)
}

/// Unrolls receptive fields into a `(c·kh·kw) × (oh·ow)` matrix.
fn im2col(input: &Grid, g: &ConvGeometry) -> Vec<f64> {
    let (h, w) = (g.input.height, g.input.width);
    let (s, p, ow) = (g.stride, g.padding, g.out_width);
    let np = g.positions();
    let mut cols = vec![0.0; g.patch_len() * np];
    let mut row = 0;
    for c in 0..g.input.channels {
        let plane = input.plane(c);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_columns(g, kx, w);
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..g.out_height {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h || lo >= hi {
                        continue;
                    }
                    let src_row = &plane[(iy - p) * w..(iy - p + 1) * w];
                    let d = &mut dst[oy * ow + lo..oy * ow + hi];
                    let start = lo * s + kx - p;
                    if s == 1 {
                        d.copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for (j, v) in d.iter_mut().enumerate() {
                            *v = src_row[start + j * s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeometry) -> Grid {
    let (h, w) = (g.input.height, g.input.width);
    let (s, p, ow) = (g.stride, g.padding, g.out_width);
    let np = g.positions();
    let mut out = Grid::zeros(g.input.channels, h, w);
    let plane_len = g.input.plane();
    let mut row = 0;
    for c in 0..g.input.channels {
        let plane = &mut out.data[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_columns(g, kx, w);
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..g.out_height {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h || lo >= hi {
                        continue;
                    }
                    let dst_row = &mut plane[(iy - p) * w..(iy - p + 1) * w];
                    let sr = &src[oy * ow + lo..oy * ow + hi];
                    let start = lo * s + kx - p;
                    if s == 1 {
                        for (d, v) in dst_row[start..start + (hi - lo)].iter_mut().zip(sr) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in sr.iter().enumerate() {
                            dst_row[start + j * s] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Row-major matrix product `c = a·b` (or `c += a·b`), where either operand
/// may be read transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides describe row-major (or transposed row-major) layouts of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    input: &Grid,
    kernels: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Grid {
    let cols = im2col(input, g);
    let np = g.positions();
    let mut out = vec![0.0; g.out_channels * np];
    gemm(
        g.out_channels,
        g.patch_len(),
        np,
        kernels,
        false,
        &cols,
        false,
        &mut out,
        false,
    );
    if let Some(bias) = bias {
        for (o, b) in bias.iter().enumerate() {
            for v in &mut out[o * np..(o + 1) * np] {
                *v += b;
            }
        }
    }
    Grid::from_parts(g.output(), out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv_backward_input(grad_out: &Grid, kernels: &[f64], g: &ConvGeometry) -> Grid {
    let np = g.positions();
    let mut dcols = vec![0.0; g.patch_len() * np];
    gemm(
        g.patch_len(),
        g.out_channels,
        np,
        kernels,
        true,
        grad_out.as_slice(),
        false,
        &mut dcols,
        false,
    );
    col2im(&dcols, g)
}

/// Gradients of a convolution with respect to kernels and bias.
pub(crate) fn conv_backward_params(
    grad_out: &Grid,
    input: &Grid,
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let np = g.positions();
    let mut dk = vec![0.0; g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        np,
        g.patch_len(),
        grad_out.as_slice(),
        false,
        &cols,
        true,
        &mut dk,
        false,
    );
    let db = (0..g.out_channels)
        .map(|o| grad_out.as_slice()[o * np..(o + 1) * np].iter().sum())
        .collect();
    (dk, db)
}

/// Cubic convolution kernel with a = −0.5 (Catmull–Rom).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap interpolation weights for one axis, with clamp-to-edge indices.
#[derive(Debug, Clone, PartialEq)]
struct AxisTaps {
    in_len: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl AxisTaps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let ratio = in_len as f64 / out_len as f64;
        let last = in_len as isize - 1;
        let taps = (0..out_len)
            .map(|i| {
                let src = (i as f64 + 0.5) * ratio - 0.5;
                let base = src.floor();
                let frac = src - base;
                let mut row = [(0usize, 0.0); 4];
                for (slot, m) in row.iter_mut().zip(-1isize..=2) {
                    let idx = (base as isize + m).clamp(0, last) as usize;
                    *slot = (idx, cubic_weight(frac - m as f64));
                }
                row
            })
            .collect();
        AxisTaps { in_len, taps }
    }
}

/// Precomputed separable bicubic resampling between two fixed shapes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResamplePlan {
    input: Shape,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl ResamplePlan {
    pub fn new(input: Shape, out_height: usize, out_width: usize) -> Self {
        ResamplePlan {
            input,
            rows: AxisTaps::new(input.height, out_height),
            cols: AxisTaps::new(input.width, out_width),
        }
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.channels, self.rows.taps.len(), self.cols.taps.len())
    }

    pub fn apply(&self, input: &Grid) -> Grid {
        let (h, w) = (self.input.height, self.input.width);
        let out = self.output();
        let mut data = Vec::with_capacity(out.len());
        let mut tmp = vec![0.0; h * out.width];
        for c in 0..out.channels {
            let plane = input.plane(c);
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                for (x, taps) in self.cols.taps.iter().enumerate() {
                    tmp[y * out.width + x] = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
                }
            }
            for taps in &self.rows.taps {
                for x in 0..out.width {
                    data.push(taps.iter().map(|&(i, wt)| wt * tmp[i * out.width + x]).sum());
                }
            }
        }
        Grid::from_parts(out, data)
    }

    /// Transpose of [`ResamplePlan::apply`].
    pub fn apply_transpose(&self, grad_out: &Grid) -> Grid {
        let out = self.output();
        let (h, w) = (self.input.height, self.input.width);
        debug_assert_eq!(self.rows.in_len, h);
        debug_assert_eq!(self.cols.in_len, w);
        let mut result = Grid::zeros(out.channels, h, w);
        let mut tmp = vec![0.0; h * out.width];
        for c in 0..out.channels {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let g = grad_out.plane(c);
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                for x in 0..out.width {
                    let gv = g[oy * out.width + x];
                    for &(i, wt) in taps {
                        tmp[i * out.width + x] += wt * gv;
                    }
                }
            }
            let dst = &mut result.data[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for (ox, taps) in self.cols.taps.iter().enumerate() {
                    let gv = tmp[y * out.width + ox];
                    for &(i, wt) in taps {
                        dst[y * w + i] += wt * gv;
                    }
                }
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{naive_conv2d, Lcg};

    fn random_grid(rng: &mut Lcg, c: usize, h: usize, w: usize) -> Grid {
        Grid::from_fn(c, h, w, |_, _, _| rng.uniform(-1.0, 1.0))
    }

    fn random_bank(rng: &mut Lcg, o: usize, i: usize, kh: usize, kw: usize) -> KernelBank {
        let data = (0..o * i * kh * kw).map(|_| rng.uniform(-1.0, 1.0)).collect();
        KernelBank::new(o, i, kh, kw, data).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Grid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = KernelBank::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(x.conv2d(&k, &[0.0], 1, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums() {
        let x = Grid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = KernelBank::new(1, 1, 2, 2, vec![1.0; 4]).unwrap();
        let y = x.conv2d(&k, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1));
        assert_eq!(y.as_slice(), &[10.0]);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = Lcg::new(11);
        let x = random_grid(&mut rng, 3, 9, 9);
        let k = random_bank(&mut rng, 4, 3, 3, 3);
        let bias: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let fast = x.conv2d(&k, &bias, stride, pad).unwrap();
            let slow = naive_conv2d(&x, &k, &bias, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Grid::zeros(2, 4, 4);
        let k = KernelBank::zeros(1, 3, 3, 3);
        let err = x.conv2d(&k, &[0.0], 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x4x4") && msg.contains("1x3x3x3"), "{msg}");
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let x = Grid::zeros(1, 2, 2);
        let k = KernelBank::zeros(1, 1, 3, 3);
        assert!(x.conv2d(&k, &[0.0], 1, 0).is_err());
        assert!(x.conv2d(&k, &[0.0], 0, 1).is_err());
    }

    #[test]
    fn resample_constant_and_shape() {
        let x = Grid::filled(2, 8, 8, 0.7);
        for scale in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let y = x.bicubic_resample(scale).unwrap();
            assert!(y.as_slice().iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
        assert_eq!(x.bicubic_resample(2.0).unwrap().shape(), Shape::new(2, 16, 16));
    }

    #[test]
    fn resample_rejects_bad_scale() {
        let x = Grid::zeros(1, 4, 4);
        assert!(x.bicubic_resample(0.0).is_err());
        assert!(x.bicubic_resample(-1.0).is_err());
        assert!(x.bicubic_resample(0.01).is_err());
    }

    #[test]
    fn resample_identity_scale_is_copy() {
        let mut rng = Lcg::new(3);
        let x = random_grid(&mut rng, 2, 5, 7);
        assert_eq!(x.bicubic_resample(1.0).unwrap(), x);
        // explicit same-size plan is also exact
        assert_eq!(x.resize_bicubic(5, 7), x);
    }

    /// Direct kernel-formula bicubic: for each output pixel, sum the 4×4
    /// neighbourhood weighted by the separable kernel.
    fn direct_bicubic(x: &Grid, oh: usize, ow: usize) -> Grid {
        let (h, w) = (x.height(), x.width());
        let k = |t: f64| {
            let a = -0.5;
            let t = t.abs();
            if t <= 1.0 {
                (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
            } else if t < 2.0 {
                a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
            } else {
                0.0
            }
        };
        Grid::from_fn(x.channels(), oh, ow, |c, oy, ox| {
            let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let mut acc = 0.0;
            for m in -1..=2 {
                for n in -1..=2 {
                    let iy = (sy.floor() as i64 + m).clamp(0, h as i64 - 1) as usize;
                    let ix = (sx.floor() as i64 + n).clamp(0, w as i64 - 1) as usize;
                    let wy = k(sy - (sy.floor() + m as f64));
                    let wx = k(sx - (sx.floor() + n as f64));
                    acc += wy * wx * x.at(c, iy, ix);
                }
            }
            acc
        })
    }

    #[test]
    fn resample_matches_direct_formula_on_ramp() {
        let ramp = Grid::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64 / 15.0);
        let down = ramp.bicubic_resample(0.5).unwrap();
        let up = down.bicubic_resample(2.0).unwrap();
        let down_ref = direct_bicubic(&ramp, 2, 2);
        let up_ref = direct_bicubic(&down_ref, 4, 4);
        assert!(down.max_abs_diff(&down_ref).unwrap() < 1e-9);
        assert!(up.max_abs_diff(&up_ref).unwrap() < 1e-9);
    }

    #[test]
    fn resample_transpose_is_adjoint() {
        let mut rng = Lcg::new(5);
        let x = random_grid(&mut rng, 2, 5, 6);
        let plan = ResamplePlan::new(x.shape(), 9, 4);
        let y = random_grid(&mut rng, 2, 9, 4);
        let lhs: f64 = plan.apply(&x).as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.as_slice().iter().zip(plan.apply_transpose(&y).as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice() {
        let a = Grid::filled(1, 2, 2, 1.0);
        let b = Grid::filled(1, 2, 2, 2.0);
        let ab = Grid::concat_channels(&a, &b).unwrap();
        assert_eq!(ab.channels(), 2);
        assert_eq!(ab.plane(0), a.as_slice());
        assert_eq!(ab.slice_channels(0, 1).unwrap(), a);

        let c = Grid::zeros(3, 4, 5);
        let d = Grid::zeros(5, 4, 5);
        assert_eq!(Grid::concat_channels(&c, &d).unwrap().channels(), 8);
        assert!(Grid::concat_channels(&c, &Grid::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Grid::from_fn(1, 5, 4, |_, y, x| (y * 4 + x) as f64);
        let p = x.avg_pool2();
        assert_eq!(p.shape(), Shape::new(1, 3, 2));
        assert_eq!(p.at(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(p.at(0, 2, 1), (18.0 + 19.0) / 2.0);
        let u = p.upsample_nearest2();
        assert_eq!(u.shape(), Shape::new(1, 6, 4));
        assert_eq!(u.at(0, 5, 3), p.at(0, 2, 1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn conv_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
                let mut rng = Lcg::new(seed);
                let x = random_grid(&mut rng, 2, 6, 5);
                let y = random_grid(&mut rng, 2, 6, 5);
                let k = random_bank(&mut rng, 3, 2, 3, 3);
                let zero = [0.0; 3];
                let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
                let lhs = mix.conv2d(&k, &zero, 1, 1).unwrap();
                let cx = x.conv2d(&k, &zero, 1, 1).unwrap();
                let cy = y.conv2d(&k, &zero, 1, 1).unwrap();
                let rhs = cx.zip_map(&cy, |a, b| alpha * a + beta * b).unwrap();
                let scale = rhs.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10 * scale);
            }

            #[test]
            fn conv_matches_oracle_small_shapes(
                seed in any::<u64>(),
                c in 1usize..=4, h in 3usize..=8, w in 3usize..=8,
                o in 1usize..=3, k in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1,
            ) {
                let mut rng = Lcg::new(seed);
                let x = random_grid(&mut rng, c, h, w);
                let kb = random_bank(&mut rng, o, c, k, k);
                let bias: Vec<f64> = (0..o).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let fast = x.conv2d(&kb, &bias, stride, pad).unwrap();
                let slow = naive_conv2d(&x, &kb, &bias, stride, pad);
                for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }

            #[test]
            fn resample_commutes_with_affine(seed in any::<u64>(), alpha in -4.0f64..4.0, beta in -2.0f64..2.0) {
                let mut rng = Lcg::new(seed);
                let x = random_grid(&mut rng, 2, 7, 6);
                for scale in [0.5, 2.0, 1.75] {
                    let lhs = x.map(|v| alpha * v + beta).bicubic_resample(scale).unwrap();
                    let rhs = x.bicubic_resample(scale).unwrap().map(|v| alpha * v + beta);
                    prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
                }
            }
        }
    }
}
