//! Dense row-major tensors and the operations the pipeline is built from.
//!
//! Tensors are rank 1..=4 with the canonical axis order `B×C×H×W` (width
//! fastest). There is no autograd and no broadcasting: each op validates its
//! input extents and returns a freshly allocated output. Convolution and
//! pooling accumulate in `f64` no matter what the storage scalar is, and
//! every reduction runs in a fixed order, so results are bit-identical from
//! run to run.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense numeric array, rank 1..=4, canonical `B×C×H×W` axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from explicit extents and row-major data.
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Self::validate_dims(dims)?;
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} require {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// All-zero tensor with the given extents.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::validate_dims(dims)?;
        let n: usize = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        })
    }

    /// Constant-valued tensor with the given extents.
    pub fn filled(dims: &[usize], value: T) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    fn validate_dims(dims: &[usize]) -> Result<()> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "all extents must be >= 1, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extents as `(B, C, H, W)`; requires rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "dims4 on rank-{} tensor", self.rank());
        (self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    /// Extents as `(C, H, W)`; requires rank 3.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "dims3 on rank-{} tensor", self.rank());
        (self.dims[0], self.dims[1], self.dims[2])
    }

    /// Extents as `(H, W)`; requires rank 2.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "dims2 on rank-{} tensor", self.rank());
        (self.dims[0], self.dims[1])
    }

    #[inline]
    pub fn index4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get4(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index4(b, c, y, x)]
    }

    #[inline]
    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index4(b, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn index3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get3(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index3(c, y, x)]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index3(c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn index2(&self, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        y * self.dims[1] + x
    }

    #[inline]
    pub fn get2(&self, y: usize, x: usize) -> T {
        self.data[self.index2(y, x)]
    }

    #[inline]
    pub fn set2(&mut self, y: usize, x: usize, v: T) {
        let i = self.index2(y, x);
        self.data[i] = v;
    }

    /// Re-interprets the data under new extents of the same total size.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    /// Converts element-wise to another storage scalar.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    /// Copies a contiguous channel range out of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4();
        if start >= end || end > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{end} out of range for {c} channels"
            )));
        }
        let cs = end - start;
        let mut out = Self::zeros(&[b, cs, h, w])?;
        for bi in 0..b {
            for ci in 0..cs {
                for y in 0..h {
                    for x in 0..w {
                        out.set4(bi, ci, y, x, self.get4(bi, start + ci, y, x));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Bilinear sample of one `(batch, channel)` plane at real coordinates,
    /// on the pixel-center grid with border clamping.
    ///
    /// Coordinates are clamped into `[0, W-1] × [0, H-1]` before the
    /// 4-neighbor interpolation, so out-of-range samples return the nearest
    /// border value. The interpolation itself runs in `f64`.
    pub fn bilinear_sample(&self, b: usize, c: usize, y: f64, x: f64) -> f64 {
        let (_, _, h, w) = self.dims4();
        let yc = y.clamp(0.0, (h - 1) as f64);
        let xc = x.clamp(0.0, (w - 1) as f64);
        let y0 = yc.floor();
        let x0 = xc.floor();
        let fy = yc - y0;
        let fx = xc - x0;
        let y0 = y0 as usize;
        let x0 = x0 as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let v00 = self.get4(b, c, y0, x0).to_f64_lossless();
        let v01 = self.get4(b, c, y0, x1).to_f64_lossless();
        let v10 = self.get4(b, c, y1, x0).to_f64_lossless();
        let v11 = self.get4(b, c, y1, x1).to_f64_lossless();
        let top = v00 + (v01 - v00) * fx;
        let bot = v10 + (v11 - v10) * fx;
        top + (bot - top) * fy
    }

    /// Bilinear samples of every channel of one batch item at one point.
    pub fn bilinear_sample_channels(&self, b: usize, y: f64, x: f64) -> Vec<f64> {
        let (_, c, _, _) = self.dims4();
        (0..c).map(|ci| self.bilinear_sample(b, ci, y, x)).collect()
    }
}

/// Per-channel scale and shift applied after a convolution; the inference
/// form of a batch-norm layer folded to `y = scale * x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatchNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

/// A 2-D convolution layer: weights, bias, geometry, and optionally a folded
/// batch-norm applied to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// Weights with extents `out_channels × in_channels × kernel_h × kernel_w`.
    pub weights: Tensor<T>,
    /// One bias per output channel.
    pub bias: Vec<T>,
    pub fused_bn: Option<FusedBatchNorm<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        weights: Tensor<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidArgument("kernel extents must be >= 1".into()));
        }
        let expect = [out_channels, in_channels, kernel_h, kernel_w];
        if weights.dims() != expect {
            return Err(Error::ShapeMismatch(format!(
                "conv weights must be {:?}, got {:?}",
                expect,
                weights.dims()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv bias must have {} entries, got {}",
                out_channels,
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
            fused_bn: None,
        })
    }

    /// Attaches a folded batch-norm (`scale`/`shift` per output channel).
    pub fn with_fused_bn(mut self, scale: Vec<T>, shift: Vec<T>) -> Result<Self> {
        if scale.len() != self.out_channels || shift.len() != self.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "fused bn needs {} scales and shifts, got {} and {}",
                self.out_channels,
                scale.len(),
                shift.len()
            )));
        }
        self.fused_bn = Some(FusedBatchNorm { scale, shift });
        Ok(self)
    }

    /// All-zero weights and bias; output is identically zero (useful as a
    /// placeholder and in shape tests).
    pub fn zeroed(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weights = Tensor::zeros(&[out_channels, in_channels, kernel_h, kernel_w])?;
        Self::new(
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            vec![T::zero(); out_channels],
        )
    }

    /// Weights drawn uniformly from `±1/sqrt(fan_in)` with zero bias, the
    /// initialization used by every seeded self-test layer.
    pub fn seeded(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel_h * kernel_w) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = out_channels * in_channels * kernel_h * kernel_w;
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        let weights = Tensor::new(&[out_channels, in_channels, kernel_h, kernel_w], data)?;
        Self::new(
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            vec![T::zero(); out_channels],
        )
    }

    /// Output spatial extents for a given input, or an error when the padded
    /// input is smaller than the kernel.
    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// 2-D convolution with zero padding and `f64` accumulation, followed by the
/// layer's bias and optional folded batch-norm.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            spec.in_channels, c
        )));
    }
    let (oh, ow) = spec.output_extents(h, w)?;
    let mut out = Tensor::zeros(&[b, spec.out_channels, oh, ow])?;
    let pad = spec.padding as isize;
    for bi in 0..b {
        for oc in 0..spec.out_channels {
            let (scale, shift) = match &spec.fused_bn {
                Some(bn) => (
                    bn.scale[oc].to_f64_lossless(),
                    bn.shift[oc].to_f64_lossless(),
                ),
                None => (1.0, 0.0),
            };
            let bias = spec.bias[oc].to_f64_lossless();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    let iy0 = (oy * spec.stride) as isize - pad;
                    let ix0 = (ox * spec.stride) as isize - pad;
                    for ic in 0..c {
                        for ky in 0..spec.kernel_h {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue; // zero padding contributes nothing
                            }
                            for kx in 0..spec.kernel_w {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wv = spec.weights.get4(oc, ic, ky, kx).to_f64_lossless();
                                let xv = x.get4(bi, ic, iy as usize, ix as usize).to_f64_lossless();
                                acc += wv * xv;
                            }
                        }
                    }
                    let v = (acc + bias) * scale + shift;
                    out.set4(bi, oc, oy, ox, T::from_f64_lossy(v));
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping-window max pooling (window == stride).
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if window == 0 {
        return Err(Error::InvalidArgument("pool window must be >= 1".into()));
    }
    let (b, c, h, w) = x.dims4();
    if h % window != 0 || w % window != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool window {window} must divide input extents {h}x{w}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Tensor::zeros(&[b, c, oh, ow])?;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x.get4(bi, ci, oy * window, ox * window);
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = x.get4(bi, ci, oy * window + ky, ox * window + kx);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.set4(bi, ci, oy, ox, best);
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor upsampling by an integer factor (each input pixel becomes
/// a `factor × factor` block).
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample factor must be >= 1".into(),
        ));
    }
    let (b, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[b, c, h * factor, w * factor])?;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h * factor {
                for x2 in 0..w * factor {
                    out.set4(bi, ci, y, x2, x.get4(bi, ci, y / factor, x2 / factor));
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates rank-4 tensors along the channel axis. All inputs must agree
/// in batch and spatial extents; input order is preserved.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat needs at least one input".into()))?;
    let (b, _, h, w) = first.dims4();
    let mut total_c = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4();
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "concat inputs disagree: {:?} vs {:?}",
                first.dims(),
                p.dims()
            )));
        }
        total_c += pc;
    }
    let mut out = Tensor::zeros(&[b, total_c, h, w])?;
    let mut c0 = 0;
    for p in parts {
        let (_, pc, _, _) = p.dims4();
        for bi in 0..b {
            for ci in 0..pc {
                for y in 0..h {
                    for x in 0..w {
                        out.set4(bi, c0 + ci, y, x, p.get4(bi, ci, y, x));
                    }
                }
            }
        }
        c0 += pc;
    }
    Ok(out)
}

/// Element-wise or channel-fiber activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the channel axis of a rank-4 tensor, independently per
    /// `(batch, y, x)` fiber.
    SoftmaxChannels,
}

/// Applies an activation. `Relu` and `Sigmoid` work on any rank;
/// `SoftmaxChannels` requires rank 4 and normalizes each channel fiber.
pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            Ok(out)
        }
        Activation::Sigmoid => {
            let mut out = x.clone();
            for v in out.data_mut() {
                let f = v.to_f64_lossless();
                *v = T::from_f64_lossy(1.0 / (1.0 + (-f).exp()));
            }
            Ok(out)
        }
        Activation::SoftmaxChannels => {
            if x.rank() != 4 {
                return Err(Error::ShapeMismatch(format!(
                    "channel softmax requires rank 4, got rank {}",
                    x.rank()
                )));
            }
            let (b, c, h, w) = x.dims4();
            let mut out = x.clone();
            for bi in 0..b {
                for y in 0..h {
                    for xi in 0..w {
                        let mut mx = f64::NEG_INFINITY;
                        for ci in 0..c {
                            mx = mx.max(x.get4(bi, ci, y, xi).to_f64_lossless());
                        }
                        let mut denom = 0.0f64;
                        let mut exps = vec![0.0f64; c];
                        for ci in 0..c {
                            let e = (x.get4(bi, ci, y, xi).to_f64_lossless() - mx).exp();
                            exps[ci] = e;
                            denom += e;
                        }
                        for ci in 0..c {
                            out.set4(bi, ci, y, xi, T::from_f64_lossy(exps[ci] / denom));
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}
