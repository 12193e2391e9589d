//! Dense reference operators.
//!
//! These run the full forward pass during init/refresh and serve as the
//! oracle every incremental operator is checked against. The convolution
//! kernel here is shared with the tile-skipping incremental convolution, so
//! timing comparisons between the two paths measure skipped work only.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            c_in,
            c_out,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidParam("convolution stride must be >= 1".into()));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidParam(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel_h * self.kernel_w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in {
            return Err(Error::ChannelMismatch {
                context: "conv2d".into(),
                expected: self.c_in,
                found: input.c,
            });
        }
        let ph = input.h + 2 * self.padding;
        let pw = input.w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::InvalidParam(format!(
                "{}x{} kernel does not fit padded {}x{} input",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        Ok(Shape::new(
            self.c_out,
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Multiply-accumulates of a dense evaluation on `input`.
    pub fn dense_macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok((self.weight_len() * out.plane()) as u64)
    }

    fn check_weights(&self, weight: &[f32], bias: Option<&[f32]>) -> Result<()> {
        if weight.len() != self.weight_len() {
            return Err(Error::DimensionMismatch {
                context: "conv2d weights".into(),
                expected: self.weight_len(),
                found: weight.len(),
            });
        }
        if let Some(b) = bias {
            if b.len() != self.c_out {
                return Err(Error::DimensionMismatch {
                    context: "conv2d bias".into(),
                    expected: self.c_out,
                    found: b.len(),
                });
            }
        }
        Ok(())
    }
}

/// Cross-correlation with zero padding. Bias is optional.
pub fn dense_conv2d(
    x: &DenseTensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<DenseTensor> {
    params.check_weights(weight, bias)?;
    let out_shape = params.output_shape(x.shape())?;
    let mut out = match bias {
        Some(b) => DenseTensor::from_fn(out_shape, |c, _, _| b[c]),
        None => DenseTensor::zeros(out_shape),
    };
    let geom = PaddedGeometry::new(x.shape(), params.padding);
    let mut plane = vec![0.0; geom.len()];
    for ci in 0..params.c_in {
        geom.fill(x.channel(ci), &mut plane);
        let full = Region {
            rows: 0..geom.h,
            cols: 0..geom.w,
        };
        scatter_channel(out.data_mut(), out_shape, &plane, geom.w, weight, params, ci, &full);
    }
    Ok(out)
}

pub(crate) fn check_conv_weights(weight: &[f32], params: &ConvParams) -> Result<()> {
    params.check_weights(weight, None)
}

/// Zero-padded copy of one input plane.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PaddedGeometry {
    pub h: usize,
    pub w: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub pad: usize,
}

impl PaddedGeometry {
    pub fn new(input: Shape, pad: usize) -> Self {
        Self {
            h: input.h + 2 * pad,
            w: input.w + 2 * pad,
            src_h: input.h,
            src_w: input.w,
            pad,
        }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn fill(&self, src: &[f32], dst: &mut [f32]) {
        dst.fill(0.0);
        self.copy_rect(src, dst, 0..self.src_h, 0..self.src_w);
    }

    /// Copies source rows/cols into the padded plane.
    pub fn copy_rect(&self, src: &[f32], dst: &mut [f32], rows: Range<usize>, cols: Range<usize>) {
        for y in rows {
            let s = y * self.src_w;
            let d = (y + self.pad) * self.w + self.pad;
            dst[d + cols.start..d + cols.end].copy_from_slice(&src[s + cols.start..s + cols.end]);
        }
    }
}

/// Rectangle of the padded input plane, in padded coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Region {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Output indices `o` with `o * stride + tap` inside `r`, clipped to `n` outputs.
#[inline]
pub(crate) fn tap_range(r: &Range<usize>, tap: usize, stride: usize, n: usize) -> Range<usize> {
    if r.end <= tap || r.start >= r.end {
        return 0..0;
    }
    let lo = if r.start <= tap {
        0
    } else {
        (r.start - tap).div_ceil(stride)
    };
    let hi = ((r.end - 1 - tap) / stride + 1).min(n);
    lo..hi.max(lo)
}

/// Accumulates input channel `ci`, restricted to `region` of its padded
/// plane, into every output channel. Returns the MACs executed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter_channel(
    out: &mut [f32],
    out_shape: Shape,
    plane: &[f32],
    plane_w: usize,
    weight: &[f32],
    params: &ConvParams,
    ci: usize,
    region: &Region,
) -> u64 {
    let (kh, kw, s) = (params.kernel_h, params.kernel_w, params.stride);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let row_taps: Vec<Range<usize>> = (0..kh).map(|k| tap_range(&region.rows, k, s, ho)).collect();
    let col_taps: Vec<Range<usize>> = (0..kw).map(|k| tap_range(&region.cols, k, s, wo)).collect();

    let per_out: usize = row_taps
        .iter()
        .map(|r| r.len() * col_taps.iter().map(Range::len).sum::<usize>())
        .sum();
    if per_out == 0 {
        return 0;
    }

    for co in 0..params.c_out {
        let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        let wbase = (co * params.c_in + ci) * kh * kw;
        for (ky, oys) in row_taps.iter().enumerate() {
            for (kx, oxs) in col_taps.iter().enumerate() {
                if oys.is_empty() || oxs.is_empty() {
                    continue;
                }
                let wv = weight[wbase + ky * kw + kx];
                for oy in oys.clone() {
                    let src = &plane[(oy * s + ky) * plane_w..(oy * s + ky + 1) * plane_w];
                    let dst = &mut oplane[oy * wo + oxs.start..oy * wo + oxs.end];
                    if s == 1 {
                        let src = &src[oxs.start + kx..oxs.end + kx];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += wv * src[(oxs.start + i) * s + kx];
                        }
                    }
                }
            }
        }
    }
    (per_out * params.c_out) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    LeakyRelu(f32),
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::LeakyRelu(alpha) => {
                if v >= 0.0 {
                    v
                } else {
                    alpha * v
                }
            }
        }
    }
}

pub fn dense_activation(x: &DenseTensor, f: Activation) -> DenseTensor {
    let data = x.data().iter().map(|&v| f.apply(v)).collect();
    DenseTensor::from_vec(x.shape(), data).expect("same length")
}

pub fn dense_mul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.ensure_shape("mul", b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    DenseTensor::from_vec(a.shape(), data)
}

pub fn dense_concat(parts: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidParam("concat of zero tensors".into()))?;
    let (h, w) = (first.shape().h, first.shape().w);
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        if p.shape().h != h || p.shape().w != w {
            return Err(Error::shape("concat", Shape::new(p.shape().c, h, w), p.shape()));
        }
        c += p.shape().c;
        data.extend_from_slice(p.data());
    }
    DenseTensor::from_vec(Shape::new(c, h, w), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
}

impl PoolParams {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidParam("pool window and stride must be >= 1".into()));
        }
        if self.window > input.h || self.window > input.w {
            return Err(Error::InvalidParam(format!(
                "pool window {} larger than {}x{} input",
                self.window, input.h, input.w
            )));
        }
        Ok(Shape::new(
            input.c,
            (input.h - self.window) / self.stride + 1,
            (input.w - self.window) / self.stride + 1,
        ))
    }

    /// Input pixel range read by outputs `o` in `outs`.
    pub(crate) fn support(&self, outs: &Range<usize>) -> Range<usize> {
        outs.start * self.stride..(outs.end - 1) * self.stride + self.window
    }
}

pub(crate) fn maxpool_at(x: &DenseTensor, p: &PoolParams, c: usize, oy: usize, ox: usize) -> f32 {
    let mut m = f32::NEG_INFINITY;
    for y in oy * p.stride..oy * p.stride + p.window {
        for xx in ox * p.stride..ox * p.stride + p.window {
            m = m.max(x.get(c, y, xx));
        }
    }
    m
}

pub fn dense_maxpool(x: &DenseTensor, p: &PoolParams) -> Result<DenseTensor> {
    let out = p.output_shape(x.shape())?;
    Ok(DenseTensor::from_fn(out, |c, oy, ox| maxpool_at(x, p, c, oy, ox)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Source taps for one output coordinate: `(i0, i1, weight of i1)`.
#[inline]
pub(crate) fn upsample_taps(o: usize, factor: usize, n: usize, mode: UpsampleMode) -> (usize, usize, f32) {
    match mode {
        UpsampleMode::Nearest => (o / factor, o / factor, 0.0),
        UpsampleMode::Bilinear => {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let lambda = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, lambda)
        }
    }
}

/// Input coordinate range read by output coordinates in `outs`.
pub(crate) fn upsample_support(outs: &Range<usize>, factor: usize, n: usize, mode: UpsampleMode) -> Range<usize> {
    let (lo, _, _) = upsample_taps(outs.start, factor, n, mode);
    let (a, b, _) = upsample_taps(outs.end - 1, factor, n, mode);
    lo..a.max(b) + 1
}

pub(crate) fn check_upsample_factor(factor: usize) -> Result<()> {
    if factor != 2 && factor != 4 {
        return Err(Error::InvalidParam(format!("upsample factor {factor} not in {{2, 4}}")));
    }
    Ok(())
}

/// Writes upsampled values for output channel `c` within `rows x cols`.
pub(crate) fn upsample_rect(
    x: &DenseTensor,
    out: &mut DenseTensor,
    factor: usize,
    mode: UpsampleMode,
    c: usize,
    rows: Range<usize>,
    cols: Range<usize>,
) {
    let (h, w) = (x.shape().h, x.shape().w);
    let src = x.channel(c);
    let col_taps: Vec<_> = cols.clone().map(|ox| upsample_taps(ox, factor, w, mode)).collect();
    for oy in rows {
        let (y0, y1, ly) = upsample_taps(oy, factor, h, mode);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for (&(x0, x1, lx), ox) in col_taps.iter().zip(cols.clone()) {
            let v = match mode {
                UpsampleMode::Nearest => r0[x0],
                UpsampleMode::Bilinear => {
                    let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                    let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                    top * (1.0 - ly) + bot * ly
                }
            };
            out.set(c, oy, ox, v);
        }
    }
}

pub fn dense_upsample(x: &DenseTensor, factor: usize, mode: UpsampleMode) -> Result<DenseTensor> {
    check_upsample_factor(factor)?;
    let s = x.shape();
    let mut out = DenseTensor::zeros(Shape::new(s.c, s.h * factor, s.w * factor));
    for c in 0..s.c {
        upsample_rect(x, &mut out, factor, mode, c, 0..s.h * factor, 0..s.w * factor);
    }
    Ok(out)
}

/// `matrix` is `rows x cols` row-major over the flattened input.
pub fn dense_linear(x: &[f32], matrix: &[f32], bias: Option<&[f32]>, rows: usize) -> Result<Vec<f32>> {
    let cols = x.len();
    if matrix.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            context: "linear matrix".into(),
            expected: rows * cols,
            found: matrix.len(),
        });
    }
    let mut y: Vec<f32> = match bias {
        Some(b) if b.len() != rows => {
            return Err(Error::DimensionMismatch {
                context: "linear bias".into(),
                expected: rows,
                found: b.len(),
            })
        }
        Some(b) => b.to_vec(),
        None => vec![0.0; rows],
    };
    for (r, out) in y.iter_mut().enumerate() {
        let row = &matrix[r * cols..(r + 1) * cols];
        *out += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight loop nest over outputs and taps, written independently of the scatter kernel.
    fn naive_conv(x: &DenseTensor, w: &[f32], b: &[f32], p: &ConvParams) -> Vec<f64> {
        let s = x.shape();
        let ho = (s.h + 2 * p.padding - p.kernel_h) / p.stride + 1;
        let wo = (s.w + 2 * p.padding - p.kernel_w) / p.stride + 1;
        let mut out = vec![0.0f64; p.c_out * ho * wo];
        for co in 0..p.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co] as f64;
                    for ci in 0..p.c_in {
                        for ky in 0..p.kernel_h {
                            for kx in 0..p.kernel_w {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wv = w[((co * p.c_in + ci) * p.kernel_h + ky) * p.kernel_w + kx];
                                acc += wv as f64 * x.get(ci, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseTensor::from_fn(Shape::new(3, 5, 7), |_, _, _| rng.gen_range(-1.0..1.0));
        let p = ConvParams::new(3, 3, 1, 1, 0).unwrap();
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let y = dense_conv2d(&x, &w, Some(&[0.0; 3]), &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_center_is_nine() {
        let x = DenseTensor::full(Shape::new(1, 3, 3), 1.0);
        let p = ConvParams::new(1, 1, 3, 1, 1).unwrap();
        let y = dense_conv2d(&x, &[1.0; 9], None, &p).unwrap();
        assert_eq!(y.get(0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 0), 4.0);
    }

    #[test]
    fn random_conv_matches_loop_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 2, 5), (3, 0, 2), (1, 2, 1)] {
            let x = DenseTensor::from_fn(Shape::new(3, 11, 9), |_, _, _| rng.gen_range(-1.0..1.0));
            let p = ConvParams::new(3, 4, k, stride, pad).unwrap();
            let w: Vec<f32> = (0..p.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = dense_conv2d(&x, &w, Some(&b), &p).unwrap();
            let want = naive_conv(&x, &w, &b, &p);
            assert_eq!(y.data().len(), want.len());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() <= 1e-5, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = DenseTensor::zeros(Shape::new(2, 4, 4));
        let p = ConvParams::new(3, 1, 3, 1, 1).unwrap();
        assert!(matches!(
            dense_conv2d(&x, &[0.0; 27], None, &p),
            Err(Error::ChannelMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn tap_range_matches_enumeration() {
        for s in 1..4 {
            for tap in 0..5 {
                for start in 0..12 {
                    for end in start..14 {
                        let n = 6;
                        let want: Vec<usize> = (0..n).filter(|o| (start..end).contains(&(o * s + tap))).collect();
                        let got: Vec<usize> = tap_range(&(start..end), tap, s, n).collect();
                        assert_eq!(got, want, "s={s} tap={tap} {start}..{end}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_and_errors() {
        let x = DenseTensor::from_vec(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = PoolParams { window: 2, stride: 2 };
        assert_eq!(dense_maxpool(&x, &p).unwrap().data(), &[4.0]);
        let big = PoolParams { window: 3, stride: 1 };
        assert!(dense_maxpool(&x, &big).is_err());
    }

    #[test]
    fn nearest_upsample_replicates() {
        let x = DenseTensor::from_vec(Shape::new(1, 1, 1), vec![5.0]).unwrap();
        let y = dense_upsample(&x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(y.data(), &[5.0; 4]);
        assert!(dense_upsample(&x, 3, UpsampleMode::Nearest).is_err());
    }

    #[test]
    fn bilinear_upsample_interpolates() {
        let x = DenseTensor::from_vec(Shape::new(1, 1, 2), vec![0.0, 4.0]).unwrap();
        let y = dense_upsample(&x, 2, UpsampleMode::Bilinear).unwrap();
        // half-pixel centres: 0, 1, 3, 4
        assert_eq!(y.channel(0)[..4], [0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::LeakyRelu(0.1).apply(-2.0), -0.2);
        assert!((Activation::Sigmoid.apply(0.0) - 0.5).abs() < 1e-7);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let y = dense_linear(&[1.0, 2.0], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], Some(&[0.5, 0.0, -1.0]), 3).unwrap();
        assert_eq!(y, vec![1.5, 2.0, 2.0]);
    }
}
