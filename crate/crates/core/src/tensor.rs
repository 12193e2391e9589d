//! Dense activations, per-channel tile masks, and increment tensors.
//!
//! Every activation is a [`DenseTensor`] stored channel-planar: channel outer,
//! then rows, then columns. An [`IncrementTensor`] pairs dense-stored values
//! with a [`TileMask`] whose `false` entries promise that the covered
//! `h x w` section of that channel is exactly zero.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TileDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("data", &format_args!("{head:?}{}", if self.data.len() > PREVIEW { "..." } else { "" }))
            .finish()
    }
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                context: format!("tensor data for shape {shape}"),
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// L2 norm over every element, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f32> {
        self.ensure_shape("max_abs_diff", other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.ensure_shape("add", other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DenseTensor {
            shape: self.shape,
            data,
        })
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.ensure_shape("sub", other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseTensor {
            shape: self.shape,
            data,
        })
    }

    pub(crate) fn ensure_shape(&self, context: &str, other: Shape) -> Result<()> {
        if self.shape != other {
            return Err(Error::shape(context, self.shape, other));
        }
        Ok(())
    }
}

/// Size of one mask tile in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub h: usize,
    pub w: usize,
}

impl Default for TileShape {
    fn default() -> Self {
        Self { h: 6, w: 6 }
    }
}

impl TileShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidParam(format!("tile shape {h}x{w} must be at least 1x1")));
        }
        Ok(Self { h, w })
    }

    /// Tile grid (rows, cols) covering an `h x w` plane; boundary tiles are partial.
    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.h), w.div_ceil(self.w))
    }

    #[inline]
    pub fn rows(&self, tile_row: usize, h: usize) -> Range<usize> {
        tile_row * self.h..((tile_row + 1) * self.h).min(h)
    }

    #[inline]
    pub fn cols(&self, tile_col: usize, w: usize) -> Range<usize> {
        tile_col * self.w..((tile_col + 1) * self.w).min(w)
    }

    pub(crate) fn dims(&self) -> TileDims {
        TileDims(self.h, self.w)
    }
}

impl fmt::Display for TileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// One flag per (channel, tile row, tile col); `false` means the tile is all zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileMask {
    shape: Shape,
    tile: TileShape,
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
}

impl TileMask {
    pub fn filled(shape: Shape, tile: TileShape, value: bool) -> Self {
        let (rows, cols) = tile.grid(shape.h, shape.w);
        Self {
            shape,
            tile,
            rows,
            cols,
            flags: vec![value; shape.c * rows * cols],
        }
    }

    pub fn all_false(shape: Shape, tile: TileShape) -> Self {
        Self::filled(shape, tile, false)
    }

    pub fn all_true(shape: Shape, tile: TileShape) -> Self {
        Self::filled(shape, tile, true)
    }

    /// Tensor shape the mask describes.
    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn tile(&self) -> TileShape {
        self.tile
    }

    /// (channels, tile rows, tile cols).
    #[inline]
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.shape.c, self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> bool {
        self.flags[(c * self.rows + i) * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: bool) {
        self.flags[(c * self.rows + i) * self.cols + j] = v;
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Flags of one channel, row-major over the tile grid.
    pub fn channel_flags(&self, c: usize) -> &[bool] {
        let n = self.rows * self.cols;
        &self.flags[c * n..(c + 1) * n]
    }

    pub fn count_true(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn false_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 1.0;
        }
        1.0 - self.count_true() as f64 / self.flags.len() as f64
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    /// Channel-reduced flags: OR over channels, row-major over the tile grid.
    pub fn reduce_channels(&self) -> Vec<bool> {
        let n = self.rows * self.cols;
        let mut out = vec![false; n];
        for c in 0..self.shape.c {
            for (o, &f) in out.iter_mut().zip(&self.flags[c * n..(c + 1) * n]) {
                *o |= f;
            }
        }
        out
    }

    /// Visit every true tile as (channel, pixel rows, pixel cols).
    pub fn for_each_true(&self, mut f: impl FnMut(usize, Range<usize>, Range<usize>)) {
        for c in 0..self.shape.c {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    if self.get(c, i, j) {
                        f(c, self.tile.rows(i, self.shape.h), self.tile.cols(j, self.shape.w));
                    }
                }
            }
        }
    }

    /// Tile row containing pixel row `y`.
    #[inline]
    pub fn tile_row_of(&self, y: usize) -> usize {
        y / self.tile.h
    }

    #[inline]
    pub fn tile_col_of(&self, x: usize) -> usize {
        x / self.tile.w
    }

    pub(crate) fn ensure_compatible(&self, context: &str, other: &TileMask) -> Result<()> {
        if self.tile != other.tile {
            return Err(Error::TileMismatch(self.tile.dims(), other.tile.dims()));
        }
        if self.shape != other.shape {
            return Err(Error::shape(context, self.shape, other.shape));
        }
        Ok(())
    }

    /// Stack masks along the channel axis.
    pub(crate) fn concat(parts: &[&TileMask]) -> Result<TileMask> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidParam("concat of zero tensors".into()))?;
        let mut flags = Vec::new();
        let mut c = 0;
        for p in parts {
            if p.tile != first.tile {
                return Err(Error::TileMismatch(first.tile.dims(), p.tile.dims()));
            }
            if p.shape.h != first.shape.h || p.shape.w != first.shape.w {
                return Err(Error::shape(
                    "concat",
                    Shape::new(p.shape.c, first.shape.h, first.shape.w),
                    p.shape,
                ));
            }
            c += p.shape.c;
            flags.extend_from_slice(&p.flags);
        }
        Ok(TileMask {
            shape: Shape::new(c, first.shape.h, first.shape.w),
            tile: first.tile,
            rows: first.rows,
            cols: first.cols,
            flags,
        })
    }
}

/// Exact per-tile nonzero scan: entry (c, i, j) is true iff the tile holds a nonzero.
pub fn make_tile_mask(t: &DenseTensor, tile: TileShape) -> TileMask {
    let shape = t.shape();
    let mut mask = TileMask::all_false(shape, tile);
    for c in 0..shape.c {
        let plane = t.channel(c);
        for y in 0..shape.h {
            let row = &plane[y * shape.w..(y + 1) * shape.w];
            let ti = y / tile.h;
            for tj in 0..mask.cols {
                if mask.get(c, ti, tj) {
                    continue;
                }
                if row[tile.cols(tj, shape.w)].iter().any(|&v| v != 0.0) {
                    mask.set(c, ti, tj, true);
                }
            }
        }
    }
    mask
}

pub fn mask_or(a: &TileMask, b: &TileMask) -> Result<TileMask> {
    a.ensure_compatible("mask_or", b)?;
    let flags = a.flags.iter().zip(&b.flags).map(|(&x, &y)| x | y).collect();
    Ok(TileMask {
        flags,
        ..a.clone()
    })
}

/// Increment values with a sound tile mask over the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTensor {
    values: DenseTensor,
    mask: TileMask,
}

impl IncrementTensor {
    /// Wraps `values` with an exact mask.
    pub fn new(values: DenseTensor, tile: TileShape) -> Self {
        let mask = make_tile_mask(&values, tile);
        Self { values, mask }
    }

    pub fn zeros(shape: Shape, tile: TileShape) -> Self {
        Self {
            values: DenseTensor::zeros(shape),
            mask: TileMask::all_false(shape, tile),
        }
    }

    /// Pairs values with a caller-provided mask. The mask must be sound.
    pub fn from_parts(values: DenseTensor, mask: TileMask) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::shape("increment mask", values.shape(), mask.shape()));
        }
        let inc = Self { values, mask };
        if !inc.is_sound() {
            return Err(Error::InvalidParam(
                "mask marks a tile holding nonzero values as empty".into(),
            ));
        }
        Ok(inc)
    }

    pub(crate) fn from_parts_unchecked(values: DenseTensor, mask: TileMask) -> Self {
        debug_assert_eq!(values.shape(), mask.shape());
        Self { values, mask }
    }

    #[inline]
    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    #[inline]
    pub fn mask(&self) -> &TileMask {
        &self.mask
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.values.shape()
    }

    #[inline]
    pub fn tile(&self) -> TileShape {
        self.mask.tile()
    }

    pub fn into_parts(self) -> (DenseTensor, TileMask) {
        (self.values, self.mask)
    }

    /// True when every false tile covers only exact zeros.
    pub fn is_sound(&self) -> bool {
        let shape = self.shape();
        let (_, rows, cols) = self.mask.grid();
        for c in 0..shape.c {
            for i in 0..rows {
                for j in 0..cols {
                    if self.mask.get(c, i, j) {
                        continue;
                    }
                    for y in self.tile().rows(i, shape.h) {
                        for x in self.tile().cols(j, shape.w) {
                            if self.values.get(c, y, x) != 0.0 {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        true
    }
}

/// Adds `incr` onto `dense`, touching only tiles flagged true.
pub fn integrate(dense: &DenseTensor, incr: &IncrementTensor) -> Result<DenseTensor> {
    let mut out = dense.clone();
    integrate_into(&mut out, incr)?;
    Ok(out)
}

pub fn integrate_into(dense: &mut DenseTensor, incr: &IncrementTensor) -> Result<()> {
    dense.ensure_shape("integrate", incr.shape())?;
    let shape = dense.shape();
    let src = incr.values().data();
    let dst = dense.data_mut();
    incr.mask().for_each_true(|c, rows, cols| {
        for y in rows {
            let base = (c * shape.h + y) * shape.w;
            let r = base + cols.start..base + cols.end;
            for (d, s) in dst[r.clone()].iter_mut().zip(&src[r]) {
                *d += s;
            }
        }
    });
    Ok(())
}
