//! Increment versions of the forward-pass operators.
//!
//! Linear operators map input increments straight to output increments.
//! Nonlinear operators keep an [`AccState`] holding the running sum of the
//! increments they have seen, and emit `f(acc + dx) - f(acc)`. Every operator
//! only touches tiles its input masks flag as possibly nonzero, and every
//! output carries a sound mask.

mod conv;

use std::ops::Range;

use serde::Serialize;

pub use conv::inc_conv2d;

use crate::dense::{
    check_upsample_factor, dense_concat, maxpool_at, upsample_rect, upsample_support, Activation, PoolParams,
    UpsampleMode,
};
use crate::error::{Error, Result};
use crate::tensor::{mask_or, DenseTensor, IncrementTensor, Shape, TileMask, TileShape};

/// Running sum of the increments a nonlinear node has consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct AccState {
    pub x_acc: DenseTensor,
}

impl AccState {
    pub fn new(shape: Shape) -> Self {
        Self {
            x_acc: DenseTensor::zeros(shape),
        }
    }

    pub fn from_dense(x: DenseTensor) -> Self {
        Self { x_acc: x }
    }

    /// Resynchronises with the node's true dense input.
    pub fn set(&mut self, x: &DenseTensor) {
        self.x_acc.clone_from(x);
    }

    fn check(&self, context: &str, shape: Shape) -> Result<()> {
        if self.x_acc.shape() != shape {
            return Err(Error::shape(context, self.x_acc.shape(), shape));
        }
        Ok(())
    }
}

/// Floating-point operations executed versus what a dense layer would execute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounter {
    pub performed: u64,
    pub dense_equiv: u64,
}

impl FlopCounter {
    pub fn add(&mut self, other: FlopCounter) {
        self.performed += other.performed;
        self.dense_equiv += other.dense_equiv;
    }

    /// `100 * (1 - performed / dense_equiv)`; zero when nothing was counted.
    pub fn reduction_pct(&self) -> f64 {
        if self.dense_equiv == 0 {
            return 0.0;
        }
        100.0 * (1.0 - self.performed as f64 / self.dense_equiv as f64)
    }
}

/// Visits every pixel range of the true tiles of `mask`, one row segment at a time.
fn for_each_true_segment(mask: &TileMask, mut f: impl FnMut(Range<usize>)) {
    let shape = mask.shape();
    mask.for_each_true(|c, rows, cols| {
        for y in rows {
            let base = (c * shape.h + y) * shape.w;
            f(base + cols.start..base + cols.end);
        }
    });
}

pub fn inc_add(a: &IncrementTensor, b: &IncrementTensor) -> Result<IncrementTensor> {
    let mask = mask_or(a.mask(), b.mask())?;
    let mut out = DenseTensor::zeros(a.shape());
    let (av, bv) = (a.values().data(), b.values().data());
    let dst = out.data_mut();
    for_each_true_segment(&mask, |r| {
        for ((d, x), y) in dst[r.clone()].iter_mut().zip(&av[r.clone()]).zip(&bv[r]) {
            *d = x + y;
        }
    });
    Ok(IncrementTensor::from_parts_unchecked(out, mask))
}

pub fn inc_activation(x: &IncrementTensor, state: &mut AccState, f: Activation) -> Result<IncrementTensor> {
    state.check("activation state", x.shape())?;
    let mut out = DenseTensor::zeros(x.shape());
    let xv = x.values().data();
    let acc = state.x_acc.data_mut();
    let dst = out.data_mut();
    for_each_true_segment(x.mask(), |r| {
        for ((d, a), dx) in dst[r.clone()].iter_mut().zip(&mut acc[r.clone()]).zip(&xv[r]) {
            let next = *a + dx;
            *d = f.apply(next) - f.apply(*a);
            *a = next;
        }
    });
    Ok(IncrementTensor::from_parts_unchecked(out, x.mask().clone()))
}

/// Elementwise product increment: `(acc_a + da) * db + acc_b * da`.
pub fn inc_mul(
    a: &IncrementTensor,
    b: &IncrementTensor,
    sa: &mut AccState,
    sb: &mut AccState,
) -> Result<IncrementTensor> {
    let mask = mask_or(a.mask(), b.mask())?;
    sa.check("mul state", a.shape())?;
    sb.check("mul state", b.shape())?;
    let mut out = DenseTensor::zeros(a.shape());
    let (av, bv) = (a.values().data(), b.values().data());
    let acc_a = sa.x_acc.data_mut();
    let acc_b = sb.x_acc.data_mut();
    let dst = out.data_mut();
    for_each_true_segment(&mask, |r| {
        for i in r {
            let (da, db) = (av[i], bv[i]);
            dst[i] = (acc_a[i] + da) * db + acc_b[i] * da;
            acc_a[i] += da;
            acc_b[i] += db;
        }
    });
    Ok(IncrementTensor::from_parts_unchecked(out, mask))
}

pub fn inc_concat(parts: &[&IncrementTensor]) -> Result<IncrementTensor> {
    let masks: Vec<&TileMask> = parts.iter().map(|p| p.mask()).collect();
    let mask = TileMask::concat(&masks)?;
    let values: Vec<&DenseTensor> = parts.iter().map(|p| p.values()).collect();
    let values = dense_concat(&values)?;
    Ok(IncrementTensor::from_parts_unchecked(values, mask))
}

/// Whether any flag of channel `c` inside the tile rectangle is set.
fn any_in_rect(mask: &TileMask, c: usize, rows: Range<usize>, cols: Range<usize>) -> bool {
    let (_, r, k) = mask.grid();
    let flags = mask.channel_flags(c);
    rows.take_while(|&i| i < r)
        .any(|i| cols.clone().take_while(|&j| j < k).any(|j| flags[i * k + j]))
}

fn tile_span(pixels: Range<usize>, tile: usize) -> Range<usize> {
    pixels.start / tile..(pixels.end - 1) / tile + 1
}

pub fn inc_upsample(x: &IncrementTensor, factor: usize, mode: UpsampleMode) -> Result<IncrementTensor> {
    check_upsample_factor(factor)?;
    let s = x.shape();
    let tile = x.tile();
    let out_shape = Shape::new(s.c, s.h * factor, s.w * factor);
    let mut out = DenseTensor::zeros(out_shape);
    let mut mask = TileMask::all_false(out_shape, tile);
    let (_, rows, cols) = mask.grid();
    for c in 0..s.c {
        if !x.mask().channel_flags(c).iter().any(|&f| f) {
            continue;
        }
        for oi in 0..rows {
            let orows = tile.rows(oi, out_shape.h);
            let trows = tile_span(upsample_support(&orows, factor, s.h, mode), tile.h);
            for oj in 0..cols {
                let ocols = tile.cols(oj, out_shape.w);
                let tcols = tile_span(upsample_support(&ocols, factor, s.w, mode), tile.w);
                if any_in_rect(x.mask(), c, trows.clone(), tcols) {
                    mask.set(c, oi, oj, true);
                    upsample_rect(x.values(), &mut out, factor, mode, c, orows.clone(), ocols);
                }
            }
        }
    }
    Ok(IncrementTensor::from_parts_unchecked(out, mask))
}

/// `maxpool(acc + dx) - maxpool(acc)` on output tiles whose windows touch a true tile.
pub fn inc_maxpool(x: &IncrementTensor, state: &mut AccState, pool: &PoolParams) -> Result<IncrementTensor> {
    state.check("maxpool state", x.shape())?;
    let s = x.shape();
    let out_shape = pool.output_shape(s)?;
    let tile = x.tile();
    let mut mask = TileMask::all_false(out_shape, tile);
    let (_, rows, cols) = mask.grid();
    for c in 0..s.c {
        if !x.mask().channel_flags(c).iter().any(|&f| f) {
            continue;
        }
        for oi in 0..rows {
            let trows = tile_span(pool.support(&tile.rows(oi, out_shape.h)), tile.h);
            for oj in 0..cols {
                let tcols = tile_span(pool.support(&tile.cols(oj, out_shape.w)), tile.w);
                if any_in_rect(x.mask(), c, trows.clone(), tcols) {
                    mask.set(c, oi, oj, true);
                }
            }
        }
    }

    let mut out = DenseTensor::zeros(out_shape);
    let each_output = |f: &mut dyn FnMut(usize, usize, usize)| {
        mask.for_each_true(|c, rows, cols| {
            for oy in rows {
                for ox in cols.clone() {
                    f(c, oy, ox);
                }
            }
        })
    };
    each_output(&mut |c, oy, ox| out.set(c, oy, ox, maxpool_at(&state.x_acc, pool, c, oy, ox)));
    {
        let acc = state.x_acc.data_mut();
        let xv = x.values().data();
        for_each_true_segment(x.mask(), |r| {
            for (a, dx) in acc[r.clone()].iter_mut().zip(&xv[r]) {
                *a += dx;
            }
        });
    }
    each_output(&mut |c, oy, ox| {
        let old = out.get(c, oy, ox);
        out.set(c, oy, ox, maxpool_at(&state.x_acc, pool, c, oy, ox) - old);
    });
    Ok(IncrementTensor::from_parts_unchecked(out, mask))
}

/// Flattened increment with a 1-D mask over runs of `run` consecutive elements.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIncrement {
    values: Vec<f32>,
    mask: Vec<bool>,
    run: usize,
}

impl FlatIncrement {
    pub fn new(values: Vec<f32>, run: usize) -> Result<Self> {
        if run == 0 {
            return Err(Error::InvalidParam("run length must be >= 1".into()));
        }
        let mask = values.chunks(run).map(|c| c.iter().any(|&v| v != 0.0)).collect();
        Ok(Self { values, mask, run })
    }

    /// Flattens a tensor increment, one run per `h * w` tile area.
    pub fn from_increment(x: &IncrementTensor) -> Self {
        let run = x.tile().h * x.tile().w;
        Self::new(x.values().data().to_vec(), run).expect("tile area is nonzero")
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn run(&self) -> usize {
        self.run
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `matrix * dx` for a `rows x len` row-major matrix, skipping columns under false runs.
pub fn inc_linear(x: &FlatIncrement, matrix: &[f32], rows: usize, meter: &mut FlopCounter) -> Result<FlatIncrement> {
    let cols = x.len();
    if matrix.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            context: "linear matrix".into(),
            expected: rows * cols,
            found: matrix.len(),
        });
    }
    let mut y = vec![0.0f32; rows];
    let mut active = 0usize;
    for (k, _) in x.mask.iter().enumerate().filter(|(_, &f)| f) {
        let span = k * x.run..((k + 1) * x.run).min(cols);
        active += span.len();
        let seg = &x.values[span.clone()];
        for (r, out) in y.iter_mut().enumerate() {
            let row = &matrix[r * cols + span.start..r * cols + span.end];
            *out += row.iter().zip(seg).map(|(a, b)| a * b).sum::<f32>();
        }
    }
    meter.performed += 2 * (rows * active) as u64;
    meter.dense_equiv += 2 * (rows * cols) as u64;
    Ok(FlatIncrement {
        mask: vec![true; rows.div_ceil(x.run)],
        values: y,
        run: x.run,
    })
}

/// Reshapes a flat linear output into a `(rows, 1, 1)` increment with an all-true mask.
pub(crate) fn flat_to_increment(y: FlatIncrement, tile: TileShape) -> IncrementTensor {
    let shape = Shape::new(y.values.len(), 1, 1);
    let values = DenseTensor::from_vec(shape, y.values).expect("length matches");
    IncrementTensor::from_parts_unchecked(values, TileMask::all_true(shape, tile))
}
