//! Tile-skipping convolution on increment tensors.
//!
//! The input is copied into a zero-padded plane one channel at a time, and
//! only horizontal runs of true tiles are scattered into the output. Padding
//! rows and columns belong to the adjacent boundary tile, so a fully-true mask
//! executes exactly the dense MAC count.

use crate::dense::{check_conv_weights, scatter_channel, ConvParams, PaddedGeometry, Region};
use crate::error::Result;
use crate::tensor::{DenseTensor, IncrementTensor, Shape, TileMask, TileShape};

use super::FlopCounter;

/// Padded-plane rows covered by tile row `ti` (boundary tiles absorb the padding).
fn padded_span(ti: usize, tiles: usize, tile: usize, len: usize, pad: usize) -> (usize, usize) {
    let start = if ti == 0 { 0 } else { ti * tile + pad };
    let end = if ti + 1 == tiles {
        len + 2 * pad
    } else {
        (ti + 1) * tile + pad
    };
    (start, end)
}

/// Output increment of a bias-free convolution. Bias cancels in the difference.
pub fn inc_conv2d(
    x: &IncrementTensor,
    weight: &[f32],
    params: &ConvParams,
    meter: &mut FlopCounter,
) -> Result<IncrementTensor> {
    check_conv_weights(weight, params)?;
    let in_shape = x.shape();
    let out_shape = params.output_shape(in_shape)?;
    let tile = x.tile();
    let mask = x.mask();
    let (_, rows, cols) = mask.grid();

    let mut out = DenseTensor::zeros(out_shape);
    let geom = PaddedGeometry::new(in_shape, params.padding);
    let mut plane = vec![0.0; geom.len()];
    let mut macs = 0u64;

    for ci in 0..params.c_in {
        let flags = mask.channel_flags(ci);
        if !flags.iter().any(|&f| f) {
            continue;
        }
        plane.fill(0.0);
        let src = x.values().channel(ci);
        for ti in 0..rows {
            for tj in 0..cols {
                if flags[ti * cols + tj] {
                    geom.copy_rect(src, &mut plane, tile.rows(ti, in_shape.h), tile.cols(tj, in_shape.w));
                }
            }
        }
        for ti in 0..rows {
            let row_flags = &flags[ti * cols..(ti + 1) * cols];
            let (r0, r1) = padded_span(ti, rows, tile.h, in_shape.h, params.padding);
            let mut tj = 0;
            while tj < cols {
                if !row_flags[tj] {
                    tj += 1;
                    continue;
                }
                let run_start = tj;
                while tj < cols && row_flags[tj] {
                    tj += 1;
                }
                let (c0, _) = padded_span(run_start, cols, tile.w, in_shape.w, params.padding);
                let (_, c1) = padded_span(tj - 1, cols, tile.w, in_shape.w, params.padding);
                let region = Region {
                    rows: r0..r1,
                    cols: c0..c1,
                };
                macs += scatter_channel(out.data_mut(), out_shape, &plane, geom.w, weight, params, ci, &region);
            }
        }
    }

    meter.performed += 2 * macs;
    meter.dense_equiv += 2 * params.dense_macs(in_shape)?;

    let out_mask = conv_output_mask(mask, params, out_shape, tile);
    Ok(IncrementTensor::from_parts_unchecked(out, out_mask))
}

/// Channel-reduced input mask dilated through the receptive field, broadcast over outputs.
fn conv_output_mask(mask: &TileMask, params: &ConvParams, out_shape: Shape, tile: TileShape) -> TileMask {
    let in_shape = mask.shape();
    let (_, in_rows, in_cols) = mask.grid();
    let reduced = mask.reduce_channels();
    let mut out = TileMask::all_false(out_shape, tile);
    let (_, rows, cols) = out.grid();
    if !reduced.iter().any(|&f| f) {
        return out;
    }

    // Input tile span reached by the receptive fields of an output pixel range.
    let span = |outs: std::ops::Range<usize>, k: usize, len: usize, t: usize| {
        let lo = (outs.start * params.stride).saturating_sub(params.padding).min(len - 1);
        let hi = ((outs.end - 1) * params.stride + k - 1)
            .saturating_sub(params.padding)
            .min(len - 1);
        lo / t..hi / t + 1
    };

    let mut flags = vec![false; rows * cols];
    for oi in 0..rows {
        let trs = span(tile.rows(oi, out_shape.h), params.kernel_h, in_shape.h, tile.h);
        for oj in 0..cols {
            let tcs = span(tile.cols(oj, out_shape.w), params.kernel_w, in_shape.w, tile.w);
            flags[oi * cols + oj] = trs
                .clone()
                .any(|i| i < in_rows && tcs.clone().any(|j| j < in_cols && reduced[i * in_cols + j]));
        }
    }
    for c in 0..out_shape.c {
        for oi in 0..rows {
            for oj in 0..cols {
                if flags[oi * cols + oj] {
                    out.set(c, oi, oj, true);
                }
            }
        }
    }
    out
}
