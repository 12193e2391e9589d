//! Error-feedback sparsification of increments.
//!
//! Each step rounds `residual + dx` to the nearest multiple of `k` (half
//! rounds up), emits the rounded tensor and carries the round-off forward as
//! the new residual. The emitted increments therefore sum to the true
//! increments up to the current residual, which never exceeds `k / 2`.
//!
//! The residual is held in f64 so that the cumulative error bound holds
//! exactly over long runs; the emitted values are f32.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, IncrementTensor, Shape, TileMask, TileShape};

/// Default decay of the rolling input norm.
pub const DEFAULT_EMA_DECAY: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Rounding multiple pinned to `k`.
    Fixed { k: f32 },
    /// `k = t_p * rolling L2 norm of the corrected input`.
    Adaptive { t_p: f32, ema_decay: f32 },
}

impl ThresholdRule {
    pub fn adaptive(t_p: f32) -> Self {
        ThresholdRule::Adaptive {
            t_p,
            ema_decay: DEFAULT_EMA_DECAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifyState {
    shape: Shape,
    tile: TileShape,
    delta: Vec<f64>,
    /// Tiles where `delta` may be nonzero.
    residual_mask: TileMask,
    rule: ThresholdRule,
    norm_ema: Option<f64>,
    k: f64,
}

impl SparsifyState {
    pub fn new(shape: Shape, tile: TileShape, rule: ThresholdRule) -> Result<Self> {
        match rule {
            ThresholdRule::Fixed { k } if !(k >= 0.0 && k.is_finite()) => {
                return Err(Error::InvalidParam(format!("rounding multiple {k} must be finite and >= 0")))
            }
            ThresholdRule::Adaptive { t_p, ema_decay } => {
                if !(t_p >= 0.0 && t_p.is_finite()) {
                    return Err(Error::InvalidParam(format!("t_p {t_p} must be finite and >= 0")));
                }
                if !(ema_decay > 0.0 && ema_decay < 1.0) {
                    return Err(Error::InvalidParam(format!("ema_decay {ema_decay} must lie in (0, 1)")));
                }
            }
            _ => {}
        }
        let k = match rule {
            ThresholdRule::Fixed { k } => f64::from(k),
            ThresholdRule::Adaptive { .. } => 0.0,
        };
        Ok(Self {
            shape,
            tile,
            delta: vec![0.0; shape.len()],
            residual_mask: TileMask::all_false(shape, tile),
            rule,
            norm_ema: None,
            k,
        })
    }

    pub fn rule(&self) -> ThresholdRule {
        self.rule
    }

    /// Rounding multiple applied by the next step.
    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn norm_ema(&self) -> Option<f64> {
        self.norm_ema
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn delta(&self) -> DenseTensor {
        DenseTensor::from_vec(self.shape, self.delta.iter().map(|&d| d as f32).collect()).expect("length matches")
    }

    pub fn delta_f64(&self) -> &[f64] {
        &self.delta
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    /// Clears the residual and re-seeds the rolling norm from a dense input.
    pub fn reset(&mut self, dense_input: &DenseTensor) -> Result<()> {
        if dense_input.shape() != self.shape {
            return Err(Error::shape("sparsify reset", self.shape, dense_input.shape()));
        }
        self.delta.fill(0.0);
        self.residual_mask = TileMask::all_false(self.shape, self.tile);
        let norm = dense_input.l2_norm();
        self.norm_ema = Some(norm);
        if let ThresholdRule::Adaptive { t_p, .. } = self.rule {
            self.k = f64::from(t_p) * norm;
        }
        Ok(())
    }

    fn update_threshold(&mut self, norm: f64) {
        let ema = match (self.norm_ema, self.rule) {
            (Some(prev), ThresholdRule::Adaptive { ema_decay, .. }) => {
                let d = f64::from(ema_decay);
                d * prev + (1.0 - d) * norm
            }
            (Some(prev), ThresholdRule::Fixed { .. }) => {
                let d = f64::from(DEFAULT_EMA_DECAY);
                d * prev + (1.0 - d) * norm
            }
            (None, _) => norm,
        };
        self.norm_ema = Some(ema);
        if let ThresholdRule::Adaptive { t_p, .. } = self.rule {
            self.k = f64::from(t_p) * ema;
        }
    }
}

/// One sparsification step; see the module docs.
pub fn sparsify_step(x: &IncrementTensor, state: &mut SparsifyState) -> Result<IncrementTensor> {
    if x.shape() != state.shape {
        return Err(Error::shape("sparsify", state.shape, x.shape()));
    }
    let work = crate::tensor::mask_or(x.mask(), &state.residual_mask)?;
    let shape = state.shape;
    let k = state.k;
    let xv = x.values().data();
    let mut out = DenseTensor::zeros(shape);
    let mut out_mask = TileMask::all_false(shape, state.tile);
    let mut norm_sq = 0.0f64;
    let (_, rows, cols) = work.grid();

    for c in 0..shape.c {
        for ti in 0..rows {
            for tj in 0..cols {
                if !work.get(c, ti, tj) {
                    continue;
                }
                let mut emitted = false;
                let mut residual = false;
                for yy in state.tile.rows(ti, shape.h) {
                    let base = (c * shape.h + yy) * shape.w;
                    for i in state.tile.cols(tj, shape.w).map(|x| base + x) {
                        let corrected = state.delta[i] + f64::from(xv[i]);
                        norm_sq += corrected * corrected;
                        let (y, d) = if k > 0.0 {
                            let y = (k * (0.5 + corrected / k).floor()) as f32;
                            (y, corrected - f64::from(y))
                        } else {
                            (corrected as f32, 0.0)
                        };
                        out.data_mut()[i] = y;
                        state.delta[i] = d;
                        emitted |= y != 0.0;
                        residual |= d != 0.0;
                    }
                }
                out_mask.set(c, ti, tj, emitted);
                state.residual_mask.set(c, ti, tj, residual);
            }
        }
    }

    state.update_threshold(norm_sq.sqrt());
    Ok(IncrementTensor::from_parts_unchecked(out, out_mask))
}
