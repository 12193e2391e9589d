use evdelta::dense::{dense_conv2d, ConvParams};
use evdelta::incr::{inc_conv2d, FlopCounter};
use evdelta::{make_tile_mask, DenseTensor, IncrementTensor, Shape, TileShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts MACs by walking every (output, input channel, tap) triple. A MAC
/// runs when its input position, clamped into the image, lies in a true tile.
fn enumerate_macs(x: &IncrementTensor, p: &ConvParams) -> u64 {
    let s = x.shape();
    let out = p.output_shape(s).unwrap();
    let tile = x.tile();
    let mask = x.mask();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut macs = 0;
    for _co in 0..out.c {
        for oy in 0..out.h {
            for ox in 0..out.w {
                for ci in 0..s.c {
                    for ky in 0..p.kernel_h {
                        for kx in 0..p.kernel_w {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            let ty = clamp(iy, s.h) / tile.h;
                            let tx = clamp(ix, s.w) / tile.w;
                            if mask.get(ci, ty, tx) {
                                macs += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    macs
}

/// Increment with a random subset of tiles filled with random values.
fn sparse_increment(shape: Shape, tile: TileShape, density: f64, rng: &mut ChaCha8Rng) -> IncrementTensor {
    let (rows, cols) = tile.grid(shape.h, shape.w);
    let mut v = DenseTensor::zeros(shape);
    for c in 0..shape.c {
        for ti in 0..rows {
            for tj in 0..cols {
                if rng.gen_bool(density) {
                    for y in tile.rows(ti, shape.h) {
                        for x in tile.cols(tj, shape.w) {
                            v.set(c, y, x, rng.gen_range(-1.0..1.0));
                        }
                    }
                }
            }
        }
    }
    IncrementTensor::new(v, tile)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn performed_flops_match_enumeration(
        seed in any::<u64>(),
        c_in in 1usize..4,
        c_out in 1usize..4,
        h in 5usize..20,
        w in 5usize..20,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        th in 2usize..7,
        tw in 2usize..7,
        density in 0.0f64..1.0,
    ) {
        let pad = k / 2;
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ConvParams::new(c_in, c_out, k, stride, pad).unwrap();
        let tile = TileShape::new(th, tw).unwrap();
        let x = sparse_increment(Shape::new(c_in, h, w), tile, density, &mut rng);
        let weight: Vec<f32> = (0..params.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut meter = FlopCounter::default();
        let y = inc_conv2d(&x, &weight, &params, &mut meter).unwrap();
        prop_assert_eq!(meter.performed, 2 * enumerate_macs(&x, &params));
        prop_assert_eq!(meter.dense_equiv, 2 * (k * k * c_in * c_out) as u64 * y.shape().plane() as u64);

        let dense = dense_conv2d(x.values(), &weight, None, &params).unwrap();
        prop_assert!(y.values().max_abs_diff(&dense).unwrap() <= 1e-5);
        prop_assert!(y.is_sound());
        // The output mask may be conservative but never misses a nonzero tile.
        let exact = make_tile_mask(y.values(), tile);
        for (e, m) in exact.flags().iter().zip(y.mask().flags()) {
            prop_assert!(!e || *m);
        }
    }
}

#[test]
fn zero_tiles_cost_nothing() {
    let params = ConvParams::new(3, 4, 3, 1, 1).unwrap();
    let tile = TileShape::new(6, 6).unwrap();
    let x = IncrementTensor::zeros(Shape::new(3, 30, 30), tile);
    let mut meter = FlopCounter::default();
    inc_conv2d(&x, &vec![1.0; params.weight_len()], &params, &mut meter).unwrap();
    assert_eq!(meter.performed, 0);
    assert_eq!(meter.reduction_pct(), 100.0);
}
