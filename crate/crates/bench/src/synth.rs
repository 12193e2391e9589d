//! Deterministic synthetic event streams: rectangles drifting across the
//! sensor whose moving edges fire events, plus uniform background noise.

use evdelta::events::{Event, EventStream, SensorSize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub duration_us: u64,
    /// Mean event rate over the whole sensor, events per second.
    pub rate_hz: f64,
    pub n_objects: usize,
    pub sensor: SensorSize,
    /// Fraction of events that are uniform noise.
    pub noise_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_us: 150_000,
            rate_hz: 100_000.0,
            n_objects: 3,
            sensor: SensorSize::new(180, 240),
            noise_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct Rect {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    /// +1 when brighter than the background.
    contrast: i8,
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng, sensor: SensorSize) -> Self {
        let (sw, sh) = (f64::from(sensor.width), f64::from(sensor.height));
        let w = rng.gen_range(0.1..0.25) * sw;
        let h = rng.gen_range(0.1..0.25) * sh;
        let speed = rng.gen_range(150.0..400.0);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            x0: rng.gen_range(0.0..sw - w),
            y0: rng.gen_range(0.0..sh - h),
            w,
            h,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            contrast: if rng.gen_bool(0.5) { 1 } else { -1 },
        }
    }

    /// Top-left corner and velocity at `t` seconds, bouncing off the borders.
    fn state(&self, t: f64, sensor: SensorSize) -> (f64, f64, f64, f64) {
        let (x, vx) = bounce(self.x0 + self.vx * t, self.vx, f64::from(sensor.width) - self.w);
        let (y, vy) = bounce(self.y0 + self.vy * t, self.vy, f64::from(sensor.height) - self.h);
        (x, y, vx, vy)
    }
}

/// Reflects an unconstrained coordinate into `[0, span]`.
fn bounce(p: f64, v: f64, span: f64) -> (f64, f64) {
    let period = 2.0 * span;
    let m = p.rem_euclid(period);
    if m <= span {
        (m, v)
    } else {
        (period - m, -v)
    }
}

/// Samples one edge event of `r` at time `t`, or `None` when the object is still.
fn edge_event(r: &Rect, t: f64, sensor: SensorSize, rng: &mut ChaCha8Rng) -> Option<(f64, f64, i8)> {
    let (x, y, vx, vy) = r.state(t, sensor);
    // Vertical edges move with |vx|, horizontal ones with |vy|.
    let wv = r.h * vx.abs();
    let wh = r.w * vy.abs();
    if wv + wh <= 0.0 {
        return None;
    }
    let jitter = rng.gen_range(-0.5..0.5);
    if rng.gen_bool(wv / (wv + wh)) {
        let leading = rng.gen_bool(0.5);
        // The leading edge brightens when a bright object enters.
        let right = (vx > 0.0) == leading;
        let ex = if right { x + r.w } else { x } + jitter;
        let p = if leading { r.contrast } else { -r.contrast };
        Some((ex, y + rng.gen_range(0.0..r.h), p))
    } else {
        let leading = rng.gen_bool(0.5);
        let bottom = (vy > 0.0) == leading;
        let ey = if bottom { y + r.h } else { y } + jitter;
        let p = if leading { r.contrast } else { -r.contrast };
        Some((x + rng.gen_range(0.0..r.w), ey, p))
    }
}

/// Generates the scene. The same config always yields the same events.
pub fn generate(cfg: &SceneConfig) -> anyhow::Result<EventStream> {
    anyhow::ensure!(cfg.rate_hz > 0.0 && cfg.rate_hz.is_finite(), "rate must be positive");
    anyhow::ensure!(
        (0.0..=1.0).contains(&cfg.noise_fraction),
        "noise fraction must lie in [0, 1]"
    );
    anyhow::ensure!(cfg.sensor.width > 0 && cfg.sensor.height > 0, "empty sensor");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects: Vec<Rect> = (0..cfg.n_objects).map(|_| Rect::random(&mut rng, cfg.sensor)).collect();
    let gap = Exp::new(cfg.rate_hz)?;
    let duration = cfg.duration_us as f64 * 1e-6;
    let (sw, sh) = (cfg.sensor.width, cfg.sensor.height);
    let mut events = Vec::with_capacity((cfg.rate_hz * duration * 1.1) as usize);
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= duration {
            break;
        }
        let t_us = (t * 1e6) as u64;
        let noise = objects.is_empty() || rng.gen_bool(cfg.noise_fraction);
        let sample = if noise {
            None
        } else {
            let r = &objects[rng.gen_range(0..objects.len())];
            edge_event(r, t, cfg.sensor, &mut rng)
        };
        let (x, y, p) = match sample {
            Some((x, y, p)) => (
                (x.round().max(0.0) as u16).min(sw - 1),
                (y.round().max(0.0) as u16).min(sh - 1),
                p,
            ),
            None => (
                rng.gen_range(0..sw),
                rng.gen_range(0..sh),
                if rng.gen_bool(0.5) { 1 } else { -1 },
            ),
        };
        events.push(Event { t: t_us, x, y, p });
    }
    Ok(EventStream::new(cfg.sensor, events)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounce_stays_in_range() {
        for i in -50..50 {
            let (p, _) = bounce(f64::from(i) * 3.7, 1.0, 10.0);
            assert!((0.0..=10.0).contains(&p), "{p}");
        }
        assert_eq!(bounce(12.0, 2.0, 10.0), (8.0, -2.0));
    }

    #[test]
    fn zero_duration_is_empty() {
        let s = generate(&SceneConfig {
            duration_us: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn events_are_sorted_and_in_bounds() {
        let s = generate(&SceneConfig::default()).unwrap();
        assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
        assert!(s.events().iter().all(|e| e.x < 240 && e.y < 180));
    }
}
