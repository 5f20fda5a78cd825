//! Seeded training-time augmentation over four categories: geometric,
//! brightness/color, noise and structural dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tiler::{ModelInput, INPUT_SIZE};
use crate::util;

pub const AUGMENT_CONFIG_VERSION: u32 = 1;

/// The fixed augmentation recipe. Each op fires independently with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub version: u32,
    pub flip_p: f64,
    pub rotate90_p: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub color_p: f64,
    pub hue_shift: f32,
    pub saturation: f32,
    pub noise_p: f64,
    pub noise_sigma_max: f32,
    pub dropout_p: f64,
    pub dropout_max_holes: usize,
    /// Hole side as a fraction of the image side.
    pub dropout_size: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            version: AUGMENT_CONFIG_VERSION,
            flip_p: 0.5,
            rotate90_p: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            color_p: 0.5,
            hue_shift: 0.05,
            saturation: 0.2,
            noise_p: 0.3,
            noise_sigma_max: 0.02,
            dropout_p: 0.3,
            dropout_max_holes: 2,
            dropout_size: 0.125,
        }
    }
}

/// Applies the default recipe; identity when `enabled` is false.
pub fn augment(input: &ModelInput, seed: u64, enabled: bool) -> ModelInput {
    augment_with(input, seed, enabled, &AugmentConfig::default())
}

pub fn augment_with(
    input: &ModelInput,
    seed: u64,
    enabled: bool,
    cfg: &AugmentConfig,
) -> ModelInput {
    if !enabled {
        return input.clone();
    }
    let mut rng = util::rng(seed, "augment");
    let n = INPUT_SIZE;
    let mut img = Planes(input.denormalize());

    if rng.random_bool(cfg.flip_p) {
        img.map_coords(|y, x| (y, n - 1 - x));
    }
    if rng.random_bool(cfg.flip_p) {
        img.map_coords(|y, x| (n - 1 - y, x));
    }
    if rng.random_bool(cfg.rotate90_p) {
        let turns = rng.random_range(1..4);
        for _ in 0..turns {
            img.map_coords(|y, x| (x, n - 1 - y));
        }
    }

    let b = rng.random_range(-cfg.brightness..=cfg.brightness);
    let k = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
    let mean = img.0.iter().sum::<f32>() / img.0.len() as f32;
    for v in &mut img.0 {
        *v = (*v - mean) * k + mean + b;
    }

    if rng.random_bool(cfg.color_p) {
        let dh = rng.random_range(-cfg.hue_shift..=cfg.hue_shift);
        let ds = 1.0 + rng.random_range(-cfg.saturation..=cfg.saturation);
        img.shift_hsv(dh, ds);
    }

    if rng.random_bool(cfg.noise_p) {
        let sigma = rng.random_range(0.0..=cfg.noise_sigma_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
            for v in &mut img.0 {
                *v += normal.sample(&mut rng);
            }
        }
    }

    if rng.random_bool(cfg.dropout_p) && cfg.dropout_max_holes > 0 {
        let holes = rng.random_range(1..=cfg.dropout_max_holes);
        let side = ((n as f32 * cfg.dropout_size) as usize).max(1);
        for _ in 0..holes {
            let y0 = rng.random_range(0..=n - side);
            let x0 = rng.random_range(0..=n - side);
            for c in 0..3 {
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        // Holes are filled with the per-channel mean, i.e. zero after normalization.
                        img.0[(c * n + y) * n + x] = crate::tiler::MEAN[c];
                    }
                }
            }
        }
    }

    for v in &mut img.0 {
        *v = v.clamp(0.0, 1.0);
    }
    ModelInput::from_unit(&img.0).expect("augmentation preserves shape")
}

struct Planes(Vec<f32>);

impl Planes {
    /// Rebuilds the image so that out(y, x) = in(f(y, x)).
    fn map_coords(&mut self, f: impl Fn(usize, usize) -> (usize, usize)) {
        let n = INPUT_SIZE;
        let mut out = vec![0.0; self.0.len()];
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = f(y, x);
                    out[(c * n + y) * n + x] = self.0[(c * n + sy) * n + sx];
                }
            }
        }
        self.0 = out;
    }

    fn shift_hsv(&mut self, dh: f32, ds: f32) {
        let n = INPUT_SIZE * INPUT_SIZE;
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(self.0[i], self.0[n + i], self.0[2 * n + i]);
            let h = (h + dh).rem_euclid(1.0);
            let s = (s * ds).clamp(0.0, 1.0);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            self.0[i] = r;
            self.0[n + i] = g;
            self.0[2 * n + i] = b;
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
