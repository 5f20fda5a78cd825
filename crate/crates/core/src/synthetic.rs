//! Procedural stand-in data with class-specific textures, for examples and tests.
//!
//! Every class gets its own stain-like base color and stripe pattern; cases add a
//! small color offset and tiles add pixel noise, all derived from ids and a seed so
//! any tile can be regenerated on demand.

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::cohort::{Case, CohortManifest, FineLabel, Source};
use crate::data::PatchStore;
use crate::error::Result;
use crate::util;

#[derive(Debug, Clone, Copy)]
struct Texture {
    base: [f32; 3],
    accent: [f32; 3],
    /// Stripe direction in radians and period in pixels at 512px.
    angle: f32,
    period: f32,
}

fn texture(label: FineLabel) -> Texture {
    match label {
        FineLabel::G => Texture {
            base: [205.0, 120.0, 180.0],
            accent: [120.0, 40.0, 140.0],
            angle: 0.0,
            period: 48.0,
        },
        FineLabel::A => Texture {
            base: [220.0, 160.0, 200.0],
            accent: [150.0, 80.0, 170.0],
            angle: 0.8,
            period: 64.0,
        },
        FineLabel::O => Texture {
            base: [230.0, 190.0, 215.0],
            accent: [90.0, 60.0, 150.0],
            angle: 1.6,
            period: 40.0,
        },
        FineLabel::M => Texture {
            base: [235.0, 150.0, 150.0],
            accent: [170.0, 60.0, 90.0],
            angle: 2.4,
            period: 96.0,
        },
        FineLabel::L => Texture {
            base: [150.0, 110.0, 190.0],
            accent: [60.0, 30.0, 120.0],
            angle: 1.2,
            period: 24.0,
        },
        FineLabel::B => Texture {
            base: [240.0, 225.0, 235.0],
            accent: [200.0, 170.0, 200.0],
            angle: 0.4,
            period: 128.0,
        },
    }
}

/// Generates tiles for any case on demand.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticStore {
    pub tile_size: u32,
    pub seed: u64,
    /// Pixel noise amplitude (0–255 scale).
    pub noise: f32,
}

impl SyntheticStore {
    pub fn new(tile_size: u32, seed: u64) -> Self {
        SyntheticStore {
            tile_size,
            seed,
            noise: 12.0,
        }
    }

    pub fn render(&self, label: FineLabel, case_id: &str, patch_id: &str) -> RgbImage {
        let t = texture(label);
        let mut case_rng = util::rng(self.seed, &format!("case/{case_id}"));
        let shift: [f32; 3] = std::array::from_fn(|_| case_rng.random_range(-10.0..10.0));
        let mut rng = util::rng(self.seed, &format!("tile/{case_id}/{patch_id}"));
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (s, c) = t.angle.sin_cos();
        let scale = 512.0 / self.tile_size as f32;
        let k = std::f32::consts::TAU / t.period;
        let noise = self.noise;
        RgbImage::from_fn(self.tile_size, self.tile_size, |x, y| {
            let (xf, yf) = (x as f32 * scale, y as f32 * scale);
            let w = 0.5 + 0.5 * ((xf * c + yf * s) * k + phase).sin();
            let n = if noise > 0.0 {
                rng.random_range(-noise..noise)
            } else {
                0.0
            };
            let px = |i: usize| {
                let v = t.base[i] * (1.0 - w) + t.accent[i] * w + shift[i] + n;
                v.clamp(0.0, 255.0) as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }
}

impl PatchStore for SyntheticStore {
    fn load(&self, case: &Case, patch_id: &str) -> Result<RgbImage> {
        Ok(self.render(case.fine_label, &case.case_id, patch_id))
    }
}

/// `cases_per_class` cases of each listed class, each with `tiles_per_case` patches.
pub fn synthetic_cohort(
    classes: &[FineLabel],
    cases_per_class: usize,
    tiles_per_case: usize,
) -> CohortManifest {
    let mut cases = Vec::new();
    for label in classes {
        for i in 0..cases_per_class {
            let id = format!("{label}{i:03}");
            let patches = (0..tiles_per_case).map(|j| format!("{id}_t{j:03}")).collect();
            cases.push(Case {
                case_id: id,
                fine_label: *label,
                source: Source::Local,
                patch_refs: patches,
                subtype: None,
                patch_dir: None,
            });
        }
    }
    CohortManifest::new(cases).expect("synthetic ids are unique")
}

/// A white square of side `side` at (`row`, `col`) on a dark textured background.
pub fn bright_square(size: u32, row: u32, col: u32, side: u32, seed: u64) -> RgbImage {
    let mut rng = util::rng(seed, "square");
    RgbImage::from_fn(size, size, |x, y| {
        if y >= row && y < row + side && x >= col && x < col + side {
            Rgb([250, 250, 250])
        } else {
            let v: u8 = rng.random_range(40..90);
            Rgb([v, v / 2 + 10, v + 20])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_regenerate_identically() {
        let s = SyntheticStore::new(64, 1);
        let m = synthetic_cohort(&[FineLabel::G, FineLabel::M], 2, 3);
        let c = &m.cases[0];
        assert_eq!(s.load(c, &c.patch_refs[0]).unwrap(), s.load(c, &c.patch_refs[0]).unwrap());
        assert_ne!(s.load(c, &c.patch_refs[0]).unwrap(), s.load(c, &c.patch_refs[1]).unwrap());
        assert_eq!(m.cases.len(), 4);
        assert_eq!(m.class_counts[&FineLabel::M], 2);
    }
}
