//! ROI tiling, the white-area filter and ImageNet-style input normalization.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::cohort::FineLabel;
use crate::error::{Error, IoContext, Result};
use crate::util;

pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const MIN_TILE_SIZE: u32 = 512;
pub const INPUT_SIZE: usize = 224;
/// Scan resolution the models were trained at (20x, ~440 nm/px).
pub const REFERENCE_MICRONS_PER_PIXEL: f64 = 0.44;
pub const WHITE_LEVEL: u8 = 230;
pub const DEFAULT_WHITE_THRESHOLD: f64 = 0.40;
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// An exported region of interest with its physical scale.
#[derive(Debug, Clone)]
pub struct RoiImage {
    pub pixels: RgbImage,
    pub microns_per_pixel: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct RoiSidecar {
    microns_per_pixel: f64,
}

impl RoiImage {
    pub fn new(pixels: RgbImage, microns_per_pixel: f64) -> Result<Self> {
        if !(microns_per_pixel > 0.0 && microns_per_pixel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "microns_per_pixel must be positive, got {microns_per_pixel}"
            )));
        }
        Ok(RoiImage {
            pixels,
            microns_per_pixel,
        })
    }

    /// Opens a PNG/TIFF export. The scale comes from a `<image>.json` sidecar
    /// (`{"microns_per_pixel": 0.44}`); without one the reference scale is assumed.
    pub fn open(path: &Path) -> Result<Self> {
        let pixels = image::open(path)?.to_rgb8();
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".json");
        let sidecar = std::path::PathBuf::from(sidecar);
        let mpp = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar).at(&sidecar)?;
            serde_json::from_str::<RoiSidecar>(&text)?.microns_per_pixel
        } else {
            log::warn!(
                "{}: no scale sidecar, assuming {REFERENCE_MICRONS_PER_PIXEL} um/px",
                path.display()
            );
            REFERENCE_MICRONS_PER_PIXEL
        };
        RoiImage::new(pixels, mpp)
    }

    /// Resamples so one pixel covers `target_mpp` microns.
    pub fn rescale_to(&self, target_mpp: f64) -> RoiImage {
        let factor = self.microns_per_pixel / target_mpp;
        if (factor - 1.0).abs() < 1e-9 {
            return self.clone();
        }
        let w = ((f64::from(self.pixels.width()) * factor).round() as u32).max(1);
        let h = ((f64::from(self.pixels.height()) * factor).round() as u32).max(1);
        RoiImage {
            pixels: imageops::resize(&self.pixels, w, h, FilterType::Triangle),
            microns_per_pixel: target_mpp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub pixels: RgbImage,
    /// (row, col) of the top-left pixel in ROI coordinates.
    pub origin: (u32, u32),
    pub label: FineLabel,
}

impl Tile {
    pub fn size(&self) -> u32 {
        self.pixels.width()
    }

    pub fn model_input(&self) -> ModelInput {
        to_model_input(&self.pixels)
    }
}

/// Cuts a non-overlapping row-major grid of `tile_size` squares; partial edge tiles
/// are dropped.
pub fn tile_roi(roi: &RoiImage, tile_size: u32, label: FineLabel) -> Result<Vec<Tile>> {
    if tile_size < MIN_TILE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "tile size must be >= {MIN_TILE_SIZE}, got {tile_size}"
        )));
    }
    let (w, h) = roi.pixels.dimensions();
    let rows = h / tile_size;
    let cols = w / tile_size;
    if rows == 0 || cols == 0 {
        log::warn!("ROI {w}x{h} is smaller than one {tile_size}px tile");
        return Ok(Vec::new());
    }
    let mut tiles = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r * tile_size, c * tile_size);
            let pixels = imageops::crop_imm(&roi.pixels, x, y, tile_size, tile_size).to_image();
            tiles.push(Tile {
                pixels,
                origin: (y, x),
                label,
            });
        }
    }
    Ok(tiles)
}

/// A pixel is white when every channel is at least 230.
pub fn is_white(p: &image::Rgb<u8>) -> bool {
    p.0.iter().all(|v| *v >= WHITE_LEVEL)
}

pub fn white_fraction(image: &RgbImage) -> f64 {
    let total = u64::from(image.width()) * u64::from(image.height());
    if total == 0 {
        return 0.0;
    }
    let white = image.pixels().filter(|p| is_white(p)).count() as f64;
    white / total as f64
}

/// Drops tiles whose white fraction strictly exceeds `threshold`. Background tiles
/// are never filtered.
pub fn filter_tiles(tiles: Vec<Tile>, threshold: f64) -> Vec<Tile> {
    tiles
        .into_iter()
        .filter(|t| t.label == FineLabel::B || white_fraction(&t.pixels) <= threshold)
        .collect()
}

/// A normalized 224×224 RGB network input, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    data: Vec<f32>,
}

impl ModelInput {
    pub const LEN: usize = 3 * INPUT_SIZE * INPUT_SIZE;

    pub fn from_chw(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::ShapeMismatch {
                expected: Self::LEN,
                actual: data.len(),
            });
        }
        Ok(ModelInput { data })
    }

    pub fn zeros() -> Self {
        ModelInput {
            data: vec![0.0; Self::LEN],
        }
    }

    /// Shape as (height, width, channels).
    pub fn shape(&self) -> (usize, usize, usize) {
        (INPUT_SIZE, INPUT_SIZE, 3)
    }

    pub fn as_chw(&self) -> &[f32] {
        &self.data
    }

    pub fn as_chw_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * INPUT_SIZE + y) * INPUT_SIZE + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = INPUT_SIZE * INPUT_SIZE;
        &self.data[c * n..(c + 1) * n]
    }

    /// Back to [0,1] intensities, channel-major.
    pub fn denormalize(&self) -> Vec<f32> {
        let n = INPUT_SIZE * INPUT_SIZE;
        self.data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / n;
                v * STD[c] + MEAN[c]
            })
            .collect()
    }

    pub fn from_unit(unit_chw: &[f32]) -> Result<Self> {
        let n = INPUT_SIZE * INPUT_SIZE;
        let data = unit_chw
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / n;
                (v - MEAN[c]) / STD[c]
            })
            .collect();
        ModelInput::from_chw(data)
    }

    /// Renders the de-normalized input back to 8-bit RGB.
    pub fn to_rgb(&self) -> RgbImage {
        let unit = self.denormalize();
        let n = INPUT_SIZE * INPUT_SIZE;
        RgbImage::from_fn(INPUT_SIZE as u32, INPUT_SIZE as u32, |x, y| {
            let i = y as usize * INPUT_SIZE + x as usize;
            let px = |c: usize| (unit[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Resizes to 224×224 (bilinear), scales to [0,1] and standardizes per channel.
pub fn to_model_input(image: &RgbImage) -> ModelInput {
    let s = INPUT_SIZE as u32;
    let resized;
    let src = if image.dimensions() == (s, s) {
        image
    } else {
        resized = imageops::resize(image, s, s, FilterType::Triangle);
        &resized
    };
    let n = INPUT_SIZE * INPUT_SIZE;
    let mut data = vec![0.0f32; 3 * n];
    for (i, p) in src.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = (f32::from(p.0[c]) / 255.0 - MEAN[c]) / STD[c];
        }
    }
    ModelInput { data }
}

/// One row of the tile index written next to exported tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileIndexRow {
    pub tile_id: String,
    pub row: u32,
    pub col: u32,
    pub white_fraction: f64,
    pub kept: bool,
}

/// Tiles `roi`, writes the kept tiles as `{case_id}_{row}_{col}.png` (grid indices)
/// and returns index rows for every tile, kept or not.
pub fn export_tiles(
    roi: &RoiImage,
    case_id: &str,
    label: FineLabel,
    tile_size: u32,
    threshold: f64,
    out_dir: &Path,
) -> Result<Vec<TileIndexRow>> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut rows = Vec::new();
    for tile in tile_roi(roi, tile_size, label)? {
        let (r, c) = (tile.origin.0 / tile_size, tile.origin.1 / tile_size);
        let tile_id = format!("{case_id}_{r}_{c}");
        let wf = white_fraction(&tile.pixels);
        let kept = label == FineLabel::B || wf <= threshold;
        if kept {
            let path = out_dir.join(format!("{tile_id}.png"));
            tile.pixels.save(&path)?;
        }
        rows.push(TileIndexRow {
            tile_id,
            row: tile.origin.0,
            col: tile.origin.1,
            white_fraction: wf,
            kept,
        });
    }
    Ok(rows)
}

pub fn write_tile_index(rows: &[TileIndexRow], path: &Path) -> Result<()> {
    let mut out = String::from("tile_id\trow\tcol\twhite_fraction\tkept\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\n",
            r.tile_id, r.row, r.col, r.white_fraction, r.kept
        ));
    }
    util::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: u32, h: u32, rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(rgb))
    }

    fn roi(w: u32, h: u32) -> RoiImage {
        RoiImage::new(solid(w, h, [120, 60, 140]), 0.44).unwrap()
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_roi(&roi(1024, 1024), 512, FineLabel::G).unwrap().len(), 4);
        // 1100 wide, 600 tall: 2 columns, 1 row.
        let t = tile_roi(&roi(1100, 600), 512, FineLabel::G).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].origin, (0, 512));
        // Mean local ROI size: floor(3563/512) * floor(2001/512) = 6 * 3.
        assert_eq!(tile_roi(&roi(3563, 2001), 512, FineLabel::G).unwrap().len(), 18);
        assert!(tile_roi(&roi(300, 900), 512, FineLabel::G).unwrap().is_empty());
        assert!(tile_roi(&roi(1024, 1024), 256, FineLabel::G).is_err());
    }

    #[test]
    fn tiles_are_row_major_and_inside() {
        let mut img = RgbImage::new(1536, 1024);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x / 512) as u8, (y / 512) as u8, 0]);
        }
        let r = RoiImage::new(img, 0.44).unwrap();
        let tiles = tile_roi(&r, 512, FineLabel::A).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| t.origin).collect();
        assert_eq!(
            origins,
            vec![(0, 0), (0, 512), (0, 1024), (512, 0), (512, 512), (512, 1024)]
        );
        for t in &tiles {
            let p = t.pixels.get_pixel(0, 0).0;
            assert_eq!((p[1] as u32 * 512, p[0] as u32 * 512), t.origin);
        }
    }

    #[test]
    fn white_rule() {
        assert_eq!(white_fraction(&solid(8, 8, [255, 255, 255])), 1.0);
        assert_eq!(white_fraction(&solid(8, 8, [0, 0, 0])), 0.0);
        assert_eq!(white_fraction(&solid(8, 8, [240, 240, 229])), 0.0);
        assert_eq!(white_fraction(&solid(8, 8, [230, 230, 230])), 1.0);
    }

    fn tile_with_white(frac_percent: u32, label: FineLabel) -> Tile {
        // 10x10 = 100 pixels, so each percent is one pixel.
        let mut img = solid(10, 10, [100, 50, 120]);
        for i in 0..frac_percent {
            img.put_pixel(i % 10, i / 10, image::Rgb([250, 250, 250]));
        }
        Tile {
            pixels: img,
            origin: (0, 0),
            label,
        }
    }

    #[test]
    fn filter_threshold_is_strict() {
        let kept = filter_tiles(vec![tile_with_white(40, FineLabel::G)], 0.40);
        assert_eq!(kept.len(), 1);
        let kept = filter_tiles(vec![tile_with_white(41, FineLabel::G)], 0.40);
        assert!(kept.is_empty());
        let kept = filter_tiles(vec![tile_with_white(90, FineLabel::B)], 0.40);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn normalization_values() {
        let r = (0.485f32 * 255.0).round() as u8;
        // 124/255 is 0.48627, so the R plane lands near, not exactly at, zero.
        let input = to_model_input(&solid(512, 512, [r, 0, 255]));
        assert_eq!(input.shape(), (224, 224, 3));
        assert!(input.plane(0).iter().all(|v| v.abs() < 0.01));
        assert!((input.get(3, 5, 1) - (-0.456 / 0.224)).abs() < 1e-5);
        assert!((input.get(100, 100, 2) - (1.0 - 0.406) / 0.225).abs() < 1e-5);

        let white = to_model_input(&solid(224, 224, [255, 255, 255]));
        assert!((white.get(0, 0, 0) - 2.2489).abs() < 1e-4);
        let black = to_model_input(&solid(224, 224, [0, 0, 0]));
        assert!((black.get(0, 0, 0) + 2.1179).abs() < 1e-4);
    }

    #[test]
    fn exact_mean_cancels() {
        let unit = vec![0.485f32; ModelInput::LEN];
        let m = ModelInput::from_unit(&unit).unwrap();
        assert!(m.plane(0).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rescale_changes_pixel_count() {
        let r = RoiImage::new(solid(1000, 500, [1, 2, 3]), 0.22).unwrap();
        let s = r.rescale_to(0.44);
        assert_eq!(s.pixels.dimensions(), (500, 250));
        assert!(RoiImage::new(solid(4, 4, [0, 0, 0]), 0.0).is_err());
    }

    #[test]
    fn export_writes_kept_tiles_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = solid(1024, 512, [90, 40, 110]);
        for y in 0..512 {
            for x in 512..1024 {
                img.put_pixel(x, y, image::Rgb([245, 245, 245]));
            }
        }
        let r = RoiImage::new(img, 0.44).unwrap();
        let rows = export_tiles(&r, "c7", FineLabel::G, 512, 0.4, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].kept && !rows[1].kept);
        assert!(dir.path().join("c7_0_0.png").exists());
        assert!(!dir.path().join("c7_0_1.png").exists());
        write_tile_index(&rows, &dir.path().join("index.tsv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("index.tsv")).unwrap();
        assert!(text.contains("c7_0_1\t0\t512\t1.000000\tfalse"));
    }
}
