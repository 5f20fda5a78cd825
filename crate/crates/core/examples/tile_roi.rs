//! Cut a region of interest into 512 px tiles at the reference scale and drop the
//! mostly-white ones.
//!
//! ```text
//! cargo run --example tile_roi
//! ```

use image::{Rgb, RgbImage};
use pathprobe::cohort::FineLabel;
use pathprobe::synthetic::SyntheticStore;
use pathprobe::tiler::{filter_tiles, tile_roi, white_fraction, RoiImage, DEFAULT_WHITE_THRESHOLD};

fn main() -> pathprobe::Result<()> {
    // A 0.25 µm/px scan: 2048 px cover the same tissue as ~1164 px at 0.44 µm/px.
    let store = SyntheticStore::new(1024, 7);
    let mut pixels = RgbImage::from_pixel(2048, 2048, Rgb([245, 245, 245]));
    for (i, (y, x)) in [(0, 0), (0, 1024), (1024, 0)].into_iter().enumerate() {
        let t = store.render(FineLabel::A, "roi", &format!("q{i}"));
        image::imageops::replace(&mut pixels, &t, x, y);
    }
    let roi = RoiImage::new(pixels, 0.25)?.rescale_to(0.44);
    println!("rescaled ROI: {:?}", roi.pixels.dimensions());

    let tiles = tile_roi(&roi, 512, FineLabel::A)?;
    for t in &tiles {
        println!("tile at {:?}: white fraction {:.2}", t.origin, white_fraction(&t.pixels));
    }
    let kept = filter_tiles(tiles, DEFAULT_WHITE_THRESHOLD);
    println!("{} tiles kept", kept.len());
    Ok(())
}
