//! Train a probe to spot a bright square, then render the 2×2 saliency panel of a
//! fresh tile as PNG overlays.

use image::RgbImage;
use pathprobe::cohort::{Case, FineLabel};
use pathprobe::data::PatchStore;
use pathprobe::encoder::{build_condition, toy_spec, Condition, Family};
use pathprobe::saliency::subpatch_panel;
use pathprobe::synthetic::bright_square;
use pathprobe::trainer::train_fold;

/// Gliomas carry a bright square; meningiomas are plain noise.
struct Squares;

impl PatchStore for Squares {
    fn load(&self, case: &Case, patch: &str) -> pathprobe::Result<RgbImage> {
        let n: u32 = patch[1..].parse().unwrap_or(0);
        let side = if case.fine_label == FineLabel::G { 128 } else { 0 };
        Ok(bright_square(256, n * 37 % 128, n * 91 % 128, side, n as u64 + case.case_id.len() as u64 * 100))
    }
}

fn main() -> pathprobe::Result<()> {
    let case = |id: &str, l| Case::new(id, l, (0..30).map(|i| format!("p{i}")).collect());
    let train = [case("g1", FineLabel::G), case("m1", FineLabel::M), case("g22", FineLabel::G), case("m22", FineLabel::M)];
    let val = [case("g333", FineLabel::G), case("m333", FineLabel::M)];
    let cfg = build_condition(&toy_spec("toy", Family::CnnClass, 16, 3), Condition::Lp)?
        .with_augment(false)
        .with_patch_limit(30);
    let model = train_fold(&cfg, &train, &val, &Squares, None)?.classifier;

    // One square in the lower-right quadrant of a 512 px tile.
    let tile = bright_square(512, 300, 300, 160, 9);
    let out = std::env::temp_dir().join("pathprobe-gradcam");
    std::fs::create_dir_all(&out).expect("output dir");
    let panel = subpatch_panel(&tile, &model, Some(FineLabel::G))?;
    for (i, sp) in panel.iter().enumerate() {
        println!("quadrant {:?}: P(G) {:.3}", sp.origin, sp.probabilities[FineLabel::G.index()]);
        sp.saliency.overlay(&sp.input.to_rgb(), 0.5).save(out.join(format!("q{i}.png")))?;
    }
    // The square sits at (44, 44) with side 160 inside the 256 px lower-right quadrant.
    let s = 224.0 / 256.0;
    let px = |v: f64| (v * s) as usize;
    let (inside, outside) = panel[3].saliency.mass_inside(224, px(44.0), px(44.0), px(160.0));
    println!("lower-right saliency inside the square: {:.0}%", 100.0 * inside / (inside + outside));
    println!("overlays in {}", out.display());
    Ok(())
}
