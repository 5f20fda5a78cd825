//! GradCAM on the encoder's final feature stage and four-subpatch panels.

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::cohort::FineLabel;
use crate::encoder::{Classifier, Tap};
use crate::error::{Error, Result};
use crate::tiler::{to_model_input, ModelInput, INPUT_SIZE};

/// Smallest tile that can be quartered without upsampling past 2x.
pub const MIN_PANEL_TILE: u32 = 448;

/// Normalized class-activation grid, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub target: FineLabel,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Bilinear upsampling to `size`×`size` with pixel-center alignment.
    pub fn upsample(&self, size: usize) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; size * size];
        for oy in 0..size {
            let fy = ((oy as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..size {
                let fx = ((ox as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(w - 1);
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bot = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out[oy * size + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
        out
    }

    /// Jet-colored heat map at `size`×`size`.
    pub fn heatmap(&self, size: u32) -> RgbImage {
        let up = self.upsample(size as usize);
        RgbImage::from_fn(size, size, |x, y| jet(up[(y * size + x) as usize]))
    }

    /// PNG bytes of [`SaliencyMap::heatmap`].
    pub fn heatmap_png(&self, size: u32) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.heatmap(size).write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// `image` blended with the heat map; `alpha` 0 leaves it unchanged, 1 shows the map only.
    pub fn overlay(&self, image: &RgbImage, alpha: f64) -> RgbImage {
        let alpha = alpha.clamp(0.0, 1.0);
        let (w, h) = image.dimensions();
        let heat = imageops::resize(&self.heatmap(INPUT_SIZE as u32), w, h, imageops::FilterType::Triangle);
        RgbImage::from_fn(w, h, |x, y| {
            let (a, b) = (image.get_pixel(x, y), heat.get_pixel(x, y));
            Rgb(std::array::from_fn(|c| {
                (a[c] as f64 * (1.0 - alpha) + b[c] as f64 * alpha).round() as u8
            }))
        })
    }

    /// Saliency summed inside and outside the square `[y0, y0+side) × [x0, x0+side)`,
    /// measured on the map upsampled to `size`.
    pub fn mass_inside(&self, size: usize, y0: usize, x0: usize, side: usize) -> (f64, f64) {
        let up = self.upsample(size);
        let mut inside = 0.0;
        let mut total = 0.0;
        for y in 0..size {
            for x in 0..size {
                let v = up[y * size + x];
                total += v;
                if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                    inside += v;
                }
            }
        }
        (inside, total - inside)
    }
}

fn jet(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| ((1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

/// GradCAM from tap activations and the gradient of the target score with respect
/// to them: channel weights are the gradients averaged over positions, the map is
/// the ReLU of the weighted channel sum, min-max normalized. A class token is
/// dropped before reshaping to the spatial grid.
pub fn gradcam_from_tap(tap: &Tap, gradients: &[f64], target: FineLabel) -> Result<SaliencyMap> {
    let c = tap.channels;
    let positions = tap.layout.positions();
    if tap.values.len() != positions * c {
        return Err(Error::ShapeMismatch {
            expected: positions * c,
            actual: tap.values.len(),
        });
    }
    if gradients.len() != tap.values.len() {
        return Err(Error::ShapeMismatch {
            expected: tap.values.len(),
            actual: gradients.len(),
        });
    }
    let (h, w) = tap.layout.grid()?;
    let offset = tap.layout.spatial_offset();
    let spatial = h * w;

    let mut alpha = vec![0.0; c];
    for p in offset..offset + spatial {
        for (ch, a) in alpha.iter_mut().enumerate() {
            *a += gradients[p * c + ch];
        }
    }
    alpha.iter_mut().for_each(|a| *a /= spatial as f64);

    let mut values: Vec<f64> = (offset..offset + spatial)
        .map(|p| {
            let act = &tap.values[p * c..(p + 1) * c];
            act.iter().zip(&alpha).map(|(a, w)| a * w).sum::<f64>().max(0.0)
        })
        .collect();
    normalize(&mut values);
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
        target,
    })
}

/// Min-max scaling to [0, 1]. An all-zero map stays zero; a constant positive map
/// becomes all ones.
fn normalize(values: &mut [f64]) {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range <= 0.0 {
        values.iter_mut().for_each(|v| *v = 1.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - min) / range);
    }
}

/// GradCAM of `target`'s logit for one input.
pub fn gradcam(classifier: &Classifier, input: &ModelInput, target: FineLabel) -> Result<SaliencyMap> {
    let pass = classifier.encoder.forward(input)?;
    let head = &classifier.head;
    let t = target.index();
    let grad_features: Vec<f64> = (0..head.feature_dim()).map(|f| head.weight(f, t)).collect();
    let grads = classifier.encoder.tap_gradient(&pass, &grad_features)?;
    gradcam_from_tap(&pass.tap, &grads, target)
}

/// One quadrant of a panel.
#[derive(Debug, Clone)]
pub struct Subpatch {
    /// (row, col) of the quadrant's top-left corner in the tile.
    pub origin: (u32, u32),
    pub input: ModelInput,
    pub probabilities: Vec<f64>,
    pub saliency: SaliencyMap,
}

/// Splits a tile into 2×2 equal quadrants and classifies each; saliency targets
/// `target`, or each quadrant's own top class.
pub fn subpatch_panel(
    tile: &RgbImage,
    classifier: &Classifier,
    target: Option<FineLabel>,
) -> Result<Vec<Subpatch>> {
    let (w, h) = tile.dimensions();
    if w != h {
        return Err(Error::InvalidArgument(format!("tile must be square, got {w}x{h}")));
    }
    if w < MIN_PANEL_TILE {
        return Err(Error::InvalidArgument(format!(
            "tile of {w}px is below the {MIN_PANEL_TILE}px panel minimum"
        )));
    }
    let half = w / 2;
    quadrants(tile, half)
        .into_iter()
        .map(|(origin, img)| {
            let input = to_model_input(&img);
            let probabilities = classifier.predict(&input)?;
            let t = target.unwrap_or_else(|| {
                FineLabel::from_index(crate::util::argmax(&probabilities)).expect("six classes")
            });
            let saliency = gradcam(classifier, &input, t)?;
            Ok(Subpatch {
                origin,
                input,
                probabilities,
                saliency,
            })
        })
        .collect()
}

/// The four `half`-sized quadrants of `image` in row-major order.
pub(crate) fn quadrants(image: &RgbImage, half: u32) -> Vec<((u32, u32), RgbImage)> {
    [(0, 0), (0, half), (half, 0), (half, half)]
        .into_iter()
        .map(|(r, c)| ((r, c), imageops::crop_imm(image, c, r, half, half).to_image()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{attach_head, toy_encoder, TapLayout, NUM_CLASSES};
    use crate::synthetic::SyntheticStore;

    fn tap2x2(values: Vec<f64>, channels: usize) -> Tap {
        Tap {
            layout: TapLayout::SpatialMap { height: 2, width: 2 },
            channels,
            values,
        }
    }

    #[test]
    fn hand_computed_single_channel() {
        let tap = tap2x2(vec![1.0, 0.0, 0.0, 0.0], 1);
        let m = gradcam_from_tap(&tap, &[1.0; 4], FineLabel::G).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!((m.height, m.width), (2, 2));
    }

    #[test]
    fn vanishing_or_negative_weights_give_zero_map() {
        let tap = tap2x2(vec![0.3, 1.0, 0.2, 0.5, 0.9, 0.1, 0.0, 0.7], 2);
        assert!(gradcam_from_tap(&tap, &[0.0; 8], FineLabel::A).unwrap().is_zero());
        assert!(gradcam_from_tap(&tap, &[-1.0; 8], FineLabel::A).unwrap().is_zero());
    }

    #[test]
    fn constant_positive_map_is_all_ones() {
        let tap = tap2x2(vec![2.0; 4], 1);
        let m = gradcam_from_tap(&tap, &[0.5; 4], FineLabel::O).unwrap();
        assert_eq!(m.values, vec![1.0; 4]);
    }

    #[test]
    fn gradient_scale_cancels() {
        let tap = tap2x2(vec![0.3, 1.0, 0.2, 0.5, 0.9, 0.1, 0.0, 0.7], 2);
        let g = [0.2, -0.1, 0.4, 0.3, 0.1, 0.0, 0.5, 0.2];
        let a = gradcam_from_tap(&tap, &g, FineLabel::M).unwrap();
        let scaled: Vec<f64> = g.iter().map(|v| v * 8.0).collect();
        assert_eq!(a, gradcam_from_tap(&tap, &scaled, FineLabel::M).unwrap());
        let odd: Vec<f64> = g.iter().map(|v| v * 3.7).collect();
        let b = gradcam_from_tap(&tap, &odd, FineLabel::M).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn class_token_is_dropped() {
        let mut values = vec![100.0];
        values.extend([1.0, 0.0, 0.0, 0.5]);
        let tap = Tap {
            layout: TapLayout::TokenGrid {
                tokens: 5,
                class_token: true,
            },
            channels: 1,
            values,
        };
        let m = gradcam_from_tap(&tap, &[1.0; 5], FineLabel::G).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, 0.5]);
        assert!(gradcam_from_tap(&tap, &[1.0; 4], FineLabel::G).is_err());
    }

    #[test]
    fn toy_maps_match_tap_grid() {
        let enc = toy_encoder(6, 2).unwrap();
        let head = attach_head(6, NUM_CLASSES, 2).unwrap();
        let clf = Classifier::new(Box::new(enc), head).unwrap();
        let img = SyntheticStore::new(224, 0).render(FineLabel::G, "c", "p");
        let m = gradcam(&clf, &to_model_input(&img), FineLabel::G).unwrap();
        assert_eq!((m.height, m.width), (14, 14));
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.is_zero() || m.values.iter().cloned().fold(0.0, f64::max) == 1.0);

        let vit = crate::encoder::toy_encoder_for(
            &crate::encoder::toy_spec("v", crate::encoder::Family::VitClass, 6, 1),
            1,
        )
        .unwrap();
        let clf = Classifier::new(vit, attach_head(6, NUM_CLASSES, 3).unwrap()).unwrap();
        let m = gradcam(&clf, &to_model_input(&img), FineLabel::G).unwrap();
        assert_eq!((m.height, m.width), (14, 14));
        assert_eq!(clf.encoder.spec().tap.positions(), 197);
    }

    #[test]
    fn panel_quarters_tiles() {
        let enc = toy_encoder(4, 0).unwrap();
        let clf = Classifier::new(Box::new(enc), attach_head(4, NUM_CLASSES, 0).unwrap()).unwrap();
        let tile = RgbImage::from_pixel(512, 512, Rgb([180, 90, 160]));
        let panel = subpatch_panel(&tile, &clf, None).unwrap();
        assert_eq!(panel.len(), 4);
        assert_eq!(panel[3].origin, (256, 256));
        for s in &panel {
            assert!((s.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in s.probabilities.iter().zip(&panel[0].probabilities) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let small = RgbImage::new(400, 400);
        assert!(subpatch_panel(&small, &clf, None).is_err());
    }

    #[test]
    fn overlay_endpoints() {
        let m = SaliencyMap {
            height: 2,
            width: 2,
            values: vec![1.0, 0.0, 0.0, 0.5],
            target: FineLabel::G,
        };
        let img = RgbImage::from_pixel(32, 32, Rgb([10, 200, 30]));
        assert_eq!(m.overlay(&img, 0.0), img);
        let full = m.overlay(&img, 1.0);
        let heat = imageops::resize(&m.heatmap(224), 32, 32, imageops::FilterType::Triangle);
        assert_eq!(full, heat);
        let png = m.heatmap_png(64).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        let up = m.upsample(4);
        assert_eq!(up[0], 1.0);
    }
}
