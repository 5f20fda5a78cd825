//! Desk-scale encoders used in place of the large pretrained backbones.
//!
//! `ToyCnn` is a two-layer convolutional net with a 14×14 spatial tap and global
//! average pooling. `ToyVit` embeds 16×16 patches into tokens and pools them into a
//! class token, giving a 197-token tap. Both are deterministic given their seed.

use rand_distr::{Distribution, Normal};

use super::{
    Encoder, EncoderPass, EncoderSpec, EncoderWeights, Family, Tap, TapLayout, WeightsSource,
};
use crate::error::{Error, Result};
use crate::tiler::{ModelInput, INPUT_SIZE};
use crate::util;

const STEM: usize = 8;
const S1: usize = INPUT_SIZE / STEM; // 28
const S2: usize = S1 / 2; // 14
const HIDDEN: usize = 12;
const GRID: usize = 14;
const PATCH: usize = INPUT_SIZE / GRID; // 16
const PATCH_POOL: usize = 4;
const PATCH_DIM: usize = 3 * (PATCH / PATCH_POOL) * (PATCH / PATCH_POOL); // 48

fn he_init(rng: &mut rand_chacha::ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Averages `k×k` blocks of every channel of the input.
fn block_mean(input: &ModelInput, k: usize) -> Vec<f64> {
    let n = INPUT_SIZE;
    let m = n / k;
    let mut out = vec![0.0; 3 * m * m];
    let chw = input.as_chw();
    let scale = 1.0 / (k * k) as f64;
    for c in 0..3 {
        for y in 0..n {
            let row = &chw[(c * n + y) * n..(c * n + y + 1) * n];
            let oy = y / k;
            for (x, v) in row.iter().enumerate() {
                out[(c * m + oy) * m + x / k] += f64::from(*v) * scale;
            }
        }
    }
    out
}

/// Two-layer convolutional toy encoder (CNN family).
#[derive(Debug, Clone)]
pub struct ToyCnn {
    spec: EncoderSpec,
    /// conv1 w `[HIDDEN][3][3][3]`, conv1 b, conv2 w `[F][HIDDEN][3][3]`, conv2 b.
    groups: Vec<Vec<f64>>,
}

struct CnnCache {
    stem: Vec<f64>,
    pre1: Vec<f64>,
    pooled: Vec<f64>,
    act2: Vec<f64>,
}

/// 3×3 same-padding convolution, channel-major in and out.
fn conv3x3(input: &[f64], cin: usize, size: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * size * size];
    for o in 0..cout {
        let plane = &mut out[o * size * size..(o + 1) * size * size];
        plane.fill(b[o]);
        for c in 0..cin {
            let src = &input[c * size * size..(c + 1) * size * size];
            let k = &w[(o * cin + c) * 9..(o * cin + c + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..size {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= size as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * size..(sy as usize + 1) * size];
                        let drow = &mut plane[y * size..(y + 1) * size];
                        let (x0, x1) = match kx {
                            0 => (1, size),
                            1 => (0, size),
                            _ => (0, size - 1),
                        };
                        for x in x0..x1 {
                            drow[x] += wv * srow[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3`]: accumulates weight/bias grads and returns the input grad.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    size: usize,
    w: &[f64],
    grad_out: &[f64],
    cout: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let mut gin = if want_input_grad {
        vec![0.0; cin * size * size]
    } else {
        Vec::new()
    };
    for o in 0..cout {
        let go = &grad_out[o * size * size..(o + 1) * size * size];
        gb[o] += go.iter().sum::<f64>();
        for c in 0..cin {
            let src = &input[c * size * size..(c + 1) * size * size];
            let base = (o * cin + c) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in 0..size {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= size as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = match kx {
                            0 => (1, size),
                            1 => (0, size),
                            _ => (0, size - 1),
                        };
                        for x in x0..x1 {
                            let g = go[y * size + x];
                            let sx = x + kx - 1;
                            acc += g * src[sy * size + sx];
                            if want_input_grad {
                                gin[(c * size + sy) * size + sx] += g * wv;
                            }
                        }
                    }
                    gw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
    gin
}

impl ToyCnn {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        if spec.feature_dim < 2 {
            return Err(Error::InvalidArgument("toy encoder needs F >= 2".into()));
        }
        let mut enc = ToyCnn {
            spec,
            groups: Vec::new(),
        };
        enc.init(seed);
        Ok(enc)
    }

    fn init(&mut self, seed: u64) {
        let f = self.spec.feature_dim;
        let mut rng = util::rng(seed, "toy-cnn");
        self.groups = vec![
            he_init(&mut rng, HIDDEN * 27, 27),
            vec![0.0; HIDDEN],
            he_init(&mut rng, f * HIDDEN * 9, HIDDEN * 9),
            vec![0.0; f],
        ];
    }

    pub fn from_weights(spec: EncoderSpec, weights: EncoderWeights) -> Result<Self> {
        let f = spec.feature_dim;
        let sizes = [HIDDEN * 27, HIDDEN, f * HIDDEN * 9, f];
        check_groups("toy-cnn", &weights, &sizes)?;
        Ok(ToyCnn {
            spec,
            groups: weights.groups,
        })
    }
}

fn check_groups(arch: &str, w: &EncoderWeights, sizes: &[usize]) -> Result<()> {
    if w.arch != arch {
        return Err(Error::Format(format!(
            "weights are for `{}`, expected `{arch}`",
            w.arch
        )));
    }
    if w.groups.len() != sizes.len() || w.groups.iter().zip(sizes).any(|(g, s)| g.len() != *s) {
        return Err(Error::Format(format!("{arch} weights have the wrong shape")));
    }
    Ok(())
}

impl Encoder for ToyCnn {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, input: &ModelInput) -> Result<EncoderPass> {
        let f = self.spec.feature_dim;
        let stem = block_mean(input, STEM);
        let pre1 = conv3x3(&stem, 3, S1, &self.groups[0], &self.groups[1], HIDDEN);
        let mut pooled = vec![0.0; HIDDEN * S2 * S2];
        for o in 0..HIDDEN {
            for y in 0..S1 {
                for x in 0..S1 {
                    let v = pre1[(o * S1 + y) * S1 + x].max(0.0);
                    pooled[(o * S2 + y / 2) * S2 + x / 2] += 0.25 * v;
                }
            }
        }
        let mut act2 = conv3x3(&pooled, HIDDEN, S2, &self.groups[2], &self.groups[3], f);
        for v in &mut act2 {
            *v = v.max(0.0);
        }
        let positions = S2 * S2;
        let mut tap = vec![0.0; positions * f];
        let mut features = vec![0.0; f];
        for ch in 0..f {
            let plane = &act2[ch * positions..(ch + 1) * positions];
            for (p, v) in plane.iter().enumerate() {
                tap[p * f + ch] = *v;
            }
            features[ch] = plane.iter().sum::<f64>() / positions as f64;
        }
        Ok(EncoderPass {
            features,
            tap: Tap {
                layout: self.spec.tap,
                channels: f,
                values: tap,
            },
            cache: Box::new(CnnCache {
                stem,
                pre1,
                pooled,
                act2,
            }),
        })
    }

    fn backward(&self, pass: &EncoderPass, grad_features: &[f64], grads: &mut [Vec<f64>]) {
        let cache = pass
            .cache
            .downcast_ref::<CnnCache>()
            .expect("pass produced by ToyCnn");
        let f = self.spec.feature_dim;
        let positions = S2 * S2;
        let mut g2 = vec![0.0; f * positions];
        for ch in 0..f {
            let g = grad_features[ch] / positions as f64;
            for p in 0..positions {
                if cache.act2[ch * positions + p] > 0.0 {
                    g2[ch * positions + p] = g;
                }
            }
        }
        let (gw1, rest) = grads.split_at_mut(1);
        let (gb1, rest) = rest.split_at_mut(1);
        let (gw2, gb2) = rest.split_at_mut(1);
        let gpool = conv3x3_backward(
            &cache.pooled,
            HIDDEN,
            S2,
            &self.groups[2],
            &g2,
            f,
            &mut gw2[0],
            &mut gb2[0],
            true,
        );
        let mut g1 = vec![0.0; HIDDEN * S1 * S1];
        for o in 0..HIDDEN {
            for y in 0..S1 {
                for x in 0..S1 {
                    let i = (o * S1 + y) * S1 + x;
                    if cache.pre1[i] > 0.0 {
                        g1[i] = 0.25 * gpool[(o * S2 + y / 2) * S2 + x / 2];
                    }
                }
            }
        }
        conv3x3_backward(
            &cache.stem,
            3,
            S1,
            &self.groups[0],
            &g1,
            HIDDEN,
            &mut gw1[0],
            &mut gb1[0],
            false,
        );
    }

    fn tap_gradient(&self, pass: &EncoderPass, grad_features: &[f64]) -> Result<Vec<f64>> {
        let f = self.spec.feature_dim;
        if grad_features.len() != f {
            return Err(Error::ShapeMismatch {
                expected: f,
                actual: grad_features.len(),
            });
        }
        let positions = pass.tap.layout.positions();
        let mut g = vec![0.0; positions * f];
        for p in 0..positions {
            for ch in 0..f {
                g[p * f + ch] = grad_features[ch] / positions as f64;
            }
        }
        Ok(g)
    }

    fn params(&self) -> &[Vec<f64>] {
        &self.groups
    }

    fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.groups
    }

    fn reinitialize(&mut self, seed: u64) -> Result<()> {
        self.init(util::derive_seed(seed, "reinit"));
        Ok(())
    }

    fn export_weights(&self) -> EncoderWeights {
        EncoderWeights {
            arch: "toy-cnn".into(),
            feature_dim: self.spec.feature_dim,
            groups: self.groups.clone(),
        }
    }

    fn boxed_clone(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

/// Patch-embedding toy encoder (ViT family) whose features are a pooled class token.
#[derive(Debug, Clone)]
pub struct ToyVit {
    spec: EncoderSpec,
    /// embedding w `[F][48]`, embedding b `[F]`.
    groups: Vec<Vec<f64>>,
}

struct VitCache {
    patches: Vec<f64>,
    tokens: Vec<f64>,
}

impl ToyVit {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        if spec.feature_dim < 2 {
            return Err(Error::InvalidArgument("toy encoder needs F >= 2".into()));
        }
        let mut enc = ToyVit {
            spec,
            groups: Vec::new(),
        };
        enc.init(seed);
        Ok(enc)
    }

    fn init(&mut self, seed: u64) {
        let f = self.spec.feature_dim;
        let mut rng = util::rng(seed, "toy-vit");
        self.groups = vec![he_init(&mut rng, f * PATCH_DIM, PATCH_DIM), vec![0.0; f]];
    }

    pub fn from_weights(spec: EncoderSpec, weights: EncoderWeights) -> Result<Self> {
        let f = spec.feature_dim;
        check_groups("toy-vit", &weights, &[f * PATCH_DIM, f])?;
        Ok(ToyVit {
            spec,
            groups: weights.groups,
        })
    }

    /// Per-patch vectors `[token][48]` from the 4×4-pooled input.
    fn patch_vectors(input: &ModelInput) -> Vec<f64> {
        let m = INPUT_SIZE / PATCH_POOL; // 56
        let pooled = block_mean(input, PATCH_POOL);
        let side = PATCH / PATCH_POOL; // 4
        let mut out = vec![0.0; GRID * GRID * PATCH_DIM];
        for ty in 0..GRID {
            for tx in 0..GRID {
                let t = ty * GRID + tx;
                let mut j = 0;
                for c in 0..3 {
                    for dy in 0..side {
                        for dx in 0..side {
                            out[t * PATCH_DIM + j] =
                                pooled[(c * m + ty * side + dy) * m + tx * side + dx];
                            j += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

impl Encoder for ToyVit {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, input: &ModelInput) -> Result<EncoderPass> {
        let f = self.spec.feature_dim;
        let n = GRID * GRID;
        let patches = Self::patch_vectors(input);
        let (w, b) = (&self.groups[0], &self.groups[1]);
        let mut tokens = vec![0.0; n * f];
        for t in 0..n {
            let v = &patches[t * PATCH_DIM..(t + 1) * PATCH_DIM];
            for ch in 0..f {
                let row = &w[ch * PATCH_DIM..(ch + 1) * PATCH_DIM];
                let z = b[ch] + row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>();
                tokens[t * f + ch] = z.max(0.0);
            }
        }
        let mut cls = vec![0.0; f];
        for t in 0..n {
            for ch in 0..f {
                cls[ch] += tokens[t * f + ch] / n as f64;
            }
        }
        let mut tap = cls.clone();
        tap.extend_from_slice(&tokens);
        Ok(EncoderPass {
            features: cls,
            tap: Tap {
                layout: self.spec.tap,
                channels: f,
                values: tap,
            },
            cache: Box::new(VitCache { patches, tokens }),
        })
    }

    fn backward(&self, pass: &EncoderPass, grad_features: &[f64], grads: &mut [Vec<f64>]) {
        let cache = pass
            .cache
            .downcast_ref::<VitCache>()
            .expect("pass produced by ToyVit");
        let f = self.spec.feature_dim;
        let n = GRID * GRID;
        let (gw, gb) = grads.split_at_mut(1);
        let (gw, gb) = (&mut gw[0], &mut gb[0]);
        for t in 0..n {
            let v = &cache.patches[t * PATCH_DIM..(t + 1) * PATCH_DIM];
            for ch in 0..f {
                if cache.tokens[t * f + ch] <= 0.0 {
                    continue;
                }
                let g = grad_features[ch] / n as f64;
                gb[ch] += g;
                let row = &mut gw[ch * PATCH_DIM..(ch + 1) * PATCH_DIM];
                for (r, x) in row.iter_mut().zip(v) {
                    *r += g * x;
                }
            }
        }
    }

    /// The class token receives the feature gradient directly; each patch token
    /// receives its share through the mean that forms the class token.
    fn tap_gradient(&self, _pass: &EncoderPass, grad_features: &[f64]) -> Result<Vec<f64>> {
        let f = self.spec.feature_dim;
        if grad_features.len() != f {
            return Err(Error::ShapeMismatch {
                expected: f,
                actual: grad_features.len(),
            });
        }
        let n = GRID * GRID;
        let mut g = grad_features.to_vec();
        for _ in 0..n {
            g.extend(grad_features.iter().map(|v| v / n as f64));
        }
        Ok(g)
    }

    fn params(&self) -> &[Vec<f64>] {
        &self.groups
    }

    fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.groups
    }

    fn reinitialize(&mut self, seed: u64) -> Result<()> {
        self.init(util::derive_seed(seed, "reinit"));
        Ok(())
    }

    fn export_weights(&self) -> EncoderWeights {
        EncoderWeights {
            arch: "toy-vit".into(),
            feature_dim: self.spec.feature_dim,
            groups: self.groups.clone(),
        }
    }

    fn boxed_clone(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

/// Spec of a toy CNN-family encoder with `feature_dim` outputs.
pub fn toy_spec(name: &str, family: Family, feature_dim: usize, seed: u64) -> EncoderSpec {
    let tap = match family {
        Family::CnnClass => TapLayout::SpatialMap {
            height: S2,
            width: S2,
        },
        Family::VitClass => TapLayout::TokenGrid {
            tokens: GRID * GRID + 1,
            class_token: true,
        },
    };
    EncoderSpec {
        name: name.to_string(),
        family,
        feature_dim,
        weights: WeightsSource::Pretrained(format!("toy:{seed}")),
        tap,
        reinitializable: true,
    }
}

/// The default desk-scale encoder: a toy CNN with `feature_dim` outputs.
pub fn toy_encoder(feature_dim: usize, seed: u64) -> Result<ToyCnn> {
    ToyCnn::new(toy_spec("toy-cnn", Family::CnnClass, feature_dim, seed), seed)
}

/// A toy encoder matching the family, feature size and tap of `spec`. The tap layout
/// is rewritten to the toy's own.
pub fn toy_encoder_for(spec: &EncoderSpec, seed: u64) -> Result<Box<dyn Encoder>> {
    let mut s = spec.clone();
    s.tap = toy_spec(&s.name, s.family, s.feature_dim, seed).tap;
    Ok(match spec.family {
        Family::CnnClass => Box::new(ToyCnn::new(s, seed)?),
        Family::VitClass => Box::new(ToyVit::new(s, seed)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::to_model_input;

    fn image(seed: u32, brightness: i32) -> ModelInput {
        let img = image::RgbImage::from_fn(224, 224, |x, y| {
            let v = ((x * 7 + y * 13 + seed * 31) % 97) as i32 + 60 + brightness;
            let v = v.clamp(0, 255) as u8;
            image::Rgb([v, v / 2, 255 - v])
        });
        to_model_input(&img)
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = toy_encoder(8, 5).unwrap();
        let b = toy_encoder(8, 5).unwrap();
        let x = image(1, 0);
        let fa = a.features(&x).unwrap();
        assert_eq!(fa, b.features(&x).unwrap());
        assert_eq!(fa.len(), 8);
        let pass = a.forward(&x).unwrap();
        assert_eq!(pass.tap.values.len(), 196 * 8);
        assert!(toy_encoder(1, 0).is_err());
    }

    #[test]
    fn brightness_changes_features() {
        let e = toy_encoder(8, 2).unwrap();
        assert_ne!(
            e.features(&image(3, 0)).unwrap(),
            e.features(&image(3, 40)).unwrap()
        );
        let v = toy_encoder_for(&toy_spec("v", Family::VitClass, 8, 2), 2).unwrap();
        assert_ne!(
            v.features(&image(3, 0)).unwrap(),
            v.features(&image(3, 40)).unwrap()
        );
    }

    /// Central differences on a scalar objective `sum(features * r)`.
    fn check_grads(enc: &mut dyn Encoder) {
        let x = image(9, 10);
        let f = enc.feature_dim();
        let r: Vec<f64> = (0..f).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let obj = |e: &dyn Encoder| -> f64 {
            e.features(&x)
                .unwrap()
                .iter()
                .zip(&r)
                .map(|(a, b)| a * b)
                .sum()
        };
        let pass = enc.forward(&x).unwrap();
        let mut grads: Vec<Vec<f64>> = enc.params().iter().map(|g| vec![0.0; g.len()]).collect();
        enc.backward(&pass, &r, &mut grads);
        let h = 1e-5;
        for gi in 0..grads.len() {
            let len = grads[gi].len();
            for pi in (0..len).step_by((len / 7).max(1)) {
                let orig = enc.params()[gi][pi];
                enc.params_mut()[gi][pi] = orig + h;
                let up = obj(enc);
                enc.params_mut()[gi][pi] = orig - h;
                let down = obj(enc);
                enc.params_mut()[gi][pi] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[gi][pi];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                    "group {gi} idx {pi}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let mut e = toy_encoder(6, 4).unwrap();
        check_grads(&mut e);
    }

    #[test]
    fn vit_gradients_match_finite_differences() {
        let mut e = ToyVit::new(toy_spec("v", Family::VitClass, 6, 4), 4).unwrap();
        check_grads(&mut e);
    }

    #[test]
    fn weights_roundtrip() {
        let e = toy_encoder(4, 1).unwrap();
        let w = e.export_weights();
        let back = ToyCnn::from_weights(e.spec().clone(), w.clone()).unwrap();
        assert_eq!(back.params(), e.params());
        let mut bad = w;
        bad.groups.pop();
        assert!(ToyCnn::from_weights(e.spec().clone(), bad).is_err());
    }

    #[test]
    fn reinitialize_changes_parameters() {
        let mut e = toy_encoder(4, 1).unwrap();
        let before = e.params().to_vec();
        e.reinitialize(1).unwrap();
        assert_ne!(before, e.params());
    }
}
