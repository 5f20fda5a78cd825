//! 2-D feature atlas: a UMAP embedding of pooled encoder features, out-of-sample
//! placement of query features, and a binary container for both.
//!
//! The embedding follows the usual UMAP recipe: exact k-nearest neighbors, smoothed
//! fuzzy memberships, a fuzzy union, the `1 / (1 + a d^2b)` low-dimensional kernel
//! fitted to `min_dist`/`spread`, and SGD with negative sampling from a seeded
//! uniform initialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{cap_patches, Case, FineLabel, Source};
use crate::data::PatchStore;
use crate::encoder::Classifier;
use crate::error::{Error, IoContext, Result};
use crate::tiler::to_model_input;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    /// Optimization epochs; 0 picks 500 for up to 10,000 points and 200 above.
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams {
            n_neighbors: 70,
            min_dist: 0.5,
            spread: 1.0,
            n_epochs: 0,
            negative_sample_rate: 5,
            learning_rate: 1.0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices and distances of the `k` nearest points to each point, self first.
pub fn knn(data: &[Vec<f64>], k: usize) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let n = data.len();
    let mut idx = Vec::with_capacity(n);
    let mut dist = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<(f64, usize)> = (0..n)
            .map(|j| (if i == j { -1.0 } else { sq_dist(&data[i], &data[j]).sqrt() }, j))
            .collect();
        row.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        row.truncate(k);
        row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.push(row.iter().map(|r| r.1).collect());
        dist.push(row.iter().map(|r| r.0.max(0.0)).collect());
    }
    (idx, dist)
}

const SMOOTH_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;

/// Per-point (sigma, rho): rho is the nearest non-self distance and sigma solves
/// `Σ_j exp(-(d_ij - rho) / sigma) = log2(k)` over the non-self neighbors.
pub fn smooth_knn_dist(dists: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let target = (k as f64).log2();
    let mean_all: f64 =
        dists.iter().flat_map(|r| r.iter()).sum::<f64>() / dists.iter().map(|r| r.len()).sum::<usize>().max(1) as f64;
    let mut sigmas = Vec::with_capacity(dists.len());
    let mut rhos = Vec::with_capacity(dists.len());
    for row in dists {
        let rho = row.iter().skip(1).cloned().find(|d| *d > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut mid) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let psum: f64 = row
                .iter()
                .skip(1)
                .map(|d| {
                    let x = d - rho;
                    if x > 0.0 {
                        (-x / mid).exp()
                    } else {
                        1.0
                    }
                })
                .sum();
            if (psum - target).abs() < SMOOTH_TOLERANCE {
                break;
            }
            if psum > target {
                hi = mid;
                mid = (lo + hi) / 2.0;
            } else {
                lo = mid;
                mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
            }
        }
        let mean_i = row.iter().sum::<f64>() / row.len() as f64;
        let floor = if rho > 0.0 { MIN_K_DIST_SCALE * mean_i } else { MIN_K_DIST_SCALE * mean_all };
        sigmas.push(mid.max(floor));
        rhos.push(rho);
    }
    (sigmas, rhos)
}

/// Symmetric fuzzy graph as (i, j, weight) with i < j.
fn fuzzy_graph(idx: &[Vec<usize>], dists: &[Vec<f64>], sigmas: &[f64], rhos: &[f64]) -> Vec<(usize, usize, f64)> {
    use std::collections::BTreeMap;
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..idx.len() {
        for (&j, &d) in idx[i].iter().zip(&dists[i]) {
            if i == j {
                continue;
            }
            let w = if d - rhos[i] <= 0.0 || sigmas[i] == 0.0 {
                1.0
            } else {
                (-(d - rhos[i]) / sigmas[i]).exp()
            };
            directed.insert((i, j), w);
        }
    }
    let mut out = Vec::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        if i < j || back == 0.0 {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            let v = w + back - w * back;
            if v > 0.0 {
                out.push((a, b, v));
            }
        }
    }
    out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    out
}

/// Fits `1 / (1 + a x^(2b))` to the offset-exponential target curve with
/// Levenberg-Marquardt on 300 points over `[0, 3 spread]`.
pub fn find_ab_params(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let resid = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut cost = resid(a, b);
    for _ in 0..500 {
        // J^T J and J^T r
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let g = 1.0 / (1.0 + a * p);
            let r = g - y;
            let da = -p * g * g;
            let db = -a * p * 2.0 * x.ln() * g * g;
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let (m11, m22) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m11 * m22 - jab * jab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let sa = -(m22 * ga - jab * gb) / det;
            let sb = -(m11 * gb - jab * ga) / det;
            let (na, nb) = (a + sa, b + sb);
            if na > 0.0 && nb > 0.0 {
                let c = resid(na, nb);
                if c < cost {
                    let done = (cost - c) < 1e-15 * cost.max(1e-300);
                    a = na;
                    b = nb;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !done;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// 2-D UMAP embedding of `data`, reproducible for a fixed `seed`.
pub fn umap(data: &[Vec<f64>], params: &UmapParams, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = data.len();
    if n < params.n_neighbors + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} points are too few for n_neighbors = {}",
            params.n_neighbors
        )));
    }
    if params.n_neighbors < 2 {
        return Err(Error::InvalidArgument("n_neighbors must be >= 2".into()));
    }
    let dim = data[0].len();
    if let Some(bad) = data.iter().find(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    if data.iter().all(|v| v == &data[0]) {
        log::warn!("all feature vectors are identical; every point maps to the origin");
        return Ok(vec![[0.0, 0.0]; n]);
    }

    let k = params.n_neighbors;
    let (idx, dists) = knn(data, k);
    let (sigmas, rhos) = smooth_knn_dist(&dists, k);
    let mut graph = fuzzy_graph(&idx, &dists, &sigmas, &rhos);
    let (a, b) = find_ab_params(params.spread, params.min_dist);

    let n_epochs = match params.n_epochs {
        0 if n <= 10_000 => 500,
        0 => 200,
        e => e,
    };
    let wmax = graph.iter().map(|e| e.2).fold(0.0, f64::max);
    graph.retain(|e| e.2 >= wmax / n_epochs as f64);

    let mut rng = util::rng(seed, "umap");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
        .collect();

    let eps: Vec<f64> = graph.iter().map(|e| wmax / e.2).collect();
    let neg_rate = params.negative_sample_rate as f64;
    let eps_neg: Vec<f64> = eps.iter().map(|e| e / neg_rate).collect();
    let mut next: Vec<f64> = eps.clone();
    let mut next_neg: Vec<f64> = eps_neg.clone();

    for epoch in 0..n_epochs {
        let alpha = params.learning_rate * (1.0 - epoch as f64 / n_epochs as f64);
        let ef = epoch as f64;
        for (e, &(i, j, _)) in graph.iter().enumerate() {
            if next[e] > ef {
                continue;
            }
            let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for c in 0..2 {
                let g = clip(coeff * (y[i][c] - y[j][c])) * alpha;
                y[i][c] += g;
                y[j][c] -= g;
            }
            next[e] += eps[e];

            let n_neg = ((ef - next_neg[e]) / eps_neg[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let m = rng.random_range(0..n);
                if m == i {
                    continue;
                }
                let d2 = (y[i][0] - y[m][0]).powi(2) + (y[i][1] - y[m][1]).powi(2);
                let coeff = if d2 > 0.0 {
                    2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else {
                    0.0
                };
                for c in 0..2 {
                    let g = if coeff > 0.0 { clip(coeff * (y[i][c] - y[m][c])) } else { 4.0 };
                    y[i][c] += g * alpha;
                }
            }
            next_neg[e] += n_neg as f64 * eps_neg[e];
        }
    }
    Ok(y)
}

/// Mean silhouette of 2-D points under Euclidean distance. Singleton clusters
/// score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: points.len(),
            actual: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let counts: Vec<usize> = (0..k).map(|c| labels.iter().filter(|l| **l == c).count()).collect();
    if counts.iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters"));
    }
    let d = |p: &[f64; 2], q: &[f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let li = labels[i];
        if counts[li] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += d(p, q);
            }
        }
        let a = sums[li] / (counts[li] - 1) as f64;
        let b = (0..k)
            .filter(|c| *c != li && counts[*c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasPoint {
    /// Thumbnail id served by `/atlas/thumb/{id}`.
    pub id: String,
    pub coords: [f64; 2],
    pub label: FineLabel,
    pub source: Source,
    pub subtype: Option<String>,
    pub case_id: String,
    pub patch_id: String,
    /// Path to the thumbnail image, when exported.
    pub thumbnail: Option<String>,
}

/// Fitted embedding plus the features needed to place new queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionAtlas {
    pub params: UmapParams,
    pub seed: u64,
    pub feature_dim: usize,
    pub points: Vec<AtlasPoint>,
    pub features: Vec<Vec<f64>>,
}

impl ProjectionAtlas {
    /// Embeds `features`; `points` supply the metadata and receive the coordinates.
    pub fn fit(
        mut points: Vec<AtlasPoint>,
        features: Vec<Vec<f64>>,
        params: UmapParams,
        seed: u64,
    ) -> Result<Self> {
        if points.len() != features.len() {
            return Err(Error::ShapeMismatch {
                expected: features.len(),
                actual: points.len(),
            });
        }
        let coords = umap(&features, &params, seed)?;
        for (p, c) in points.iter_mut().zip(coords) {
            p.coords = c;
        }
        Ok(ProjectionAtlas {
            params,
            seed,
            feature_dim: features[0].len(),
            points,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: &str) -> Option<&AtlasPoint> {
        self.points.iter().find(|p| p.id == id)
    }

    /// Inverse-distance weighted mean of the coordinates of the `n_neighbors`
    /// nearest atlas points in feature space.
    pub fn project_query(&self, feature: &[f64]) -> Result<[f64; 2]> {
        self.project_query_k(feature, self.params.n_neighbors)
    }

    pub fn project_query_k(&self, feature: &[f64], k: usize) -> Result<[f64; 2]> {
        if feature.len() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: self.feature_dim,
                actual: feature.len(),
            });
        }
        if self.is_empty() || k == 0 {
            return Err(Error::Empty("atlas"));
        }
        let mut d: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (sq_dist(f, feature).sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k.min(d.len()));
        if d[0].0 < 1e-12 {
            return Ok(self.points[d[0].1].coords);
        }
        let mut acc = [0.0; 2];
        let mut wsum = 0.0;
        for (dist, i) in d {
            let w = 1.0 / dist;
            acc[0] += w * self.points[i].coords[0];
            acc[1] += w * self.points[i].coords[1];
            wsum += w;
        }
        Ok([acc[0] / wsum, acc[1] / wsum])
    }

    /// Silhouette of the 2-D coordinates grouped by fine label.
    pub fn label_silhouette(&self) -> Result<f64> {
        let coords: Vec<[f64; 2]> = self.points.iter().map(|p| p.coords).collect();
        let labels: Vec<usize> = self.points.iter().map(|p| p.label.index()).collect();
        silhouette(&coords, &labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        util::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).at(path)?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    /// Layout: magic, u32 version, u64 header length, JSON header (params and point
    /// metadata), u64 n, u64 F, then n×2 coordinates and n×F features as little-endian f64.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&AtlasHeader {
            params: self.params,
            seed: self.seed,
            points: &self.points,
        })?;
        let io = |e| Error::Format(format!("atlas write: {e}"));
        w.write_all(ATLAS_MAGIC).map_err(io)?;
        w.write_all(&ATLAS_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&(self.points.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.feature_dim as u64).to_le_bytes()).map_err(io)?;
        for p in &self.points {
            for v in p.coords {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        for f in &self.features {
            for v in f {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("atlas read: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != ATLAS_MAGIC {
            return Err(Error::Format("not an atlas file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != ATLAS_VERSION {
            return Err(Error::Format(format!("unsupported atlas version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let hlen = read_u64(r)? as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header).map_err(io)?;
        let header: OwnedHeader = serde_json::from_slice(&header)?;
        let n = read_u64(r)? as usize;
        let dim = read_u64(r)? as usize;
        if n != header.points.len() {
            return Err(Error::Format("atlas point count mismatch".into()));
        }
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes).map_err(io)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let coords = read_f64s(n * 2)?;
        let flat = read_f64s(n * dim)?;
        let mut points = header.points;
        for (p, c) in points.iter_mut().zip(coords.chunks_exact(2)) {
            p.coords = [c[0], c[1]];
        }
        let features = if dim == 0 {
            vec![Vec::new(); n]
        } else {
            flat.chunks_exact(dim).map(|c| c.to_vec()).collect()
        };
        Ok(ProjectionAtlas {
            params: header.params,
            seed: header.seed,
            feature_dim: dim,
            points,
            features,
        })
    }
}

const ATLAS_MAGIC: &[u8; 8] = b"PPATLAS\0";
const ATLAS_VERSION: u32 = 1;

#[derive(Serialize)]
struct AtlasHeader<'a> {
    params: UmapParams,
    seed: u64,
    points: &'a [AtlasPoint],
}

#[derive(Deserialize)]
struct OwnedHeader {
    params: UmapParams,
    seed: u64,
    points: Vec<AtlasPoint>,
}

/// Thumbnail edge length in pixels.
pub const THUMB_SIZE: u32 = 96;

/// Pooled features for up to `per_case` patches of each case, optionally writing
/// thumbnails into `thumb_dir`, then the fitted atlas.
pub fn build_atlas(
    classifier: &Classifier,
    cases: &[Case],
    store: &dyn PatchStore,
    per_case: usize,
    thumb_dir: Option<&Path>,
    params: UmapParams,
    seed: u64,
) -> Result<ProjectionAtlas> {
    use rayon::prelude::*;
    if let Some(d) = thumb_dir {
        std::fs::create_dir_all(d).at(d)?;
    }
    let mut jobs = Vec::new();
    for case in cases {
        let mut patches = cap_patches(case, per_case, seed)?;
        patches.sort();
        patches.dedup();
        for p in patches {
            jobs.push((case, p));
        }
    }
    let rows: Vec<(AtlasPoint, Vec<f64>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, (case, patch))| {
            let img = store.load(case, patch)?;
            let features = classifier.encoder.features(&to_model_input(&img))?;
            let id = format!("p{i:05}");
            let thumbnail = match thumb_dir {
                Some(d) => {
                    let path = d.join(format!("{id}.png"));
                    let t = image::imageops::thumbnail(&img, THUMB_SIZE, THUMB_SIZE);
                    t.save(&path).map_err(Error::from)?;
                    Some(path.display().to_string())
                }
                None => None,
            };
            Ok((
                AtlasPoint {
                    id,
                    coords: [0.0; 2],
                    label: case.fine_label,
                    source: case.source,
                    subtype: case.subtype.clone(),
                    case_id: case.case_id.clone(),
                    patch_id: patch.clone(),
                    thumbnail,
                },
                features,
            ))
        })
        .collect::<Result<_>>()?;
    let (points, features): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    ProjectionAtlas::fit(points, features, params, seed)
}
