//! Nearest-neighbour scoring of test patch grids against a memory bank.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patchify::{MemoryBank, PatchGrid};
use crate::resample::bilinear_2d;
use crate::{l2, squared_l2};

/// Which bank neighbourhood the image-score reweighting softmax runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReweightAround {
    /// The `b` bank members nearest to the most anomalous test patch.
    TestFeature,
    /// The `b` bank members nearest to that patch's own nearest neighbour.
    BankNn,
}

impl FromStr for ReweightAround {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test-feature" | "test_feature" => Ok(ReweightAround::TestFeature),
            "bank-nn" | "bank_nn" => Ok(ReweightAround::BankNn),
            other => Err(Error::config(
                "scoring.reweight_around",
                format!("expected test-feature or bank-nn, got {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringConfig {
    /// Reweighting neighbourhood size, >= 2.
    pub b: usize,
    /// Gaussian blur width in output pixels.
    pub sigma: f64,
    /// Pixel resolution (H, W) of the segmentation map.
    pub output_size: (usize, usize),
    pub reweight_around: ReweightAround,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            b: 3,
            sigma: 4.0,
            output_size: (224, 224),
            reweight_around: ReweightAround::TestFeature,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::config(
                "scoring.b",
                format!("reweighting needs b >= 2 (b = {} makes the factor vanish)", self.b),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("scoring.sigma", "must be a positive finite number"));
        }
        Ok(())
    }
}

/// k nearest bank rows per query, ascending by distance, ties to the lower index.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    distances: Vec<f64>,
    indices: Vec<usize>,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Euclidean (not squared) distances of query `q`.
    pub fn distances(&self, q: usize) -> &[f64] {
        &self.distances[q * self.k..(q + 1) * self.k]
    }

    pub fn indices(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }
}

/// Exact brute-force k-nearest-neighbour search under the L2 norm.
pub fn nearest_neighbors(queries: ArrayView2<f32>, bank: ArrayView2<f32>, k: usize) -> Result<Neighbors> {
    let n = bank.nrows();
    if queries.ncols() != bank.ncols() {
        return Err(Error::validation(format!(
            "query dimension {} does not match bank dimension {}",
            queries.ncols(),
            bank.ncols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} must be in 1..={n}")));
    }
    let bank = bank.as_standard_layout();
    let queries = queries.as_standard_layout();
    let d = bank.ncols();
    let flat = bank.as_slice().expect("standard layout");

    let per_query: Vec<Vec<(f64, usize)>> = queries
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|q| {
            let q = q.to_slice().expect("standard layout");
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (i, row) in flat.chunks_exact(d.max(1)).enumerate().take(n) {
                let dist = squared_l2(q, row).sqrt();
                if best.len() == k && dist >= best[k - 1].0 {
                    continue;
                }
                // indices arrive in ascending order, so equal distances stay ahead
                let pos = best.partition_point(|&(bd, _)| bd <= dist);
                best.insert(pos, (dist, i));
                best.truncate(k);
            }
            best
        })
        .collect();

    let mut distances = Vec::with_capacity(per_query.len() * k);
    let mut indices = Vec::with_capacity(per_query.len() * k);
    for row in per_query {
        for (dist, i) in row {
            distances.push(dist);
            indices.push(i);
        }
    }
    Ok(Neighbors { k, distances, indices })
}

/// Image-level score with the per-patch nearest-neighbour distances it was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    /// Reweighted score `s`.
    pub score: f64,
    /// Maximum patch distance `s*`.
    pub raw_star: f64,
    pub argmax_patch: (usize, usize),
    /// Bank row nearest to the argmax patch.
    pub nearest_bank_row: usize,
    /// `rows x cols` nearest-neighbour distances.
    pub patch_scores: Array2<f64>,
}

/// `1 - exp(d_star) / sum_m exp(d_m)`, evaluated with the largest exponent subtracted.
pub fn reweight_factor(d_star: f64, neighbor_dists: &[f64]) -> f64 {
    let max = neighbor_dists
        .iter()
        .copied()
        .fold(d_star, f64::max);
    let denom: f64 = neighbor_dists.iter().map(|d| (d - max).exp()).sum();
    (1.0 - (d_star - max).exp() / denom).max(0.0)
}

pub fn image_score(grid: &PatchGrid, bank: &MemoryBank, cfg: &ScoringConfig) -> Result<ImageScore> {
    cfg.validate()?;
    if cfg.b > bank.len() {
        return Err(Error::config(
            "scoring.b",
            format!("b = {} exceeds the memory bank size {}", cfg.b, bank.len()),
        ));
    }
    if grid.is_empty() {
        return Err(Error::validation("empty patch grid"));
    }
    let feats = bank.features().view();
    let nn = nearest_neighbors(grid.features.view(), feats, 1)?;

    let mut best = (f64::NEG_INFINITY, 0usize);
    for p in 0..grid.len() {
        let dist = nn.distances(p)[0];
        if dist > best.0 {
            best = (dist, p);
        }
    }
    let (raw_star, p_star) = best;
    let m_star = nn.indices(p_star)[0];
    let test_feat = grid.features.row(p_star);
    let test_feat = test_feat.as_slice().expect("standard layout");

    let neighbor_dists: Vec<f64> = match cfg.reweight_around {
        ReweightAround::TestFeature => {
            let q = grid.features.slice(ndarray::s![p_star..p_star + 1, ..]);
            nearest_neighbors(q, feats, cfg.b)?.distances(0).to_vec()
        }
        ReweightAround::BankNn => {
            let q = feats.slice(ndarray::s![m_star..m_star + 1, ..]);
            let around = nearest_neighbors(q, feats, cfg.b)?;
            around
                .indices(0)
                .iter()
                .map(|&i| l2(test_feat, feats.row(i).as_slice().expect("standard layout")))
                .collect()
        }
    };
    let score = reweight_factor(raw_star, &neighbor_dists) * raw_star;

    let patch_scores = Array2::from_shape_fn((grid.rows, grid.cols), |(r, c)| nn.distances(r * grid.cols + c)[0]);
    Ok(ImageScore {
        score,
        raw_star,
        argmax_patch: (p_star / grid.cols, p_star % grid.cols),
        nearest_bank_row: m_star,
        patch_scores,
    })
}

/// Normalised discrete Gaussian of radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(map: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("scoring.sigma", "must be a positive finite number"));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = map.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * map[[r, clamp(c as isize + t as isize - radius, w)]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[clamp(r as isize + t as isize - radius, h), c]];
            }
            out[[r, c]] = acc;
        }
    }
    Ok(out)
}

/// Upsamples a patch-score grid to pixel resolution and smooths it.
pub fn patch_scores_to_pixels(patch_scores: ArrayView2<f64>, cfg: &ScoringConfig) -> Result<Array2<f64>> {
    let (h, w) = cfg.output_size;
    let (rows, cols) = patch_scores.dim();
    if h < rows || w < cols {
        return Err(Error::validation(format!(
            "output size {:?} is smaller than the patch grid ({rows}, {cols})",
            cfg.output_size
        )));
    }
    gaussian_blur(bilinear_2d(patch_scores, h, w).view(), cfg.sigma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub image_id: String,
    pub image_score: f64,
    pub raw_star: f64,
    pub argmax_patch: (usize, usize),
    pub patch_scores: Array2<f64>,
    /// `H x W` anomaly scores after upsampling and blurring.
    pub pixel_map: Array2<f32>,
}

/// Image score and segmentation map from one nearest-neighbour pass.
pub fn score_map(image_id: &str, grid: &PatchGrid, bank: &MemoryBank, cfg: &ScoringConfig) -> Result<ScoreMap> {
    let s = image_score(grid, bank, cfg)?;
    let pixels = patch_scores_to_pixels(s.patch_scores.view(), cfg)?;
    Ok(ScoreMap {
        image_id: image_id.to_string(),
        image_score: s.score,
        raw_star: s.raw_star,
        argmax_patch: s.argmax_patch,
        patch_scores: s.patch_scores,
        pixel_map: pixels.mapv(|v| v.max(0.0) as f32),
    })
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub image_id: String,
    pub image_score: f64,
    pub raw_star: f64,
    pub argmax_row: usize,
    pub argmax_col: usize,
}

impl From<&ScoreMap> for ResultRow {
    fn from(m: &ScoreMap) -> Self {
        ResultRow {
            image_id: m.image_id.clone(),
            image_score: m.image_score,
            raw_star: m.raw_star,
            argmax_row: m.argmax_patch.0,
            argmax_col: m.argmax_patch.1,
        }
    }
}

pub const RESULTS_HEADER: &str = "image_id,image_score,raw_star,argmax_row,argmax_col";

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.image_id, r.image_score, r.raw_star, r.argmax_row, r.argmax_col
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(bad(1, "missing results header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad index"));
        rows.push(ResultRow {
            image_id: f[0].to_string(),
            image_score: num(f[1])?,
            raw_star: num(f[2])?,
            argmax_row: idx(f[3])?,
            argmax_col: idx(f[4])?,
        });
    }
    Ok(rows)
}

/// 8-bit binary PGM of `map`, min-max normalised.
pub fn write_pgm(path: impl AsRef<Path>, map: ArrayView2<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
