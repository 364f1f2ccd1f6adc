//! Locally aware patch features and the nominal memory bank.
//!
//! Each hierarchy level is processed as: zero-padded `p x p` spatial mean
//! (divisor `p^2`), strided position filtering, channel adaptive average
//! pooling to `pre_dim`. Coarser levels are then bilinearly resampled onto
//! the finest grid, concatenated, and pooled to the final `dim`.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::resample::bilinear_field;
use crate::tensor_io::{read_tensor, write_tensor, DatasetManifest, ManifestEntry, Split, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    /// Neighbourhood size, odd.
    pub patch_size: usize,
    pub stride: usize,
    /// Per-level pooled channel dimension.
    pub pre_dim: usize,
    /// Final patch feature dimension.
    pub dim: usize,
    /// Hierarchy levels, strictly increasing; the first is the finest.
    pub levels: Vec<usize>,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: 3,
            stride: 1,
            pre_dim: 1024,
            dim: 1024,
            levels: vec![2, 3],
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::config(
                "patch.p",
                format!("neighbourhood size must be odd and positive, got {}", self.patch_size),
            ));
        }
        if self.stride == 0 {
            return Err(Error::config("patch.stride", "stride must be >= 1"));
        }
        if self.pre_dim == 0 {
            return Err(Error::config("patch.d_pre", "must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("patch.d", "must be >= 1"));
        }
        if self.levels.is_empty() {
            return Err(Error::config("patch.levels", "at least one level is required"));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "patch.levels",
                format!("levels must be strictly increasing, got {:?}", self.levels),
            ));
        }
        Ok(())
    }
}

/// One coordinate of a neighbourhood window; `padding` marks positions outside the map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowCell {
    pub row: isize,
    pub col: isize,
    pub padding: bool,
}

/// The `p x p` window centred on `(h, w)`, row-major, including out-of-bounds cells.
pub fn neighborhood(h: usize, w: usize, p: usize, bounds: (usize, usize)) -> Result<Vec<WindowCell>> {
    if p.is_multiple_of(2) {
        return Err(Error::config("patch.p", format!("neighbourhood size must be odd, got {p}")));
    }
    if h >= bounds.0 || w >= bounds.1 {
        return Err(Error::validation(format!(
            "position ({h}, {w}) outside map of size {bounds:?}"
        )));
    }
    let half = (p / 2) as isize;
    let (h, w) = (h as isize, w as isize);
    let mut cells = Vec::with_capacity(p * p);
    for a in h - half..=h + half {
        for b in w - half..=w + half {
            let padding = a < 0 || b < 0 || a >= bounds.0 as isize || b >= bounds.1 as isize;
            cells.push(WindowCell { row: a, col: b, padding });
        }
    }
    Ok(cells)
}

/// Channel adaptive average pooling: output `k` averages input indices
/// `[floor(k*c/n), ceil((k+1)*c/n))`.
pub fn adaptive_avg_pool(input: &[f64], out: &mut [f64]) {
    let c = input.len();
    let n = out.len();
    if c == n {
        out.copy_from_slice(input);
        return;
    }
    for (k, o) in out.iter_mut().enumerate() {
        let start = k * c / n;
        let end = ((k + 1) * c).div_ceil(n);
        let seg = &input[start..end];
        *o = seg.iter().sum::<f64>() / seg.len() as f64;
    }
}

/// Grid of locally aware patch features, positions in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    /// `(rows * cols) x dim`
    pub features: Array2<f32>,
    /// Spatial size of the finest input feature map.
    pub src_shape: (usize, usize),
}

impl PatchGrid {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_field(&self) -> Array3<f64> {
        self.features
            .mapv(f64::from)
            .into_shape_with_order((self.rows, self.cols, self.dim()))
            .expect("grid features are rows*cols x dim")
    }
}

/// Patch features of a single hierarchy level, pooled to `cfg.pre_dim`.
pub fn local_patch_features(fm: ArrayView3<f32>, cfg: &PatchConfig) -> Result<PatchGrid> {
    cfg.validate()?;
    let (c, h, w) = fm.dim();
    if c < 1 || h < 1 || w < 1 {
        return Err(Error::validation(format!("feature map has empty shape ({c}, {h}, {w})")));
    }
    let p = cfg.patch_size;
    let half = p / 2;
    let s = cfg.stride;
    let rows = h.div_ceil(s);
    let cols = w.div_ceil(s);
    let norm = (p * p) as f64;

    // (h, w, c) so every window cell is a contiguous channel vector.
    let hwc = fm.permuted_axes([1, 2, 0]).mapv(f64::from);

    let mut features = Array2::<f32>::zeros((rows * cols, cfg.pre_dim));
    let mut acc = vec![0.0f64; c];
    let mut pooled = vec![0.0f64; cfg.pre_dim];
    for r in 0..rows {
        let hh = r * s;
        for q in 0..cols {
            let ww = q * s;
            acc.iter_mut().for_each(|v| *v = 0.0);
            for a in hh.saturating_sub(half)..=(hh + half).min(h - 1) {
                for b in ww.saturating_sub(half)..=(ww + half).min(w - 1) {
                    let cell = hwc.slice(s![a, b, ..]);
                    for (dst, &v) in acc.iter_mut().zip(cell.iter()) {
                        *dst += v;
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v /= norm);
            adaptive_avg_pool(&acc, &mut pooled);
            let mut row = features.row_mut(r * cols + q);
            for (dst, &v) in row.iter_mut().zip(&pooled) {
                *dst = v as f32;
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        features,
        src_shape: (h, w),
    })
}

/// Resamples every coarser level onto the finest grid, concatenates and pools to `cfg.dim`.
pub fn merge_hierarchies(grids: &[PatchGrid], cfg: &PatchConfig) -> Result<PatchGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::validation("no patch grids to merge"))?;
    let pre_dim = first.dim();
    if let Some(g) = grids.iter().find(|g| g.dim() != pre_dim) {
        return Err(Error::validation(format!(
            "patch grids disagree on feature dimension: {} vs {}",
            pre_dim,
            g.dim()
        )));
    }
    let (rows, cols) = (first.rows, first.cols);
    if grids.len() == 1 && pre_dim == cfg.dim {
        return Ok(first.clone());
    }

    let fields: Vec<Array3<f64>> = grids
        .iter()
        .map(|g| bilinear_field(g.as_field().view(), rows, cols))
        .collect();
    let cat_dim = pre_dim * grids.len();
    let mut features = Array2::<f32>::zeros((rows * cols, cfg.dim));
    let mut cat = vec![0.0f64; cat_dim];
    let mut pooled = vec![0.0f64; cfg.dim];
    for r in 0..rows {
        for q in 0..cols {
            for (l, f) in fields.iter().enumerate() {
                let dst = &mut cat[l * pre_dim..(l + 1) * pre_dim];
                for (d, &v) in dst.iter_mut().zip(f.slice(s![r, q, ..]).iter()) {
                    *d = v;
                }
            }
            adaptive_avg_pool(&cat, &mut pooled);
            for (d, &v) in features.row_mut(r * cols + q).iter_mut().zip(&pooled) {
                *d = v as f32;
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        features,
        src_shape: first.src_shape,
    })
}

/// Full per-image patchification from in-memory level maps (ordered as `cfg.levels`).
pub fn patchify_maps(maps: &[ArrayView3<f32>], cfg: &PatchConfig) -> Result<PatchGrid> {
    let grids = maps
        .iter()
        .map(|m| local_patch_features(*m, cfg))
        .collect::<Result<Vec<_>>>()?;
    merge_hierarchies(&grids, cfg)
}

/// Loads the configured levels of one manifest entry and patchifies them.
pub fn patch_grid_for_entry(entry: &ManifestEntry, cfg: &PatchConfig) -> Result<PatchGrid> {
    let maps = cfg
        .levels
        .iter()
        .map(|lvl| {
            let path = entry.feature_paths.get(lvl).ok_or_else(|| {
                Error::config(
                    "patch.levels",
                    format!("image {:?} has no features for level {lvl}", entry.image_id),
                )
            })?;
            read_tensor(path)?.to_array3().map_err(|_| {
                Error::validation(format!("{} is not a rank-3 feature map", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    patchify_maps(&views, cfg)
}

/// Patch grids for every manifest entry, in manifest order.
pub fn patch_grids(manifest: &DatasetManifest, cfg: &PatchConfig) -> Result<Vec<PatchGrid>> {
    cfg.validate()?;
    manifest
        .entries
        .par_iter()
        .map(|e| patch_grid_for_entry(e, cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Patch {
        image_id: String,
        row: usize,
        col: usize,
    },
    /// Row not taken from any image (learned proxies).
    Synthetic { index: usize },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Patch { image_id, row, col } => write!(f, "patch\t{image_id}\t{row}\t{col}"),
            Provenance::Synthetic { index } => write!(f, "synthetic\t{index}"),
        }
    }
}

/// `N x d` nominal patch features with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    features: Array2<f32>,
    provenance: Vec<Provenance>,
    subsampled_from: Option<usize>,
}

pub const BANK_FEATURES_FILE: &str = "bank.tnsr";
pub const BANK_PROVENANCE_FILE: &str = "bank.prov";

impl MemoryBank {
    pub fn new(
        features: Array2<f32>,
        provenance: Vec<Provenance>,
        subsampled_from: Option<usize>,
    ) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::validation("memory bank must have at least one row and column"));
        }
        if provenance.len() != features.nrows() {
            return Err(Error::validation(format!(
                "{} provenance records for {} bank rows",
                provenance.len(),
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("memory bank contains non-finite features"));
        }
        Ok(MemoryBank {
            features,
            provenance,
            subsampled_from,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn subsampled_from(&self) -> Option<usize> {
        self.subsampled_from
    }

    /// Rows at `indices`, in that order, recording the current size as `subsampled_from`.
    pub fn select_rows(&self, indices: &[usize]) -> Result<MemoryBank> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::validation(format!("bank row {i} out of range ({})", self.len())));
        }
        MemoryBank::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.provenance[i].clone()).collect(),
            Some(self.subsampled_from.unwrap_or(self.len())),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_tensor(&Tensor::from_array2(&self.features)?, dir.join(BANK_FEATURES_FILE))?;
        let mut text = match self.subsampled_from {
            Some(n) => format!("# subsampled_from={n}\n"),
            None => "# subsampled_from=-\n".to_string(),
        };
        for p in &self.provenance {
            text.push_str(&p.to_string());
            text.push('\n');
        }
        let prov = dir.join(BANK_PROVENANCE_FILE);
        fs::write(&prov, text).map_err(|e| Error::io(prov, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<MemoryBank> {
        let dir = dir.as_ref();
        let features = read_tensor(dir.join(BANK_FEATURES_FILE))?.to_array2()?;
        let prov_path = dir.join(BANK_PROVENANCE_FILE);
        let text = fs::read_to_string(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
        let bad = |line: usize, msg: &str| Error::Format {
            path: prov_path.clone(),
            msg: format!("line {line}: {msg}"),
        };
        let mut subsampled_from = None;
        let mut provenance = Vec::with_capacity(features.nrows());
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# subsampled_from=") {
                subsampled_from = match rest {
                    "-" => None,
                    n => Some(n.parse().map_err(|_| bad(i + 1, "bad subsampled_from"))?),
                };
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
            provenance.push(match f[..] {
                ["patch", id, r, c] => Provenance::Patch {
                    image_id: id.to_string(),
                    row: num(r)?,
                    col: num(c)?,
                },
                ["synthetic", k] => Provenance::Synthetic { index: num(k)? },
                _ => return Err(bad(i + 1, "unrecognised provenance record")),
            });
        }
        MemoryBank::new(features, provenance, subsampled_from)
    }
}

/// Union of the patch grids of all nominal training images, in manifest order.
pub fn build_memory_bank(manifest: &DatasetManifest, cfg: &PatchConfig) -> Result<MemoryBank> {
    if manifest.split != Split::Train {
        return Err(Error::validation("memory bank requires a train manifest"));
    }
    if manifest.is_empty() {
        return Err(Error::validation("train manifest has no entries"));
    }
    if let Some(e) = manifest.entries.iter().find(|e| e.label != 0) {
        return Err(Error::validation(format!("train image {:?} is labelled anomalous", e.image_id)));
    }
    let grids = patch_grids(manifest, cfg)?;
    let ids: Vec<&str> = manifest.entries.iter().map(|e| e.image_id.as_str()).collect();
    bank_from_grids(&grids, &ids)
}

pub fn bank_from_grids(grids: &[PatchGrid], image_ids: &[&str]) -> Result<MemoryBank> {
    assert_eq!(grids.len(), image_ids.len());
    let dim = grids
        .first()
        .ok_or_else(|| Error::validation("no patch grids for memory bank"))?
        .dim();
    if grids.iter().any(|g| g.dim() != dim) {
        return Err(Error::validation("patch grids disagree on feature dimension"));
    }
    let views: Vec<_> = grids.iter().map(|g| g.features.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::validation(format!("cannot concatenate patch grids: {e}")))?;
    let mut provenance = Vec::with_capacity(features.nrows());
    for (g, id) in grids.iter().zip(image_ids) {
        for row in 0..g.rows {
            for col in 0..g.cols {
                provenance.push(Provenance::Patch {
                    image_id: id.to_string(),
                    row,
                    col,
                });
            }
        }
    }
    MemoryBank::new(features, provenance, None)
}
