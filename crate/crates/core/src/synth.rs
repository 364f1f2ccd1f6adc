//! Synthetic feature-map datasets with known anomalous regions.
//!
//! Nominal maps are i.i.d. Gaussian around a fixed per-channel mean. An
//! anomalous test image carries one rectangle, 4 to 8 cells on a side at the
//! finest level, shifted by `offset` standard deviations on every channel at
//! every level; its ground-truth mask is that rectangle at pixel resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor_io::{write_manifest, write_tensor, DatasetManifest, ManifestEntry, Split, Tensor};
use crate::{seeded_stream, streams, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub class_name: String,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Finest-level grid (rows, cols); each further level halves it (ceil).
    pub grid: (usize, usize),
    /// Channels per level, finest first.
    pub channels: Vec<usize>,
    /// First hierarchy level id.
    pub first_level: usize,
    /// Pixels per finest-level cell.
    pub cell_pixels: usize,
    /// Anomaly shift in noise standard deviations.
    pub offset: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            class_name: "synthetic".into(),
            n_train: 20,
            n_test_normal: 10,
            n_test_anomalous: 10,
            grid: (28, 28),
            channels: vec![32, 64],
            first_level: 2,
            cell_pixels: 8,
            offset: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::config("synth.n_train", "must be >= 1"));
        }
        if self.n_test_anomalous == 0 || self.n_test_normal == 0 {
            return Err(Error::config("synth.n_test", "need normal and anomalous test images"));
        }
        if self.grid.0 < 8 || self.grid.1 < 8 {
            return Err(Error::config("synth.grid", "grid must be at least 8x8"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("synth.channels", "need one or more positive channel counts"));
        }
        if self.cell_pixels == 0 {
            return Err(Error::config("synth.cell_pixels", "must be >= 1"));
        }
        if self.first_level == 0 {
            return Err(Error::config("synth.first_level", "must be >= 1"));
        }
        Ok(())
    }

    fn level_grid(&self, k: usize) -> (usize, usize) {
        let f = 1usize << k;
        (self.grid.0.div_ceil(f), self.grid.1.div_ceil(f))
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.0 * self.cell_pixels, self.grid.1 * self.cell_pixels)
    }
}

/// Anomalous rectangle in finest-level cells: rows `r0..r1`, cols `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub config_file: PathBuf,
    /// Per test image, in manifest order.
    pub regions: Vec<Option<Region>>,
}

fn feature_maps(cfg: &SynthConfig, means: &[Vec<f32>], region: Option<Region>, rng: &mut SeededRng) -> Vec<Array3<f32>> {
    cfg.channels
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let (h, w) = cfg.level_grid(k);
            let f = 1usize << k;
            let mut a = Array3::from_shape_fn((c, h, w), |(ch, _, _)| {
                means[k][ch] + Distribution::<f32>::sample(&StandardNormal, rng)
            });
            if let Some(r) = region {
                // cells at this level overlapping the finest-level rectangle
                for y in r.r0 / f..r.r1.div_ceil(f) {
                    for x in r.c0 / f..r.c1.div_ceil(f) {
                        for ch in 0..c {
                            a[[ch, y, x]] += cfg.offset;
                        }
                    }
                }
            }
            a
        })
        .collect()
}

fn write_image(
    cfg: &SynthConfig,
    dir: &Path,
    id: &str,
    label: u8,
    maps: &[Array3<f32>],
    mask: Option<&Array2<f32>>,
) -> Result<ManifestEntry> {
    let mut feature_paths = BTreeMap::new();
    for (k, m) in maps.iter().enumerate() {
        let level = cfg.first_level + k;
        let p = dir.join(format!("{id}.L{level}.tnsr"));
        write_tensor(&Tensor::from_array3(m)?, &p)?;
        feature_paths.insert(level, p);
    }
    let mask_path = match mask {
        Some(m) => {
            let p = dir.join(format!("{id}.mask.tnsr"));
            write_tensor(&Tensor::from_array2(m)?, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(ManifestEntry {
        image_id: id.to_string(),
        label,
        original_size: cfg.image_size(),
        mask_path,
        mask: None,
        feature_paths,
    })
}

/// Writes tensors, `train.tsv`, `test.tsv` and a `run.toml` under `dir`.
pub fn generate(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let dir = dir.as_ref();
    for sub in ["train", "test"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = seeded_stream(cfg.seed, streams::SYNTH);
    let means: Vec<Vec<f32>> = cfg
        .channels
        .iter()
        .map(|&c| (0..c).map(|_| rng.random_range(-2.0f32..2.0)).collect())
        .collect();

    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        let maps = feature_maps(cfg, &means, None, &mut rng);
        train.push(write_image(cfg, &dir.join("train"), &format!("train_{i:03}"), 0, &maps, None)?);
    }

    let (gh, gw) = cfg.grid;
    let (ph, pw) = cfg.image_size();
    let mut test = Vec::new();
    let mut regions = Vec::new();
    for i in 0..cfg.n_test_normal + cfg.n_test_anomalous {
        let anomalous = i >= cfg.n_test_normal;
        let region = anomalous.then(|| {
            let h = rng.random_range(4..=8);
            let w = rng.random_range(4..=8);
            let r0 = rng.random_range(0..=gh - h);
            let c0 = rng.random_range(0..=gw - w);
            Region { r0, r1: r0 + h, c0, c1: c0 + w }
        });
        let maps = feature_maps(cfg, &means, region, &mut rng);
        let mask = region.map(|r| {
            let cp = cfg.cell_pixels;
            Array2::from_shape_fn((ph, pw), |(y, x)| {
                let inside = (r.r0 * cp..r.r1 * cp).contains(&y) && (r.c0 * cp..r.c1 * cp).contains(&x);
                if inside {
                    1.0f32
                } else {
                    0.0
                }
            })
        });
        let id = if anomalous {
            format!("test_anom_{:03}", i - cfg.n_test_normal)
        } else {
            format!("test_good_{i:03}")
        };
        test.push(write_image(cfg, &dir.join("test"), &id, anomalous as u8, &maps, mask.as_ref())?);
        regions.push(region);
    }

    let train_manifest = dir.join("train.tsv");
    let test_manifest = dir.join("test.tsv");
    write_manifest(&DatasetManifest { split: Split::Train, entries: train }, &train_manifest)?;
    write_manifest(&DatasetManifest { split: Split::Test, entries: test }, &test_manifest)?;

    let levels: Vec<String> = (0..cfg.channels.len()).map(|k| (cfg.first_level + k).to_string()).collect();
    let d = cfg.channels.iter().copied().max().unwrap_or(1);
    let config_file = dir.join("run.toml");
    let toml = format!(
        r#"# synthetic run, seed {seed}
output_dir = "out"

[patch]
p = 3
stride = 1
levels = [{levels}]
d_pre = {d}
d = {d}

[coreset]
method = "greedy"
fraction = 0.1
projection_dim = {dstar}
seed = 0

[scoring]
b = 3
sigma = 4.0

[metrics]
fpr_limit = 0.3

[lowshot]
shots = [1, 5, {n_train}]
trials = 3
seed = 0

[ablate]
fractions = [1.0, 0.5, 0.1, 0.01]
methods = ["greedy", "random"]
patch_sizes = [1, 3, 5]
strides = [1, 2, 3]

[[class]]
name = "{name}"
train = "train.tsv"
test = "test.tsv"
"#,
        seed = cfg.seed,
        levels = levels.join(", "),
        dstar = (d / 2).max(1),
        n_train = cfg.n_train,
        name = cfg.class_name,
    );
    fs::write(&config_file, toml).map_err(|e| Error::io(&config_file, e))?;
    Ok(SynthDataset {
        train_manifest,
        test_manifest,
        config_file,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_config;
    use crate::tensor_io::load_manifest;

    #[test]
    fn small_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 2,
            n_test_normal: 1,
            n_test_anomalous: 2,
            grid: (8, 10),
            channels: vec![4, 6],
            cell_pixels: 2,
            ..Default::default()
        };
        let ds = generate(dir.path(), &cfg).unwrap();
        let train = load_manifest(&ds.train_manifest, Split::Train).unwrap();
        let test = load_manifest(&ds.test_manifest, Split::Test).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 3);
        let e = &test.entries[2];
        assert_eq!(e.label, 1);
        assert_eq!(e.original_size, (16, 20));
        let mask = e.mask.as_ref().unwrap();
        let r = ds.regions[2].unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), (r.r1 - r.r0) * (r.c1 - r.c0) * 4);
        let l3 = crate::tensor_io::read_tensor(&e.feature_paths[&3]).unwrap();
        assert_eq!(l3.shape(), &[6, 4, 5]);
        let run = load_config(&ds.config_file).unwrap();
        assert_eq!(run.patch.levels, vec![2, 3]);
        assert_eq!(run.classes[0].test, ds.test_manifest);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            n_train: 1,
            n_test_normal: 1,
            n_test_anomalous: 1,
            grid: (8, 8),
            channels: vec![3],
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), &cfg).unwrap();
        generate(b.path(), &cfg).unwrap();
        for f in ["train/train_000.L2.tnsr", "test/test_anom_000.L2.tnsr", "test/test_anom_000.mask.tnsr"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
