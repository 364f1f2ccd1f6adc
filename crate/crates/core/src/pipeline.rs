//! Stage orchestration: build, score, evaluate, and the low-shot and
//! ablation harnesses. Stages hand off through files under
//! `<output_dir>/<class>/`; the harnesses run the same stages in memory.
//!
//! Everything written is a deterministic function of the config except the
//! `*_report.txt` files, which carry wall times.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;

use crate::config::{ClassSpec, RunConfig};
use crate::coreset::{subsample_memory_bank, CoresetConfig, Method, Target};
use crate::error::{Error, Result};
use crate::metrics::{
    auroc, counts_at_threshold, curve_points, f1_optimal_threshold, pixel_auroc, pro_score, write_metrics_csv,
    write_pr_csv, write_roc_csv, ClassMetrics, CurvePoint,
};
use crate::patchify::{bank_from_grids, patch_grids, MemoryBank, PatchConfig, PatchGrid};
use crate::scoring::{read_results_csv, score_map, write_results_csv, ResultRow, ScoreMap, ScoringConfig};
use crate::tensor_io::{load_manifest, read_tensor, write_tensor, DatasetManifest, Mask, Split, Tensor};
use crate::{seeded_stream, streams};

pub const RESULTS_FILE: &str = "results.csv";
pub const MAPS_DIR: &str = "maps";
pub const BUILD_REPORT: &str = "build_report.txt";
pub const SCORE_REPORT: &str = "score_report.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOWSHOT_FILE: &str = "lowshot.csv";
pub const LOWSHOT_TRIALS_FILE: &str = "lowshot_trials.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: String) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn load_split(path: &Path, split: Split) -> Result<DatasetManifest> {
    let m = load_manifest(path, split)?;
    if m.is_empty() {
        return Err(Error::validation(format!("{split} manifest {} has no entries", path.display())));
    }
    Ok(m)
}

fn ids(m: &DatasetManifest) -> Vec<&str> {
    m.entries.iter().map(|e| e.image_id.as_str()).collect()
}

fn full_bank(train: &DatasetManifest, grids: &[PatchGrid]) -> Result<MemoryBank> {
    if let Some(e) = train.entries.iter().find(|e| e.label != 0) {
        return Err(Error::validation(format!("train image {:?} is labelled anomalous", e.image_id)));
    }
    bank_from_grids(grids, &ids(train))
}

/// Full memory bank from train grids, reduced per `coreset`.
pub fn bank_for(train: &DatasetManifest, grids: &[PatchGrid], coreset: &CoresetConfig) -> Result<MemoryBank> {
    subsample_memory_bank(&full_bank(train, grids)?, coreset)
}

/// Scores every test grid; pixel maps come out at each image's original size.
pub fn score_grids(
    test: &DatasetManifest,
    grids: &[PatchGrid],
    bank: &MemoryBank,
    scoring: &ScoringConfig,
) -> Result<Vec<ScoreMap>> {
    test.entries
        .iter()
        .zip(grids)
        .map(|(e, g)| {
            let cfg = ScoringConfig {
                output_size: e.original_size,
                ..scoring.clone()
            };
            score_map(&e.image_id, g, bank, &cfg)
        })
        .collect()
}

/// Metrics of one class plus its image-level ROC/PR points.
pub fn evaluate_class(
    class: &str,
    test: &DatasetManifest,
    image_scores: &[f64],
    maps: &[ArrayView2<f32>],
    fpr_limit: f64,
) -> Result<(ClassMetrics, Vec<CurvePoint>)> {
    let labels: Vec<bool> = test.entries.iter().map(|e| e.is_anomalous()).collect();
    let masks: Vec<Mask> = test.entries.iter().map(|e| e.mask_or_empty()).collect();
    let mask_views: Vec<ArrayView2<bool>> = masks.iter().map(|m| m.view()).collect();
    let f1 = f1_optimal_threshold(image_scores, &labels)?;
    let metrics = ClassMetrics {
        class: class.to_string(),
        image_auroc: auroc(image_scores, &labels)?,
        pixel_auroc: pixel_auroc(maps, &mask_views)?,
        pro: pro_score(maps, &mask_views, fpr_limit)?,
        f1_threshold: f1.threshold,
        false_positives: f1.false_positives,
        false_negatives: f1.false_negatives,
    };
    Ok((metrics, curve_points(image_scores, &labels)?))
}

/// Build, score and evaluate one class without touching the output directory.
pub fn run_in_memory(
    class: &str,
    train: &DatasetManifest,
    train_grids: &[PatchGrid],
    test: &DatasetManifest,
    test_grids: &[PatchGrid],
    coreset: &CoresetConfig,
    cfg: &RunConfig,
) -> Result<(ClassMetrics, usize)> {
    let bank = bank_for(train, train_grids, coreset)?;
    let maps = score_grids(test, test_grids, &bank, &cfg.scoring)?;
    let scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    let views: Vec<ArrayView2<f32>> = maps.iter().map(|m| m.pixel_map.view()).collect();
    let (metrics, _) = evaluate_class(class, test, &scores, &views, cfg.metrics.fpr_limit)?;
    Ok((metrics, bank.len()))
}

fn describe_target(t: &Target) -> String {
    match t {
        Target::Fraction(f) => format!("fraction {f}"),
        Target::Count(c) => format!("count {c}"),
    }
}

fn build_class(cfg: &RunConfig, class: &ClassSpec) -> Result<()> {
    let dir = cfg.class_dir(class);
    create_dir(&dir)?;
    let train = load_split(&class.train, Split::Train)?;
    let t0 = Instant::now();
    let grids = patch_grids(&train, &cfg.patch)?;
    let full = full_bank(&train, &grids)?;
    let t1 = Instant::now();
    let bank = subsample_memory_bank(&full, &cfg.coreset)?;
    let t2 = Instant::now();
    bank.save(&dir)?;
    let report = format!(
        "# build report; wall times vary between runs\n\
         class={}\ntrain_images={}\nbank_size_full={}\ndim={}\nmethod={}\ntarget={}\n\
         projection_dim={}\nseed={}\nbank_size={}\nsubsampled_from={}\n\
         seconds_patchify={:.6}\nseconds_subsample={:.6}\n",
        class.name,
        train.len(),
        full.len(),
        full.dim(),
        cfg.coreset.method.name(),
        describe_target(&cfg.coreset.target),
        cfg.coreset.projection_dim.map_or("off".to_string(), |d| d.to_string()),
        cfg.coreset.seed,
        bank.len(),
        bank.subsampled_from().map_or("-".to_string(), |n| n.to_string()),
        (t1 - t0).as_secs_f64(),
        (t2 - t1).as_secs_f64(),
    );
    write_text(&dir.join(BUILD_REPORT), report)?;
    log::info!("{}: bank {} -> {} rows", class.name, full.len(), bank.len());
    Ok(())
}

/// Patchifies every train manifest and writes the subsampled memory bank.
pub fn cmd_build(cfg: &RunConfig) -> Result<()> {
    cfg.classes
        .iter()
        .try_for_each(|c| build_class(cfg, c))
        .map_err(|e| e.in_stage("build"))
}

fn map_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(MAPS_DIR).join(format!("{image_id}.tnsr"))
}

fn score_class(cfg: &RunConfig, class: &ClassSpec) -> Result<()> {
    let dir = cfg.class_dir(class);
    let bank = MemoryBank::load(&dir)?;
    let test = load_split(&class.test, Split::Test)?;
    create_dir(&dir.join(MAPS_DIR))?;
    let mut rows = Vec::with_capacity(test.len());
    let mut seconds = 0.0;
    for e in &test.entries {
        let t0 = Instant::now();
        let grid = crate::patchify::patch_grid_for_entry(e, &cfg.patch)?;
        let m = score_grids(
            &DatasetManifest {
                split: Split::Test,
                entries: vec![e.clone()],
            },
            std::slice::from_ref(&grid),
            &bank,
            &cfg.scoring,
        )?
        .pop()
        .expect("one map per entry");
        seconds += t0.elapsed().as_secs_f64();
        write_tensor(&Tensor::from_array2(&m.pixel_map)?, map_path(&dir, &e.image_id))?;
        rows.push(ResultRow::from(&m));
    }
    write_results_csv(dir.join(RESULTS_FILE), &rows)?;
    let report = format!(
        "# scoring wall time per image: patch aggregation, nearest-neighbour search, \
         reweighting and map upsampling; feature extraction happens upstream and is excluded\n\
         class={}\nimages={}\nbank_size={}\nmean_seconds_per_image={:.6}\ntotal_seconds={:.6}\n",
        class.name,
        test.len(),
        bank.len(),
        seconds / test.len() as f64,
        seconds
    );
    write_text(&dir.join(SCORE_REPORT), report)
}

/// Scores each test manifest against its class bank: `results.csv` and `maps/<id>.tnsr`.
pub fn cmd_score(cfg: &RunConfig) -> Result<()> {
    cfg.classes
        .iter()
        .try_for_each(|c| score_class(cfg, c))
        .map_err(|e| e.in_stage("score"))
}

struct ClassResults {
    test: DatasetManifest,
    scores: Vec<f64>,
    maps: Vec<Array2<f32>>,
}

fn load_results(cfg: &RunConfig, class: &ClassSpec) -> Result<ClassResults> {
    let dir = cfg.class_dir(class);
    let test = load_split(&class.test, Split::Test)?;
    let rows = read_results_csv(dir.join(RESULTS_FILE))?;
    let by_id: HashMap<&str, &ResultRow> = rows.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut scores = Vec::with_capacity(test.len());
    let mut maps = Vec::with_capacity(test.len());
    for e in &test.entries {
        let row = by_id.get(e.image_id.as_str()).ok_or_else(|| {
            Error::validation(format!("{} has no result for test image {:?}", RESULTS_FILE, e.image_id))
        })?;
        scores.push(row.image_score);
        let m = read_tensor(map_path(&dir, &e.image_id))?.to_array2()?;
        if m.dim() != e.original_size {
            return Err(Error::validation(format!(
                "map for {:?} has size {:?}, manifest declares {:?}",
                e.image_id,
                m.dim(),
                e.original_size
            )));
        }
        maps.push(m);
    }
    Ok(ClassResults { test, scores, maps })
}

fn evaluate_all(cfg: &RunConfig) -> Result<Vec<ClassMetrics>> {
    create_dir(&cfg.output_dir)?;
    let mut all = Vec::with_capacity(cfg.classes.len());
    let mut pooled: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    for class in &cfg.classes {
        let r = load_results(cfg, class)?;
        let views: Vec<ArrayView2<f32>> = r.maps.iter().map(|m| m.view()).collect();
        let (metrics, curve) = evaluate_class(&class.name, &r.test, &r.scores, &views, cfg.metrics.fpr_limit)?;
        write_roc_csv(cfg.output_dir.join(format!("roc_{}.csv", class.name)), &curve)?;
        write_pr_csv(cfg.output_dir.join(format!("pr_{}.csv", class.name)), &curve)?;
        pooled.push((r.scores, r.test.entries.iter().map(|e| e.is_anomalous()).collect()));
        all.push(metrics);
    }
    let global = if cfg.metrics.global_threshold {
        let scores: Vec<f64> = pooled.iter().flat_map(|p| p.0.iter().copied()).collect();
        let labels: Vec<bool> = pooled.iter().flat_map(|p| p.1.iter().copied()).collect();
        let t = f1_optimal_threshold(&scores, &labels)?.threshold;
        for (m, (s, l)) in all.iter_mut().zip(&pooled) {
            let c = counts_at_threshold(s, l, t);
            m.f1_threshold = t;
            m.false_positives = c.false_positives;
            m.false_negatives = c.false_negatives;
        }
        Some(t)
    } else {
        None
    };
    write_metrics_csv(cfg.output_dir.join(METRICS_FILE), &all, global)?;
    Ok(all)
}

/// Computes `metrics.csv` and per-class `roc_<class>.csv` / `pr_<class>.csv` from scored results.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<ClassMetrics>> {
    evaluate_all(cfg).map_err(|e| e.in_stage("evaluate"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowshotRow {
    pub class: String,
    pub shots: usize,
    pub trials: usize,
    pub image_auroc: (f64, f64),
    pub pixel_auroc: (f64, f64),
    pub pro: (f64, f64),
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn binomial_at_least(n: usize, k: usize, bound: usize) -> bool {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= bound as u128 {
            return true;
        }
    }
    c >= bound as u128
}

/// Sorted train-image subsets for one shot count; distinct whenever enough subsets exist.
pub fn lowshot_subsets(n: usize, shots: usize, trials: usize, seed: u64) -> Vec<Vec<usize>> {
    if shots == n {
        return vec![(0..n).collect()];
    }
    let mut rng = seeded_stream(seed ^ ((shots as u64) << 32), streams::LOWSHOT);
    let distinct = binomial_at_least(n, shots, trials);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let mut s = sample(&mut rng, n, shots).into_vec();
        s.sort_unstable();
        if !distinct || seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn lowshot_all(cfg: &RunConfig) -> Result<Vec<LowshotRow>> {
    let ls = cfg
        .lowshot
        .as_ref()
        .ok_or_else(|| Error::config("lowshot", "the config has no [lowshot] table"))?;
    create_dir(&cfg.output_dir)?;
    let mut rows = Vec::new();
    let mut trials_csv = String::from("class,shots,trial,image_auroc,pixel_auroc,pro,train_images\n");
    for class in &cfg.classes {
        let train = load_split(&class.train, Split::Train)?;
        let test = load_split(&class.test, Split::Test)?;
        if let Some(&k) = ls.shots.iter().find(|&&k| k > train.len()) {
            return Err(Error::config(
                "lowshot.shots",
                format!("{k} shots requested but class {} has {} train images", class.name, train.len()),
            ));
        }
        let train_grids = patch_grids(&train, &cfg.patch)?;
        let test_grids = patch_grids(&test, &cfg.patch)?;
        for &k in &ls.shots {
            let subsets = lowshot_subsets(train.len(), k, ls.trials, ls.seed);
            let mut per_trial = Vec::with_capacity(subsets.len());
            for (t, subset) in subsets.iter().enumerate() {
                let sub = train.select(subset);
                let grids: Vec<PatchGrid> = subset.iter().map(|&i| train_grids[i].clone()).collect();
                let (m, _) = run_in_memory(&class.name, &sub, &grids, &test, &test_grids, &cfg.coreset, cfg)?;
                trials_csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    class.name,
                    k,
                    t,
                    m.image_auroc,
                    m.pixel_auroc,
                    m.pro,
                    ids(&sub).join(";")
                ));
                per_trial.push(m);
            }
            let col = |f: fn(&ClassMetrics) -> f64| mean_std(&per_trial.iter().map(f).collect::<Vec<_>>());
            rows.push(LowshotRow {
                class: class.name.clone(),
                shots: k,
                trials: per_trial.len(),
                image_auroc: col(|m| m.image_auroc),
                pixel_auroc: col(|m| m.pixel_auroc),
                pro: col(|m| m.pro),
            });
        }
    }
    let mut csv = String::from(
        "class,shots,trials,image_auroc_mean,image_auroc_std,pixel_auroc_mean,pixel_auroc_std,pro_mean,pro_std\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.class,
            r.shots,
            r.trials,
            r.image_auroc.0,
            r.image_auroc.1,
            r.pixel_auroc.0,
            r.pixel_auroc.1,
            r.pro.0,
            r.pro.1
        ));
    }
    write_text(&cfg.output_dir.join(LOWSHOT_FILE), csv)?;
    write_text(&cfg.output_dir.join(LOWSHOT_TRIALS_FILE), trials_csv)?;
    Ok(rows)
}

/// Retrains on seeded subsets of the train images for each shot count.
pub fn cmd_lowshot(cfg: &RunConfig) -> Result<Vec<LowshotRow>> {
    lowshot_all(cfg).map_err(|e| e.in_stage("lowshot"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub class: String,
    /// `coreset` or `patch`.
    pub sweep: &'static str,
    pub method: Method,
    pub target: Target,
    pub patch_size: usize,
    pub stride: usize,
    pub grid: (usize, usize),
    pub bank_size: usize,
    pub metrics: ClassMetrics,
}

fn ablate_all(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    create_dir(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for class in &cfg.classes {
        let train = load_split(&class.train, Split::Train)?;
        let test = load_split(&class.test, Split::Test)?;
        let mut run = |sweep: &'static str, patch: &PatchConfig, coreset: CoresetConfig| -> Result<()> {
            let train_grids = patch_grids(&train, patch)?;
            let test_grids = patch_grids(&test, patch)?;
            let (metrics, bank_size) =
                run_in_memory(&class.name, &train, &train_grids, &test, &test_grids, &coreset, cfg)?;
            rows.push(AblationRow {
                class: class.name.clone(),
                sweep,
                method: coreset.method,
                target: coreset.target,
                patch_size: patch.patch_size,
                stride: patch.stride,
                grid: (test_grids[0].rows, test_grids[0].cols),
                bank_size,
                metrics,
            });
            Ok(())
        };
        for &method in &cfg.ablate.methods {
            for &f in &cfg.ablate.fractions {
                let coreset = CoresetConfig {
                    method,
                    target: Target::Fraction(f),
                    ..cfg.coreset.clone()
                };
                run("coreset", &cfg.patch, coreset)?;
            }
        }
        for &p in &cfg.ablate.patch_sizes {
            for &s in &cfg.ablate.strides {
                let patch = PatchConfig {
                    patch_size: p,
                    stride: s,
                    ..cfg.patch.clone()
                };
                run("patch", &patch, cfg.coreset.clone())?;
            }
        }
    }
    let mut csv = String::from(
        "class,sweep,method,target,patch_size,stride,grid_rows,grid_cols,bank_size,image_auroc,pixel_auroc,pro\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.class,
            r.sweep,
            r.method.name(),
            describe_target(&r.target),
            r.patch_size,
            r.stride,
            r.grid.0,
            r.grid.1,
            r.bank_size,
            r.metrics.image_auroc,
            r.metrics.pixel_auroc,
            r.metrics.pro
        ));
    }
    write_text(&cfg.output_dir.join(ABLATION_FILE), csv)?;
    Ok(rows)
}

/// Subsampling method x fraction and neighbourhood size x stride sweeps.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    ablate_all(cfg).map_err(|e| e.in_stage("ablate"))
}
