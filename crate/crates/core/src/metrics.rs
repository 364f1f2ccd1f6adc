//! Detection and segmentation metrics: AUROC, pooled pixel AUROC, PRO,
//! F1-optimal threshold with misclassification counts.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based, tie-averaged) ranks of the positives, kept doubled to stay integral
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum_x2 += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let pos = pos as u128;
    let u_x2 = rank_sum_x2 - pos * (pos + 1);
    Ok(u_x2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

fn flatten_pixels(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>]) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != masks.len() {
        return Err(Error::validation(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    let total: usize = maps.iter().map(|m| m.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (m, k) in maps.iter().zip(masks) {
        if m.dim() != k.dim() {
            return Err(Error::validation(format!(
                "map shape {:?} does not match mask shape {:?}",
                m.dim(),
                k.dim()
            )));
        }
        scores.extend(m.iter().map(|&v| v as f64));
        labels.extend(k.iter().copied());
    }
    Ok((scores, labels))
}

/// AUROC over all pixels of all images pooled into one curve.
pub fn pixel_auroc(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>]) -> Result<f64> {
    let (scores, labels) = flatten_pixels(maps, masks)?;
    auroc(&scores, &labels)
}

/// Connected regions of a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// 0 for background, otherwise 1-based component label.
    pub labels: Array2<u32>,
    /// Pixel count of component `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// 8-connected labelling; labels are numbered by each component's first pixel in row-major order.
pub fn connected_components(mask: ArrayView2<bool>) -> Components {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let here = r * w + c;
            // previously visited 8-neighbours: W, NW, N, NE
            let mut neighbours = [None; 4];
            if c > 0 {
                neighbours[0] = Some((r, c - 1));
            }
            if r > 0 {
                if c > 0 {
                    neighbours[1] = Some((r - 1, c - 1));
                }
                neighbours[2] = Some((r - 1, c));
                if c + 1 < w {
                    neighbours[3] = Some((r - 1, c + 1));
                }
            }
            for (nr, nc) in neighbours.into_iter().flatten() {
                if mask[[nr, nc]] {
                    let a = find(&mut parent, here);
                    let b = find(&mut parent, nr * w + nc);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut root_label = vec![0u32; h * w];
    let mut sizes = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let root = find(&mut parent, r * w + c);
            if root_label[root] == 0 {
                sizes.push(0);
                root_label[root] = sizes.len() as u32;
            }
            let l = root_label[root];
            labels[[r, c]] = l;
            sizes[l as usize - 1] += 1;
        }
    }
    Components { labels, sizes }
}

/// Mean per-region recall against pooled false-positive rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ProCurve {
    pub fpr: Vec<f64>,
    pub pro: Vec<f64>,
}

/// Sweeps every distinct score as a threshold (pixel anomalous iff score >= threshold),
/// starting from the empty prediction at (0, 0).
pub fn pro_curve(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>]) -> Result<ProCurve> {
    if maps.len() != masks.len() {
        return Err(Error::validation(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    // pixel kind: u32::MAX for normal, otherwise global component index
    const NORMAL: u32 = u32::MAX;
    let mut pixels: Vec<(f32, u32)> = Vec::new();
    let mut comp_sizes: Vec<usize> = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        if m.dim() != k.dim() {
            return Err(Error::validation(format!(
                "map shape {:?} does not match mask shape {:?}",
                m.dim(),
                k.dim()
            )));
        }
        if m.iter().any(|v| v.is_nan()) {
            return Err(Error::validation("NaN score in anomaly map"));
        }
        let cc = connected_components(*k);
        let offset = comp_sizes.len() as u32;
        comp_sizes.extend(&cc.sizes);
        pixels.extend(m.iter().zip(cc.labels.iter()).map(|(&s, &l)| {
            (s, if l == 0 { NORMAL } else { offset + l - 1 })
        }));
    }
    let n_normal = pixels.iter().filter(|p| p.1 == NORMAL).count();
    if comp_sizes.is_empty() {
        return Err(Error::MetricUndefined("no anomalous regions in ground truth".into()));
    }
    if n_normal == 0 {
        return Err(Error::MetricUndefined("no normal pixels in ground truth".into()));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let n_comp = comp_sizes.len() as f64;
    let mut covered = vec![0usize; comp_sizes.len()];
    let mut recall_sum = 0.0f64;
    let mut fp = 0usize;
    let mut curve = ProCurve { fpr: vec![0.0], pro: vec![0.0] };
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                NORMAL => fp += 1,
                c => {
                    let c = c as usize;
                    covered[c] += 1;
                    recall_sum += 1.0 / comp_sizes[c] as f64;
                }
            }
            i += 1;
        }
        curve.fpr.push(fp as f64 / n_normal as f64);
        curve.pro.push(recall_sum / n_comp);
    }
    // exact end point
    if let Some(last) = curve.pro.last_mut() {
        *last = covered.iter().zip(&comp_sizes).map(|(&a, &s)| a as f64 / s as f64).sum::<f64>() / n_comp;
    }
    Ok(curve)
}

/// Trapezoidal area under `y(x)` for `x` in `[0, limit]`, interpolating at the limit.
/// `x` must be non-decreasing.
pub fn trapezoid_until(x: &[f64], y: &[f64], limit: f64) -> f64 {
    let mut area = 0.0;
    for i in 1..x.len() {
        let (x0, x1, y0, y1) = (x[i - 1], x[i], y[i - 1], y[i]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// Area under the PRO curve up to `fpr_limit`, normalised by `fpr_limit`.
pub fn pro_score(maps: &[ArrayView2<f32>], masks: &[ArrayView2<bool>], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::config("metrics.fpr_limit", format!("must be in (0, 1], got {fpr_limit}")));
    }
    let curve = pro_curve(maps, masks)?;
    Ok(trapezoid_until(&curve.fpr, &curve.pro, fpr_limit) / fpr_limit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Point {
    /// Scores strictly above the threshold are predicted anomalous.
    pub threshold: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Compares 2tp / (2tp + fp + fn) exactly.
fn f1_cmp(a: (usize, usize, usize), b: (usize, usize, usize)) -> Ordering {
    let num = |t: (usize, usize, usize)| 2 * t.0 as u128;
    let den = |t: (usize, usize, usize)| (2 * t.0 + t.1 + t.2) as u128;
    (num(a) * den(b)).cmp(&(num(b) * den(a)))
}

fn f1_point(threshold: f64, tp: usize, fp: usize, fn_: usize) -> F1Point {
    let den = 2 * tp + fp + fn_;
    F1Point {
        threshold,
        f1: if den == 0 { 0.0 } else { 2.0 * tp as f64 / den as f64 },
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

/// Threshold maximising the anomaly-class F1 over midpoints between distinct
/// scores and +/- infinity; ties go to the lower threshold.
pub fn f1_optimal_threshold(scores: &[f64], labels: &[bool]) -> Result<F1Point> {
    let (pos, _) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::INFINITY, (0usize, 0usize, pos));
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            (s + scores[order[i]]) / 2.0
        } else {
            f64::NEG_INFINITY
        };
        let cand = (tp, fp, pos - tp);
        if f1_cmp(cand, best.1) != Ordering::Less {
            best = (threshold, cand);
        }
    }
    let (t, (tp, fp, fn_)) = best;
    Ok(f1_point(t, tp, fp, fn_))
}

/// Counts at a fixed threshold (anomalous iff score > threshold).
pub fn counts_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> F1Point {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_point(threshold, tp, fp, fn_)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    /// Scores `>=` threshold are predicted anomalous.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    /// Precision; 1 by convention at the empty prediction.
    pub precision: f64,
}

/// ROC and precision-recall points over every distinct score, descending.
pub fn curve_points(scores: &[f64], labels: &[bool]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![CurvePoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0, precision: 1.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(CurvePoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(out)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub f1_threshold: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
}

pub const METRICS_HEADER: &str = "class,image_auroc,pixel_auroc,pro,f1_threshold,fp,fn";

/// Per-class rows plus an `AVERAGE` row: mean of the scores, summed counts,
/// and the shared threshold when one was used.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[ClassMetrics], global_threshold: Option<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.class, r.image_auroc, r.pixel_auroc, r.pro, r.f1_threshold, r.false_positives, r.false_negatives
        ));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        out.push_str(&format!(
            "AVERAGE,{},{},{},{},{},{}\n",
            mean(|r| r.image_auroc),
            mean(|r| r.pixel_auroc),
            mean(|r| r.pro),
            global_threshold.map(|t| t.to_string()).unwrap_or_default(),
            rows.iter().map(|r| r.false_positives).sum::<usize>(),
            rows.iter().map(|r| r.false_negatives).sum::<usize>(),
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pr_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("threshold,recall,precision\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.precision));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
