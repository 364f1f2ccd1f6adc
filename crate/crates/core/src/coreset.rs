//! Memory bank reduction: greedy k-center coreset selection with optional
//! Gaussian random projection, plus the random-subsampling and learned-proxy
//! baselines.

use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patchify::{MemoryBank, Provenance};
use crate::{l2, seeded_stream, squared_l2, streams};

/// Subsampling target: a fraction of the bank or an absolute row count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Fraction(f64),
    Count(usize),
}

impl Target {
    /// Number of rows to keep: `max(1, floor(fraction * n))` or the count itself.
    pub fn resolve(&self, n: usize) -> Result<usize> {
        match *self {
            Target::Fraction(f) if f > 0.0 && f <= 1.0 => Ok(((f * n as f64).floor() as usize).max(1)),
            Target::Fraction(f) => Err(Error::config(
                "coreset.fraction",
                format!("fraction must be in (0, 1], got {f}"),
            )),
            Target::Count(0) => Err(Error::config("coreset.count", "count must be >= 1")),
            Target::Count(l) if l > n => Err(Error::config(
                "coreset.count",
                format!("count {l} exceeds bank size {n}"),
            )),
            Target::Count(l) => Ok(l),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Greedy,
    Random,
    LearnedProxy,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" | "greedy_coreset" => Ok(Method::Greedy),
            "random" => Ok(Method::Random),
            "learned_proxy" | "proxy" => Ok(Method::LearnedProxy),
            other => Err(Error::config(
                "coreset.method",
                format!("unknown method {other:?} (greedy, random, learned_proxy)"),
            )),
        }
    }
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Random => "random",
            Method::LearnedProxy => "learned_proxy",
        }
    }
}

/// Sign of the distance inside the proxy-assignment softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceSign {
    /// softmax(-distance): nearer proxies get more weight.
    Softmin,
    /// softmax(+distance): farther proxies get more weight.
    Softmax,
}

impl DistanceSign {
    fn factor(&self) -> f64 {
        match self {
            DistanceSign::Softmin => -1.0,
            DistanceSign::Softmax => 1.0,
        }
    }
}

impl FromStr for DistanceSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmin" => Ok(DistanceSign::Softmin),
            "softmax" => Ok(DistanceSign::Softmax),
            other => Err(Error::config(
                "proxy.distance_sign",
                format!("expected softmin or softmax, got {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub distance_sign: DistanceSign,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        ProxyTrainConfig {
            epochs: 200,
            learning_rate: 0.01,
            seed: 0,
            distance_sign: DistanceSign::Softmin,
        }
    }
}

impl ProxyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("proxy.epochs", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("proxy.learning_rate", "must be a positive finite number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoresetConfig {
    pub target: Target,
    /// Random projection dimension; `None` selects in the original space.
    pub projection_dim: Option<usize>,
    pub seed: u64,
    pub method: Method,
    pub proxy: ProxyTrainConfig,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        CoresetConfig {
            target: Target::Fraction(0.1),
            projection_dim: Some(128),
            seed: 0,
            method: Method::Greedy,
            proxy: ProxyTrainConfig::default(),
        }
    }
}

impl CoresetConfig {
    pub fn validate(&self) -> Result<()> {
        if let Target::Fraction(f) = self.target {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("coreset.fraction", format!("must be in (0, 1], got {f}")));
            }
        }
        if let Target::Count(0) = self.target {
            return Err(Error::config("coreset.count", "must be >= 1"));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::config("coreset.projection_dim", "must be >= 1 or \"off\""));
        }
        self.proxy.validate()
    }
}

/// Projects rows onto `dstar` dimensions with a Gaussian matrix of variance `1/dstar`.
pub fn jl_project(points: ArrayView2<f32>, dstar: usize, seed: u64) -> Result<Array2<f32>> {
    if dstar == 0 {
        return Err(Error::config("coreset.projection_dim", "projection dimension must be >= 1"));
    }
    let d = points.ncols();
    if dstar >= d {
        log::warn!("projection dimension {dstar} is not below the feature dimension {d}");
    }
    let mut rng = seeded_stream(seed, streams::PROJECTION);
    let scale = 1.0 / (dstar as f64).sqrt();
    let g = Array2::from_shape_simple_fn((d, dstar), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        (z * scale) as f32
    });
    Ok(points.dot(&g))
}

fn check_target(n: usize, l: usize) -> Result<()> {
    if l == 0 {
        return Err(Error::config("coreset.count", "coreset size must be >= 1"));
    }
    if l > n {
        return Err(Error::config(
            "coreset.count",
            format!("coreset size {l} exceeds the number of points {n}"),
        ));
    }
    Ok(())
}

/// Greedy farthest-point selection; the first index is drawn from the seeded generator.
pub fn greedy_coreset(points: ArrayView2<f32>, l: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    check_target(n, l)?;
    let first = seeded_stream(seed, streams::FIRST_PICK).random_range(0..n);
    greedy_coreset_from(points, l, first)
}

/// Greedy farthest-point selection starting from `first`.
///
/// Keeps each point's distance to the nearest selected point and appends the
/// unselected point maximising it, lowest index on ties. O(N) per step.
pub fn greedy_coreset_from(points: ArrayView2<f32>, l: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    check_target(n, l)?;
    if first >= n {
        return Err(Error::validation(format!("first pick {first} out of range ({n} points)")));
    }
    let pts = points.as_standard_layout();
    let flat = pts.as_slice().expect("standard layout");
    let d = points.ncols().max(1);
    let row = |i: usize| &flat[i * d..(i + 1) * d];

    let mut min_dist = vec![f64::INFINITY; n];
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(l);
    let mut next = first;
    loop {
        order.push(next);
        selected[next] = true;
        if order.len() == l {
            break;
        }
        let center = row(next);
        let best = min_dist
            .par_iter_mut()
            .zip(selected.par_iter())
            .enumerate()
            .with_min_len(512)
            .map(|(i, (md, &sel))| {
                let dist = l2(row(i), center);
                if dist < *md {
                    *md = dist;
                }
                if sel {
                    (f64::NEG_INFINITY, usize::MAX)
                } else {
                    (*md, i)
                }
            })
            .reduce(|| (f64::NEG_INFINITY, usize::MAX), farther);
        next = best.1;
    }
    Ok(order)
}

/// Larger distance wins; equal distances go to the lower index.
fn farther(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
        a
    } else {
        b
    }
}

/// Max over all points of the distance to the nearest selected point.
pub fn coverage_radius(points: ArrayView2<f32>, selected: &[usize]) -> f64 {
    let pts = points.as_standard_layout();
    let centers: Vec<_> = selected.iter().map(|&i| pts.row(i).to_vec()).collect();
    pts.axis_iter(Axis(0))
        .into_par_iter()
        .map(|p| {
            let p = p.to_slice().expect("standard layout");
            centers
                .iter()
                .map(|c| squared_l2(p, c))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .reduce(|| 0.0, f64::max)
}

/// Uniform sample of `l` out of `n` indices without replacement, sorted ascending.
pub fn random_subsample(n: usize, l: usize, seed: u64) -> Result<Vec<usize>> {
    check_target(n, l)?;
    let mut rng = seeded_stream(seed, streams::RANDOM_SUBSAMPLE);
    let mut idx = rand::seq::index::sample(&mut rng, n, l).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Row-stochastic assignment weights `softmax_k(sign * ||m_i - p_k||)`.
pub fn proxy_weights(points: ArrayView2<f32>, proxies: ArrayView2<f32>, sign: DistanceSign) -> Array2<f64> {
    let pts = points.as_standard_layout();
    let prx = proxies.as_standard_layout();
    let mut w = Array2::<f64>::zeros((pts.nrows(), prx.nrows()));
    for (i, mut wrow) in w.axis_iter_mut(Axis(0)).enumerate() {
        let m = pts.row(i);
        let m = m.as_slice().unwrap();
        for (k, p) in prx.axis_iter(Axis(0)).enumerate() {
            wrow[k] = sign.factor() * l2(m, p.as_slice().unwrap());
        }
        softmax_in_place(wrow.as_slice_mut().unwrap());
    }
    w
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

const OBJECTIVE_CHUNK: usize = 256;

/// Mean reconstruction loss `mean_i ||m_i - sum_k w_ik p_k||^2` and its gradient
/// with respect to the proxies (f64, shape of `proxies`).
pub fn reconstruction_objective(
    points: ArrayView2<f32>,
    proxies: ArrayView2<f64>,
    sign: DistanceSign,
) -> (f64, Array2<f64>) {
    let n = points.nrows();
    let (l, d) = proxies.dim();
    let sgn = sign.factor();
    let pts = points.mapv(f64::from);
    let prx = proxies.as_standard_layout();

    // Fixed chunking and in-order summation keep the result independent of the thread count.
    let partials: Vec<(f64, Array2<f64>)> = pts
        .axis_chunks_iter(Axis(0), OBJECTIVE_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grad = Array2::<f64>::zeros((l, d));
            let mut dist = vec![0.0f64; l];
            let mut w = vec![0.0f64; l];
            let mut pbar = vec![0.0f64; d];
            let mut r = vec![0.0f64; d];
            for m in chunk.axis_iter(Axis(0)) {
                let m = m.as_slice().unwrap();
                for k in 0..l {
                    let p = prx.row(k);
                    dist[k] = m
                        .iter()
                        .zip(p.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    w[k] = sgn * dist[k];
                }
                softmax_in_place(&mut w);
                pbar.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..l {
                    for (acc, &pk) in pbar.iter_mut().zip(prx.row(k).iter()) {
                        *acc += w[k] * pk;
                    }
                }
                for j in 0..d {
                    r[j] = m[j] - pbar[j];
                }
                loss += r.iter().map(|v| v * v).sum::<f64>();
                for k in 0..l {
                    let p = prx.row(k);
                    // d loss / d z_ik
                    let g = -2.0 * w[k] * r.iter().zip(p.iter().zip(&pbar)).map(|(ri, (pk, pb))| ri * (pk - pb)).sum::<f64>();
                    let coef = if dist[k] > 0.0 { g * sgn / dist[k] } else { 0.0 };
                    let mut gk = grad.row_mut(k);
                    for j in 0..d {
                        gk[j] += -2.0 * w[k] * r[j] + coef * (p[j] - m[j]);
                    }
                }
            }
            (loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((l, d));
    for (pl, pg) in partials {
        loss += pl;
        grad += &pg;
    }
    let inv = 1.0 / n as f64;
    (loss * inv, grad * inv)
}

#[derive(Clone, Debug)]
pub struct ProxyTraining {
    pub proxies: Array2<f32>,
    /// Loss before each update, followed by the loss of the returned proxies.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on the proxy reconstruction objective.
pub fn learned_proxies(points: ArrayView2<f32>, l: usize, cfg: &ProxyTrainConfig) -> Result<ProxyTraining> {
    cfg.validate()?;
    let n = points.nrows();
    check_target(n, l)?;
    let mut rng = seeded_stream(cfg.seed, streams::PROXY_INIT);
    let mut init = rand::seq::index::sample(&mut rng, n, l).into_vec();
    init.sort_unstable();
    let mut proxies = points.select(Axis(0), &init).mapv(f64::from);

    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = reconstruction_objective(points, proxies.view(), cfg.distance_sign);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        trace.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        proxies.scaled_add(-cfg.learning_rate, &grad);
        log::debug!("proxy epoch {epoch}: loss {loss}");
    }
    Ok(ProxyTraining {
        proxies: proxies.mapv(|v| v as f32),
        loss_trace: trace,
    })
}

/// Reduces a memory bank according to `cfg`.
pub fn subsample_memory_bank(bank: &MemoryBank, cfg: &CoresetConfig) -> Result<MemoryBank> {
    cfg.validate()?;
    let n = bank.len();
    let l = cfg.target.resolve(n)?;
    if l == n && cfg.method != Method::LearnedProxy {
        // every row survives; skip the O(N^2) ordering pass
        return bank.select_rows(&(0..n).collect::<Vec<_>>());
    }
    match cfg.method {
        Method::Greedy => {
            let order = match cfg.projection_dim {
                Some(dstar) => {
                    let projected = jl_project(bank.features().view(), dstar, cfg.seed)?;
                    greedy_coreset(projected.view(), l, cfg.seed)?
                }
                None => greedy_coreset(bank.features().view(), l, cfg.seed)?,
            };
            bank.select_rows(&order)
        }
        Method::Random => bank.select_rows(&random_subsample(n, l, cfg.seed)?),
        Method::LearnedProxy => {
            let trained = learned_proxies(bank.features().view(), l, &cfg.proxy)?;
            log::info!(
                "proxy training: loss {:.6} -> {:.6}",
                trained.loss_trace.first().copied().unwrap_or(f64::NAN),
                trained.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            MemoryBank::new(
                trained.proxies,
                (0..l).map(|index| Provenance::Synthetic { index }).collect(),
                Some(bank.subsampled_from().unwrap_or(n)),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use ndarray::array;

    fn random_points(seed: u64, n: usize, d: usize) -> Array2<f32> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0f32..1.0))
    }

    /// O(N^2 l) reference: recompute every min-distance from scratch each step.
    fn naive_greedy(points: &Array2<f32>, l: usize, first: usize) -> Vec<usize> {
        let n = points.nrows();
        let mut sel = vec![first];
        while sel.len() < l {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..n {
                if sel.contains(&i) {
                    continue;
                }
                let mut m = f64::INFINITY;
                for &j in &sel {
                    let dd: f64 = points
                        .row(i)
                        .iter()
                        .zip(points.row(j).iter())
                        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    m = m.min(dd);
                }
                if m > best.0 {
                    best = (m, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    #[test]
    fn identical_points_break_ties_low() {
        let pts = Array2::<f32>::ones((5, 3));
        let sel = greedy_coreset_from(pts.view(), 3, 2).unwrap();
        assert_eq!(sel, vec![2, 0, 1]);
        let sel = greedy_coreset(pts.view(), 3, 99).unwrap();
        let first = sel[0];
        let rest: Vec<usize> = (0..5).filter(|&i| i != first).take(2).collect();
        assert_eq!(&sel[1..], &rest[..]);
    }

    #[test]
    fn farthest_point_step() {
        let pts = array![[0.0f32], [10.0], [1.0]];
        assert_eq!(greedy_coreset_from(pts.view(), 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn matches_naive_greedy() {
        let pts = random_points(3, 64, 5);
        let sel = greedy_coreset(pts.view(), 8, 17).unwrap();
        assert_eq!(sel, naive_greedy(&pts, 8, sel[0]));
    }

    #[test]
    fn target_errors() {
        let pts = random_points(1, 4, 2);
        assert!(greedy_coreset(pts.view(), 0, 0).is_err());
        assert!(greedy_coreset(pts.view(), 5, 0).is_err());
        assert!(random_subsample(4, 5, 0).is_err());
        assert_eq!(Target::Fraction(0.25).resolve(1000).unwrap(), 250);
        assert_eq!(Target::Fraction(0.001).resolve(10).unwrap(), 1);
        assert!(Target::Fraction(0.0).resolve(10).is_err());
        assert!(Target::Count(11).resolve(10).is_err());
    }

    #[test]
    fn projection_basics() {
        let zeros = Array2::<f32>::zeros((10, 16));
        assert!(jl_project(zeros.view(), 4, 1).unwrap().iter().all(|&v| v == 0.0));
        let pts = random_points(2, 10, 16);
        let a = jl_project(pts.view(), 4, 7).unwrap();
        assert_eq!(a, jl_project(pts.view(), 4, 7).unwrap());
        assert_ne!(a, jl_project(pts.view(), 4, 8).unwrap());
        assert_eq!(a.dim(), (10, 4));
        assert!(jl_project(pts.view(), 0, 7).is_err());
    }

    /// Fraction of sampled pairs whose squared distance ratio after projection lies in [0.5, 1.5].
    ///
    /// For Gaussian projections the ratio is chi^2(d*)/d*, so at d* = 32 the
    /// expected fraction is P(16 <= chi^2_32 <= 48) = 0.9574.
    #[test]
    fn projection_distortion_d32() {
        let mut inside = 0usize;
        let mut total = 0usize;
        for trial in 0..5u64 {
            let mut rng = seeded_rng(100 + trial);
            let pts = Array2::from_shape_simple_fn((2000, 64), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            });
            let proj = jl_project(pts.view(), 32, trial).unwrap();
            for _ in 0..4000 {
                let i = rng.random_range(0..2000);
                let j = rng.random_range(0..2000);
                if i == j {
                    continue;
                }
                let a = squared_l2(pts.row(i).as_slice().unwrap(), pts.row(j).as_slice().unwrap());
                let b = squared_l2(proj.row(i).as_slice().unwrap(), proj.row(j).as_slice().unwrap());
                total += 1;
                if (b / a - 1.0).abs() <= 0.5 {
                    inside += 1;
                }
            }
        }
        let frac = inside as f64 / total as f64;
        assert!(frac >= 0.94, "distortion fraction {frac}");
    }

    #[test]
    fn random_subsample_properties() {
        assert_eq!(random_subsample(7, 7, 3).unwrap(), (0..7).collect::<Vec<_>>());
        let a = random_subsample(100, 10, 5).unwrap();
        assert_eq!(a, random_subsample(100, 10, 5).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));

        let n = 20;
        let mut counts = vec![0usize; n];
        for seed in 0..10_000u64 {
            for i in random_subsample(n, n / 2, seed).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.5).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let pts = random_points(8, 12, 3);
        let mut rng = seeded_rng(9);
        let proxies = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0f64..1.0));
        for sign in [DistanceSign::Softmin, DistanceSign::Softmax] {
            let (_, grad) = reconstruction_objective(pts.view(), proxies.view(), sign);
            let h = 1e-6;
            for k in 0..4 {
                for j in 0..3 {
                    let mut plus = proxies.clone();
                    plus[[k, j]] += h;
                    let mut minus = proxies.clone();
                    minus[[k, j]] -= h;
                    let fd = (reconstruction_objective(pts.view(), plus.view(), sign).0
                        - reconstruction_objective(pts.view(), minus.view(), sign).0)
                        / (2.0 * h);
                    assert!((fd - grad[[k, j]]).abs() < 1e-6, "{sign:?} ({k},{j}): fd {fd} vs {}", grad[[k, j]]);
                }
            }
        }
    }

    #[test]
    fn proxy_self_reconstruction() {
        // well separated rows, l = N: every row is its own proxy
        let pts = array![[0.0f32, 0.0], [50.0, 0.0], [0.0, 50.0], [50.0, 50.0]];
        let (loss, _) = reconstruction_objective(pts.view(), pts.mapv(f64::from).view(), DistanceSign::Softmin);
        assert!(loss.is_finite() && loss < 1e-10, "loss {loss}");

        let single = array![[1.0f32, -2.0, 3.0]];
        let t = learned_proxies(single.view(), 1, &ProxyTrainConfig::default()).unwrap();
        assert_eq!(t.proxies, single);
        assert!(*t.loss_trace.last().unwrap() < 1e-12);
    }

    #[test]
    fn proxies_land_in_clusters() {
        let mut rng = seeded_rng(21);
        let mut rows = Vec::new();
        for i in 0..100 {
            let c = if i < 50 { 0.0 } else { 10.0 };
            rows.push([c + rng.random_range(-1.0f32..1.0), c + rng.random_range(-1.0f32..1.0)]);
        }
        let pts = Array2::from_shape_fn((100, 2), |(i, j)| rows[i][j]);
        let bbox = |lo: usize| {
            let block = pts.slice(ndarray::s![lo..lo + 50, ..]);
            let min = block.fold_axis(Axis(0), f32::INFINITY, |a, b| a.min(*b));
            let max = block.fold_axis(Axis(0), f32::NEG_INFINITY, |a, b| a.max(*b));
            (min, max)
        };
        let boxes = [bbox(0), bbox(50)];
        let inside = |p: ndarray::ArrayView1<f32>, b: &(ndarray::Array1<f32>, ndarray::Array1<f32>)| {
            (0..2).all(|j| p[j] >= b.0[j] && p[j] <= b.1[j])
        };
        // a proxy seeded in the wrong cluster needs ~1000 steps at lr 0.01 to cross over
        for seed in 0..10 {
            let cfg = ProxyTrainConfig { seed, epochs: 1000, ..ProxyTrainConfig::default() };
            let t = learned_proxies(pts.view(), 2, &cfg).unwrap();
            // nearest true centroid of each proxy
            let owner = |p: ndarray::ArrayView1<f32>| usize::from(p[0] + p[1] > 10.0);
            let (a, b) = (t.proxies.row(0), t.proxies.row(1));
            assert_ne!(owner(a), owner(b), "seed {seed}: {:?}", t.proxies);
            assert!(inside(a, &boxes[owner(a)]), "seed {seed}: {a:?}");
            assert!(inside(b, &boxes[owner(b)]), "seed {seed}: {b:?}");
            assert!(t.loss_trace.last() < t.loss_trace.first());
        }
    }

    #[test]
    fn proxy_weights_are_stochastic() {
        let pts = random_points(4, 30, 5) * 100.0;
        for sign in [DistanceSign::Softmin, DistanceSign::Softmax] {
            for epochs in 1..4 {
                let cfg = ProxyTrainConfig { epochs, learning_rate: 1e-4, seed: 1, distance_sign: sign };
                let t = learned_proxies(pts.view(), 6, &cfg).unwrap();
                let w = proxy_weights(pts.view(), t.proxies.view(), sign);
                for row in w.axis_iter(Axis(0)) {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let pts = random_points(5, 20, 3) * 1e3;
        let cfg = ProxyTrainConfig { epochs: 50, learning_rate: 1e30, seed: 0, distance_sign: DistanceSign::Softmin };
        match learned_proxies(pts.view(), 3, &cfg) {
            Err(Error::TrainingDiverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn bank_of(points: Array2<f32>) -> MemoryBank {
        let n = points.nrows();
        let prov = (0..n)
            .map(|i| Provenance::Patch { image_id: "x".into(), row: i, col: 0 })
            .collect();
        MemoryBank::new(points, prov, None).unwrap()
    }

    #[test]
    fn subsample_bank_variants() {
        let bank = bank_of(random_points(6, 1000, 8));
        let full = subsample_memory_bank(
            &bank,
            &CoresetConfig { target: Target::Fraction(1.0), projection_dim: Some(4), ..Default::default() },
        )
        .unwrap();
        assert_eq!(full.len(), 1000);
        assert_eq!(full.subsampled_from(), Some(1000));
        let mut rows: Vec<usize> = full
            .provenance()
            .iter()
            .map(|p| match p {
                Provenance::Patch { row, .. } => *row,
                _ => unreachable!(),
            })
            .collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..1000).collect::<Vec<_>>());

        for method in [Method::Greedy, Method::Random] {
            let cfg = CoresetConfig { target: Target::Fraction(0.25), method, projection_dim: Some(4), ..Default::default() };
            let sub = subsample_memory_bank(&bank, &cfg).unwrap();
            assert_eq!(sub.len(), 250);
            // returned features are exact rows of the original bank
            for (i, p) in sub.provenance().iter().enumerate() {
                let Provenance::Patch { row, .. } = p else { unreachable!() };
                assert_eq!(sub.features().row(i), bank.features().row(*row));
            }
        }

        let small = bank_of(random_points(7, 40, 3));
        let cfg = CoresetConfig {
            target: Target::Count(4),
            method: Method::LearnedProxy,
            proxy: ProxyTrainConfig { epochs: 5, ..Default::default() },
            ..Default::default()
        };
        let sub = subsample_memory_bank(&small, &cfg).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.dim(), 3);
        assert!(matches!(sub.provenance()[0], Provenance::Synthetic { index: 0 }));
    }

    /// Exhaustive optimal k-center radius.
    fn optimal_radius(points: &Array2<f32>, l: usize) -> f64 {
        let n = points.nrows();
        let mut best = f64::INFINITY;
        let mut combo: Vec<usize> = (0..l).collect();
        loop {
            best = best.min(coverage_radius(points.view(), &combo));
            let mut i = l;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if combo[i] < n - l + i {
                    combo[i] += 1;
                    for j in i + 1..l {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn greedy_is_two_approximate(seed in any::<u64>(), n in 3usize..=10, l in 1usize..=3) {
            let pts = random_points(seed, n, 2);
            let sel = greedy_coreset(pts.view(), l, seed).unwrap();
            prop_assert!(coverage_radius(pts.view(), &sel) <= 2.0 * optimal_radius(&pts, l));
        }

        #[test]
        fn coverage_is_monotone_and_deterministic(seed in any::<u64>(), n in 8usize..60) {
            let pts = random_points(seed, n, 3);
            let sel = greedy_coreset(pts.view(), n.min(12), seed).unwrap();
            prop_assert_eq!(&sel, &greedy_coreset(pts.view(), n.min(12), seed).unwrap());
            let mut prev = f64::INFINITY;
            for k in 1..=sel.len() {
                let r = coverage_radius(pts.view(), &sel[..k]);
                prop_assert!(r <= prev);
                prev = r;
            }
        }
    }
}
