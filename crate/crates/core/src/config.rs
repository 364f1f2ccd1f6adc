//! Run configuration: one TOML file plus command-line overrides.
//!
//! ```toml
//! output_dir = "out"
//!
//! [patch]
//! p = 3
//! stride = 1
//! levels = [2, 3]
//! d_pre = 1024
//! d = 1024
//!
//! [coreset]
//! method = "greedy"        # greedy | random | learned_proxy
//! fraction = 0.1           # or: count = 5000
//! projection_dim = 128     # or: "off"
//! seed = 0
//!
//! [proxy]
//! epochs = 200
//! learning_rate = 0.01
//! distance_sign = "softmin"  # or "softmax"
//!
//! [scoring]
//! b = 3
//! sigma = 4.0
//! reweight_around = "test-feature"  # or "bank-nn"
//!
//! [metrics]
//! fpr_limit = 0.3
//! global_threshold = false
//!
//! [lowshot]
//! shots = [1, 5, 10]
//! trials = 3
//! seed = 0
//!
//! [ablate]
//! fractions = [1.0, 0.5, 0.1, 0.01]
//! methods = ["greedy", "random", "learned_proxy"]
//! patch_sizes = [1, 3, 5]
//! strides = [1, 2, 3]
//!
//! [[class]]
//! name = "bottle"
//! train = "bottle/train.tsv"
//! test = "bottle/test.tsv"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::coreset::{CoresetConfig, DistanceSign, Method, ProxyTrainConfig, Target};
use crate::error::{Error, Result};
use crate::patchify::PatchConfig;
use crate::scoring::{ReweightAround, ScoringConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub fpr_limit: f64,
    /// One F1-optimal threshold over all classes instead of one per class.
    pub global_threshold: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            fpr_limit: 0.3,
            global_threshold: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowshotConfig {
    pub shots: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub patch_sizes: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            fractions: vec![1.0, 0.5, 0.1, 0.01],
            methods: vec![Method::Greedy, Method::Random, Method::LearnedProxy],
            patch_sizes: vec![1, 3, 5],
            strides: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub patch: PatchConfig,
    pub coreset: CoresetConfig,
    pub scoring: ScoringConfig,
    pub metrics: MetricsConfig,
    pub lowshot: Option<LowshotConfig>,
    pub ablate: AblateConfig,
    pub classes: Vec<ClassSpec>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.coreset.validate()?;
        self.scoring.validate()?;
        if !(self.metrics.fpr_limit > 0.0 && self.metrics.fpr_limit <= 1.0) {
            return Err(Error::config("metrics.fpr_limit", "must be in (0, 1]"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("class", "at least one [[class]] entry is required"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.name.is_empty() || c.name.contains(['/', '\\', ',']) || c.name == "AVERAGE" {
                return Err(Error::config(
                    format!("class[{i}].name"),
                    format!("{:?} is not a usable class name", c.name),
                ));
            }
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::config(format!("class[{i}].name"), format!("duplicate class {:?}", c.name)));
            }
        }
        if let Some(l) = &self.lowshot {
            if l.shots.is_empty() || l.shots.contains(&0) {
                return Err(Error::config("lowshot.shots", "need one or more positive shot counts"));
            }
            if l.trials == 0 {
                return Err(Error::config("lowshot.trials", "must be >= 1"));
            }
        }
        if let Some(f) = self.ablate.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config("ablate.fractions", format!("{f} is not in (0, 1]")));
        }
        if self.ablate.patch_sizes.iter().any(|p| p % 2 == 0) {
            return Err(Error::config("ablate.patch_sizes", "neighbourhood sizes must be odd"));
        }
        if self.ablate.strides.contains(&0) {
            return Err(Error::config("ablate.strides", "strides must be >= 1"));
        }
        Ok(())
    }

    pub fn class_dir(&self, class: &ClassSpec) -> PathBuf {
        self.output_dir.join(&class.name)
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPatch {
    p: Option<usize>,
    stride: Option<usize>,
    levels: Option<Vec<usize>>,
    d_pre: Option<usize>,
    d: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawProjection {
    Dim(usize),
    Word(String),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCoreset {
    method: Option<String>,
    fraction: Option<f64>,
    count: Option<usize>,
    projection_dim: Option<RawProjection>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawProxy {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    distance_sign: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawScoring {
    b: Option<usize>,
    sigma: Option<f64>,
    reweight_around: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    fpr_limit: Option<f64>,
    global_threshold: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLowshot {
    shots: Vec<usize>,
    trials: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAblate {
    fractions: Option<Vec<f64>>,
    methods: Option<Vec<String>>,
    patch_sizes: Option<Vec<usize>>,
    strides: Option<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    name: String,
    train: PathBuf,
    test: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: Option<PathBuf>,
    #[serde(default)]
    patch: RawPatch,
    #[serde(default)]
    coreset: RawCoreset,
    #[serde(default)]
    proxy: RawProxy,
    #[serde(default)]
    scoring: RawScoring,
    #[serde(default)]
    metrics: RawMetrics,
    lowshot: Option<RawLowshot>,
    #[serde(default)]
    ablate: RawAblate,
    #[serde(default, rename = "class")]
    classes: Vec<RawClass>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses config text; relative paths are taken relative to `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;

    let defaults = PatchConfig::default();
    let patch = PatchConfig {
        patch_size: raw.patch.p.unwrap_or(defaults.patch_size),
        stride: raw.patch.stride.unwrap_or(defaults.stride),
        pre_dim: raw.patch.d_pre.unwrap_or(defaults.pre_dim),
        dim: raw.patch.d.unwrap_or(defaults.dim),
        levels: raw.patch.levels.unwrap_or(defaults.levels),
    };

    let mut coreset = CoresetConfig::default();
    coreset.target = match (raw.coreset.fraction, raw.coreset.count) {
        (Some(_), Some(_)) => {
            return Err(Error::config("coreset.count", "give either coreset.fraction or coreset.count, not both"))
        }
        (Some(f), None) => Target::Fraction(f),
        (None, Some(c)) => Target::Count(c),
        (None, None) => coreset.target,
    };
    if let Some(m) = raw.coreset.method {
        coreset.method = m.parse()?;
    }
    match raw.coreset.projection_dim {
        Some(RawProjection::Dim(d)) => coreset.projection_dim = Some(d),
        Some(RawProjection::Word(w)) if w == "off" => coreset.projection_dim = None,
        Some(RawProjection::Word(w)) => {
            return Err(Error::config("coreset.projection_dim", format!("expected an integer or \"off\", got {w:?}")))
        }
        None => {}
    }
    if let Some(s) = raw.coreset.seed {
        coreset.seed = s;
    }
    let pd = ProxyTrainConfig::default();
    coreset.proxy = ProxyTrainConfig {
        epochs: raw.proxy.epochs.unwrap_or(pd.epochs),
        learning_rate: raw.proxy.learning_rate.unwrap_or(pd.learning_rate),
        seed: coreset.seed,
        distance_sign: match raw.proxy.distance_sign {
            Some(s) => s.parse::<DistanceSign>()?,
            None => pd.distance_sign,
        },
    };

    let sd = ScoringConfig::default();
    let scoring = ScoringConfig {
        b: raw.scoring.b.unwrap_or(sd.b),
        sigma: raw.scoring.sigma.unwrap_or(sd.sigma),
        output_size: sd.output_size,
        reweight_around: match raw.scoring.reweight_around {
            Some(s) => s.parse::<ReweightAround>()?,
            None => sd.reweight_around,
        },
    };

    let md = MetricsConfig::default();
    let metrics = MetricsConfig {
        fpr_limit: raw.metrics.fpr_limit.unwrap_or(md.fpr_limit),
        global_threshold: raw.metrics.global_threshold.unwrap_or(md.global_threshold),
    };

    let lowshot = raw.lowshot.map(|l| LowshotConfig {
        shots: l.shots,
        trials: l.trials.unwrap_or(1),
        seed: l.seed.unwrap_or(0),
    });

    let ad = AblateConfig::default();
    let ablate = AblateConfig {
        fractions: raw.ablate.fractions.unwrap_or(ad.fractions),
        methods: match raw.ablate.methods {
            Some(ms) => ms
                .iter()
                .map(|m| m.parse::<Method>().map_err(|_| Error::config("ablate.methods", format!("unknown method {m:?}"))))
                .collect::<Result<_>>()?,
            None => ad.methods,
        },
        patch_sizes: raw.ablate.patch_sizes.unwrap_or(ad.patch_sizes),
        strides: raw.ablate.strides.unwrap_or(ad.strides),
    };

    let cfg = RunConfig {
        output_dir: resolve(base, raw.output_dir.unwrap_or_else(|| PathBuf::from("out"))),
        patch,
        coreset,
        scoring,
        metrics,
        lowshot,
        ablate,
        classes: raw
            .classes
            .into_iter()
            .map(|c| ClassSpec {
                name: c.name,
                train: resolve(base, c.train),
                test: resolve(base, c.test),
            })
            .collect(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new("")))
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub patch_size: Option<usize>,
    pub stride: Option<usize>,
    pub levels: Option<Vec<usize>>,
    pub pre_dim: Option<usize>,
    pub dim: Option<usize>,
    pub fraction: Option<f64>,
    pub count: Option<usize>,
    /// `Some(None)` disables projection.
    pub projection_dim: Option<Option<usize>>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub b: Option<usize>,
    pub sigma: Option<f64>,
    pub reweight_around: Option<ReweightAround>,
    pub fpr_limit: Option<f64>,
    pub global_threshold: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.patch_size {
            cfg.patch.patch_size = v;
        }
        if let Some(v) = self.stride {
            cfg.patch.stride = v;
        }
        if let Some(v) = &self.levels {
            cfg.patch.levels = v.clone();
        }
        if let Some(v) = self.pre_dim {
            cfg.patch.pre_dim = v;
        }
        if let Some(v) = self.dim {
            cfg.patch.dim = v;
        }
        match (self.fraction, self.count) {
            (Some(_), Some(_)) => return Err(Error::config("coreset.count", "give either --fraction or --count")),
            (Some(f), None) => cfg.coreset.target = Target::Fraction(f),
            (None, Some(c)) => cfg.coreset.target = Target::Count(c),
            (None, None) => {}
        }
        if let Some(v) = self.projection_dim {
            cfg.coreset.projection_dim = v;
        }
        if let Some(v) = self.method {
            cfg.coreset.method = v;
        }
        if let Some(v) = self.seed {
            cfg.coreset.seed = v;
            cfg.coreset.proxy.seed = v;
        }
        if let Some(v) = self.b {
            cfg.scoring.b = v;
        }
        if let Some(v) = self.sigma {
            cfg.scoring.sigma = v;
        }
        if let Some(v) = self.reweight_around {
            cfg.scoring.reweight_around = v;
        }
        if let Some(v) = self.fpr_limit {
            cfg.metrics.fpr_limit = v;
        }
        if self.global_threshold {
            cfg.metrics.global_threshold = true;
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[class]]
name = "a"
train = "a/train.tsv"
test = "a/test.tsv"
"#;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn defaults_and_relative_paths() {
        let cfg = parse_config(MINIMAL, Path::new("/data/run")).unwrap();
        assert_eq!(cfg.patch, PatchConfig::default());
        assert_eq!(cfg.coreset, CoresetConfig::default());
        assert_eq!(cfg.scoring, ScoringConfig::default());
        assert_eq!(cfg.output_dir, PathBuf::from("/data/run/out"));
        assert_eq!(cfg.classes[0].train, PathBuf::from("/data/run/a/train.tsv"));
        assert!(cfg.lowshot.is_none());
    }

    #[test]
    fn full_file() {
        let text = format!(
            r#"
output_dir = "/tmp/x"
[patch]
p = 5
stride = 2
levels = [1, 2, 3]
d_pre = 64
d = 32
[coreset]
method = "random"
count = 40
projection_dim = "off"
seed = 9
[proxy]
epochs = 5
distance_sign = "softmax"
[scoring]
b = 4
sigma = 2.0
reweight_around = "bank-nn"
[metrics]
fpr_limit = 0.2
global_threshold = true
[lowshot]
shots = [1, 2]
trials = 3
[ablate]
methods = ["greedy"]
{MINIMAL}"#
        );
        let cfg = parse_config(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.patch.levels, vec![1, 2, 3]);
        assert_eq!(cfg.coreset.target, Target::Count(40));
        assert_eq!(cfg.coreset.projection_dim, None);
        assert_eq!(cfg.coreset.proxy.seed, 9);
        assert_eq!(cfg.coreset.proxy.distance_sign, DistanceSign::Softmax);
        assert_eq!(cfg.scoring.reweight_around, ReweightAround::BankNn);
        assert!(cfg.metrics.global_threshold);
        assert_eq!(cfg.lowshot.as_ref().unwrap().trials, 3);
        assert_eq!(cfg.ablate.methods, vec![Method::Greedy]);
    }

    #[test]
    fn errors_name_fields() {
        let bad = |extra: &str| field_of(parse_config(&format!("{extra}\n{MINIMAL}"), Path::new(".")).unwrap_err());
        assert_eq!(bad("[patch]\np = 2"), "patch.p");
        assert_eq!(bad("[patch]\nstride = 0"), "patch.stride");
        assert_eq!(bad("[coreset]\nfraction = 1.5"), "coreset.fraction");
        assert_eq!(bad("[coreset]\nfraction = 0.1\ncount = 3"), "coreset.count");
        assert_eq!(bad("[coreset]\nprojection_dim = \"maybe\""), "coreset.projection_dim");
        assert_eq!(bad("[coreset]\nmethod = \"kmeans\""), "coreset.method");
        assert_eq!(bad("[scoring]\nb = 1"), "scoring.b");
        assert_eq!(bad("[metrics]\nfpr_limit = 0"), "metrics.fpr_limit");
        assert_eq!(bad("[lowshot]\nshots = []"), "lowshot.shots");
        assert_eq!(bad("[ablate]\npatch_sizes = [2]"), "ablate.patch_sizes");
        assert_eq!(bad("bogus = 1"), "config");
        assert_eq!(field_of(parse_config("", Path::new(".")).unwrap_err()), "class");
    }

    #[test]
    fn overrides() {
        let mut cfg = parse_config(MINIMAL, Path::new(".")).unwrap();
        let o = Overrides {
            patch_size: Some(1),
            count: Some(7),
            projection_dim: Some(None),
            seed: Some(3),
            ..Default::default()
        };
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.patch.patch_size, 1);
        assert_eq!(cfg.coreset.target, Target::Count(7));
        assert_eq!(cfg.coreset.projection_dim, None);
        assert_eq!(cfg.coreset.proxy.seed, 3);
        let bad = Overrides {
            sigma: Some(-1.0),
            ..Default::default()
        };
        assert_eq!(field_of(bad.apply(&mut cfg).unwrap_err()), "scoring.sigma");
    }
}
