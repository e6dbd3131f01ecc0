//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` and trailing `# ...` are comments. Unknown keys
//! are rejected. Precedence, lowest first: defaults, config file, the
//! `MEDOE_SEED` environment variable, command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::formats::{parse_key_values, read_file};
use crate::inference::Combiner;
use crate::synthgen::{GeneratorConfig, GroupingMode, Quota};
use crate::training::{TrainConfig, TrainMode};

pub const SEED_ENV: &str = "MEDOE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    LongTail,
    Uniform,
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "longtail" => Ok(Distribution::LongTail),
            "uniform" => Ok(Distribution::Uniform),
            _ => Err(Error::invalid(format!("unknown distribution '{s}' (expected longtail or uniform)"))),
        }
    }
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::LongTail => "longtail",
            Distribution::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split '{s}' (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub grouping: GroupingMode,
    pub train: TrainConfig,
    pub combiner: Combiner,
    pub distribution: Distribution,
    pub uniform_quota: Quota,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        ExperimentConfig {
            grouping: GroupingMode::ExplicitCounts { head: generator.n_head, body: generator.n_body, tail: generator.n_tail },
            train_scenes: 200,
            test_scenes: 50,
            generator,
            train: TrainConfig::default(),
            combiner: Combiner::Moe,
            distribution: Distribution::LongTail,
            uniform_quota: Quota::Auto,
            out_dir: PathBuf::from("experiment"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "height",
    "width",
    "classes",
    "n_head",
    "n_body",
    "n_tail",
    "dim",
    "neighbor_mix",
    "noise_sigma",
    "shares",
    "train_scenes",
    "test_scenes",
    "seed",
    "grouping",
    "t_head",
    "t_body",
    "mode",
    "gamma",
    "undersample_ratio",
    "iters",
    "lr",
    "batch",
    "alpha",
    "poly",
    "hidden",
    "context",
    "window_radius",
    "moe_iters",
    "moe_lr",
    "moe_batch",
    "combiner",
    "distribution",
    "uniform_quota",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::invalid(format!("bad value '{value}' for '{key}'")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::from_text(text).map_err(|e| match e {
            Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in parse_key_values(text).map_err(Error::Invalid)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::invalid(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Overrides the seed from `MEDOE_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", v.trim()),
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(_) => Err(Error::invalid(format!("{SEED_ENV} is not valid UTF-8"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.generator;
        let t = &mut self.train;
        match key {
            "height" => g.height = parse(key, value)?,
            "width" => g.width = parse(key, value)?,
            "classes" => g.classes = parse(key, value)?,
            "n_head" => g.n_head = parse(key, value)?,
            "n_body" => g.n_body = parse(key, value)?,
            "n_tail" => g.n_tail = parse(key, value)?,
            "dim" => g.dim = parse(key, value)?,
            "neighbor_mix" => g.gamma = parse(key, value)?,
            "noise_sigma" => g.sigma = parse(key, value)?,
            "shares" => {
                let v: Vec<f64> = value.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                g.target_shares = v
                    .try_into()
                    .map_err(|_| Error::invalid("'shares' needs three comma-separated values"))?;
            }
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "test_scenes" => self.test_scenes = parse(key, value)?,
            "seed" => {
                let seed = parse(key, value)?;
                g.seed = seed;
                t.seed = seed;
            }
            "grouping" => {
                self.grouping = match value {
                    "counts" => GroupingMode::ExplicitCounts { head: 0, body: 0, tail: 0 },
                    "thresholds" => GroupingMode::Thresholds { head: 0.01, body: 0.001 },
                    _ => return Err(Error::invalid(format!("grouping must be counts or thresholds, got '{value}'"))),
                }
            }
            "t_head" | "t_body" => {
                let v: f64 = parse(key, value)?;
                match &mut self.grouping {
                    GroupingMode::Thresholds { head, body } => {
                        if key == "t_head" {
                            *head = v
                        } else {
                            *body = v
                        }
                    }
                    _ => return Err(Error::invalid(format!("'{key}' needs `grouping = thresholds` first"))),
                }
            }
            "mode" => {
                let keep_gamma = match t.mode {
                    TrainMode::Focal { gamma } => Some(gamma),
                    _ => None,
                };
                t.mode = value.parse()?;
                if let (TrainMode::Focal { gamma }, Some(g0), false) = (&mut t.mode, keep_gamma, value.contains(':')) {
                    *gamma = g0;
                }
            }
            "gamma" => match &mut t.mode {
                TrainMode::Focal { gamma } => *gamma = parse(key, value)?,
                _ => return Err(Error::invalid("'gamma' applies to `mode = focal` only; set the mode first")),
            },
            "undersample_ratio" => match &mut t.mode {
                TrainMode::UnderSample { ratio } => {
                    *ratio = if value == "auto" { None } else { Some(parse(key, value)?) };
                }
                _ => return Err(Error::invalid("'undersample_ratio' applies to `mode = undersample` only; set the mode first")),
            },
            "iters" => t.iters = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "poly" => t.poly = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "context" => t.context = parse(key, value)?,
            "window_radius" => t.window_radius = parse(key, value)?,
            "moe_iters" => t.moe_iters = parse(key, value)?,
            "moe_lr" => t.moe_lr = parse(key, value)?,
            "moe_batch" => t.moe_batch = parse(key, value)?,
            "combiner" => self.combiner = value.parse()?,
            "distribution" => self.distribution = value.parse()?,
            "uniform_quota" => {
                self.uniform_quota = if value == "auto" { Quota::Auto } else { Quota::Pixels(parse(key, value)?) }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Grouping mode with explicit counts filled in from the group sizes.
    pub fn grouping_mode(&self) -> GroupingMode {
        match self.grouping {
            GroupingMode::ExplicitCounts { .. } => GroupingMode::ExplicitCounts {
                head: self.generator.n_head,
                body: self.generator.n_body,
                tail: self.generator.n_tail,
            },
            m => m,
        }
    }

    /// Generator settings of one split. Both splits share the master seed,
    /// hence the category embeddings; test scenes follow the training ones.
    pub fn generator_for(&self, split: Split) -> GeneratorConfig {
        match split {
            Split::Train => GeneratorConfig { n_scenes: self.train_scenes, scene_offset: 0, ..self.generator.clone() },
            Split::Test => {
                GeneratorConfig { n_scenes: self.test_scenes, scene_offset: self.train_scenes, ..self.generator.clone() }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_for(Split::Train).validate()?;
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::invalid("train_scenes and test_scenes must be positive"));
        }
        self.train.validate()
    }

    /// Every key with its effective value, for provenance.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let g = &self.generator;
        let t = &self.train;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("height", g.height.to_string());
        put("width", g.width.to_string());
        put("classes", g.classes.to_string());
        put("n_head", g.n_head.to_string());
        put("n_body", g.n_body.to_string());
        put("n_tail", g.n_tail.to_string());
        put("dim", g.dim.to_string());
        put("neighbor_mix", g.gamma.to_string());
        put("noise_sigma", g.sigma.to_string());
        put("shares", g.target_shares.map(|s| s.to_string()).join(","));
        put("train_scenes", self.train_scenes.to_string());
        put("test_scenes", self.test_scenes.to_string());
        put("seed", g.seed.to_string());
        match self.grouping {
            GroupingMode::ExplicitCounts { .. } => put("grouping", "counts".into()),
            GroupingMode::Thresholds { head, body } => {
                put("grouping", "thresholds".into());
                put("t_head", head.to_string());
                put("t_body", body.to_string());
            }
        }
        put("mode", t.mode.name().into());
        match t.mode {
            TrainMode::Focal { gamma } => put("gamma", gamma.to_string()),
            TrainMode::UnderSample { ratio } => {
                put("undersample_ratio", ratio.map_or("auto".into(), |r| r.to_string()))
            }
            _ => {}
        }
        put("iters", t.iters.to_string());
        put("lr", t.lr.to_string());
        put("batch", t.batch.to_string());
        put("alpha", t.alpha.to_string());
        put("poly", t.poly.to_string());
        put("hidden", t.hidden.to_string());
        put("context", t.context.to_string());
        put("window_radius", t.window_radius.to_string());
        put("moe_iters", t.moe_iters.to_string());
        put("moe_lr", t.moe_lr.to_string());
        put("moe_batch", t.moe_batch.to_string());
        put("combiner", self.combiner.to_string());
        put("distribution", self.distribution.name().into());
        put("uniform_quota", match self.uniform_quota {
            Quota::Auto => "auto".into(),
            Quota::Pixels(n) => n.to_string(),
        });
        put("out_dir", self.out_dir.display().to_string());
        m
    }

    /// The echo as config-file text; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let echo = self.echo();
        // `grouping` and `mode` must precede the keys that refine them.
        let mut out = String::new();
        for k in ["grouping", "mode"] {
            out.push_str(&format!("{k} = {}\n", echo[k]));
        }
        for (k, v) in &echo {
            if k != "grouping" && k != "mode" {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
