//! Run configuration: a flat `key = value` text file. `#` starts a comment,
//! blank lines are ignored and every key may appear at most once. Unknown
//! keys are rejected with the closest known key as a suggestion.
//!
//! Lists are comma separated; matrix rows are separated by `;`.

use std::path::{Path, PathBuf};

use crate::continuous::FlowVariance;
use crate::error::{Error, Result};
use crate::hawkes::HawkesSpec;
use crate::sample::{PointRule, SampleConfig};
use crate::train::{OptimizerKind, TrainConfig};

/// One entry of the schema: key, type label, default as written in a file, help text.
pub struct KeySpec {
    pub key: &'static str,
    pub kind: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const SCHEMA: &[KeySpec] = &[
    KeySpec { key: "dataset", kind: "path", default: "", help: "event file, one sequence per line" },
    KeySpec { key: "num_marks", kind: "int", default: "0", help: "number of marks M; 0 takes it from the hawkes section" },
    KeySpec { key: "train_frac", kind: "float", default: "0.8", help: "training share of sequences" },
    KeySpec { key: "val_frac", kind: "float", default: "0.1", help: "validation share of sequences" },
    KeySpec { key: "test_frac", kind: "float", default: "0.1", help: "test share of sequences" },
    KeySpec { key: "split_seed", kind: "int", default: "0", help: "seed of simulated data and of the shuffle before splitting" },
    KeySpec { key: "embed_dim", kind: "int", default: "16", help: "history embedding width D (multiple of 4)" },
    KeySpec { key: "layers", kind: "int", default: "1", help: "attention blocks in the encoder" },
    KeySpec { key: "sigma1", kind: "float", default: "0.001", help: "terminal standard deviation of the interval flow" },
    KeySpec { key: "beta1", kind: "float", default: "1.0", help: "final accuracy of the mark flow" },
    KeySpec { key: "steps", kind: "int", default: "100", help: "discretization steps K for training and sampling" },
    KeySpec { key: "epochs", kind: "int", default: "200", help: "training epochs" },
    KeySpec { key: "lr", kind: "float", default: "0.0001", help: "learning rate" },
    KeySpec { key: "optimizer", kind: "sgd|adam", default: "sgd", help: "parameter update rule" },
    KeySpec { key: "batch_size", kind: "int", default: "1", help: "sequences per optimizer step" },
    KeySpec { key: "mc_samples", kind: "int", default: "1", help: "sender draws averaged per loss term" },
    KeySpec { key: "grad_clip", kind: "float", default: "1.0", help: "global gradient-norm cap, 0 disables" },
    KeySpec { key: "checkpoint_every", kind: "int", default: "0", help: "also write the checkpoint every N epochs, 0 = only at the end" },
    KeySpec { key: "joint_noise", kind: "on|off", default: "on", help: "correlate interval and mark noise" },
    KeySpec { key: "flow_variance", kind: "standard|linear", default: "standard", help: "variance of the interval flow" },
    KeySpec { key: "seed", kind: "int", default: "0", help: "seed for initialization, training and sampling" },
    KeySpec { key: "seeds", kind: "int list", default: "", help: "seeds for repeated runs; empty uses `seed`" },
    KeySpec { key: "samples", kind: "int", default: "100", help: "draws per prediction L" },
    KeySpec { key: "point", kind: "median|mean", default: "median", help: "point prediction from the draws" },
    KeySpec { key: "out_dir", kind: "path", default: "out", help: "directory for all outputs" },
    KeySpec { key: "hawkes.base_rates", kind: "float list", default: "", help: "base intensity per mark" },
    KeySpec { key: "hawkes.excitation", kind: "float matrix", default: "", help: "rows `a,b;c,d`: jump of mark m caused by mark j" },
    KeySpec { key: "hawkes.decay", kind: "float", default: "1.0", help: "exponential kernel decay" },
    KeySpec { key: "hawkes.horizon", kind: "float", default: "20.0", help: "observation window per sequence" },
    KeySpec { key: "hawkes.coupling_scales", kind: "float list", default: "", help: "waiting-time multiplier after each mark; empty means all 1" },
    KeySpec { key: "hawkes.sequences", kind: "int", default: "500", help: "number of simulated sequences" },
    KeySpec { key: "hawkes.min_len", kind: "int", default: "2", help: "shortest accepted sequence" },
];

/// Aligned schema table for `--print-schema`.
pub fn schema_text() -> String {
    let width = SCHEMA.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let kind_width = SCHEMA.iter().map(|k| k.kind.len()).max().unwrap_or(0);
    let mut out = String::new();
    for k in SCHEMA {
        let default = if k.default.is_empty() { "(none)" } else { k.default };
        out.push_str(&format!("{:width$}  {:kind_width$}  {:10}  {}\n", k.key, k.kind, default, k.help));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HawkesSection {
    pub spec: HawkesSpec,
    pub sequences: usize,
    pub min_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dataset: Option<PathBuf>,
    pub num_marks: usize,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    /// Training settings; `train.seed` is the run seed.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub checkpoint_every: usize,
    pub samples: usize,
    pub point: PointRule,
    pub out_dir: PathBuf,
    pub hawkes: Option<HawkesSection>,
}

impl Default for Config {
    fn default() -> Self {
        parse_config_str("").expect("defaults are valid")
    }
}

impl Config {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Seeds for repeated runs, falling back to the single run seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.train.steps,
            num_samples: self.samples,
            seed: self.train.seed,
            joint_noise: self.train.joint_noise,
            point: self.point,
        }
    }

    /// `M` from the config, or from the hawkes section when unset.
    pub fn marks(&self) -> Result<usize> {
        match (self.num_marks, &self.hawkes) {
            (0, Some(h)) => Ok(h.spec.num_marks()),
            (0, None) => Err(Error::Config("num_marks is required without a hawkes section".into())),
            (m, _) => Ok(m),
        }
    }

    /// Canonical `key = value` rendering; parsing it returns an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("dataset = {}", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            format!("num_marks = {}", self.num_marks),
            format!("train_frac = {:?}", self.split.0),
            format!("val_frac = {:?}", self.split.1),
            format!("test_frac = {:?}", self.split.2),
            format!("split_seed = {}", self.split_seed),
            format!("embed_dim = {}", t.embed_dim),
            format!("layers = {}", t.layers),
            format!("sigma1 = {:?}", t.sigma1),
            format!("beta1 = {:?}", t.beta1),
            format!("steps = {}", t.steps),
            format!("epochs = {}", t.epochs),
            format!("lr = {:?}", t.lr),
            format!("optimizer = {}", if t.optimizer == OptimizerKind::Adam { "adam" } else { "sgd" }),
            format!("batch_size = {}", t.batch_size),
            format!("mc_samples = {}", t.mc_samples),
            format!("grad_clip = {:?}", t.grad_clip),
            format!("joint_noise = {}", if t.joint_noise { "on" } else { "off" }),
            format!("flow_variance = {}", if t.flow_variance == FlowVariance::Linear { "linear" } else { "standard" }),
            format!("seed = {}", t.seed),
            format!("seeds = {}", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("samples = {}", self.samples),
            format!("point = {}", if self.point == PointRule::Mean { "mean" } else { "median" }),
            format!("out_dir = {}", self.out_dir.display()),
        ];
        if let Some(h) = &self.hawkes {
            let rows: Vec<String> = h.spec.excitation.iter().map(|r| list(r)).collect();
            lines.push(format!("hawkes.base_rates = {}", list(&h.spec.base_rates)));
            lines.push(format!("hawkes.excitation = {}", rows.join(";")));
            lines.push(format!("hawkes.decay = {:?}", h.spec.decay));
            lines.push(format!("hawkes.horizon = {:?}", h.spec.horizon));
            lines.push(format!("hawkes.coupling_scales = {}", list(&h.spec.coupling_scales)));
            lines.push(format!("hawkes.sequences = {}", h.sequences));
            lines.push(format!("hawkes.min_len = {}", h.min_len));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

fn suggest(key: &str) -> Option<&'static str> {
    SCHEMA
        .iter()
        .map(|k| (strsim::levenshtein(key, k.key), k.key))
        .filter(|(d, k)| *d <= 3.max(k.len() / 3))
        .min()
        .map(|(_, k)| k)
}

struct Entries {
    values: Vec<(&'static str, usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.values.iter().find(|v| v.0 == key).map(|v| (v.1, v.2.as_str()))
    }

    fn text(&self, key: &'static str) -> (usize, String) {
        match self.raw(key) {
            Some((line, v)) => (line, v.to_string()),
            None => (0, SCHEMA.iter().find(|k| k.key == key).map(|k| k.default).unwrap_or("").to_string()),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &'static str) -> Result<T> {
        let (line, v) = self.text(key);
        v.parse().map_err(|_| Error::Parse { line, msg: format!("`{key}`: cannot parse `{v}`") })
    }

    fn positive_int(&self, key: &'static str) -> Result<usize> {
        let (line, v) = self.text(key);
        match v.parse::<i64>() {
            Ok(n) if n > 0 => Ok(n as usize),
            Ok(n) => Err(Error::Config(format!("`{key}` must be a positive integer, got {n}"))),
            Err(_) => Err(Error::Parse { line, msg: format!("`{key}`: cannot parse `{v}` as an integer") }),
        }
    }

    fn float_in(&self, key: &'static str, ok: impl Fn(f64) -> bool, range: &str) -> Result<f64> {
        let x: f64 = self.parse(key)?;
        if !x.is_finite() || !ok(x) {
            return Err(Error::Config(format!("`{key}` must be {range}, got {x}")));
        }
        Ok(x)
    }

    fn choice(&self, key: &'static str, options: &[&str]) -> Result<usize> {
        let (line, v) = self.text(key);
        options.iter().position(|o| *o == v).ok_or_else(|| Error::Parse {
            line,
            msg: format!("`{key}` must be one of {}, got `{v}`", options.join("|")),
        })
    }

    fn floats(&self, key: &'static str) -> Result<Vec<f64>> {
        let (line, v) = self.text(key);
        split_list(&v, ',')
            .map(|s| s.parse().map_err(|_| Error::Parse { line, msg: format!("`{key}`: cannot parse `{s}`") }))
            .collect()
    }
}

fn split_list(v: &str, sep: char) -> impl Iterator<Item = &str> {
    v.split(sep).map(str::trim).filter(|s| !s.is_empty())
}

pub fn parse_config_str(text: &str) -> Result<Config> {
    let mut entries = Entries { values: Vec::new() };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{body}`") })?;
        let key = key.trim();
        let spec = SCHEMA.iter().find(|k| k.key == key).ok_or_else(|| {
            let hint = suggest(key).map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
            Error::Parse { line, msg: format!("unknown key `{key}`{hint}") }
        })?;
        if entries.raw(key).is_some() {
            return Err(Error::Parse { line, msg: format!("duplicate key `{key}`") });
        }
        entries.values.push((spec.key, line, value.trim().to_string()));
    }

    let e = &entries;
    let frac = |k| e.float_in(k, |x| (0.0..=1.0).contains(&x), "in [0, 1]");
    let split = (frac("train_frac")?, frac("val_frac")?, frac("test_frac")?);
    if split.0 <= 0.0 || (split.0 + split.1 + split.2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "`train_frac`, `val_frac`, `test_frac` must sum to 1 with a positive training share, got {split:?}"
        )));
    }
    let dataset = e.text("dataset").1;
    let num_marks: i64 = e.parse("num_marks")?;
    if num_marks < 0 {
        return Err(Error::Config(format!("`num_marks` must be nonnegative, got {num_marks}")));
    }
    let embed_dim = e.positive_int("embed_dim")?;
    if embed_dim % 4 != 0 {
        return Err(Error::Config(format!("`embed_dim` must be a multiple of 4, got {embed_dim}")));
    }
    let train = TrainConfig {
        epochs: e.positive_int("epochs")?,
        lr: e.float_in("lr", |x| x > 0.0, "positive")?,
        steps: e.positive_int("steps")?,
        sigma1: e.float_in("sigma1", |x| x > 0.0 && x < 1.0, "in (0, 1)")?,
        beta1: e.float_in("beta1", |x| x > 0.0, "positive")?,
        joint_noise: e.choice("joint_noise", &["off", "on"])? == 1,
        mc_samples: e.positive_int("mc_samples")?,
        seed: e.parse("seed")?,
        batch_size: e.positive_int("batch_size")?,
        optimizer: [OptimizerKind::Sgd, OptimizerKind::Adam][e.choice("optimizer", &["sgd", "adam"])?],
        flow_variance: [FlowVariance::Standard, FlowVariance::Linear][e.choice("flow_variance", &["standard", "linear"])?],
        embed_dim,
        layers: e.positive_int("layers")?,
        grad_clip: e.float_in("grad_clip", |x| x >= 0.0, "nonnegative")?,
    };
    let seeds = {
        let (line, v) = e.text("seeds");
        split_list(&v, ',')
            .map(|s| s.parse().map_err(|_| Error::Parse { line, msg: format!("`seeds`: cannot parse `{s}`") }))
            .collect::<Result<Vec<u64>>>()?
    };
    let hawkes = if e.values.iter().any(|v| v.0.starts_with("hawkes.")) {
        let base_rates = e.floats("hawkes.base_rates")?;
        let m = base_rates.len();
        let excitation = {
            let (line, v) = e.text("hawkes.excitation");
            let rows: Vec<Vec<f64>> = split_list(&v, ';')
                .map(|row| {
                    split_list(row, ',')
                        .map(|s| {
                            s.parse().map_err(|_| Error::Parse {
                                line,
                                msg: format!("`hawkes.excitation`: cannot parse `{s}`"),
                            })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            if rows.is_empty() { vec![vec![0.0; m]; m] } else { rows }
        };
        let mut coupling_scales = e.floats("hawkes.coupling_scales")?;
        if coupling_scales.is_empty() {
            coupling_scales = vec![1.0; m];
        }
        let spec = HawkesSpec {
            base_rates,
            excitation,
            decay: e.parse("hawkes.decay")?,
            horizon: e.parse("hawkes.horizon")?,
            coupling_scales,
        };
        spec.validate().map_err(|err| Error::Config(format!("hawkes section: {err}")))?;
        Some(HawkesSection {
            spec,
            sequences: e.positive_int("hawkes.sequences")?,
            min_len: e.positive_int("hawkes.min_len")?,
        })
    } else {
        None
    };
    let config = Config {
        dataset: (!dataset.is_empty()).then(|| PathBuf::from(dataset)),
        num_marks: num_marks as usize,
        split,
        split_seed: e.parse("split_seed")?,
        train,
        seeds,
        checkpoint_every: e.parse("checkpoint_every")?,
        samples: e.positive_int("samples")?,
        point: [PointRule::Median, PointRule::Mean][e.choice("point", &["median", "mean"])?],
        out_dir: PathBuf::from(e.text("out_dir").1),
        hawkes,
    };
    if let (Some(h), m) = (&config.hawkes, config.num_marks) {
        if m != 0 && m != h.spec.num_marks() {
            return Err(Error::Config(format!(
                "`num_marks` = {m} disagrees with {} hawkes base rates",
                h.spec.num_marks()
            )));
        }
    }
    Ok(config)
}

/// Advisory notes for settings outside the usual search grid.
pub fn warnings(config: &Config) -> Vec<String> {
    let mut out = Vec::new();
    if ![8, 16, 32].contains(&config.train.embed_dim) {
        out.push(format!("embed_dim = {} is outside the usual grid {{8, 16, 32}}", config.train.embed_dim));
    }
    if !(1..=3).contains(&config.train.layers) {
        out.push(format!("layers = {} is outside the usual grid {{1, 2, 3}}", config.train.layers));
    }
    out
}
