//! `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. Unknown and duplicate keys
//! are errors. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::budget::{Metric, Schedule, DEFAULT_SIGMOID_D, EXP_RATE};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::netgraph::{NetworkSpec, StageSpec};
use crate::trainer::{BaselineConfig, BaselineKind, TeacherConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Bar,
    Baseline(BaselineKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bar => "bar",
            Method::Baseline(BaselineKind::Random) => "random",
            Method::Baseline(BaselineKind::WeightMagnitude) => "wm",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bar" => Ok(Method::Bar),
            "random" => Ok(Method::Baseline(BaselineKind::Random)),
            "wm" => Ok(Method::Baseline(BaselineKind::WeightMagnitude)),
            _ => Err(format!("unknown method `{s}` (expected bar, random or wm)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub eval_images: Option<PathBuf>,
    pub eval_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub path: PathBuf,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    /// Synthetic generator settings; `samples` is the training count.
    pub synth: SyntheticConfig,
    pub eval_samples: usize,
    pub spec: NetworkSpec,
    pub teacher: TeacherConfig,
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_cache: Option<PathBuf>,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub prune_method: Method,
    pub sweep_methods: Vec<Method>,
    /// Line of every key that was set.
    lines: BTreeMap<String, usize>,
    n_lines: usize,
}

pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data.train_images",
    "data.train_labels",
    "data.eval_images",
    "data.eval_labels",
    "data.classes",
    "data.train_samples",
    "data.eval_samples",
    "data.size",
    "data.channels",
    "data.noise",
    "data.jitter",
    "model.stem_width",
    "model.widths",
    "model.blocks",
    "model.strides",
    "model.kernel",
    "teacher.epochs_hi",
    "teacher.epochs_lo",
    "teacher.lr_hi",
    "teacher.lr_lo",
    "teacher.batch_size",
    "teacher.weight_decay",
    "teacher.checkpoint",
    "teacher.cache",
    "train.epochs",
    "train.finetune_hi_epochs",
    "train.finetune_lo_epochs",
    "train.max_extra_epochs",
    "train.batch_size",
    "train.lr",
    "train.gate_lr",
    "train.finetune_lr_hi",
    "train.finetune_lr_lo",
    "train.weight_decay",
    "train.init_from_teacher",
    "train.eval_every",
    "loss.lambda",
    "loss.kd_alpha",
    "loss.temperature",
    "budget.metric",
    "budget.fraction",
    "budget.schedule",
    "budget.sigmoid_d",
    "budget.exp_rate",
    "budget.max_coef",
    "baseline.epochs_hi",
    "baseline.epochs_lo",
    "baseline.lr_hi",
    "baseline.lr_lo",
    "prune.method",
    "sweep.methods",
];

impl Default for Config {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        Self {
            path: PathBuf::new(),
            seed: 0,
            out: None,
            data: DataPaths::default(),
            synth,
            eval_samples: 500,
            spec: NetworkSpec::default(),
            teacher: TeacherConfig::default(),
            teacher_checkpoint: None,
            teacher_cache: None,
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            prune_method: Method::Bar,
            sweep_methods: vec![Method::Bar, Method::Baseline(BaselineKind::Random)],
            lines: BTreeMap::new(),
            n_lines: 0,
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| parse_value(s.trim())).collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = Config { path: path.to_path_buf(), ..Config::default() };
        let err = |line: usize, msg: String| Error::Config { path: path.display().to_string(), line, msg };
        let mut widths: Option<Vec<usize>> = None;
        let mut blocks: Option<Vec<usize>> = None;
        let mut strides: Option<Vec<usize>> = None;
        let mut schedule = "sigmoid".to_string();
        let (mut sigmoid_d, mut exp_rate) = (DEFAULT_SIGMOID_D, EXP_RATE);
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            cfg.n_lines = ln;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(ln, format!("expected `key = value`, got `{line}`")));
            };
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(ln, format!("unknown key `{key}`")));
            }
            if let Some(prev) = cfg.lines.insert(key.to_string(), ln) {
                return Err(err(ln, format!("duplicate key `{key}` (first set on line {prev})")));
            }
            if v.is_empty() {
                return Err(err(ln, format!("empty value for `{key}`")));
            }
            let path_of = |v: &str| Some(base.join(v));
            let set = (|| -> std::result::Result<(), String> {
                let t = &mut cfg.train;
                match key {
                    "seed" => cfg.seed = parse_value(v)?,
                    "out" => cfg.out = path_of(v),
                    "data.train_images" => cfg.data.train_images = path_of(v),
                    "data.train_labels" => cfg.data.train_labels = path_of(v),
                    "data.eval_images" => cfg.data.eval_images = path_of(v),
                    "data.eval_labels" => cfg.data.eval_labels = path_of(v),
                    "data.classes" => cfg.synth.classes = parse_value(v)?,
                    "data.train_samples" => cfg.synth.samples = parse_value(v)?,
                    "data.eval_samples" => cfg.eval_samples = parse_value(v)?,
                    "data.size" => cfg.synth.size = parse_value(v)?,
                    "data.channels" => cfg.synth.channels = parse_value(v)?,
                    "data.noise" => cfg.synth.noise = parse_value(v)?,
                    "data.jitter" => cfg.synth.jitter = parse_value(v)?,
                    "model.stem_width" => cfg.spec.stem_width = parse_value(v)?,
                    "model.widths" => widths = Some(parse_list(v)?),
                    "model.blocks" => blocks = Some(parse_list(v)?),
                    "model.strides" => strides = Some(parse_list(v)?),
                    "model.kernel" => cfg.spec.kernel = parse_value(v)?,
                    "teacher.epochs_hi" => cfg.teacher.epochs_hi = parse_value(v)?,
                    "teacher.epochs_lo" => cfg.teacher.epochs_lo = parse_value(v)?,
                    "teacher.lr_hi" => cfg.teacher.lr_hi = parse_value(v)?,
                    "teacher.lr_lo" => cfg.teacher.lr_lo = parse_value(v)?,
                    "teacher.batch_size" => cfg.teacher.batch_size = parse_value(v)?,
                    "teacher.weight_decay" => cfg.teacher.weight_decay = parse_value(v)?,
                    "teacher.checkpoint" => cfg.teacher_checkpoint = path_of(v),
                    "teacher.cache" => cfg.teacher_cache = path_of(v),
                    "train.epochs" => t.epochs = parse_value(v)?,
                    "train.finetune_hi_epochs" => t.finetune_hi_epochs = parse_value(v)?,
                    "train.finetune_lo_epochs" => t.finetune_lo_epochs = parse_value(v)?,
                    "train.max_extra_epochs" => t.max_extra_epochs = parse_value(v)?,
                    "train.batch_size" => t.batch_size = parse_value(v)?,
                    "train.lr" => t.lr = parse_value(v)?,
                    "train.gate_lr" => t.gate_lr = parse_value(v)?,
                    "train.finetune_lr_hi" => t.finetune_lr_hi = parse_value(v)?,
                    "train.finetune_lr_lo" => t.finetune_lr_lo = parse_value(v)?,
                    "train.weight_decay" => t.weight_decay = parse_value(v)?,
                    "train.init_from_teacher" => t.init_from_teacher = parse_bool(v)?,
                    "train.eval_every" => t.eval_every = parse_value(v)?,
                    "loss.lambda" => t.loss.lambda = parse_value(v)?,
                    "loss.kd_alpha" => t.loss.kd_alpha = parse_value(v)?,
                    "loss.temperature" => t.loss.temperature = parse_value(v)?,
                    "budget.metric" => {
                        t.budget.metric = match v {
                            "volume" => Metric::Volume,
                            "flop" | "flops" => Metric::Flops,
                            _ => return Err(format!("budget.metric must be volume or flop, got `{v}`")),
                        }
                    }
                    "budget.fraction" => t.budget.fraction = parse_value(v)?,
                    "budget.schedule" => match v {
                        "linear" | "exp" | "sigmoid" => schedule = v.to_string(),
                        _ => return Err(format!("budget.schedule must be linear, exp or sigmoid, got `{v}`")),
                    },
                    "budget.sigmoid_d" => sigmoid_d = parse_value(v)?,
                    "budget.exp_rate" => exp_rate = parse_value(v)?,
                    "budget.max_coef" => t.budget.max_coef = parse_value(v)?,
                    "baseline.epochs_hi" => cfg.baseline.epochs_hi = parse_value(v)?,
                    "baseline.epochs_lo" => cfg.baseline.epochs_lo = parse_value(v)?,
                    "baseline.lr_hi" => cfg.baseline.lr_hi = parse_value(v)?,
                    "baseline.lr_lo" => cfg.baseline.lr_lo = parse_value(v)?,
                    "prune.method" => cfg.prune_method = parse_value(v)?,
                    "sweep.methods" => cfg.sweep_methods = parse_list(v)?,
                    _ => unreachable!("key table and match arms agree"),
                }
                Ok(())
            })();
            set.map_err(|m| err(ln, format!("{key}: {m}")))?;
        }

        cfg.train.budget.schedule = match schedule.as_str() {
            "linear" => Schedule::Linear,
            "exp" => Schedule::Exp { k: exp_rate },
            _ => Schedule::Sigmoid { d: sigmoid_d },
        };
        cfg.baseline.batch_size = cfg.train.batch_size;
        cfg.baseline.weight_decay = cfg.train.weight_decay;

        let at = |key: &str| cfg.lines.get(key).copied().unwrap_or(cfg.n_lines);
        if widths.is_some() || blocks.is_some() || strides.is_some() {
            let w = widths.unwrap_or_else(|| cfg.spec.stages.iter().map(|s| s.width).collect());
            let b = blocks.unwrap_or_else(|| vec![cfg.spec.stages[0].blocks; w.len()]);
            let s = strides.unwrap_or_else(|| (0..w.len()).map(|i| if i == 0 { 1 } else { 2 }).collect());
            if b.len() != w.len() || s.len() != w.len() {
                return Err(err(at("model.widths"), "model.widths, model.blocks and model.strides differ in length".into()));
            }
            cfg.spec.stages = (0..w.len()).map(|i| StageSpec { blocks: b[i], width: w[i], stride: s[i] }).collect();
        }
        cfg.spec.num_classes = cfg.synth.classes;
        cfg.spec.input_size = cfg.synth.size;
        cfg.spec.input_channels = cfg.synth.channels;
        cfg.spec.validate().map_err(|e| err(at("model.widths"), e.to_string()))?;
        cfg.teacher.validate().map_err(|e| err(at("teacher.epochs_hi"), e.to_string()))?;
        cfg.baseline.validate().map_err(|e| err(at("baseline.epochs_hi"), e.to_string()))?;
        cfg.train.validate().map_err(|e| err(at("budget.fraction"), e.to_string()))?;
        if cfg.synth.classes == 0 || cfg.synth.classes > 256 {
            return Err(err(at("data.classes"), "data.classes must be in 1..=256".into()));
        }
        Ok(cfg)
    }

    /// Whether `key` appeared in the file.
    pub fn is_set(&self, key: &str) -> bool {
        self.lines.contains_key(key)
    }

    /// Errors on the first key of `keys` that the file did not set.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !self.is_set(k)) {
            Some(k) => Err(Error::Config {
                path: self.path.display().to_string(),
                line: self.n_lines,
                msg: format!("missing required key `{k}`"),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config> {
        Config::parse(text, Path::new("dir/run.cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("# comment\nseed = 9\n\nbudget.fraction = 0.25 # trailing\nbudget.schedule = linear\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.budget.fraction, 0.25);
        assert_eq!(c.train.budget.schedule, Schedule::Linear);
        assert_eq!(c.spec, NetworkSpec::default());
        assert!(c.is_set("seed") && !c.is_set("out"));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let c = parse("data.train_images = a/train.idx\n").unwrap();
        assert_eq!(c.data.train_images, Some(PathBuf::from("dir/a/train.idx")));
    }

    #[test]
    fn model_lists() {
        let c = parse("model.widths = 8, 16\nmodel.blocks = 1,1\nmodel.strides = 1,2\n").unwrap();
        assert_eq!(c.spec.stages, vec![
            StageSpec { blocks: 1, width: 8, stride: 1 },
            StageSpec { blocks: 1, width: 16, stride: 2 }
        ]);
        let e = parse("model.widths = 8, 16\nmodel.blocks = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }), "{e}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("seed = 1\nbogus.key = 3\n", 2, "unknown key"),
            ("seed = 1\nseed = 2\n", 2, "duplicate"),
            ("\n\nseed = x\n", 3, "seed"),
            ("just text\n", 1, "key = value"),
            ("budget.metric = joules\n", 1, "volume or flop"),
            ("train.init_from_teacher = yes\n", 1, "true or false"),
            ("x\n", 1, "key = value"),
            ("budget.fraction = 1.5\n", 1, "fraction"),
        ];
        for (text, line, needle) in cases {
            match parse(text) {
                Err(Error::Config { line: l, msg, .. }) => {
                    assert_eq!(l, line, "{text:?}: {msg}");
                    assert!(msg.contains(needle), "{text:?}: {msg}");
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn required_keys() {
        let c = parse("seed = 1\nout = o\n").unwrap();
        assert!(c.require(&["seed", "out"]).is_ok());
        let e = c.require(&["seed", "data.train_images"]).unwrap_err();
        assert!(e.to_string().contains("data.train_images"), "{e}");
    }

    #[test]
    fn methods() {
        let c = parse("sweep.methods = bar, wm\nprune.method = random\n").unwrap();
        assert_eq!(c.sweep_methods, vec![Method::Bar, Method::Baseline(BaselineKind::WeightMagnitude)]);
        assert_eq!(c.prune_method, Method::Baseline(BaselineKind::Random));
        assert!(parse("prune.method = magic\n").is_err());
    }
}
