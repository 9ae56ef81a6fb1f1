//! Run configuration: a TOML file with dotted sections plus `key=value`
//! overrides. Every problem found while resolving is reported at once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::augment::{AugOp, AugmentPolicy, Normalization, WeakConfig, MAX_MAGNITUDE};
use crate::dta::DtaConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::AttentionSettings;
use crate::snl::SnlConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Overrides the unlabeled-driven step count.
    pub steps_per_epoch: Option<usize>,
    pub write_trace: bool,
    /// Which parameters evaluation and the `best` marker use.
    pub eval_model: EvalModel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    #[default]
    Student,
    Teacher,
}

impl std::str::FromStr for EvalModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student" => Ok(EvalModel::Student),
            "teacher" => Ok(EvalModel::Teacher),
            other => Err(format!("expected \"student\" or \"teacher\", got \"{other}\"")),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            labeled_fraction: 0.5,
            learning_rate: 0.0005,
            seed: 0,
            eval_every: 1,
            checkpoint_every: 1,
            steps_per_epoch: None,
            write_trace: true,
            eval_model: EvalModel::Student,
        }
    }
}

impl TrainSection {
    pub fn labeled_batch(&self) -> usize {
        ((self.batch_size as f64 * self.labeled_fraction).round() as usize).clamp(1, self.batch_size - 1)
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.batch_size - self.labeled_batch()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSection {
    pub working_size: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub normalize: bool,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            working_size: 64,
            crop: 56,
            flip_prob: 0.5,
            normalize: true,
            norm_mean: 0.5,
            norm_std: 0.25,
        }
    }
}

impl AugmentSection {
    pub fn weak(&self) -> WeakConfig {
        WeakConfig {
            working_size: self.working_size,
            crop: self.crop,
            flip_prob: self.flip_prob,
            random_crop: true,
        }
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalize.then(|| Normalization {
            mean: self.norm_mean as f32,
            std: self.norm_std as f32,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongSection {
    pub n_ops: usize,
    pub magnitude: u32,
    pub op_subset: Option<Vec<String>>,
}

impl Default for StrongSection {
    fn default() -> Self {
        Self {
            n_ops: 3,
            magnitude: 5,
            op_subset: None,
        }
    }
}

impl StrongSection {
    pub fn policy(&self) -> Result<AugmentPolicy> {
        AugmentPolicy::strong(self.n_ops, self.magnitude, self.op_subset.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSection {
    pub enabled: bool,
    pub num_branches: usize,
    pub reduction: usize,
    pub drop_p: f64,
}

impl Default for AttentionSection {
    fn default() -> Self {
        let d = AttentionSettings::default();
        Self {
            enabled: true,
            num_branches: d.num_branches,
            reduction: d.reduction,
            drop_p: d.drop_p,
        }
    }
}

impl AttentionSection {
    pub fn settings(&self) -> Option<AttentionSettings> {
        self.enabled.then(|| AttentionSettings {
            num_branches: self.num_branches,
            reduction: self.reduction,
            drop_p: self.drop_p,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainSection,
    pub model: ModelSection,
    pub augment: AugmentSection,
    pub strong: StrongSection,
    pub attention: AttentionSection,
    pub dta: DtaConfig,
    pub snl: SnlConfig,
    pub loss: LossWeights,
}

type FieldResult = std::result::Result<(), String>;

fn as_uint(v: &Value) -> std::result::Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(format!("expected a non-negative integer, got {other}")),
    }
}

fn as_float(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {other}")),
    }
}

fn as_bool(v: &Value) -> std::result::Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected true or false, got {v}"))
}

fn as_string(v: &Value) -> std::result::Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("expected a string, got {v}"))
}

fn as_list<T>(v: &Value, item: impl Fn(&Value) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    match v {
        Value::Array(items) => items.iter().map(item).collect(),
        other => Err(format!("expected an array, got {other}")),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses the right-hand side of `--set key=value`: a TOML value, or a
/// bare string when it isn't one.
pub fn parse_override(spec: &str) -> std::result::Result<(String, Value), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &Value) -> FieldResult {
        match key {
            "data.manifest" => self.data.manifest = Some(PathBuf::from(as_string(v)?)),
            "train.epochs" => self.train.epochs = as_uint(v)?,
            "train.batch_size" => self.train.batch_size = as_uint(v)?,
            "train.labeled_fraction" => self.train.labeled_fraction = as_float(v)?,
            "train.learning_rate" => self.train.learning_rate = as_float(v)?,
            "train.seed" => self.train.seed = as_uint(v)? as u64,
            "train.eval_every" => self.train.eval_every = as_uint(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = as_uint(v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = Some(as_uint(v)?),
            "train.write_trace" => self.train.write_trace = as_bool(v)?,
            "train.eval_model" => self.train.eval_model = as_string(v)?.parse()?,
            "model.widths" => self.model.widths = as_list(v, as_uint)?,
            "augment.working_size" => self.augment.working_size = as_uint(v)?,
            "augment.crop" => self.augment.crop = as_uint(v)?,
            "augment.flip_prob" => self.augment.flip_prob = as_float(v)?,
            "augment.normalize" => self.augment.normalize = as_bool(v)?,
            "augment.norm_mean" => self.augment.norm_mean = as_float(v)?,
            "augment.norm_std" => self.augment.norm_std = as_float(v)?,
            "strong.n_ops" => self.strong.n_ops = as_uint(v)?,
            "strong.magnitude" => self.strong.magnitude = as_uint(v)? as u32,
            "strong.op_subset" => self.strong.op_subset = Some(as_list(v, as_string)?),
            "attention.enabled" => self.attention.enabled = as_bool(v)?,
            "attention.num_branches" => self.attention.num_branches = as_uint(v)?,
            "attention.reduction" => self.attention.reduction = as_uint(v)?,
            "attention.drop_p" => self.attention.drop_p = as_float(v)?,
            "dta.enabled" => self.dta.enabled = as_bool(v)?,
            "dta.mu" => self.dta.mu = as_float(v)?,
            "dta.tau_init" => self.dta.tau_init = as_float(v)?,
            "dta.ema_decay" => self.dta.ema_decay = as_float(v)?,
            "dta.full_pass_stats" => self.dta.full_pass_stats = as_bool(v)?,
            "snl.enabled" => self.snl.enabled = as_bool(v)?,
            "snl.delta" => self.snl.delta = as_float(v)?,
            "snl.log_form" => self.snl.log_form = as_bool(v)?,
            "snl.max_negatives_per_visit" => self.snl.max_negatives_per_visit = Some(as_uint(v)?),
            "loss.lambda1" => self.loss.lambda1 = as_float(v)?,
            "loss.lambda2" => self.loss.lambda2 = as_float(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Resolves defaults, then the file's keys, then `overrides`, then
    /// validates. All errors are collected into one [`Error::Config`].
    pub fn resolve(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("parse error: {}", e.message())]))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        entries.extend(overrides.iter().cloned());
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        for (key, value) in &entries {
            if let Err(e) = cfg.set(key, value) {
                errors.push(format!("{key}: {e}"));
            }
        }
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(format!("reading config {}", path.display())))?;
        let mut cfg = Self::resolve(&text, overrides)?;
        // manifest paths in a config file are relative to the file
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() && !overrides.iter().any(|(k, _)| k == "data.manifest") {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// Semantic checks on an otherwise well-typed config.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        let t = &self.train;
        check(t.epochs >= 1, format!("train.epochs: must be at least 1, got {}", t.epochs));
        check(t.batch_size >= 2, format!("train.batch_size: must be at least 2, got {}", t.batch_size));
        check(
            t.labeled_fraction > 0.0 && t.labeled_fraction < 1.0,
            format!("train.labeled_fraction: must lie in (0, 1), got {}", t.labeled_fraction),
        );
        check(
            t.learning_rate.is_finite() && t.learning_rate > 0.0,
            format!("train.learning_rate: must be positive, got {}", t.learning_rate),
        );
        check(t.eval_every >= 1, "train.eval_every: must be at least 1".into());
        check(t.checkpoint_every >= 1, "train.checkpoint_every: must be at least 1".into());
        check(t.steps_per_epoch != Some(0), "train.steps_per_epoch: must be at least 1".into());
        check(
            !self.model.widths.is_empty() && !self.model.widths.contains(&0),
            format!("model.widths: need positive widths, got {:?}", self.model.widths),
        );
        let a = &self.augment;
        check(a.crop >= 1, "augment.crop: must be positive".into());
        check(
            a.crop <= a.working_size,
            format!("augment.crop: {} exceeds augment.working_size {}", a.crop, a.working_size),
        );
        let min_size = 1usize << self.model.widths.len();
        check(
            a.crop >= min_size,
            format!("augment.crop: {} too small for {} pooling stages", a.crop, self.model.widths.len()),
        );
        check(unit(a.flip_prob), format!("augment.flip_prob: {} outside [0, 1]", a.flip_prob));
        check(
            a.norm_std.is_finite() && a.norm_std > 0.0,
            format!("augment.norm_std: must be positive, got {}", a.norm_std),
        );
        check(
            self.strong.magnitude <= MAX_MAGNITUDE,
            format!("strong.magnitude: {} outside 0..={MAX_MAGNITUDE}", self.strong.magnitude),
        );
        if let Some(ops) = &self.strong.op_subset {
            check(!ops.is_empty(), "strong.op_subset: must not be empty".into());
            for op in ops {
                check(op.parse::<AugOp>().is_ok(), format!("strong.op_subset: unknown op `{op}`"));
            }
        }
        let at = &self.attention;
        check(at.num_branches >= 1, "attention.num_branches: must be at least 1".into());
        check(at.reduction >= 1, "attention.reduction: must be at least 1".into());
        check(unit(at.drop_p), format!("attention.drop_p: {} outside [0, 1]", at.drop_p));
        let d = &self.dta;
        check(unit(d.mu), format!("dta.mu: {} outside [0, 1]", d.mu));
        check(unit(d.tau_init), format!("dta.tau_init: {} outside [0, 1]", d.tau_init));
        check(unit(d.ema_decay), format!("dta.ema_decay: {} outside [0, 1]", d.ema_decay));
        if let Err(e) = self.snl.validate() {
            check(false, e);
        }
        check(
            self.snl.max_negatives_per_visit != Some(0),
            "snl.max_negatives_per_visit: must be at least 1".into(),
        );
        for (name, v) in [("loss.lambda1", self.loss.lambda1), ("loss.lambda2", self.loss.lambda2)] {
            check(v.is_finite() && v >= 0.0, format!("{name}: must be finite and non-negative, got {v}"));
        }
        errs
    }

    /// The resolved config as TOML; parses back to an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
