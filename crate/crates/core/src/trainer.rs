//! The training loop.
//!
//! One student network is trained by gradient descent on the labeled,
//! consistency and negative learning terms. An EMA teacher of the student
//! never receives gradients; it only supplies the per-class confidence
//! statistics behind the dynamic thresholds.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sample_drop_plan, DropPlan};
use crate::audit::ProbTrace;
use crate::augment::{center_crop, make_views, weak_augment, AugmentPolicy, Normalization, WeakConfig};
use crate::config::{EvalModel, RunConfig};
use crate::datamodel::{DatasetManifest, Image, ImageSample, LabelSpace, ProbabilityVector, Split};
use crate::dta::TeacherParams;
use crate::error::{Error, Result};
use crate::gate::{EpochGateSummary, Gate, Route};
use crate::losses::{cross_entropy_objective, negative_objective, softmax_rows, total_loss, LossReport};
use crate::metrics::{classification_metrics, EvalMetrics};
use crate::network::{NetConfig, Network};
use crate::optim::Adam;
use crate::sampler::BalancedSampler;

/// Images of every split, held in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub label_space: LabelSpace,
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub eval: Vec<ImageSample>,
}

impl TrainData {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        manifest.check_paths()?;
        Ok(Self {
            label_space: manifest.label_space.clone(),
            labeled: manifest.load_split(Split::Labeled)?,
            unlabeled: manifest.load_split(Split::Unlabeled)?,
            eval: manifest.load_split(Split::Eval)?,
        })
    }

    fn channels(&self) -> usize {
        self.labeled.first().map_or(3, |s| s.image.channels)
    }
}

/// Independent random streams; each consumer owns one so that switching a
/// component off never shifts another's draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub sampler: ChaCha8Rng,
    pub labeled_aug: ChaCha8Rng,
    pub unlabeled_aug: ChaCha8Rng,
    pub drop: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            sampler: stream(seed, 1),
            labeled_aug: stream(seed, 2),
            unlabeled_aug: stream(seed, 3),
            drop: stream(seed, 4),
            shuffle: stream(seed, 5),
        }
    }
}

/// Parameters are initialized from this stream of the run seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub epoch: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub net: NetConfig,
    pub class_names: Vec<String>,
    /// Resolved config the run was started with.
    pub config: String,
    pub student: Vec<f32>,
    pub teacher: TeacherParams<f32>,
    pub adam: Adam,
    pub gate: Gate,
    pub rngs: RngStreams,
    pub best: Option<BestEval>,
}

impl RunState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        bincode::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(Error::io(format!("writing {}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(Error::io(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(format!("reading checkpoint {}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn eval_params(&self, which: EvalModel) -> &[f32] {
        match which {
            EvalModel::Student => &self.student,
            EvalModel::Teacher => &self.teacher.params,
        }
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.class_names.iter().cloned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub gate: EpochGateSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Step { epoch: usize, step: usize, loss: LossReport },
    Epoch(EpochRecord),
}

impl MetricsRecord {
    pub fn epoch(&self) -> usize {
        match self {
            MetricsRecord::Step { epoch, .. } => *epoch,
            MetricsRecord::Epoch(r) => r.epoch,
        }
    }
}

/// Output of one epoch, as serialized lines ready to append.
#[derive(Clone, Debug, Default)]
pub struct EpochLog {
    pub metrics: Vec<String>,
    pub trace: Vec<String>,
    pub record: Option<EpochRecord>,
    pub improved: bool,
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize")
}

/// Flattens images into a network input batch.
pub fn stack_inputs<'a>(images: impl IntoIterator<Item = &'a Image>, norm: Option<&Normalization>) -> Vec<f32> {
    let mut out = Vec::new();
    for img in images {
        let start = out.len();
        out.extend_from_slice(&img.data);
        if let Some(n) = norm {
            n.apply(&mut out[start..]);
        }
    }
    out
}

/// Center-cropped, normalized inputs for deterministic evaluation.
pub fn eval_inputs(samples: &[ImageSample], weak: &WeakConfig, norm: Option<&Normalization>) -> Result<Vec<f32>> {
    let crops = samples
        .iter()
        .map(|s| center_crop(&s.image, weak))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_inputs(&crops, norm))
}

fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn argmaxes(logits: &[f32], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Deterministic evaluation: no augmentation randomness, no attention drop.
pub fn evaluate_params(net: &Network, params: &[f32], inputs: &[f32], labels: &[usize]) -> Result<EvalMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptyEval);
    }
    let logits = net.predict(params, inputs, labels.len());
    classification_metrics(labels, &argmaxes(&logits, net.num_classes()), net.num_classes())
}

pub fn net_config(cfg: &RunConfig, channels: usize, num_classes: usize) -> NetConfig {
    NetConfig {
        in_channels: channels,
        input_size: cfg.augment.crop,
        widths: cfg.model.widths.clone(),
        num_classes,
        attention: cfg.attention.settings(),
    }
}

pub struct Trainer {
    cfg: RunConfig,
    net: Network,
    weak: WeakConfig,
    policy: AugmentPolicy,
    norm: Option<Normalization>,
    data: TrainData,
    labels: Vec<usize>,
    sampler: BalancedSampler,
    labeled_center: Vec<f32>,
    eval_input: Vec<f32>,
    eval_labels: Vec<usize>,
    state: RunState,
}

struct UnlabeledOutcome {
    l_consistency: f64,
    l_negative: f64,
    accepted: usize,
    rejected: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: TrainData) -> Result<Self> {
        let net = Network::new(net_config(&cfg, data.channels(), data.label_space.num_classes()))?;
        let student: Vec<f32> = net.init_params(&mut init_rng(cfg.train.seed));
        let state = RunState {
            epoch: 0,
            step: 0,
            net: net.config().clone(),
            class_names: data.label_space.names().to_vec(),
            config: cfg.to_toml(),
            teacher: TeacherParams::from_student(&student, cfg.dta.ema_decay),
            adam: Adam::new(student.len(), cfg.train.learning_rate),
            gate: Gate::new(data.label_space.num_classes(), cfg.dta.clone(), cfg.snl.clone())?,
            rngs: RngStreams::from_seed(cfg.train.seed),
            best: None,
            student,
        };
        Self::with_network(cfg, data, net, state)
    }

    /// Continues from a checkpointed state.
    pub fn resume(cfg: RunConfig, data: TrainData, state: RunState) -> Result<Self> {
        let expected = net_config(&cfg, data.channels(), data.label_space.num_classes());
        if expected != state.net {
            return Err(Error::Checkpoint(format!(
                "network {:?} does not match the configured {:?}",
                state.net, expected
            )));
        }
        if state.class_names != data.label_space.names() {
            return Err(Error::Checkpoint(format!(
                "checkpoint classes {:?} differ from manifest classes {:?}",
                state.class_names,
                data.label_space.names()
            )));
        }
        let net = Network::new(expected)?;
        if state.student.len() != net.param_count() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        Self::with_network(cfg, data, net, state)
    }

    fn with_network(cfg: RunConfig, data: TrainData, net: Network, state: RunState) -> Result<Self> {
        let labels = data
            .labeled
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::LabelSpace(format!("labeled sample {} has no label", s.sample_id))))
            .collect::<Result<Vec<_>>>()?;
        let eval_labels = data
            .eval
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::LabelSpace(format!("eval sample {} has no label", s.sample_id))))
            .collect::<Result<Vec<_>>>()?;
        if eval_labels.is_empty() {
            return Err(Error::EmptyEval);
        }
        for &y in labels.iter().chain(&eval_labels) {
            data.label_space.check_label(y)?;
        }
        let sampler = BalancedSampler::new(&labels, &data.label_space)?;
        let weak = cfg.augment.weak();
        let norm = cfg.augment.normalization();
        let policy = cfg.strong.policy()?;
        let labeled_center = eval_inputs(&data.labeled, &weak, norm.as_ref())?;
        let eval_input = eval_inputs(&data.eval, &weak, norm.as_ref())?;
        Ok(Self {
            cfg,
            net,
            weak,
            policy,
            norm,
            data,
            labels,
            sampler,
            labeled_center,
            eval_input,
            eval_labels,
            state,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut RunState {
        &mut self.state
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Whether the unlabeled branch contributes anything to the objective.
    pub fn unlabeled_active(&self) -> bool {
        !self.data.unlabeled.is_empty() && (self.cfg.loss.lambda1 > 0.0 || self.cfg.loss.lambda2 > 0.0)
    }

    pub fn steps_per_epoch(&self) -> usize {
        if let Some(n) = self.cfg.train.steps_per_epoch {
            return n;
        }
        let u = self.data.unlabeled.len();
        if u > 0 {
            u.div_ceil(self.cfg.train.unlabeled_batch())
        } else {
            self.labels.len().div_ceil(self.cfg.train.labeled_batch())
        }
    }

    fn drop_plan(&mut self, batch: usize) -> DropPlan {
        match &self.net.config().attention {
            Some(a) => sample_drop_plan(batch, a.num_branches, a.drop_p, &mut self.state.rngs.drop),
            None => vec![None; batch],
        }
    }

    fn teacher_observe(&mut self, picks: &[usize], epoch: usize, log: &mut EpochLog) -> Result<()> {
        let len = self.net.input_len();
        let mut input = Vec::with_capacity(picks.len() * len);
        for &i in picks {
            input.extend_from_slice(&self.labeled_center[i * len..(i + 1) * len]);
        }
        let logits = self.net.predict(&self.state.teacher.params, &input, picks.len());
        let probs = softmax_rows(&to_f64(&logits), self.net.num_classes())?;
        for (&i, p) in picks.iter().zip(probs) {
            self.state.gate.observe_labeled(&p, self.labels[i])?;
            if self.cfg.train.write_trace {
                log.trace.push(to_line(&ProbTrace {
                    epoch,
                    sample_id: self.data.labeled[i].sample_id.clone(),
                    probs: p,
                    label: Some(self.labels[i]),
                }));
            }
        }
        Ok(())
    }

    fn unlabeled_branch(&mut self, batch: &[usize], grads: &mut [f32], epoch: usize, log: &mut EpochLog) -> Result<UnlabeledOutcome> {
        let n = batch.len();
        let k = self.net.num_classes();
        let mut views = Vec::with_capacity(n);
        for &i in batch {
            views.push(make_views(&self.data.unlabeled[i], &self.weak, &self.policy, &mut self.state.rngs.unlabeled_aug)?);
        }
        let w1 = stack_inputs(views.iter().map(|v| &v.weak1.image), self.norm.as_ref());
        let w2 = stack_inputs(views.iter().map(|v| &v.weak2.image), self.norm.as_ref());
        let plan1 = self.drop_plan(n);
        let plan2 = self.drop_plan(n);
        let f1 = self.net.forward(&self.state.student, &w1, n, Some(&plan1));
        let f2 = self.net.forward(&self.state.student, &w2, n, Some(&plan2));
        let z1 = to_f64(&f1.logits);
        let z2 = to_f64(&f2.logits);
        let p1 = softmax_rows(&z1, k)?;
        let p2 = softmax_rows(&z2, k)?;

        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for j in 0..n {
            let p_avg = p1[j].average(&p2[j])?;
            let sample_id = &views[j].source_id;
            let route = self.state.gate.route(sample_id, &p_avg)?;
            if self.cfg.train.write_trace {
                log.trace.push(to_line(&ProbTrace {
                    epoch,
                    sample_id: sample_id.clone(),
                    probs: p_avg,
                    label: None,
                }));
            }
            match route {
                Route::Accepted(pseudo) => accepted.push((j, pseudo.class_index)),
                Route::Rejected { negatives, .. } => rejected.push((j, negatives)),
            }
        }

        let weights = self.cfg.loss;
        let mut l_consistency = 0.0;
        if !accepted.is_empty() {
            let a = accepted.len();
            let strong = stack_inputs(accepted.iter().map(|&(j, _)| &views[j].strong.image), self.norm.as_ref());
            let plan = self.drop_plan(a);
            let fs = self.net.forward(&self.state.student, &strong, a, Some(&plan));
            let targets: Vec<usize> = accepted.iter().map(|&(_, c)| c).collect();
            let (loss, grad) = cross_entropy_objective(&targets, &to_f64(&fs.logits), k)?;
            l_consistency = loss;
            if weights.lambda1 > 0.0 {
                let scaled: Vec<f64> = grad.iter().map(|g| weights.lambda1 * g).collect();
                self.net.backward(&self.state.student, &fs, &to_f32(&scaled), grads);
            }
        }

        let mut l_negative = 0.0;
        if !rejected.is_empty() {
            let rows = |z: &[f64]| -> Vec<f64> {
                rejected.iter().flat_map(|(j, _)| z[j * k..(j + 1) * k].to_vec()).collect()
            };
            let negatives: Vec<BTreeSet<usize>> = rejected.iter().map(|(_, s)| s.clone()).collect();
            let (loss, g1, g2) = negative_objective(&rows(&z1), &rows(&z2), &negatives, k, self.cfg.snl.log_form)?;
            l_negative = loss;
            if weights.lambda2 > 0.0 && negatives.iter().any(|s| !s.is_empty()) {
                let mut full1 = vec![0.0f32; n * k];
                let mut full2 = vec![0.0f32; n * k];
                for (r, (j, _)) in rejected.iter().enumerate() {
                    for c in 0..k {
                        full1[j * k + c] = (weights.lambda2 * g1[r * k + c]) as f32;
                        full2[j * k + c] = (weights.lambda2 * g2[r * k + c]) as f32;
                    }
                }
                self.net.backward(&self.state.student, &f1, &full1, grads);
                self.net.backward(&self.state.student, &f2, &full2, grads);
            }
        }

        Ok(UnlabeledOutcome {
            l_consistency,
            l_negative,
            accepted: accepted.len(),
            rejected: rejected.len(),
        })
    }

    /// One optimizer step on a balanced labeled batch and the given
    /// unlabeled indices.
    pub fn train_step(&mut self, unlabeled: &[usize], epoch: usize, log: &mut EpochLog) -> Result<LossReport> {
        let step = self.state.step + 1;
        self.train_step_inner(unlabeled, epoch, log).map_err(|e| match e {
            Error::NonFiniteLogit { .. } | Error::NonFiniteLoss { .. } => Error::Diverged {
                epoch,
                step,
                report: e.to_string(),
            },
            other => other,
        })
    }

    fn train_step_inner(&mut self, unlabeled: &[usize], epoch: usize, log: &mut EpochLog) -> Result<LossReport> {
        let k = self.net.num_classes();
        let l_count = self.cfg.train.labeled_batch();
        let picks = self.sampler.sample(l_count, &mut self.state.rngs.sampler);
        let mut crops = Vec::with_capacity(l_count);
        for &i in &picks {
            crops.push(weak_augment(&self.data.labeled[i].image, &self.weak, &mut self.state.rngs.labeled_aug)?);
        }
        let input = stack_inputs(&crops, self.norm.as_ref());
        let plan = self.drop_plan(l_count);
        let fwd = self.net.forward(&self.state.student, &input, l_count, Some(&plan));
        let targets: Vec<usize> = picks.iter().map(|&i| self.labels[i]).collect();
        let (l_labeled, grad) = cross_entropy_objective(&targets, &to_f64(&fwd.logits), k)?;
        let mut grads = vec![0.0f32; self.net.param_count()];
        self.net.backward(&self.state.student, &fwd, &to_f32(&grad), &mut grads);
        drop(fwd);

        let outcome = if self.unlabeled_active() && !unlabeled.is_empty() {
            self.unlabeled_branch(unlabeled, &mut grads, epoch, log)?
        } else {
            UnlabeledOutcome {
                l_consistency: 0.0,
                l_negative: 0.0,
                accepted: 0,
                rejected: 0,
            }
        };
        let weights = self.cfg.loss;
        let report = LossReport {
            l_labeled,
            l_consistency: outcome.l_consistency,
            l_negative: outcome.l_negative,
            l_total: l_labeled + weights.lambda1 * outcome.l_consistency + weights.lambda2 * outcome.l_negative,
            accepted_count: outcome.accepted,
            rejected_count: outcome.rejected,
        };
        if let Err(e) = total_loss(report.l_labeled, report.l_consistency, report.l_negative, &weights) {
            return Err(Error::Diverged {
                epoch,
                step: self.state.step + 1,
                report: format!("{e}; {}", to_line(&report)),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                step: self.state.step + 1,
                report: format!("non-finite gradient; {}", to_line(&report)),
            });
        }

        self.state.adam.step(&mut self.state.student, &grads);
        self.state.teacher.update(&self.state.student)?;
        if !self.cfg.dta.full_pass_stats {
            self.teacher_observe(&picks, epoch, log)?;
        }
        self.state.step += 1;
        log.metrics.push(to_line(&MetricsRecord::Step {
            epoch,
            step: self.state.step,
            loss: report.clone(),
        }));
        Ok(report)
    }

    /// Trains one epoch, finalizes thresholds and evaluates when due.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch + 1;
        let mut log = EpochLog::default();
        let u = self.data.unlabeled.len();
        let mut order: Vec<usize> = (0..u).collect();
        order.shuffle(&mut self.state.rngs.shuffle);
        let steps = self.steps_per_epoch();
        let part = self.cfg.train.unlabeled_batch();
        let visits = if self.cfg.train.steps_per_epoch.is_some() { steps * part } else { u };
        let mut loss_sum = 0.0;
        for s in 0..steps {
            let batch: Vec<usize> = if u == 0 {
                Vec::new()
            } else {
                (s * part..((s + 1) * part).min(visits)).map(|j| order[j % u]).collect()
            };
            loss_sum += self.train_step(&batch, epoch, &mut log)?.l_total;
        }
        if self.cfg.dta.full_pass_stats {
            let all: Vec<usize> = (0..self.labels.len()).collect();
            self.teacher_observe(&all, epoch, &mut log)?;
        }
        let gate = self.state.gate.end_epoch();
        let eval = if epoch % self.cfg.train.eval_every == 0 || epoch >= self.cfg.train.epochs {
            Some(self.evaluate()?)
        } else {
            None
        };
        if let Some(m) = &eval {
            if self.state.best.as_ref().map_or(true, |b| m.accuracy > b.accuracy) {
                self.state.best = Some(BestEval {
                    epoch,
                    accuracy: m.accuracy,
                    macro_f1: m.macro_f1,
                });
                log.improved = true;
            }
        }
        let record = EpochRecord {
            epoch,
            steps,
            mean_loss: loss_sum / steps.max(1) as f64,
            gate,
            eval,
        };
        log.metrics.push(to_line(&MetricsRecord::Epoch(record.clone())));
        log.record = Some(record);
        self.state.epoch = epoch;
        Ok(log)
    }

    /// Accuracy and macro-F1 on the eval split of the configured model.
    pub fn evaluate(&self) -> Result<EvalMetrics> {
        evaluate_params(&self.net, self.state.eval_params(self.cfg.train.eval_model), &self.eval_input, &self.eval_labels)
    }

    /// Teacher distributions on the labeled center crops, in split order.
    pub fn teacher_probs(&self) -> Result<Vec<ProbabilityVector>> {
        let logits = self.net.predict(&self.state.teacher.params, &self.labeled_center, self.labels.len());
        softmax_rows(&to_f64(&logits), self.net.num_classes())
    }
}

/// Holds `run.lock` for the lifetime of a run.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(format!("creating {}", path.display()))(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub final_eval: Option<EvalMetrics>,
    pub best: Option<BestEval>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const BEST_FILE: &str = "best";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch-{epoch}"))
}

/// Keeps only the lines whose `epoch` field is at most `epoch`.
fn truncate_jsonl(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path).map_err(Error::io(format!("reading {}", path.display())))?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line.map_err(Error::io(format!("reading {}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&line)?;
        if value.get("epoch").and_then(|e| e.as_u64()).is_some_and(|e| e as usize <= epoch) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(Error::io(format!("writing {}", path.display())))
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(format!("opening {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(Error::io(format!("writing {}", path.display())))?;
    }
    w.flush().map_err(Error::io(format!("writing {}", path.display())))
}

/// Loads the manifest a config points at and checks it against the config.
pub fn load_data(cfg: &RunConfig) -> Result<TrainData> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["data.manifest: required".into()]))?;
    let data = TrainData::from_manifest(&DatasetManifest::load(path)?)?;
    check_data(cfg, &data)?;
    Ok(data)
}

pub fn check_data(cfg: &RunConfig, data: &TrainData) -> Result<()> {
    let mut errs = Vec::new();
    if data.unlabeled.is_empty() {
        for (key, v) in [("loss.lambda1", cfg.loss.lambda1), ("loss.lambda2", cfg.loss.lambda2)] {
            if v > 0.0 {
                errs.push(format!("{key} = {v} needs unlabeled data, but the manifest has no unlabeled split"));
            }
        }
    }
    if data.eval.is_empty() {
        errs.push("data.manifest: the eval split is empty".into());
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// Trains per `cfg`, writing the run directory. With `resume`, continues
/// from that checkpoint and drops any logged records past its epoch.
pub fn run_train(cfg: &RunConfig, data: TrainData, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    check_data(cfg, &data)?;
    fs::create_dir_all(out.join("checkpoints")).map_err(Error::io(format!("creating {}", out.display())))?;
    let _lock = RunLock::acquire(out)?;
    let metrics = out.join(METRICS_FILE);
    let trace = out.join(TRACE_FILE);
    let mut trainer = match resume {
        Some(ckpt) => {
            let state = RunState::load(ckpt)?;
            truncate_jsonl(&metrics, state.epoch)?;
            truncate_jsonl(&trace, state.epoch)?;
            Trainer::resume(cfg.clone(), data, state)?
        }
        None => {
            fs::write(out.join(SNAPSHOT_FILE), cfg.to_toml()).map_err(Error::io("writing config snapshot"))?;
            for path in [&metrics, &trace] {
                File::create(path).map_err(Error::io(format!("creating {}", path.display())))?;
            }
            Trainer::new(cfg.clone(), data)?
        }
    };
    let mut final_eval = None;
    while trainer.state().epoch < cfg.train.epochs {
        let log = trainer.train_epoch()?;
        append_lines(&metrics, &log.metrics)?;
        append_lines(&trace, &log.trace)?;
        let epoch = trainer.state().epoch;
        if log.improved || epoch % cfg.train.checkpoint_every == 0 || epoch == cfg.train.epochs {
            trainer.state().save(&checkpoint_path(out, epoch))?;
        }
        if log.improved {
            fs::write(out.join(BEST_FILE), format!("checkpoints/epoch-{epoch}\n")).map_err(Error::io("writing best marker"))?;
        }
        if let Some(record) = log.record {
            if record.eval.is_some() {
                final_eval = record.eval;
            }
        }
    }
    Ok(RunSummary {
        epochs: trainer.state().epoch,
        final_eval,
        best: trainer.state().best.clone(),
    })
}

/// Reads `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path).map_err(Error::io(format!("reading {}", path.display())))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(Error::io(format!("reading {}", path.display())))?;
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
