//! Training orchestration: supervised pretraining, distillation baselines and
//! the data-free method with interleaved student / transformation updates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::evalkit::{evaluate_with_histogram, predict_all, DepthHistogram, MetricsReport};
use crate::losses::{depth_loss_eval, distill_branch, generator_step_from_traces, valid_mask, BranchWeights, LossBreakdown};
use crate::mixer::{mix_tensor_batch, MixOptions};
use crate::nets::{validate_compression_pair, BnLayerMask, DepthNet, DepthNetworkSpec, Role, TransformNet, TransformNetworkSpec};
use crate::nn::{Mode, NetTrace};
use crate::optim::{Adam, StepDecay};
use crate::simworld::LoadedDataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TeacherSupervised,
    StudentSupervised,
    KdOod,
    RandomNoiseKd,
    DatafreeFull,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::TeacherSupervised, Method::StudentSupervised, Method::KdOod, Method::RandomNoiseKd, Method::DatafreeFull];

    pub fn name(self) -> &'static str {
        match self {
            Method::TeacherSupervised => "teacher_supervised",
            Method::StudentSupervised => "student_supervised",
            Method::KdOod => "kd_ood",
            Method::RandomNoiseKd => "random_noise_kd",
            Method::DatafreeFull => "datafree_full",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::KdOod | Method::RandomNoiseKd | Method::DatafreeFull)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected one of {}", Method::ALL.map(|m| m.name()).join(", "))))
    }
}

/// Switches for the data-free method's components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_g: bool,
    pub use_mixing: bool,
    pub use_rec: bool,
    /// Feed `G(x′)` instead of `x′` to the raw branch.
    pub transform_raw_branch: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_g: true, use_mixing: true, use_rec: true, transform_raw_branch: false }
    }
}

impl AblationFlags {
    pub fn all_disabled() -> Self {
        Self { use_g: false, use_mixing: false, use_rec: false, transform_raw_branch: false }
    }

    /// The second (transformed / mixed) branch exists only if it differs
    /// from the raw branch.
    pub fn branch2_active(&self) -> bool {
        self.use_g || self.use_mixing
    }

    /// Named single-factor variants, in table order.
    pub fn ablation_matrix() -> Vec<(&'static str, AblationFlags)> {
        let full = Self::default();
        vec![
            ("original", full),
            ("no_rec", Self { use_rec: false, ..full }),
            ("no_g", Self { use_g: false, ..full }),
            ("no_mixing", Self { use_mixing: false, ..full }),
            ("with_g_raw", Self { transform_raw_branch: true, ..full }),
            ("all_disabled", Self::all_disabled()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: StepDecay,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Learning rate of the transformation network; `None` uses `lr`.
    pub g_lr: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub branch_weights: BranchWeights,
    pub mixing: MixOptions,
    pub bn_layers: BnLayerMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            lr_decay: StepDecay::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            g_lr: None,
            alpha: 0.001,
            beta: 0.001,
            lambda: 0.9,
            seed: 0,
            ablation: AblationFlags::default(),
            branch_weights: BranchWeights::default(),
            mixing: MixOptions::default(),
            bn_layers: BnLayerMask::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2 (batch-norm statistics), got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.g_lr.is_some_and(|g| !(g >= 0.0 && g.is_finite())) {
            return fail("learning rates must be finite and non-negative".into());
        }
        if self.lr_decay.every == 0 || !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return fail("lr_decay needs every >= 1 and factor in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("adam moments must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("alpha and beta must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        let w = self.branch_weights;
        if !(w.raw >= 0.0 && w.transformed >= 0.0 && w.raw.is_finite() && w.transformed.is_finite()) {
            return fail("branch weights must be finite and non-negative".into());
        }
        if self.ablation.transform_raw_branch && !self.ablation.use_g {
            return fail("transform_raw_branch requires use_g".into());
        }
        Ok(())
    }

    fn g_lr_at(&self, epoch: usize) -> f64 {
        self.lr_decay.lr_at(self.g_lr.unwrap_or(self.lr), epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-step total loss.
    pub loss: f64,
    /// Mean per-step components.
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    /// Distinguishes variants of one method (ablation name, attack ε, …).
    #[serde(default)]
    pub label: Option<String>,
    pub config: serde_json::Value,
    pub curve: Vec<EpochLog>,
    /// Checkpoint paths relative to the run directory.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: Option<MetricsReport>,
    /// Histogram of the evaluated network's predictions on the evaluation set.
    #[serde(default)]
    pub prediction_histogram: Option<DepthHistogram>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn display_name(&self) -> String {
        match &self.label {
            Some(l) => format!("{}[{l}]", self.method),
            None => self.method.to_string(),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.curve.iter().map(|e| e.loss).collect()
    }

    /// Writes `run.json` and `loss.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("run.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&p, e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        let keys: Vec<&String> = self.curve.first().map(|e| e.components.keys().collect()).unwrap_or_default();
        let mut csv = String::from("epoch,lr,loss");
        for k in &keys {
            csv.push(',');
            csv.push_str(k);
        }
        csv.push('\n');
        for e in &self.curve {
            csv.push_str(&format!("{},{},{}", e.epoch, e.lr, e.loss));
            for k in &keys {
                csv.push_str(&format!(",{}", e.components.get(*k).copied().unwrap_or(f64::NAN)));
            }
            csv.push('\n');
        }
        let p = dir.join("loss.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = if dir.is_dir() { dir.join("run.json") } else { dir.to_path_buf() };
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
    }
}

/// Independent generator streams derived from one seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Order = 2,
    Mix = 3,
    Noise = 4,
    GInit = 5,
}

fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

fn init_seed(seed: u64, which: Stream) -> u64 {
    stream(seed, which).next_u64()
}

/// Shuffled mini-batches for one epoch. A trailing batch of one sample is
/// dropped, since train-mode batch norm needs at least two.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

/// Accumulates per-step breakdowns into epoch means.
#[derive(Default)]
struct EpochAcc {
    steps: usize,
    total: f64,
    parts: BTreeMap<String, f64>,
}

impl EpochAcc {
    fn add(&mut self, b: &LossBreakdown, prefix: &str) {
        if prefix.is_empty() {
            self.steps += 1;
            self.total += b.total;
        } else {
            *self.parts.entry(format!("{prefix}total")).or_default() += b.total;
        }
        for (k, v) in &b.components {
            *self.parts.entry(format!("{prefix}{k}")).or_default() += v;
        }
    }

    fn finish(self, epoch: usize, lr: f64) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog { epoch, lr, loss: self.total / n, components: self.parts.into_iter().map(|(k, v)| (k, v / n)).collect() }
    }
}

fn check_finite(b: &LossBreakdown, what: &str, epoch: usize, step: usize) -> Result<()> {
    if b.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss at epoch {epoch}, step {step}: {:?}", b.components)))
    }
}

fn ckpt_dir(out: &Path) -> Result<PathBuf> {
    let d = out.join("ckpt");
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

fn new_adam(len: usize, cfg: &TrainConfig) -> Adam<f32> {
    Adam::new(len, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
}

/// Finalizes a run: evaluation, checkpoint, `run.json`.
#[allow(clippy::too_many_arguments)]
fn finish_run(
    method: Method,
    label: Option<String>,
    config: serde_json::Value,
    curve: Vec<EpochLog>,
    nets: &[(&str, Checkpointable<'_>)],
    eval: Option<&LoadedDataset>,
    eval_net: &DepthNet<f32>,
    seed: u64,
    started: Instant,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    let (metrics, prediction_histogram) = match eval {
        Some(d) => {
            let (m, h) = evaluate_with_histogram(eval_net, d)?;
            (Some(m), Some(h))
        }
        None => (None, None),
    };
    let mut checkpoints = BTreeMap::new();
    if let Some(out) = out_dir {
        let dir = ckpt_dir(out)?;
        for (name, net) in nets {
            let file = format!("{name}.ckpt");
            match net {
                Checkpointable::Depth(n) => n.save(&dir.join(&file), Some(&config))?,
                Checkpointable::Transform(g) => g.save(&dir.join(&file), Some(&config))?,
            }
            checkpoints.insert(name.to_string(), format!("ckpt/{file}"));
        }
    }
    let record = RunRecord { method, seed, label, config, curve, checkpoints, metrics, prediction_histogram, wall_seconds: started.elapsed().as_secs_f64() };
    if let Some(out) = out_dir {
        record.write(out)?;
    }
    Ok(record)
}

enum Checkpointable<'a> {
    Depth(&'a DepthNet<f32>),
    Transform(&'a TransformNet<f32>),
}

/// Supervised training on ground-truth depth.
pub fn train_supervised(
    role: Role,
    spec: &DepthNetworkSpec,
    data: &LoadedDataset,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(DepthNet<f32>, RunRecord)> {
    cfg.validate()?;
    if !data.has_depth() {
        return Err(Error::Missing("supervised training needs ground-truth depth maps".into()));
    }
    let started = Instant::now();
    let method = if role == Role::Teacher { Method::TeacherSupervised } else { Method::StudentSupervised };
    let mut net = DepthNet::<f32>::build(spec.clone(), role, init_seed(cfg.seed, Stream::Init))?;
    let mut opt = new_adam(net.param_count(), cfg);
    let mut order = stream(cfg.seed, Stream::Order);
    let mut grads = vec![0f32; net.param_count()];
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_decay.lr_at(cfg.lr, epoch);
        let mut acc = EpochAcc::default();
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, &mut order).into_iter().enumerate() {
            let x = data.images.gather(&idx);
            let y = data.depths.gather(&idx);
            let trace = net.trace(&x, Mode::Train)?;
            let ev = depth_loss_eval(&trace.output, &y, &valid_mask(&y), true)?;
            let b = ev.breakdown();
            check_finite(&b, method.name(), epoch, step)?;
            grads.fill(0.0);
            net.backward(&trace, ev.dpred.as_ref(), None, Some(&mut grads), false);
            opt.step(net.params_mut(), &grads, lr);
            net.apply_running_update(&trace);
            acc.add(&b, "");
        }
        let log = acc.finish(epoch, lr);
        log::info!("{method} seed {} epoch {epoch}: loss {:.4}", cfg.seed, log.loss);
        curve.push(log);
    }
    let config = json!({ "method": method, "train": cfg, "network": spec });
    let record = finish_run(method, None, config, curve, &[("model", Checkpointable::Depth(&net))], eval, &net, cfg.seed, started, out_dir)?;
    Ok((net, record))
}

pub fn train_teacher(
    spec: &DepthNetworkSpec,
    data: &LoadedDataset,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(DepthNet<f32>, RunRecord)> {
    train_supervised(Role::Teacher, spec, data, eval, cfg, out_dir)
}

fn check_teacher(teacher: &DepthNet<f32>, student: &DepthNetworkSpec) -> Result<()> {
    if teacher.role() != Role::Teacher {
        return Err(Error::Checkpoint("expected a teacher network".into()));
    }
    validate_compression_pair(teacher.spec(), student)
}

/// Where the distillation inputs of each step come from.
pub(crate) enum KdSource<'a> {
    /// A fixed image set with precomputed teacher targets.
    Images { images: &'a Tensor<f32>, targets: Tensor<f32> },
    /// Fresh clamped unit-Gaussian noise per batch; `count` samples per epoch.
    Noise { count: usize },
}

/// Plain teacher-to-student distillation on `source`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kd_loop(
    method: Method,
    label: Option<String>,
    teacher: &DepthNet<f32>,
    student_spec: &DepthNetworkSpec,
    source: KdSource<'_>,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    extra_config: serde_json::Value,
    out_dir: Option<&Path>,
) -> Result<(DepthNet<f32>, RunRecord)> {
    cfg.validate()?;
    check_teacher(teacher, student_spec)?;
    let started = Instant::now();
    let mut student = DepthNet::<f32>::build(student_spec.clone(), Role::Student, init_seed(cfg.seed, Stream::Init))?;
    let mut opt = new_adam(student.param_count(), cfg);
    let mut order = stream(cfg.seed, Stream::Order);
    let mut noise = stream(cfg.seed, Stream::Noise);
    let (h, w) = student_spec.input_size;
    let n = match &source {
        KdSource::Images { images, .. } => images.batch(),
        KdSource::Noise { count } => *count,
    };
    if n < 2 {
        return Err(Error::InvalidInput("distillation needs at least two inputs".into()));
    }
    let mut grads = vec![0f32; student.param_count()];
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_decay.lr_at(cfg.lr, epoch);
        let mut acc = EpochAcc::default();
        for (step, idx) in epoch_batches(n, cfg.batch_size, &mut order).into_iter().enumerate() {
            let (x, t) = match &source {
                KdSource::Images { images, targets } => (images.gather(&idx), targets.gather(&idx)),
                KdSource::Noise { .. } => {
                    let data = (0..idx.len() * 3 * h * w).map(|_| StandardNormal.sample(&mut noise)).map(|v: f32| v.clamp(0.0, 1.0)).collect();
                    let x = Tensor::from_vec([idx.len(), 3, h, w], data)?;
                    let t = crate::nets::forward_depth(teacher, &x)?;
                    (x, t)
                }
            };
            grads.fill(0.0);
            let (b, trace) = distill_branch(&student, &x, &t, 1.0, &mut grads)?;
            check_finite(&b, method.name(), epoch, step)?;
            opt.step(student.params_mut(), &grads, lr);
            student.apply_running_update(&trace);
            acc.add(&b, "");
        }
        let log = acc.finish(epoch, lr);
        log::info!("{method} seed {} epoch {epoch}: loss {:.4}", cfg.seed, log.loss);
        curve.push(log);
    }
    let mut config = json!({ "method": method, "train": cfg, "student": student_spec, "teacher": teacher.spec() });
    if let (Some(obj), serde_json::Value::Object(extra)) = (config.as_object_mut(), extra_config) {
        obj.extend(extra);
    }
    let record = finish_run(method, label, config, curve, &[("student", Checkpointable::Depth(&student))], eval, &student, cfg.seed, started, out_dir)?;
    Ok((student, record))
}

/// Distillation on the out-of-distribution image set, raw images only.
pub fn run_kd_ood(
    teacher: &DepthNet<f32>,
    student_spec: &DepthNetworkSpec,
    ood: &LoadedDataset,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(DepthNet<f32>, RunRecord)> {
    let targets = predict_all(teacher, &ood.images, 32)?;
    kd_loop(Method::KdOod, None, teacher, student_spec, KdSource::Images { images: &ood.images, targets }, eval, cfg, json!({}), out_dir)
}

/// Distillation on clamped Gaussian noise, `samples_per_epoch` inputs per epoch.
pub fn run_random_noise_kd(
    teacher: &DepthNet<f32>,
    student_spec: &DepthNetworkSpec,
    samples_per_epoch: usize,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(DepthNet<f32>, RunRecord)> {
    kd_loop(
        Method::RandomNoiseKd,
        None,
        teacher,
        student_spec,
        KdSource::Noise { count: samples_per_epoch },
        eval,
        cfg,
        json!({ "samples_per_epoch": samples_per_epoch }),
        out_dir,
    )
}

/// Inputs of one data-free iteration, computed before either update.
pub(crate) struct PreparedBatch {
    x1: Tensor<f32>,
    t1: Tensor<f32>,
    branch2: Option<Branch2>,
}

struct Branch2 {
    /// G's input: the mixed batch (or the raw batch without mixing).
    mixed: Tensor<f32>,
    g_trace: Option<NetTrace<f32>>,
    x2: Tensor<f32>,
    /// Eval-mode teacher on `x2`; its output is the branch-2 target and its
    /// BN statistics drive G's objective.
    t_trace: NetTrace<f32>,
}

/// State of one data-free distillation run.
pub struct DatafreeTrainer<'a> {
    teacher: &'a DepthNet<f32>,
    ood: &'a LoadedDataset,
    cfg: TrainConfig,
    student: DepthNet<f32>,
    g: TransformNet<f32>,
    opt_s: Adam<f32>,
    opt_g: Adam<f32>,
    order: ChaCha8Rng,
    mix: ChaCha8Rng,
    /// Teacher predictions on the raw OOD images (frozen teacher, eval mode).
    raw_targets: Option<Tensor<f32>>,
    bn_mask: Vec<bool>,
    grads_s: Vec<f32>,
}

impl<'a> DatafreeTrainer<'a> {
    pub fn new(teacher: &'a DepthNet<f32>, student_spec: &DepthNetworkSpec, ood: &'a LoadedDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_teacher(teacher, student_spec)?;
        if ood.len() < 2 {
            return Err(Error::InvalidInput("distillation needs at least two inputs".into()));
        }
        if cfg.ablation.use_mixing && ood.semantics.iter().any(|s| s.len() != ood.images.plane()) {
            return Err(Error::Missing("object-wise mixing needs semantic maps for every OOD sample".into()));
        }
        let student = DepthNet::<f32>::build(student_spec.clone(), Role::Student, init_seed(cfg.seed, Stream::Init))?;
        let g = TransformNet::<f32>::build(TransformNetworkSpec::standard(student_spec.input_size), init_seed(cfg.seed, Stream::GInit))?;
        let raw_targets = if cfg.ablation.transform_raw_branch { None } else { Some(predict_all(teacher, &ood.images, 32)?) };
        Ok(Self {
            teacher,
            ood,
            opt_s: new_adam(student.param_count(), cfg),
            opt_g: new_adam(g.param_count(), cfg),
            grads_s: vec![0.0; student.param_count()],
            bn_mask: teacher.bn_mask(cfg.bn_layers),
            cfg: cfg.clone(),
            student,
            g,
            order: stream(cfg.seed, Stream::Order),
            mix: stream(cfg.seed, Stream::Mix),
            raw_targets,
        })
    }

    pub fn student(&self) -> &DepthNet<f32> {
        &self.student
    }

    pub fn transform(&self) -> &TransformNet<f32> {
        &self.g
    }

    pub(crate) fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        epoch_batches(self.ood.len(), self.cfg.batch_size, &mut self.order)
    }

    /// Draws the mixed batch and runs every forward pass the two updates
    /// need, with the current G.
    pub(crate) fn prepare(&mut self, idx: &[usize]) -> Result<PreparedBatch> {
        let flags = self.cfg.ablation;
        let raw = self.ood.images.gather(idx);
        let branch2 = if flags.branch2_active() {
            let mixed = if flags.use_mixing {
                let sems: Vec<&[u8]> = idx.iter().map(|&i| self.ood.semantics[i].as_slice()).collect();
                mix_tensor_batch(&raw, &sems, self.cfg.mixing, &mut self.mix)?
            } else {
                raw.clone()
            };
            let (g_trace, x2) = if flags.use_g {
                let tr = self.g.trace(&mixed)?;
                let out = tr.output.clone();
                (Some(tr), out)
            } else {
                (None, mixed.clone())
            };
            let t_trace = self.teacher.trace(&x2, Mode::Eval)?;
            Some(Branch2 { mixed, g_trace, x2, t_trace })
        } else {
            None
        };
        let (x1, t1) = match &self.raw_targets {
            Some(t) => (raw, t.gather(idx)),
            None => {
                let x1 = crate::nets::forward_transform(&self.g, &raw)?;
                let t1 = crate::nets::forward_depth(self.teacher, &x1)?;
                (x1, t1)
            }
        };
        Ok(PreparedBatch { x1, t1, branch2 })
    }

    /// One student step on both branches.
    pub(crate) fn student_update(&mut self, batch: &PreparedBatch, lr: f64) -> Result<LossBreakdown> {
        let w = self.cfg.branch_weights;
        self.grads_s.fill(0.0);
        let (b1, tr1) = distill_branch(&self.student, &batch.x1, &batch.t1, w.raw, &mut self.grads_s)?;
        let mut parts = vec![("branch1", b1.total, w.raw)];
        let mut traces = vec![tr1];
        let mut b2 = None;
        if let Some(br) = &batch.branch2 {
            let (b, tr) = distill_branch(&self.student, &br.x2, &br.t_trace.output, w.transformed, &mut self.grads_s)?;
            parts.push(("branch2", b.total, w.transformed));
            traces.push(tr);
            b2 = Some(b);
        }
        let mut breakdown = LossBreakdown::weighted(&parts);
        for (k, v) in b1.components {
            breakdown.components.insert(format!("branch1_{k}"), v);
        }
        if let Some(b) = b2 {
            for (k, v) in b.components {
                breakdown.components.insert(format!("branch2_{k}"), v);
            }
        }
        self.opt_s.step(self.student.params_mut(), &self.grads_s, lr);
        for tr in &traces {
            self.student.apply_running_update(tr);
        }
        Ok(breakdown)
    }

    /// One G step on the generator objective, reusing the forward passes
    /// from [`Self::prepare`]. No-op without G.
    pub(crate) fn generator_update(&mut self, batch: &PreparedBatch, lr: f64) -> Result<Option<LossBreakdown>> {
        let Some(br) = &batch.branch2 else { return Ok(None) };
        let Some(g_trace) = &br.g_trace else { return Ok(None) };
        let beta = if self.cfg.ablation.use_rec { self.cfg.beta } else { 0.0 };
        let out = generator_step_from_traces(&self.g, g_trace, self.teacher, &br.t_trace, &br.mixed, self.cfg.alpha, beta, &self.bn_mask)?;
        self.opt_g.step(self.g.params_mut(), &out.grads, lr);
        Ok(Some(out.breakdown))
    }

    /// Runs all epochs.
    pub fn train(&mut self) -> Result<Vec<EpochLog>> {
        let mut curve = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_decay.lr_at(self.cfg.lr, epoch);
            let g_lr = self.cfg.g_lr_at(epoch);
            let mut acc = EpochAcc::default();
            for (step, idx) in self.next_epoch().into_iter().enumerate() {
                let batch = self.prepare(&idx)?;
                let b = self.student_update(&batch, lr)?;
                check_finite(&b, "student", epoch, step)?;
                acc.add(&b, "");
                if let Some(gb) = self.generator_update(&batch, g_lr)? {
                    check_finite(&gb, "transformation network", epoch, step)?;
                    acc.add(&gb, "g_");
                }
            }
            let log = acc.finish(epoch, lr);
            log::info!("datafree seed {} epoch {epoch}: loss {:.4}", self.cfg.seed, log.loss);
            curve.push(log);
        }
        Ok(curve)
    }
}

/// The data-free method: raw-branch and transformed-mixed-branch
/// distillation with interleaved updates of the transformation network.
pub fn run_datafree_distillation(
    teacher: &DepthNet<f32>,
    student_spec: &DepthNetworkSpec,
    ood: &LoadedDataset,
    eval: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    label: Option<String>,
    out_dir: Option<&Path>,
) -> Result<(DepthNet<f32>, RunRecord)> {
    let started = Instant::now();
    let mut trainer = DatafreeTrainer::new(teacher, student_spec, ood, cfg)?;
    let curve = trainer.train()?;
    let config = json!({
        "method": Method::DatafreeFull,
        "train": cfg,
        "student": student_spec,
        "teacher": teacher.spec(),
        "transform": trainer.g.spec(),
    });
    let mut nets = vec![("student", Checkpointable::Depth(&trainer.student))];
    if cfg.ablation.use_g {
        nets.push(("transform", Checkpointable::Transform(&trainer.g)));
    }
    let record = finish_run(Method::DatafreeFull, label, config, curve, &nets, eval, &trainer.student, cfg.seed, started, out_dir)?;
    Ok((trainer.student.clone(), record))
}

/// Conventional output directory of a run.
pub fn run_dir(root: &Path, method: Method, label: Option<&str>, seed: u64) -> PathBuf {
    match label {
        Some(l) => root.join(format!("{method}-{l}-seed{seed}")),
        None => root.join(format!("{method}-seed{seed}")),
    }
}
