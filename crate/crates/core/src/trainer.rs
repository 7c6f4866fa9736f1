//! Optimization loop: mixed-subject batches, AdamW under a one-cycle
//! schedule, gradient reversal progress, checkpointing and resume.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignTargets, Discriminator, LossBreakdown};
use crate::checkpoint::Archive;
use crate::config::RunConfig;
use crate::dataset::{Dataset, SampleRef, Split};
use crate::embedder::{BlockKind, ExtractorMode, ModelConfig, ModelInput, OutputGrads, UniBrain};
use crate::error::{Error, Result};
use crate::eval;
use crate::extractor::PlanCache;
use crate::nn::{join, Mode, Params, Visit, VisitMut};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of steps spent warming up to `max_lr`.
    pub pct_start: f64,
    /// Initial learning rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// Final learning rate is the initial one divided by this.
    pub final_div_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Fraction of training stimuli held back for model selection.
    pub val_fraction: f64,
    /// Write `epoch_<n>.ckpt` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Subjects kept out of every training batch.
    pub exclude_subjects: Vec<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            max_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            grad_clip: Some(1.0),
            seed: 0,
            val_fraction: 0.05,
            checkpoint_every: None,
            exclude_subjects: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("max_lr", self.max_lr),
            ("eps", self.eps),
            ("div_factor", self.div_factor),
            ("final_div_factor", self.final_div_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be nonnegative".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::Config("train.pct_start must lie in (0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config("train.val_fraction must lie in [0, 0.5)".into()));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One-cycle learning rate: cosine warm-up from `max/div` to `max` over the
/// first `pct_start` of steps, then cosine annealing to `max/(div·final_div)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn from_config(cfg: &TrainConfig, total_steps: u64) -> Self {
        Self {
            max_lr: cfg.max_lr,
            total_steps,
            pct_start: cfg.pct_start,
            div_factor: cfg.div_factor,
            final_div_factor: cfg.final_div_factor,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let cos =
            |start: f64, end: f64, pct: f64| end + (start - end) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0);
        let initial = self.max_lr / self.div_factor;
        let min = initial / self.final_div_factor;
        let last = self.total_steps.saturating_sub(1).max(1) as f64;
        let up_end = (self.pct_start * self.total_steps as f64 - 1.0).max(1.0);
        let s = step as f64;
        if s <= up_end {
            cos(initial, self.max_lr, s / up_end)
        } else {
            cos(self.max_lr, min, ((s - up_end) / (last - up_end).max(1.0)).min(1.0))
        }
    }
}

/// The trainable parameter set: the decoding network and, when the
/// adversarial term is active, the subject discriminator.
#[derive(Clone, Debug)]
pub struct TrainableModel {
    pub net: UniBrain<f32>,
    pub disc: Option<Discriminator<f32>>,
}

impl Params<f32> for TrainableModel {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, f32>) {
        self.net.visit(prefix, f);
        if let Some(d) = &self.disc {
            d.visit(&join(prefix, "discriminator"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, f32>) {
        self.net.visit_mut(prefix, f);
        if let Some(d) = &mut self.disc {
            d.visit_mut(&join(prefix, "discriminator"), f);
        }
    }
}

impl TrainableModel {
    /// Freshly initialized parameters for `cfg` and the given training subjects.
    pub fn new(cfg: &RunConfig, training_subjects: &[u32]) -> Result<Self> {
        let net = UniBrain::new(&cfg.model, training_subjects)?;
        let disc = (cfg.adversarial_enabled() && training_subjects.len() >= 2).then(|| {
            Discriminator::new(
                cfg.discriminator.variant,
                cfg.model.width,
                cfg.discriminator.hidden.unwrap_or(cfg.model.width),
                training_subjects.len(),
                cfg.discriminator.dropout,
                cfg.model.init_seed,
            )
        });
        Ok(Self { net, disc })
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, _, v| v.fill(0.0));
    }
}

/// Decoupled-weight-decay Adam over the flattened parameter vector. Decay
/// skips one-dimensional tensors (biases and normalization gains).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new<M: Params<f32>>(cfg: &TrainConfig, model: &M) -> Self {
        let mut decay = Vec::new();
        model.visit("", &mut |_, shape, v| decay.extend(std::iter::repeat_n(shape.len() > 1, v.len())));
        let n = decay.len();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
        }
    }

    /// Apply update number `t` (1-based) with learning rate `lr`.
    pub fn step<M: Params<f32>>(&mut self, model: &mut M, grad: &M, lr: f64, t: u64) {
        let mut g = Vec::with_capacity(self.m.len());
        grad.visit("", &mut |_, _, v| g.extend_from_slice(v));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let mut i = 0;
        model.visit_mut("", &mut |_, _, p| {
            for x in p.iter_mut() {
                let gi = g[i] as f64;
                let m = b1 * self.m[i] as f64 + (1.0 - b1) * gi;
                let v = b2 * self.v[i] as f64 + (1.0 - b2) * gi * gi;
                self.m[i] = m as f32;
                self.v[i] = v as f32;
                let mut w = *x as f64;
                if self.decay[i] {
                    w -= lr * self.weight_decay * w;
                }
                w -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                *x = w as f32;
                i += 1;
            }
        });
    }

    fn push_state<M: Params<f32>>(&self, archive: &mut Archive, model: &M) {
        let mut off = 0;
        let mut entries = Vec::new();
        model.visit("", &mut |name, shape, v| {
            entries.push((name.to_string(), shape.to_vec(), off, v.len()));
            off += v.len();
        });
        for (name, shape, o, n) in entries {
            archive.push(format!("optim.m.{name}"), shape.clone(), self.m[o..o + n].to_vec());
            archive.push(format!("optim.v.{name}"), shape, self.v[o..o + n].to_vec());
        }
    }

    fn load_state<M: Params<f32>>(&mut self, archive: &Archive, model: &M) -> Result<()> {
        let mut off = 0;
        let mut err = None;
        model.visit("", &mut |name, _, v| {
            for (kind, dst) in [("m", &mut self.m), ("v", &mut self.v)] {
                match archive.get(&format!("optim.{kind}.{name}")) {
                    Some(t) if t.data.len() == v.len() => dst[off..off + v.len()].copy_from_slice(&t.data),
                    _ if err.is_none() => {
                        err = Some(Error::Config(format!("checkpoint lacks optimizer state for `{name}`")))
                    }
                    _ => {}
                }
            }
            off += v.len();
        });
        err.map_or(Ok(()), Err)
    }
}

/// Global L2 norm of a parameter-shaped gradient.
pub fn grad_norm<M: Params<f32>>(grad: &M) -> f64 {
    let mut s = 0.0f64;
    grad.visit("", &mut |_, _, v| s += v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>());
    s.sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub total_steps: u64,
    /// `step / total_steps`
    pub progress: f64,
    /// Mean total loss of the epoch in progress.
    pub running_loss: f64,
    pub running_count: u64,
    pub best_val_top1: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub val_top1: Vec<f64>,
    pub last_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
}

/// Metadata stored alongside every training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub code_version: String,
    pub config: RunConfig,
    pub training_subjects: Vec<u32>,
    pub held_out_subjects: Vec<u32>,
    pub validation_stimuli: Vec<u32>,
    pub dataset_hash: String,
    pub param_count: usize,
    pub state: TrainState,
}

/// A model restored from a checkpoint, ready for evaluation.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub meta: CheckpointMeta,
    pub model: TrainableModel,
}

impl TrainedModel {
    pub fn from_archive(archive: &Archive, path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = archive.metadata(path)?;
        let mut model = TrainableModel::new(&meta.config, &meta.training_subjects)?;
        archive.load_params("", &mut model)?;
        Ok(Self { meta, model })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }

    /// An untrained model sharing the initialization of a run; the chance
    /// baseline for cross-subject evaluation.
    pub fn untrained(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let subjects = training_subjects(cfg, data);
        let model = TrainableModel::new(cfg, &subjects)?;
        let meta = CheckpointMeta {
            code_version: crate::CODE_VERSION.to_string(),
            config: cfg.clone(),
            held_out_subjects: cfg.train.exclude_subjects.clone(),
            training_subjects: subjects,
            validation_stimuli: Vec::new(),
            dataset_hash: data.manifest.hash(),
            param_count: model.num_params(),
            state: TrainState::default(),
        };
        Ok(Self { meta, model })
    }
}

/// Training subjects: every dataset subject not excluded, sorted.
pub fn training_subjects(cfg: &RunConfig, data: &Dataset) -> Vec<u32> {
    let mut s: Vec<u32> =
        data.manifest.subject_ids().into_iter().filter(|s| !cfg.train.exclude_subjects.contains(s)).collect();
    s.sort_unstable();
    s
}

/// Draw `batch_size` samples uniformly without replacement from the union
/// of the filtered subjects' training recordings.
pub fn assemble_batch<R: Rng>(
    data: &Dataset,
    subject_filter: Option<&[u32]>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<SampleRef>> {
    let pool = data.sample_refs(subject_filter, Split::Train);
    if pool.len() < batch_size {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds the {} available training samples",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, batch_size).copied().collect())
}

/// Group each sample's voxels and stack: `(B·G × K)` inputs plus the image
/// and text teacher blocks.
pub fn build_batch(
    data: &Dataset,
    plans: &mut PlanCache,
    refs: &[SampleRef],
) -> Result<(ModelInput<f32>, AlignTargets<f32>)> {
    let mut grouped = Vec::with_capacity(refs.len());
    let mut image = Vec::with_capacity(refs.len());
    let mut text = Vec::with_capacity(refs.len());
    let mut subjects = Vec::with_capacity(refs.len());
    for &r in refs {
        let s = data.sample(r);
        let plan = plans.get_or_build(s.subject_id, s.voxels.len())?;
        grouped.push(plan.apply(s.voxels)?);
        image.push(s.image_tokens);
        text.push(s.text_tokens);
        subjects.push(s.subject_id);
    }
    let stack = |parts: &[ArrayView2<f32>]| -> Result<Array2<f32>> {
        ndarray::concatenate(Axis(0), parts).map_err(|e| Error::Shape(e.to_string()))
    };
    let g: Vec<_> = grouped.iter().map(|a| a.view()).collect();
    Ok((ModelInput { grouped: stack(&g)?, subjects }, AlignTargets { image: stack(&image)?, text: stack(&text)? }))
}

/// Stimuli carved from the training split for model selection.
fn validation_stimuli(data: &Dataset, fraction: f64, seed: u64) -> Vec<u32> {
    let mut train = data.manifest.train_stimuli.clone();
    train.sort_unstable();
    let n = (fraction * train.len() as f64).round() as usize;
    train.shuffle(&mut seed::rng(seed, "validation", 0));
    let mut v = train[..n].to_vec();
    v.sort_unstable();
    v
}

/// Parameter-count report: analytic formula vs. instantiated tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub extractor_stacks: usize,
    pub network: usize,
    pub analytic: usize,
    pub discriminator: usize,
    /// Network size relative to the same config in the other extractor mode.
    pub ratio_to_other_mode: f64,
}

pub fn param_report(model: &TrainableModel, subjects: usize) -> ParamReport {
    let cfg = &model.net.cfg;
    let mut other = cfg.clone();
    other.extractor_mode = match cfg.extractor_mode {
        ExtractorMode::Unified => ExtractorMode::SubjectSpecific,
        ExtractorMode::SubjectSpecific => ExtractorMode::Unified,
    };
    let analytic = cfg.param_count(subjects);
    ParamReport {
        extractor_stacks: model.net.extractor_stacks(),
        network: model.net.num_params(),
        analytic,
        discriminator: model.disc.as_ref().map_or(0, |d| d.num_params()),
        ratio_to_other_mode: analytic as f64 / other.param_count(subjects) as f64,
    }
}

/// Owns the parameters, optimizer and state of one run.
pub struct Trainer<'d> {
    pub cfg: RunConfig,
    data: &'d Dataset,
    pub model: TrainableModel,
    grad: TrainableModel,
    pub optim: AdamW,
    pub state: TrainState,
    plans: PlanCache,
    subjects: Vec<u32>,
    labels: BTreeMap<u32, usize>,
    train_refs: Vec<SampleRef>,
    val_refs: Vec<SampleRef>,
    val_stimuli: Vec<u32>,
    adversarial: bool,
    schedule: OneCycle,
    /// Total loss of every step run by this trainer instance.
    pub trace: Vec<(u64, f64)>,
    out: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_against(&data.manifest)?;
        let subjects = training_subjects(cfg, data);
        if subjects.is_empty() {
            return Err(Error::Config("every subject is excluded from training".into()));
        }
        let mut adversarial = cfg.adversarial_enabled();
        if adversarial && subjects.len() < 2 {
            log::warn!("adversarial loss needs at least two training subjects; forcing lambda0 to 0");
            adversarial = false;
        }
        let model = TrainableModel::new(cfg, &subjects)?;
        let val_stimuli = validation_stimuli(data, cfg.train.val_fraction, cfg.train.seed);
        let is_val = |r: &SampleRef| val_stimuli.binary_search(&data.subjects[r.subject].stimulus_ids[r.pos]).is_ok();
        let (val_refs, train_refs): (Vec<_>, Vec<_>) =
            data.sample_refs(Some(&subjects), Split::Train).into_iter().partition(is_val);
        let steps_per_epoch = train_refs.len() / cfg.train.batch_size;
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {} training samples",
                cfg.train.batch_size,
                train_refs.len()
            )));
        }
        let total_steps = (steps_per_epoch * cfg.train.epochs) as u64;
        let labels = subjects.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let grad = crate::nn::zeros_like(&model);
        let optim = AdamW::new(&cfg.train, &model);
        let mut cfg = cfg.clone();
        if !adversarial {
            cfg.loss.lambda0 = 0.0;
        }
        Ok(Self {
            schedule: OneCycle::from_config(&cfg.train, total_steps),
            plans: eval::plans_for(data, cfg.model.groups, cfg.model.group_size)?,
            state: TrainState { total_steps, ..TrainState::default() },
            cfg,
            data,
            model,
            grad,
            optim,
            subjects,
            labels,
            train_refs,
            val_refs,
            val_stimuli,
            adversarial,
            trace: Vec::new(),
            out: None,
            metrics: None,
        })
    }

    /// Restore parameters, optimizer moments and schedule position.
    /// Architecture changes are rejected; loss-weight changes are allowed.
    pub fn resume(archive: &Archive, path: &Path, cfg: &RunConfig, data: &'d Dataset) -> Result<Self> {
        let meta: CheckpointMeta = archive.metadata(path)?;
        check_resumable(&meta.config, cfg)?;
        if meta.dataset_hash != data.manifest.hash() {
            log::warn!("resuming on a dataset that differs from the one the checkpoint was trained on");
        }
        let mut t = Self::new(cfg, data)?;
        if meta.training_subjects != t.subjects {
            return Err(Error::Config(format!(
                "checkpoint trained on subjects {:?}, current config trains on {:?}",
                meta.training_subjects, t.subjects
            )));
        }
        archive.load_params("", &mut t.model)?;
        t.optim.load_state(archive, &t.model)?;
        let total = t.state.total_steps;
        t.state = meta.state;
        if t.state.total_steps != total {
            log::warn!("total steps changed from {} to {total}; the schedule is recomputed", t.state.total_steps);
            t.state.total_steps = total;
            t.state.progress = t.state.step as f64 / total as f64;
        }
        Ok(t)
    }

    /// Direct checkpoints and the metrics log into `dir`; writes the
    /// effective config there.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.cfg.write(&dir.join("config.json"))?;
        let log_path = dir.join("metrics.jsonl");
        let f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        self.metrics = Some(BufWriter::new(f));
        for plan in self.plans_for_all()? {
            plan.write_json(dir)?;
        }
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    fn plans_for_all(&mut self) -> Result<Vec<crate::extractor::GroupingPlan>> {
        let mut out = Vec::new();
        for s in &self.data.subjects {
            out.push(self.plans.get_or_build(s.subject_id, s.voxel_count)?.clone());
        }
        Ok(out)
    }

    pub fn training_subjects(&self) -> &[u32] {
        &self.subjects
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_refs.len() / self.cfg.train.batch_size
    }

    pub fn adversarial(&self) -> bool {
        self.adversarial
    }

    pub fn param_report(&self) -> ParamReport {
        param_report(&self.model, self.subjects.len())
    }

    fn epoch_order(&self, epoch: usize) -> Vec<SampleRef> {
        let mut order = self.train_refs.clone();
        order.shuffle(&mut seed::rng(self.cfg.train.seed, "epoch", epoch as u64));
        order
    }

    fn log_json<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            let line = serde_json::to_string(record).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(self.out.as_deref().unwrap_or(Path::new("")), e))?;
        }
        Ok(())
    }

    /// One optimizer step on the given batch.
    pub fn step_on(&mut self, refs: &[SampleRef]) -> Result<StepRecord> {
        let (input, targets) = build_batch(self.data, &mut self.plans, refs)?;
        let step = self.state.step;
        let mode = Mode::Train { seed: seed::derive(self.cfg.train.seed, "step", step) };
        let (out, cache) = self.model.net.forward(&input, mode)?;
        let align = alignment::align_loss(&out.embeddings, &targets, &input.subjects, &self.cfg.loss)?;

        self.grad.zero();
        let mut loss = LossBreakdown::default();
        for (&k, &(mse, clip)) in &align.terms {
            loss.set_block(k, mse as f64, clip as f64);
        }
        let alpha = self.cfg.grl.alpha(self.state.progress);
        let mut rep_grads = BTreeMap::new();
        if let (true, Some(disc)) = (self.adversarial, &self.model.disc) {
            let labels: Vec<usize> = input.subjects.iter().map(|s| self.labels[s]).collect();
            let (adv, g) = alignment::adversarial_loss(
                &out.reps,
                &labels,
                disc,
                alpha as f32,
                self.cfg.loss.lambda0 as f32,
                mode,
                self.grad.disc.as_mut(),
            )?;
            loss.adv = adv as f64;
            rep_grads = g;
        }
        loss.total = alignment::total_loss(loss.adv, align.value as f64, &self.cfg.loss);
        if !loss.total.is_finite() || loss.components().iter().any(|(_, v)| !v.is_finite()) {
            let report: Vec<String> = loss.components().iter().map(|(k, v)| format!("{k}={v}")).collect();
            return Err(Error::Numeric { step, detail: report.join(" ") });
        }

        self.model.net.backward(&cache, &OutputGrads { embeddings: align.grads, reps: rep_grads }, &mut self.grad.net);
        let norm = grad_norm(&self.grad);
        if !norm.is_finite() {
            return Err(Error::Numeric { step, detail: format!("gradient norm {norm}") });
        }
        if let Some(clip) = self.cfg.train.grad_clip {
            if norm > clip {
                let s = (clip / norm) as f32;
                self.grad.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x *= s));
            }
        }
        let lr = self.schedule.lr(step);
        self.optim.step(&mut self.model, &self.grad, lr, step + 1);

        if alpha < self.state.last_alpha {
            return Err(Error::Numeric {
                step,
                detail: format!("GRL strength decreased from {} to {alpha}", self.state.last_alpha),
            });
        }
        self.state.last_alpha = alpha;
        self.state.step += 1;
        self.state.progress = self.state.step as f64 / self.state.total_steps as f64;
        self.state.running_loss += (loss.total - self.state.running_loss) / (self.state.running_count + 1) as f64;
        self.state.running_count += 1;
        self.trace.push((step, loss.total));
        let rec = StepRecord { step, epoch: self.state.epoch, lr, alpha, grad_norm: norm, loss };
        self.log_json(&rec)?;
        Ok(rec)
    }

    /// Run until `target` completed steps (bounded by the configured total).
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        let spe = self.steps_per_epoch() as u64;
        let bs = self.cfg.train.batch_size;
        let target = target.min(self.state.total_steps);
        let mut order_epoch = (self.state.step / spe) as usize;
        let mut order = self.epoch_order(order_epoch);
        while self.state.step < target {
            let epoch = (self.state.step / spe) as usize;
            if epoch != order_epoch {
                order_epoch = epoch;
                order = self.epoch_order(epoch);
            }
            self.state.epoch = epoch;
            let k = (self.state.step % spe) as usize;
            let refs = order[k * bs..(k + 1) * bs].to_vec();
            self.step_on(&refs)?;
            if self.state.step.is_multiple_of(spe) {
                self.finish_epoch()?;
            }
        }
        if let Some(w) = &mut self.metrics {
            w.flush().map_err(|e| Error::io(Path::new("metrics.jsonl"), e))?;
        }
        Ok(())
    }

    /// Train to completion and write the final checkpoint.
    pub fn run(&mut self) -> Result<()> {
        log::info!(
            "training on subjects {:?}: {} samples, {} steps/epoch, {} epochs, adversarial={}",
            self.subjects,
            self.train_refs.len(),
            self.steps_per_epoch(),
            self.cfg.train.epochs,
            self.adversarial
        );
        self.run_until(self.state.total_steps)?;
        if let Some(dir) = self.out.clone() {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let epoch = self.state.epoch;
        let mean_loss = self.state.running_loss;
        self.state.epoch_losses.push(mean_loss);
        self.state.running_loss = 0.0;
        self.state.running_count = 0;
        let (val_top1, val_top5) = match self.validate()? {
            Some(s) => (Some(s.top1), Some(s.top5)),
            None => (None, None),
        };
        if let Some(v) = val_top1 {
            self.state.val_top1.push(v);
        }
        log::info!("epoch {} mean loss {mean_loss:.5} val top-1 {:?}", epoch + 1, val_top1);
        let improved = val_top1.is_some_and(|v| self.state.best_val_top1.is_none_or(|b| v > b));
        if improved {
            self.state.best_val_top1 = val_top1;
        }
        self.state.epoch = epoch + 1;
        self.log_json(&EpochRecord { epoch: epoch + 1, step: self.state.step, mean_loss, val_top1, val_top5 })?;
        if let Some(dir) = self.out.clone() {
            if improved {
                self.save(&dir.join("best.ckpt"))?;
            }
            if self.cfg.train.checkpoint_every.is_some_and(|k| (epoch + 1).is_multiple_of(k)) {
                self.save(&dir.join(format!("epoch_{}.ckpt", epoch + 1)))?;
            }
        }
        Ok(())
    }

    /// Top-1 retrieval among validation stimuli, per subject then averaged.
    pub fn validate(&mut self) -> Result<Option<eval::RetrievalScores>> {
        if self.val_refs.is_empty() {
            return Ok(None);
        }
        let block = crate::embedder::resolve_block(self.cfg.model.arm, BlockKind::FineGeometric);
        let mut per = Vec::new();
        for &s in &self.subjects {
            let si = self.data.subject_index(s).expect("training subject exists");
            let refs: Vec<SampleRef> = self.val_refs.iter().copied().filter(|r| r.subject == si).collect();
            if refs.is_empty() {
                continue;
            }
            per.push(eval::score_refs(
                &self.model.net,
                self.data,
                &self.plans,
                &refs,
                block,
                self.cfg.eval.batch_size,
            )?);
        }
        Ok(Some(eval::RetrievalScores::mean(&per)))
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            code_version: crate::CODE_VERSION.to_string(),
            config: self.cfg.clone(),
            training_subjects: self.subjects.clone(),
            held_out_subjects: self.cfg.train.exclude_subjects.clone(),
            validation_stimuli: self.val_stimuli.clone(),
            dataset_hash: self.data.manifest.hash(),
            param_count: self.model.num_params(),
            state: self.state.clone(),
        }
    }

    pub fn archive(&self) -> Archive {
        let mut a = Archive::default();
        a.set_metadata(&self.meta());
        a.push_params("", &self.model);
        self.optim.push_state(&mut a, &self.model);
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.archive().save(path)
    }

    pub fn into_trained(self) -> TrainedModel {
        TrainedModel { meta: self.meta(), model: self.model }
    }
}

/// Reject config changes that alter parameter shapes.
fn check_resumable(old: &RunConfig, new: &RunConfig) -> Result<()> {
    let (a, b): (&ModelConfig, &ModelConfig) = (&old.model, &new.model);
    let fields = [
        ("groups (G)", a.groups, b.groups),
        ("group_size (K)", a.group_size, b.group_size),
        ("local_dim", a.local_dim, b.local_dim),
        ("width", a.width, b.width),
        ("tokens", a.tokens, b.tokens),
        ("image_tokens", a.image_tokens, b.image_tokens),
        ("text_tokens", a.text_tokens, b.text_tokens),
        ("depth", a.depth, b.depth),
        ("heads", a.heads, b.heads),
        ("ffn_mult", a.ffn_mult, b.ffn_mult),
    ];
    for (name, x, y) in fields {
        if x != y {
            return Err(Error::Config(format!(
                "cannot resume: model.{name} is {x} in the checkpoint but {y} in the config; parameter shapes would differ"
            )));
        }
    }
    if a.arm != b.arm || a.extractor_mode != b.extractor_mode || a.positional != b.positional {
        return Err(Error::Config("cannot resume: model arm, extractor mode or positional embedding changed".into()));
    }
    if old.discriminator != new.discriminator {
        return Err(Error::Config("cannot resume: discriminator config changed".into()));
    }
    if old.train.seed != new.train.seed || old.train.batch_size != new.train.batch_size {
        log::warn!("resuming with a different seed or batch size; the run will not match an uninterrupted one");
    }
    if old.loss != new.loss {
        log::warn!("loss weights changed on resume: {:?} -> {:?}", old.loss, new.loss);
    }
    Ok(())
}

/// Train a fresh model on `data` with `cfg`, without writing files.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainedModel> {
    let mut t = Trainer::new(cfg, data)?;
    t.run()?;
    Ok(t.into_trained())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle { max_lr: 1e-3, total_steps: 1000, pct_start: 0.3, div_factor: 25.0, final_div_factor: 1e4 };
        assert!((s.lr(0) - 4e-5).abs() < 1e-12);
        let peak = (0..1000).map(|i| s.lr(i)).fold(0.0, f64::max);
        assert!((peak - 1e-3).abs() < 1e-9);
        assert!((s.lr(999) - 4e-9).abs() < 1e-12);
        for i in 300..999 {
            assert!(s.lr(i + 1) <= s.lr(i) + 1e-15);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        #[derive(Clone)]
        struct P(Vec<f32>, Vec<f32>);
        impl Params<f32> for P {
            fn visit(&self, _: &str, f: &mut Visit<'_, f32>) {
                f("w", &[1, 2], &self.0);
                f("b", &[2], &self.1);
            }
            fn visit_mut(&mut self, _: &str, f: &mut VisitMut<'_, f32>) {
                f("w", &[1, 2], &mut self.0);
                f("b", &[2], &mut self.1);
            }
        }
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = P(vec![1.0, -1.0], vec![1.0, 1.0]);
        let g = P(vec![3.0, -0.5], vec![2.0, 0.0]);
        let mut opt = AdamW::new(&cfg, &p);
        opt.step(&mut p, &g, 0.01, 1);
        // decayed weights shrink by lr·wd·w before the unit-magnitude Adam step
        assert!((p.0[0] - (1.0 - 0.001 - 0.01)).abs() < 1e-6);
        assert!((p.0[1] - (-1.0 + 0.001 + 0.01)).abs() < 1e-6);
        assert!((p.1[0] - 0.99).abs() < 1e-6);
        assert_eq!(p.1[1], 1.0);
    }
}
