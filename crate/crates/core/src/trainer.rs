//! The three-stage training strategy: schedule, optimizer, condition dropout
//! and stage orchestration.
//!
//! Stage 1 trains the backbone on speech-prompted pairs, stage 2 aligns only
//! the caption projector on text-prompted pairs, stage 3 fine-tunes everything
//! (except the frozen encoders) on both. `Base` trains end to end on both
//! from scratch for the combined budget.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{debug, info};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{FlowExample, Model, Prompt, TrainSet};
use crate::data::{mix_seed, Corpus};
use crate::error::{invalid, CastError, Result};
use crate::flow::FlowStep;
use crate::mat::MelGrid;
use crate::params::{Grads, ParamStore};
use crate::real::Real;
use crate::timbre::TimbreSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "base")]
    Base,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::One => "1",
            StageId::Two => "2",
            StageId::Three => "3",
            StageId::Base => "base",
        }
    }

    fn code(self) -> u64 {
        match self {
            StageId::One => 1,
            StageId::Two => 2,
            StageId::Three => 3,
            StageId::Base => 4,
        }
    }

    pub fn mix(self) -> DatasetMix {
        match self {
            StageId::One => DatasetMix::SpeechOnly,
            StageId::Two => DatasetMix::TextOnly,
            StageId::Three | StageId::Base => DatasetMix::Combined,
        }
    }

    pub fn train_set(self) -> TrainSet {
        match self {
            StageId::One => TrainSet::Backbone,
            StageId::Two => TrainSet::Projector,
            StageId::Three | StageId::Base => TrainSet::All,
        }
    }

    /// Stages that must already have run on a model before this one.
    fn prerequisite(self) -> Option<StageId> {
        match self {
            StageId::Two => Some(StageId::One),
            StageId::Three => Some(StageId::Two),
            StageId::One | StageId::Base => None,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = CastError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" => Ok(StageId::One),
            "2" => Ok(StageId::Two),
            "3" => Ok(StageId::Three),
            "base" => Ok(StageId::Base),
            _ => invalid(format!("unknown stage {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMix {
    SpeechOnly,
    TextOnly,
    Combined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageId,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub mix: DatasetMix,
    pub train_set: TrainSet,
}

impl StageConfig {
    pub fn new(stage: StageId, steps: usize, peak_lr: f64, warmup_frac: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("a stage needs at least one step");
        }
        if !(peak_lr.is_finite() && peak_lr > 0.0) {
            return invalid(format!("peak learning rate must be positive, got {peak_lr}"));
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return invalid(format!("warmup fraction must be in [0, 1), got {warmup_frac}"));
        }
        Ok(Self { stage, steps, peak_lr, warmup_frac, mix: stage.mix(), train_set: stage.train_set() })
    }
}

/// Linear warmup to `peak_lr` over `warmup_frac · steps`, then linear decay to
/// zero at `steps`.
pub fn lr_at(step: usize, stage: &StageConfig) -> Result<f64> {
    if step > stage.steps {
        return invalid(format!("step {step} beyond stage length {}", stage.steps));
    }
    let (s, n) = (step as f64, stage.steps as f64);
    let warm = stage.warmup_frac * n;
    Ok(if s < warm {
        stage.peak_lr * s / warm
    } else {
        stage.peak_lr * (n - s) / (n - warm)
    })
}

/// Optimizer hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments for the trainable tensors only.
#[derive(Clone, Debug)]
pub struct OptState<R> {
    moments: Vec<Option<(Vec<R>, Vec<R>)>>,
    pub step: u64,
    pub hp: AdamConfig,
}

impl<R: Real> OptState<R> {
    pub fn new(store: &ParamStore<R>, set: TrainSet, hp: AdamConfig) -> Self {
        let moments = store
            .entries()
            .iter()
            .map(|e| set.contains(e).then(|| (vec![R::zero(); e.numel()], vec![R::zero(); e.numel()])))
            .collect();
        Self { moments, step: 0, hp }
    }

    /// Number of tensors with allocated state.
    pub fn n_tracked(&self) -> usize {
        self.moments.iter().flatten().count()
    }

    pub fn has_state(&self, index: usize) -> bool {
        self.moments.get(index).is_some_and(Option::is_some)
    }
}

/// One decoupled-weight-decay adaptive-moment step over every tensor that has
/// a gradient.
pub fn apply_update<R: Real>(params: &mut ParamStore<R>, grads: &Grads<R>, opt: &mut OptState<R>, lr: f64) -> Result<()> {
    opt.step += 1;
    let hp = opt.hp;
    let t = opt.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (R::c(hp.beta1), R::c(hp.beta2));
    let (one_b1, one_b2) = (R::c(1.0 - hp.beta1), R::c(1.0 - hp.beta2));
    let decay = R::c(1.0 - lr * hp.weight_decay);
    let step_size = R::c(lr / bc1);
    let inv_bc2_sqrt = R::c(1.0 / bc2.sqrt());
    let eps = R::c(hp.eps);
    for (id, g) in grads.iter() {
        let idx = id.0;
        let entry = params.entry(id);
        if entry.frozen {
            return Err(CastError::Internal(format!("gradient supplied for frozen tensor {}", entry.name)));
        }
        let Some((m, v)) = opt.moments.get_mut(idx).and_then(Option::as_mut) else {
            return Err(CastError::Internal(format!("no optimizer state for {}", entry.name)));
        };
        if g.len() != entry.numel() || m.len() != g.len() {
            return Err(CastError::Internal(format!(
                "gradient of {} has {} values for {} parameters",
                entry.name,
                g.len(),
                entry.numel()
            )));
        }
        let p = params.get_mut(id);
        for i in 0..p.len() {
            p[i] *= decay;
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
            p[i] -= step_size * m[i] / denom;
        }
    }
    Ok(())
}

/// Per-sample joint condition-dropout flags.
pub fn drop_conditions(n: usize, p_drop: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&p_drop) {
        return invalid(format!("drop probability must be in [0, 1), got {p_drop}"));
    }
    Ok((0..n).map(|_| rng.gen::<f64>() < p_drop).collect())
}

/// How stages are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Stages 1 → 2 → 3.
    Staged,
    /// One end-to-end stage on combined data for the summed budget.
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage3_lr: f64,
    /// Multiplies every step count.
    pub scale_factor: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub p_drop: f64,
    pub log_interval: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Staged,
            stage1_steps: 2000,
            stage2_steps: 1000,
            stage3_steps: 500,
            stage1_lr: 1.5e-3,
            stage2_lr: 3e-4,
            stage3_lr: 5e-4,
            scale_factor: 1.0,
            warmup_frac: 0.05,
            batch_size: 16,
            p_drop: 0.1,
            log_interval: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            errs.push(format!("scale_factor must be > 0, got {}", self.scale_factor));
        }
        for (name, v) in [("stage1_steps", self.stage1_steps), ("stage2_steps", self.stage2_steps), ("stage3_steps", self.stage3_steps)] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr), ("stage3_lr", self.stage3_lr)] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            errs.push(format!("warmup_frac must be in [0, 1), got {}", self.warmup_frac));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            errs.push(format!("p_drop must be in [0, 1), got {}", self.p_drop));
        }
        if self.log_interval == 0 {
            errs.push("log_interval must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CastError::Validation(errs))
        }
    }

    fn scaled(&self, steps: usize) -> usize {
        ((steps as f64 * self.scale_factor).round() as usize).max(1)
    }

    pub fn stage(&self, stage: StageId) -> Result<StageConfig> {
        let (steps, lr) = match stage {
            StageId::One => (self.scaled(self.stage1_steps), self.stage1_lr),
            StageId::Two => (self.scaled(self.stage2_steps), self.stage2_lr),
            StageId::Three => (self.scaled(self.stage3_steps), self.stage3_lr),
            StageId::Base => (
                self.scaled(self.stage1_steps) + self.scaled(self.stage2_steps) + self.scaled(self.stage3_steps),
                self.stage1_lr,
            ),
        };
        StageConfig::new(stage, steps, lr, self.warmup_frac)
    }

    /// The stage sequence for the configured mode.
    pub fn stages(&self) -> Result<Vec<StageConfig>> {
        match self.mode {
            TrainMode::Staged => [StageId::One, StageId::Two, StageId::Three].iter().map(|&s| self.stage(s)).collect(),
            TrainMode::Base => Ok(vec![self.stage(StageId::Base)?]),
        }
    }
}

/// A model plus the stages it has been through.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub history: Vec<StageId>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self { model, history: Vec::new() }
    }
}

/// One logged record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: StageId,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

impl StageReport {
    /// Means of the first and last `window` step losses.
    pub fn smoothed(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

enum Item<'a> {
    Speech { timbre: &'a TimbreSeq, target: &'a MelGrid, chars: &'a [u8] },
    Text { caption: &'a crate::caption::Caption, target: &'a MelGrid, chars: &'a [u8] },
}

/// Runs one stage of mini-batch training, appending metric records to `log`.
pub fn run_stage(
    state: &mut TrainState,
    stage: &StageConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<StageReport> {
    if let Some(pre) = stage.stage.prerequisite() {
        if state.history.last() != Some(&pre) {
            return invalid(format!(
                "stage {} needs a model that just finished stage {pre}, history is {:?}",
                stage.stage, state.history
            ));
        }
    }
    let model = &mut state.model;
    let chunk = model.config().chunk_size;
    // Frozen encoder outputs are recomputed at the start of every stage.
    let speech: Vec<(TimbreSeq, &crate::data::SpeechPair)> = if stage.mix == DatasetMix::TextOnly {
        Vec::new()
    } else {
        corpus
            .speech
            .iter()
            .filter(|p| p.prompt_mel.rows() >= chunk)
            .map(|p| Ok((model.encode_speech(&p.prompt_mel)?, p)))
            .collect::<Result<_>>()?
    };
    let text = if stage.mix == DatasetMix::SpeechOnly { &[][..] } else { &corpus.text[..] };
    let empty = match stage.mix {
        DatasetMix::SpeechOnly => speech.is_empty(),
        DatasetMix::TextOnly => text.is_empty(),
        DatasetMix::Combined => speech.is_empty() || text.is_empty(),
    };
    if empty {
        return invalid(format!("no training pairs for stage {} ({:?})", stage.stage, stage.mix));
    }

    let set = stage.train_set;
    let mut opt = OptState::new(&model.params, set, cfg.adam);
    let mut grads = Grads::for_store(&model.params, |_, e| set.contains(e));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stage.stage.code(), 0x7a1));
    let mut report = StageReport::default();
    info!("stage {}: {} steps, {} tensors trainable", stage.stage, stage.steps, opt.n_tracked());

    for step in 0..stage.steps {
        grads.zero();
        let drops = drop_conditions(cfg.batch_size, cfg.p_drop, &mut rng)?;
        let mut batch_loss = 0.0;
        for &cfg_drop in &drops {
            let use_speech = match stage.mix {
                DatasetMix::SpeechOnly => true,
                DatasetMix::TextOnly => false,
                DatasetMix::Combined => rng.gen::<bool>(),
            };
            let item = if use_speech {
                let (timbre, pair) = &speech[rng.gen_range(0..speech.len())];
                Item::Speech { timbre, target: &pair.target_mel, chars: &pair.target_chars }
            } else {
                let pair = &text[rng.gen_range(0..text.len())];
                Item::Text { caption: &pair.caption, target: &pair.target_mel, chars: &pair.target_chars }
            };
            let (target, chars, prompt) = match &item {
                Item::Speech { timbre, target, chars } => (*target, *chars, Prompt::Encoded(*timbre)),
                Item::Text { caption, target, chars } => (*target, *chars, Prompt::Caption(caption)),
            };
            let tau = FlowStep::new(rng.gen::<f64>())?;
            let noise: Vec<f32> = (0..target.rows() * target.cols()).map(|_| rng.sample(StandardNormal)).collect();
            let x1 = MelGrid::from_vec(target.rows(), target.cols(), noise)?;
            let ex = FlowExample { x0: target, x1: &x1, tau, chars, prompt, cfg_drop };
            batch_loss += model.loss_and_grad(&ex, &mut grads)? as f64;
        }
        grads.scale(1.0 / cfg.batch_size as f32);
        let lr = lr_at(step + 1, stage)?;
        apply_update(&mut model.params, &grads, &mut opt, lr)?;
        let loss = batch_loss / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(CastError::Internal(format!("loss diverged at stage {} step {step}", stage.stage)));
        }
        report.losses.push(loss);
        if (step + 1) % cfg.log_interval == 0 || step + 1 == stage.steps {
            let rec = LogRecord { step: step + 1, stage: stage.stage, loss, lr };
            let line = serde_json::to_string(&rec).map_err(|e| CastError::Internal(e.to_string()))?;
            writeln!(log, "{line}")?;
            debug!("stage {} step {} loss {loss:.5} lr {lr:.3e}", stage.stage, step + 1);
        }
    }
    state.history.push(stage.stage);
    Ok(report)
}

/// Runs every stage of `cfg.mode` in order, calling `on_stage` after each.
pub fn run_pipeline(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
    mut on_stage: impl FnMut(&TrainState, &StageConfig, &StageReport) -> Result<()>,
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    for stage in cfg.stages()? {
        let report = run_stage(state, &stage, corpus, cfg, seed, log)?;
        on_stage(state, &stage, &report)?;
        reports.push(report);
    }
    Ok(reports)
}
