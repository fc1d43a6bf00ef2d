//! Adam, the training state and the two-stage progressive curriculum.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::WindowSpec;
use crate::degrade::{self, ClipKind, DegradationRanges, DegradationTrace, FlowField, Stage};
use crate::error::{Error, Result};
use crate::grid::VideoClip;
use crate::losses::{self, LossContext, LossReport, LossTargets, DEFAULT_LAMBDA_WARP};
use crate::model::{one_step_reconstruct, DiffusionTransformer, ModelConfig};
use crate::rng;
use crate::routing::{profile_model, AssignmentMap, KlDirection, ProfileSettings, DEFAULT_EPS};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("Adam eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(shapes: &[Vec<f64>]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update (AdamW-style decay when configured).
pub fn adam_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::dim("parameter, gradient and moment counts differ"));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.len() != g.len() || p.len() != m.len() || p.len() != v.len() {
            return Err(Error::dim("parameter and gradient shapes differ"));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let update = (m[j] / c1) / (libm::sqrt(v[j] / c2) + cfg.eps);
            p[j] -= cfg.lr * (update + cfg.weight_decay * p[j]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub iterations: u64,
}

/// How training samples are synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: ClipKind,
    /// Per-axis bound on the per-frame translation.
    pub max_motion: f64,
    pub ranges: DegradationRanges,
    /// Stage-2 perturbation probability.
    pub p: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: ClipKind::Texture,
            max_motion: 1.0,
            ranges: DegradationRanges::default(),
            p: 0.3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=degrade::MAX_MOTION).contains(&self.max_motion) {
            return Err(Error::config(format!("max_motion must lie in [0, {}]", degrade::MAX_MOTION)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("perturbation probability must lie in [0, 1]"));
        }
        self.ranges.validate().map_err(|e| Error::config(format!("{e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Vec<StagePlan>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last iteration as a fraction of `adam.lr`, reached by linear decay.
    pub final_lr_scale: f64,
    pub seed: u64,
    pub lambda_warp: f64,
    pub rho: f64,
    pub window: WindowSpec,
    pub calibration_count: usize,
    pub kl_eps: f64,
    pub direction: KlDirection,
    /// Profile and route again on the current weights at each stage boundary.
    pub reprofile: bool,
    pub data: DataConfig,
    pub history_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: vec![
                StagePlan {
                    stage: Stage::S1,
                    iterations: 150,
                },
                StagePlan {
                    stage: Stage::S2,
                    iterations: 150,
                },
            ],
            batch_size: 2,
            adam: AdamConfig::default(),
            final_lr_scale: 1.0,
            seed: 0,
            lambda_warp: DEFAULT_LAMBDA_WARP,
            rho: 0.4,
            window: WindowSpec::default(),
            calibration_count: 8,
            kl_eps: DEFAULT_EPS,
            direction: KlDirection::GlobalToLocal,
            reprofile: false,
            data: DataConfig::default(),
            history_len: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.iter().any(|s| s.iterations == 0) {
            return Err(Error::config("every stage needs a positive iteration count"));
        }
        if self.batch_size == 0 || self.history_len == 0 || self.calibration_count == 0 {
            return Err(Error::config("batch size, history length and calibration count must be positive"));
        }
        if !(self.lambda_warp >= 0.0 && self.lambda_warp.is_finite()) {
            return Err(Error::config("lambda_warp must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_scale) {
            return Err(Error::config("final_lr_scale must lie in [0, 1]"));
        }
        self.adam.validate()?;
        self.data.validate()
    }

    pub fn total_iterations(&self) -> u64 {
        self.schedule.iter().map(|s| s.iterations).sum()
    }

    pub fn lr_at(&self, it: u64) -> f64 {
        let last = self.total_iterations().saturating_sub(1).max(1);
        let frac = it.min(last) as f64 / last as f64;
        self.adam.lr * (1.0 - (1.0 - self.final_lr_scale) * frac)
    }

    /// Stage that iteration `it` (0-based) belongs to.
    pub fn stage_at(&self, it: u64) -> Option<Stage> {
        let mut end = 0;
        for s in &self.schedule {
            end += s.iterations;
            if it < end {
                return Some(s.stage);
            }
        }
        None
    }

    /// First iteration after the stage containing `it`.
    pub fn stage_end(&self, it: u64) -> Option<u64> {
        let mut end = 0;
        for s in &self.schedule {
            end += s.iterations;
            if it < end {
                return Some(end);
            }
        }
        None
    }

    pub fn profile_settings(&self) -> ProfileSettings {
        ProfileSettings {
            window: self.window,
            rho: self.rho,
            eps: self.kl_eps,
            direction: self.direction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub report: LossReport,
}

/// Bounded history of recent steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    capacity: usize,
    records: VecDeque<StepRecord>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            records: VecDeque::new(),
        }
    }

    pub fn push(&mut self, r: StepRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(r);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean total loss of the last `window` records.
    pub fn smoothed(&self, window: usize) -> Option<f64> {
        let n = window.min(self.records.len());
        if n == 0 {
            return None;
        }
        Some(self.records.iter().rev().take(n).map(|r| r.report.total).sum::<f64>() / n as f64)
    }
}

/// Mean total loss of `records[start..start + window]`.
pub fn window_mean(records: &[StepRecord], start: usize, window: usize) -> Option<f64> {
    let slice = records.get(start..(start + window).min(records.len()))?;
    if slice.is_empty() {
        return None;
    }
    Some(slice.iter().map(|r| r.report.total).sum::<f64>() / slice.len() as f64)
}

/// Everything needed to continue training bitwise: weights, moments, the
/// iteration counter (per-sample data seeds derive from it) and history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DiffusionTransformer,
    pub adam: AdamState,
    pub iteration: u64,
    pub seed: u64,
    pub history: LossHistory,
}

/// One synthetic training or evaluation triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub hq: VideoClip,
    pub lq: VideoClip,
    pub flow: FlowField,
    pub trace: DegradationTrace,
}

/// Generates a clip with random motion and degrades it with random
/// initial parameters at the requested stage.
pub fn make_sample(data: &DataConfig, model: &ModelConfig, stage: Stage, seed: u64) -> Result<Sample> {
    let mut r = rng::stream(seed, "sample", 0);
    let m = data.max_motion;
    let motion = if m > 0.0 {
        (r.random_range(-m..=m), r.random_range(-m..=m))
    } else {
        (0.0, 0.0)
    };
    let (hq, flow) = degrade::gen_clip(data.kind, model.clip_dims(), motion, rng::derive_seed(seed, "sample-clip", 0))?;
    let params = data.ranges.sample(&mut r);
    let dseed = rng::derive_seed(seed, "sample-degrade", 0);
    let (lq, trace) = match stage {
        Stage::S1 => degrade::degrade_stage1(&hq, &params, dseed)?,
        Stage::S2 => degrade::degrade_stage2(&hq, &params, data.p, dseed)?,
    };
    Ok(Sample { hq, lq, flow, trace })
}

/// Held-out samples (disjoint seed purpose from training batches).
pub fn eval_set(data: &DataConfig, model: &ModelConfig, stage: Stage, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| make_sample(data, model, stage, rng::derive_seed(seed, "eval-sample", i as u64)))
        .collect()
}

/// Stage-1 degraded clips used to profile heads before training.
pub fn calibration_clips(data: &DataConfig, model: &ModelConfig, count: usize, seed: u64) -> Result<Vec<VideoClip>> {
    (0..count)
        .map(|i| make_sample(data, model, Stage::S1, rng::derive_seed(seed, "calibration", i as u64)).map(|s| s.lq))
        .collect()
}

pub struct Trainer {
    config: TrainConfig,
    assignment: AssignmentMap,
    ctx: LossContext,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: DiffusionTransformer, assignment: AssignmentMap) -> Result<Self> {
        let state = TrainState {
            adam: AdamState::zeros(model.params()),
            iteration: 0,
            seed: config.seed,
            history: LossHistory::new(config.history_len),
            model,
        };
        Self::resume(config, assignment, state)
    }

    pub fn resume(config: TrainConfig, assignment: AssignmentMap, state: TrainState) -> Result<Self> {
        config.validate()?;
        let mc = *state.model.config();
        assignment.check_covers(mc.layers, mc.heads)?;
        if state.seed != config.seed {
            return Err(Error::config("training state was produced with a different seed"));
        }
        let ctx = LossContext::new(mc.channels, mc.grid, mc.factor, config.lambda_warp);
        Ok(Self {
            config,
            assignment,
            ctx,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn assignment(&self) -> &AssignmentMap {
        &self.assignment
    }
    pub fn state(&self) -> &TrainState {
        &self.state
    }
    pub fn into_state(self) -> TrainState {
        self.state
    }
    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.total_iterations()
    }

    fn sample_seed(&self, it: u64, i: usize) -> u64 {
        rng::derive_seed(self.config.seed, "train-sample", it * self.config.batch_size as u64 + i as u64)
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradients(&self, sample: &Sample) -> Result<(LossReport, Vec<Vec<f64>>)> {
        let model = &self.state.model;
        let mc = model.config();
        let z_low = mc.encode(&sample.lq)?;
        let z_high = mc.encode(&sample.hq)?;
        let zl: Vec<f64> = z_low.data().iter().map(|&v| f64::from(v)).collect();
        let mut tape = Tape::new();
        let (recon, _) = model.reconstruct_on_tape(&mut tape, &zl, &self.assignment)?;
        let targets = LossTargets::new(&sample.hq, &z_high, sample.flow.clone());
        let vars = self.ctx.record(&mut tape, recon, &targets)?;
        let report = self.ctx.report(&tape, &vars)?;
        let grads = tape.backward(vars.total)?.params(model.params().len());
        Ok((report, grads))
    }

    /// One optimizer step on a freshly synthesized batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.state.iteration;
        let stage = self
            .config
            .stage_at(it)
            .ok_or_else(|| Error::config("training schedule is exhausted"))?;
        let n = self.config.batch_size;
        let mut sum = vec![0.0; 4];
        let mut grads: Vec<Vec<f64>> = self.state.model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for i in 0..n {
            let sample = make_sample(&self.config.data, self.state.model.config(), stage, self.sample_seed(it, i))?;
            let (rep, g) = self.sample_gradients(&sample)?;
            for (k, v) in [rep.latent, rep.perceptual, rep.warp, rep.total].iter().enumerate() {
                sum[k] += v;
            }
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += b;
                }
            }
        }
        let scale = 1.0 / n as f64;
        let report = LossReport {
            latent: sum[0] * scale,
            perceptual: sum[1] * scale,
            warp: sum[2] * scale,
            total: sum[3] * scale,
            lambda_warp: self.config.lambda_warp,
        };
        if !report.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite loss or gradient at iteration {it} ({stage:?}): {report:?}"
            )));
        }
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        let adam = AdamConfig {
            lr: self.config.lr_at(it),
            ..self.config.adam
        };
        adam_step(self.state.model.params_mut(), &grads, &mut self.state.adam, &adam)?;
        self.state.iteration += 1;
        let record = StepRecord {
            iteration: it,
            stage,
            report,
        };
        self.state.history.push(record);
        Ok(record)
    }

    /// Runs up to `max_steps` steps (or to the end of the schedule), calling
    /// `on_step` after each.
    /// Profiles the current weights and routes all later steps by the result.
    pub fn reprofile(&mut self, clips: &[VideoClip]) -> Result<&AssignmentMap> {
        self.assignment = profile_model(&self.state.model, clips, &self.config.profile_settings())?;
        Ok(&self.assignment)
    }

    /// Runs up to `max_steps` iterations without crossing a stage boundary.
    pub fn run_stage(
        &mut self,
        max_steps: u64,
        on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let it = self.state.iteration;
        let left = self.config.stage_end(it).map_or(0, |end| end - it);
        self.run(max_steps.min(left), on_step)
    }

    /// True when the next step opens a new stage and routing should be redone.
    pub fn at_reprofile_point(&self) -> bool {
        let it = self.state.iteration;
        self.config.reprofile && it > 0 && !self.is_done() && self.config.stage_end(it - 1) == Some(it)
    }

    pub fn run(
        &mut self,
        max_steps: u64,
        mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        for _ in 0..max_steps {
            if self.is_done() {
                break;
            }
            let r = self.step()?;
            on_step(&self.state, &r)?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Result of a full curriculum run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub assignment: AssignmentMap,
    pub records: Vec<StepRecord>,
}

/// Initializes the model from the config seed, profiles and routes its
/// heads once on calibration clips, then trains through the schedule with
/// the routing frozen (or re-routed at stage boundaries with `reprofile`).
pub fn train_progressive(
    config: &TrainConfig,
    model_config: ModelConfig,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = DiffusionTransformer::new(model_config, rng::derive_seed(config.seed, "model-init", 0))?;
    let clips = calibration_clips(&config.data, &model_config, config.calibration_count, config.seed)?;
    let assignment = profile_model(&model, &clips, &config.profile_settings())?;
    let mut trainer = Trainer::new(config.clone(), model, assignment)?;
    let mut records = Vec::new();
    while !trainer.is_done() {
        if trainer.at_reprofile_point() {
            trainer.reprofile(&clips)?;
        }
        records.extend(trainer.run_stage(u64::MAX, &mut on_step)?);
    }
    let assignment = trainer.assignment.clone();
    Ok(TrainOutcome {
        state: trainer.into_state(),
        assignment,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub clips: usize,
    /// Mean PSNR of the restored clips.
    pub psnr: f64,
    /// Mean PSNR of the degraded inputs, i.e. the identity restorer.
    pub baseline_psnr: f64,
    pub warp_error: f64,
    pub baseline_warp_error: f64,
}

pub fn restore(model: &DiffusionTransformer, assignment: &AssignmentMap, lq: &VideoClip) -> Result<VideoClip> {
    let mc = model.config();
    let z = mc.encode(lq)?;
    mc.decode(&one_step_reconstruct(&z, model, assignment)?)
}

pub fn evaluate(model: &DiffusionTransformer, assignment: &AssignmentMap, samples: &[Sample]) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let mut acc = [0.0; 4];
    for s in samples {
        let pred = restore(model, assignment, &s.lq)?;
        acc[0] += losses::psnr(&pred, &s.hq)?;
        acc[1] += losses::psnr(&s.lq, &s.hq)?;
        acc[2] += losses::warp_error_metric(&pred, &s.flow)?;
        acc[3] += losses::warp_error_metric(&s.lq, &s.flow)?;
    }
    let n = samples.len() as f64;
    Ok(EvalSummary {
        clips: samples.len(),
        psnr: acc[0] / n,
        baseline_psnr: acc[1] / n,
        warp_error: acc[2] / n,
        baseline_warp_error: acc[3] / n,
    })
}
