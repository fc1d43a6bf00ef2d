//! Multi-step workflows shared by the command line and the tests:
//! per-clip evaluation, the stage ablation and the rho sweep.

use headroute_core::cost::model_macs;
use headroute_core::degrade::Stage;
use headroute_core::losses::{latent_loss, perceptual_loss, psnr, temporal_loss, total_loss, warp_error_metric};
use headroute_core::model::ModelConfig;
use headroute_core::train::{
    eval_set, evaluate, restore, train_progressive, window_mean, EvalSummary, Sample, StagePlan, TrainConfig,
    TrainOutcome,
};
use headroute_core::{AssignmentMap, DiffusionTransformer};
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::Result;
use crate::json::ClipMetrics;

/// Loss window used for the smoothed start and end values.
pub const SMOOTHING: usize = 20;

pub fn clip_metrics(
    model: &DiffusionTransformer,
    assignment: &AssignmentMap,
    samples: &[Sample],
    lambda_warp: f64,
) -> Result<Vec<ClipMetrics>> {
    let mc = model.config();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = restore(model, assignment, &s.lq)?;
            let latent = latent_loss(&mc.encode(&pred)?, &mc.encode(&s.hq)?)?;
            let report = total_loss(latent, perceptual_loss(&pred, &s.hq)?, temporal_loss(&pred, &s.flow)?, lambda_warp)?;
            Ok(ClipMetrics {
                clip_id: format!("eval-{i:04}"),
                psnr: psnr(&pred, &s.hq)?,
                warp_error: warp_error_metric(&pred, &s.flow)?,
                latent: report.latent,
                perceptual: report.perceptual,
                warp: report.warp,
                total: report.total,
            })
        })
        .collect()
}

/// Smoothed total loss at the start and end of a run.
pub fn loss_endpoints(outcome: &TrainOutcome) -> Option<(f64, f64)> {
    let r = &outcome.records;
    let first = window_mean(r, 0, SMOOTHING)?;
    let last = window_mean(r, r.len().saturating_sub(SMOOTHING), SMOOTHING)?;
    Some((first, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub iterations: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub psnr: f64,
    pub baseline_psnr: f64,
    pub warp_error: f64,
    pub baseline_warp_error: f64,
}

pub struct TrainedArm {
    pub row: ArmResult,
    pub outcome: TrainOutcome,
    pub summary: EvalSummary,
}

pub fn train_and_eval(
    arm: &str,
    train: &TrainConfig,
    model: ModelConfig,
    eval: &EvalConfig,
) -> Result<TrainedArm> {
    let outcome = train_progressive(train, model, |_, _| Ok(()))?;
    let samples = eval_set(&train.data, &model, eval.stage, eval.count, eval.seed)?;
    let summary = evaluate(&outcome.state.model, &outcome.assignment, &samples)?;
    let (initial_loss, final_loss) = loss_endpoints(&outcome).unwrap_or((f64::NAN, f64::NAN));
    Ok(TrainedArm {
        row: ArmResult {
            arm: arm.into(),
            iterations: train.total_iterations(),
            initial_loss,
            final_loss,
            psnr: summary.psnr,
            baseline_psnr: summary.baseline_psnr,
            warp_error: summary.warp_error,
            baseline_warp_error: summary.baseline_warp_error,
        },
        outcome,
        summary,
    })
}

/// The three curricula at an equal iteration budget: stage 1 only,
/// stage 2 only, and stage 1 then stage 2 split by `base`'s schedule.
pub fn ablation_arms(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let total = base.total_iterations();
    let single = |stage| TrainConfig {
        schedule: vec![StagePlan { stage, iterations: total }],
        ..base.clone()
    };
    vec![
        ("S1", single(Stage::S1)),
        ("S2", single(Stage::S2)),
        ("S1+S2", base.clone()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub global_heads: usize,
    pub attention_macs: u64,
    pub total_macs: u64,
    pub psnr: f64,
    pub baseline_psnr: f64,
    /// `E*_warp` of the restored clips.
    pub warp_error: f64,
    pub final_loss: f64,
}

/// Profiles, trains and evaluates once per `rho`.
pub fn sweep_rho(
    rhos: &[f64],
    train: &TrainConfig,
    model: ModelConfig,
    eval: &EvalConfig,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let cfg = TrainConfig { rho, ..train.clone() };
        let arm = train_and_eval(&format!("rho={rho}"), &cfg, model, eval)?;
        let cost = model_macs(&model, &arm.outcome.assignment)?;
        let row = SweepRow {
            rho,
            global_heads: arm.outcome.assignment.count(headroute_core::Pattern::Global),
            attention_macs: cost.attention_total,
            total_macs: cost.total,
            psnr: arm.summary.psnr,
            baseline_psnr: arm.summary.baseline_psnr,
            warp_error: arm.summary.warp_error,
            final_loss: arm.row.final_loss,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
