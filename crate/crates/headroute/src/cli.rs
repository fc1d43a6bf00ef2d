use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use headroute_core::attention::WindowSpec;
use headroute_core::cost::{model_macs, CostReport};
use headroute_core::degrade::{self, DegradationParams, Stage};
use headroute_core::model::ModelConfig;
use headroute_core::routing::{profile_model, ProfileSettings};
use headroute_core::train::{
    calibration_clips, eval_set, make_sample, restore, StagePlan, TrainState, Trainer,
};
use headroute_core::{rng, AssignmentMap, DiffusionTransformer, Grid3, VideoClip};

use crate::bench::{bench_patterns, format_table, MIN_REPEATS};
use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::{read_clip, write_clip, write_flow};
use crate::json::{self, LossRow};
use crate::run;

#[derive(Parser, Debug)]
#[command(name = "headroute", version, about = "Attention routing for a toy video diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stage-1 iterations (0 drops the stage).
    #[arg(long)]
    pub s1: Option<u64>,
    /// Stage-2 iterations (0 drops the stage).
    #[arg(long)]
    pub s2: Option<u64>,
    #[arg(long)]
    pub lambda_warp: Option<f64>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(self.config.as_deref())?;
        let t = &mut c.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.rho {
            t.rho = v;
        }
        if let Some(v) = self.lr {
            t.adam.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lambda_warp {
            t.lambda_warp = v;
        }
        if self.s1.is_some() || self.s2.is_some() {
            let current = |stage| t.schedule.iter().filter(|p| p.stage == stage).map(|p| p.iterations).sum::<u64>();
            let (s1, s2) = (self.s1.unwrap_or(current(Stage::S1)), self.s2.unwrap_or(current(Stage::S2)));
            t.schedule = [(Stage::S1, s1), (Stage::S2, s2)]
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .map(|(stage, iterations)| StagePlan { stage, iterations })
                .collect();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    S1,
    S2,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::S1 => Stage::S1,
            StageArg::S2 => Stage::S2,
        }
    }
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated integers, got {s:?}"))
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize high-quality clips and their ground-truth flow.
    GenData {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Degrade one clip at stage 1 or stage 2.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::S1)]
        stage: StageArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stage-2 perturbation probability.
        #[arg(long, default_value_t = 0.3)]
        p: f64,
        #[arg(long)]
        blur: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        down: Option<u32>,
        #[arg(long)]
        quality: Option<u32>,
        #[arg(long)]
        order: Option<u32>,
        /// Where to write the per-frame parameter trace (JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score every head on calibration clips and route them.
    Profile {
        #[command(flatten)]
        cfg: Overrides,
        /// Model to profile; a fresh model from the config seed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Calibration clips; synthesized from the config otherwise.
        #[arg(long = "clip")]
        clips: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-route saved scores at a new global-head ratio.
    Route {
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the progressive curriculum.
    Train {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint with a training-state block; the
        /// assignment is read from the output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (the run can be resumed later).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// One-step restoration of a clip.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-clip PSNR, warp error and losses on the held-out set (JSON lines).
    Eval {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time each attention pattern on one head.
    Bench {
        #[arg(long, value_parser = parse_triple, default_value = "26,8,16")]
        grid: [usize; 3],
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, value_parser = parse_triple, default_value = "3,5,5")]
        window: [usize; 3],
        #[arg(long, default_value_t = MIN_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the timings as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole-model multiply-accumulate report.
    Macs {
        #[command(flatten)]
        cfg: Overrides,
        /// Routed assignment; every head global otherwise.
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profile, train and evaluate at each rho; one CSV row per value.
    SweepRho {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(required = true, num_args = 1..)]
        rhos: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_model(path: &Path, expect: Option<&ModelConfig>) -> Result<DiffusionTransformer> {
    let model = checkpoint::load(path)?.into_model();
    if let Some(c) = expect {
        if model.config() != c {
            return Err(Error::Core(headroute_core::Error::Config(format!(
                "checkpoint {} was trained with a different model config",
                path.display()
            ))));
        }
    }
    Ok(model)
}

fn checked_assignment(path: &Path, model: &DiffusionTransformer) -> Result<AssignmentMap> {
    let a = json::read_assignment(path)?;
    a.check_covers(model.config().layers, model.config().heads)?;
    Ok(a)
}

fn json_line<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = json::to_pretty(v, Path::new("<stdout>"))?;
    s.push('\n');
    Ok(s)
}

fn say(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out_dir, count } => {
            let c = cfg.resolve()?;
            for i in 0..count {
                let seed = rng::derive_seed(c.train.seed, "gen-data", i as u64);
                let s = make_sample(&c.train.data, &c.model, Stage::S1, seed)?;
                write_clip(&out_dir.join(format!("clip_{i:04}.ovid")), &s.hq)?;
                write_flow(&out_dir.join(format!("clip_{i:04}.oflw")), &s.flow)?;
            }
            say(format!("wrote {count} clips to {}", out_dir.display()));
            Ok(())
        }
        Command::Degrade {
            input,
            out,
            stage,
            seed,
            p,
            blur,
            noise,
            down,
            quality,
            order,
            trace,
        } => {
            let d = DegradationParams::default();
            let params = DegradationParams {
                blur_sigma: blur.unwrap_or(d.blur_sigma),
                noise_sigma: noise.unwrap_or(d.noise_sigma),
                down_factor: down.unwrap_or(d.down_factor),
                jpeg_quality: quality.unwrap_or(d.jpeg_quality),
                order: order.unwrap_or(d.order),
            };
            let clip = read_clip(&input)?;
            let (lq, tr) = match Stage::from(stage) {
                Stage::S1 => degrade::degrade_stage1(&clip, &params, seed)?,
                Stage::S2 => degrade::degrade_stage2(&clip, &params, p, seed)?,
            };
            write_clip(&out, &lq)?;
            if let Some(t) = trace {
                json::write_json(&t, &tr)?;
            }
            Ok(())
        }
        Command::Profile {
            cfg,
            checkpoint,
            clips,
            out,
        } => {
            let c = cfg.resolve()?;
            let model = match &checkpoint {
                Some(p) => load_model(p, None)?,
                None => DiffusionTransformer::new(c.model, rng::derive_seed(c.train.seed, "model-init", 0))?,
            };
            let clips: Vec<VideoClip> = if clips.is_empty() {
                calibration_clips(&c.train.data, model.config(), c.train.calibration_count, c.train.seed)?
            } else {
                clips.iter().map(|p| read_clip(p)).collect::<Result<_>>()?
            };
            let settings = ProfileSettings {
                window: c.train.window,
                rho: c.train.rho,
                eps: c.train.kl_eps,
                direction: c.train.direction,
                seed: c.train.seed,
            };
            let map = profile_model(&model, &clips, &settings)?;
            let path = out.as_deref().unwrap_or(Path::new("<stdout>"));
            json::emit(out.as_deref(), &json::assignment_to_string(&map, path)?)
        }
        Command::Route { assignment, rho, out } => {
            let map = json::read_assignment(&assignment)?.reroute(rho)?;
            let path = out.as_deref().unwrap_or(Path::new("<stdout>"));
            json::emit(out.as_deref(), &json::assignment_to_string(&map, path)?)
        }
        Command::Train {
            cfg,
            out_dir,
            resume,
            max_steps,
        } => train(cfg, &out_dir, resume.as_deref(), max_steps),
        Command::Infer {
            checkpoint,
            assignment,
            input,
            out,
        } => {
            let model = load_model(&checkpoint, None)?;
            let a = checked_assignment(&assignment, &model)?;
            write_clip(&out, &restore(&model, &a, &read_clip(&input)?)?)
        }
        Command::Eval {
            cfg,
            checkpoint,
            assignment,
            out,
        } => {
            let c = cfg.resolve()?;
            let model = load_model(&checkpoint, Some(&c.model))?;
            let a = checked_assignment(&assignment, &model)?;
            let samples = eval_set(&c.train.data, &c.model, c.eval.stage, c.eval.count, c.eval.seed)?;
            let rows = run::clip_metrics(&model, &a, &samples, c.train.lambda_warp)?;
            match out {
                Some(p) => json::write_jsonl(&p, &rows),
                None => {
                    let text: Vec<String> = rows
                        .iter()
                        .map(|r| serde_json::to_string(r).expect("metrics serialize"))
                        .collect();
                    json::emit(None, &(text.join("\n") + "\n"))
                }
            }
        }
        Command::Bench {
            grid,
            head_dim,
            window,
            repeats,
            seed,
            out,
        } => {
            let grid = Grid3::new(grid[0], grid[1], grid[2]);
            let spec = WindowSpec::try_from(window)?;
            let timings = bench_patterns(grid, head_dim, &spec, repeats, seed)?;
            print!("{}", format_table(&timings));
            if let Some(p) = out {
                json::write_json(&p, &timings)?;
            }
            Ok(())
        }
        Command::Macs { cfg, assignment, out } => {
            let c = cfg.resolve()?;
            let a = match assignment {
                Some(p) => json::read_assignment(&p)?,
                None => AssignmentMap::all_global(c.model.layers, c.model.heads, c.train.window),
            };
            let report: CostReport = model_macs(&c.model, &a)?;
            json::emit(out.as_deref(), &json_line(&report)?)
        }
        Command::SweepRho { cfg, rhos, out } => {
            let c = cfg.resolve()?;
            let rows = run::sweep_rho(&rhos, &c.train, c.model, &c.eval, |r| {
                say(format!("rho {:.2}: psnr {:.3} dB, E*_warp {:.3}", r.rho, r.psnr, r.warp_error))
            })?;
            match out {
                Some(p) => json::write_csv(&p, &rows),
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush().map_err(|e| Error::io(Path::new("<stdout>"), e))
                }
            }
        }
    }
}

pub const CHECKPOINT_FILE: &str = "model.odit";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";

fn train(cfg: Overrides, out_dir: &Path, resume: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
    let c = cfg.resolve()?;
    let (mut trainer, mut rows) = match resume {
        Some(path) => {
            let state: TrainState = match checkpoint::load(path)? {
                Checkpoint::Training(s) => s,
                Checkpoint::Model(_) => {
                    return Err(Error::format(path, "checkpoint has no training-state block"));
                }
            };
            let a = checked_assignment(&out_dir.join(ASSIGNMENT_FILE), &state.model)?;
            let rows: Vec<LossRow> = json::read_csv(&out_dir.join(LOSS_FILE)).unwrap_or_default();
            let rows = rows.into_iter().filter(|r| r.iteration < state.iteration).collect();
            (Trainer::resume(c.train.clone(), a, state)?, rows)
        }
        None => {
            let model = DiffusionTransformer::new(c.model, rng::derive_seed(c.train.seed, "model-init", 0))?;
            let clips = calibration_clips(&c.train.data, &c.model, c.train.calibration_count, c.train.seed)?;
            let a = profile_model(&model, &clips, &c.train.profile_settings())?;
            json::write_assignment(&out_dir.join(ASSIGNMENT_FILE), &a)?;
            (Trainer::new(c.train.clone(), model, a)?, Vec::new())
        }
    };
    json::write_json(&out_dir.join(CONFIG_FILE), &c)?;
    let mut budget = max_steps.unwrap_or(u64::MAX);
    while budget > 0 && !trainer.is_done() {
        if trainer.at_reprofile_point() {
            let clips = calibration_clips(&c.train.data, &c.model, c.train.calibration_count, c.train.seed)?;
            json::write_assignment(&out_dir.join(ASSIGNMENT_FILE), trainer.reprofile(&clips)?)?;
        }
        let records = trainer.run_stage(budget, |_, r| {
            if r.iteration % 25 == 0 {
                say(format!("iter {:>5} {:?} total {:.6}", r.iteration, r.stage, r.report.total));
            }
            Ok(())
        })?;
        budget -= records.len() as u64;
        rows.extend(records.iter().map(LossRow::from));
    }
    json::write_csv(&out_dir.join(LOSS_FILE), &rows)?;
    checkpoint::save_state(&out_dir.join(CHECKPOINT_FILE), trainer.state())?;
    say(format!(
        "iteration {} of {}{}",
        trainer.state().iteration,
        c.train.total_iterations(),
        if trainer.is_done() { ", done" } else { "" }
    ));
    Ok(())
}
