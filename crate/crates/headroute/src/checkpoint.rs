//! `ODIT` checkpoints.
//!
//! Layout (little-endian): magic `ODIT`, u32 version, thirteen u32 config
//! fields (layers, heads, head_dim, channels, factor, frames, height,
//! width, timestep, mlp_ratio, time_freqs, parameterization, schedule),
//! u32 tensor count, then every tensor as f32 in declaration order.
//!
//! An optional `TRST` block follows for resumable training: u32 version,
//! u64 seed, iteration and Adam step, u32 history capacity and length, the
//! history records, then the f64 master weights and both Adam moments.
//! Only this block makes resumption bitwise; the f32 tensors alone are a
//! deployable snapshot.

use std::path::Path;

use headroute_core::degrade::Stage;
use headroute_core::losses::LossReport;
use headroute_core::model::{ModelConfig, Parameterization};
use headroute_core::schedule::NoiseSchedule;
use headroute_core::train::{AdamState, LossHistory, StepRecord, TrainState};
use headroute_core::{DiffusionTransformer, Grid3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{put_u32, read_file, write_file, Reader};

pub const MAGIC: &[u8; 4] = b"ODIT";
pub const VERSION: u32 = 1;
pub const STATE_MAGIC: &[u8; 4] = b"TRST";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset of the f32 data within the checkpoint.
    pub offset: usize,
    pub bytes: usize,
}

/// Sidecar description of a checkpoint, written next to it as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub train_state: bool,
}

pub enum Checkpoint {
    Model(DiffusionTransformer),
    Training(TrainState),
}

impl Checkpoint {
    pub fn model(&self) -> &DiffusionTransformer {
        match self {
            Checkpoint::Model(m) => m,
            Checkpoint::Training(s) => &s.model,
        }
    }

    pub fn into_model(self) -> DiffusionTransformer {
        match self {
            Checkpoint::Model(m) => m,
            Checkpoint::Training(s) => s.model,
        }
    }
}

fn config_words(c: &ModelConfig) -> [usize; 13] {
    [
        c.layers,
        c.heads,
        c.head_dim,
        c.channels,
        c.factor,
        c.grid.frames,
        c.grid.height,
        c.grid.width,
        c.timestep as usize,
        c.mlp_ratio,
        c.time_freqs,
        match c.parameterization {
            Parameterization::Velocity => 0,
            Parameterization::Noise => 1,
        },
        match c.schedule {
            NoiseSchedule::Linear => 0,
        },
    ]
}

fn config_from_words(w: [u32; 13], path: &Path) -> Result<ModelConfig> {
    let u = |i: usize| w[i] as usize;
    let parameterization = match w[11] {
        0 => Parameterization::Velocity,
        1 => Parameterization::Noise,
        v => return Err(Error::format(path, format!("unknown parameterization code {v}"))),
    };
    let schedule = match w[12] {
        0 => NoiseSchedule::Linear,
        v => return Err(Error::format(path, format!("unknown schedule code {v}"))),
    };
    let cfg = ModelConfig {
        layers: u(0),
        heads: u(1),
        head_dim: u(2),
        channels: u(3),
        factor: u(4),
        grid: Grid3::new(u(5), u(6), u(7)),
        timestep: w[8],
        mlp_ratio: u(9),
        time_freqs: u(10),
        parameterization,
        schedule,
    };
    cfg.validate().map_err(|e| Error::format(path, format!("invalid model config: {e}")))?;
    Ok(cfg)
}

fn stage_code(s: Stage) -> u8 {
    match s {
        Stage::S1 => 1,
        Stage::S2 => 2,
    }
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_model(model: &DiffusionTransformer, out: &mut Vec<u8>) -> Result<Vec<TensorEntry>> {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in config_words(model.config()) {
        put_u32(out, v)?;
    }
    put_u32(out, model.specs().len())?;
    let mut entries = Vec::with_capacity(model.specs().len());
    for (spec, p) in model.specs().iter().zip(model.params()) {
        entries.push(TensorEntry {
            name: spec.name.clone(),
            shape: [spec.rows, spec.cols],
            offset: out.len(),
            bytes: 4 * p.len(),
        });
        for &v in p {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(entries)
}

/// Serializes a bare model (f32 tensors only).
pub fn encode(model: &DiffusionTransformer) -> Result<(Vec<u8>, Manifest)> {
    let mut out = Vec::new();
    let tensors = encode_model(model, &mut out)?;
    let manifest = Manifest {
        format: "ODIT".into(),
        version: VERSION,
        config: *model.config(),
        tensors,
        train_state: false,
    };
    Ok((out, manifest))
}

/// Serializes a model plus the `TRST` block.
pub fn encode_state(state: &TrainState) -> Result<(Vec<u8>, Manifest)> {
    let (mut out, mut manifest) = encode(&state.model)?;
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    put_u32(&mut out, state.history.capacity())?;
    put_u32(&mut out, state.history.len())?;
    for r in state.history.records() {
        out.extend_from_slice(&r.iteration.to_le_bytes());
        out.push(stage_code(r.stage));
        let rep = &r.report;
        put_f64s(&mut out, &[rep.latent, rep.perceptual, rep.warp, rep.total, rep.lambda_warp]);
    }
    for group in [state.model.params(), &state.adam.m, &state.adam.v] {
        for t in group {
            put_f64s(&mut out, t);
        }
    }
    manifest.train_state = true;
    Ok((out, manifest))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut words = [0u32; 13];
    for w in &mut words {
        *w = r.u32()?;
    }
    let config = config_from_words(words, path)?;
    let specs = headroute_core::model::param_specs(&config);
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(Error::format(
            path,
            format!("{count} tensors, config implies {}", specs.len()),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for s in &specs {
        params.push(r.f32s(s.rows * s.cols)?.into_iter().map(f64::from).collect::<Vec<f64>>());
    }
    if r.at_end() {
        return Ok(Checkpoint::Model(DiffusionTransformer::from_params(config, params)?));
    }
    if r.peek(4) != Some(STATE_MAGIC.as_slice()) {
        return Err(Error::format(path, "unexpected bytes after the tensors"));
    }
    r.magic(STATE_MAGIC)?;
    let sv = r.u32()?;
    if sv != STATE_VERSION {
        return Err(Error::format(path, format!("unsupported training-state version {sv}")));
    }
    let seed = r.u64()?;
    let iteration = r.u64()?;
    let step = r.u64()?;
    let capacity = r.u32()? as usize;
    let len = r.u32()? as usize;
    if capacity == 0 || len > capacity {
        return Err(Error::format(path, format!("history length {len} exceeds capacity {capacity}")));
    }
    let mut history = LossHistory::new(capacity);
    for _ in 0..len {
        let it = r.u64()?;
        let stage = match r.u8()? {
            1 => Stage::S1,
            2 => Stage::S2,
            v => return Err(Error::format(path, format!("unknown stage code {v}"))),
        };
        let f = r.f64s(5)?;
        history.push(StepRecord {
            iteration: it,
            stage,
            report: LossReport {
                latent: f[0],
                perceptual: f[1],
                warp: f[2],
                total: f[3],
                lambda_warp: f[4],
            },
        });
    }
    let mut groups: [Vec<Vec<f64>>; 3] = Default::default();
    for g in &mut groups {
        for s in &specs {
            g.push(r.f64s(s.rows * s.cols)?);
        }
    }
    r.finish()?;
    let [master, m, v] = groups;
    Ok(Checkpoint::Training(TrainState {
        model: DiffusionTransformer::from_params(config, master)?,
        adam: AdamState { step, m, v },
        iteration,
        seed,
        history,
    }))
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn write_with_manifest(path: &Path, bytes: &[u8], manifest: &Manifest) -> Result<()> {
    write_file(path, bytes)?;
    crate::json::write_json(&manifest_path(path), manifest)
}

/// Writes `path` and its `<path>.json` manifest.
pub fn save_model(path: &Path, model: &DiffusionTransformer) -> Result<()> {
    let (bytes, manifest) = encode(model)?;
    write_with_manifest(path, &bytes, &manifest)
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let (bytes, manifest) = encode_state(state)?;
    write_with_manifest(path, &bytes, &manifest)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use headroute_core::train::AdamState;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            grid: Grid3::new(2, 2, 2),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip_is_f32_exact() {
        let m = DiffusionTransformer::init_random(small(), 3).unwrap();
        let (bytes, manifest) = encode(&m).unwrap();
        assert_eq!(manifest.tensors.len(), m.specs().len());
        let last = manifest.tensors.last().unwrap();
        assert_eq!(last.offset + last.bytes, bytes.len());
        let back = decode(&bytes, Path::new("x")).unwrap().into_model();
        for (a, b) in m.params().iter().zip(back.params()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn state_round_trip_is_bitwise() {
        let model = DiffusionTransformer::init_random(small(), 5).unwrap();
        let mut adam = AdamState::zeros(model.params());
        adam.step = 7;
        adam.m[0][0] = 0.1 + 0.2;
        adam.v[1][0] = 1e-300;
        let mut history = LossHistory::new(3);
        for i in 0..5 {
            history.push(StepRecord {
                iteration: i,
                stage: if i < 2 { Stage::S1 } else { Stage::S2 },
                report: LossReport {
                    latent: i as f64 / 3.0,
                    perceptual: 0.5,
                    warp: 0.25,
                    total: 1.0 / 7.0,
                    lambda_warp: 0.1,
                },
            });
        }
        let state = TrainState {
            model,
            adam,
            iteration: 5,
            seed: u64::MAX - 1,
            history,
        };
        let (bytes, manifest) = encode_state(&state).unwrap();
        assert!(manifest.train_state);
        match decode(&bytes, Path::new("x")).unwrap() {
            Checkpoint::Training(back) => assert_eq!(back, state),
            Checkpoint::Model(_) => panic!("training block lost"),
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let m = DiffusionTransformer::init_random(small(), 3).unwrap();
        let (bytes, _) = encode(&m).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, Path::new("x")), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad, Path::new("x")), Err(Error::Format { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 1], Path::new("x")), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.extend_from_slice(b"junk");
        assert!(matches!(decode(&extra, Path::new("x")), Err(Error::Format { .. })));
    }
}
