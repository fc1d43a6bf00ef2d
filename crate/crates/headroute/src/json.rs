//! JSON, JSONL and CSV artifacts: assignment maps, degradation traces,
//! cost reports, per-clip metrics and loss logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use headroute_core::attention::{Pattern, WindowSpec};
use headroute_core::degrade::Stage;
use headroute_core::routing::{Calibration, HeadAssignment, KlDirection};
use headroute_core::train::StepRecord;
use headroute_core::AssignmentMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::formats::{read_file, write_file};

pub const ASSIGNMENT_VERSION: u32 = 1;

pub fn to_pretty<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_pretty(value, path)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    parse_json(text, path)
}

/// A score with 17 significant digits, enough to round-trip any f64.
fn score17(v: f64) -> Result<Box<RawValue>> {
    if !v.is_finite() {
        return Err(Error::Core(headroute_core::Error::Numeric {
            context: format!("non-finite routing score {v}"),
            layer: None,
        }));
    }
    RawValue::from_string(format!("{v:.16e}")).map_err(|e| Error::Usage(e.to_string()))
}

#[derive(Serialize)]
struct HeadOut {
    layer: usize,
    head: usize,
    pattern: Pattern,
    s_intra: Box<RawValue>,
    s_window: Box<RawValue>,
}

#[derive(Serialize)]
struct AssignmentOut {
    version: u32,
    rho: f64,
    window: WindowSpec,
    eps: f64,
    calibration: Calibration,
    direction: KlDirection,
    heads: Vec<HeadOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentIn {
    version: u32,
    rho: f64,
    window: WindowSpec,
    eps: f64,
    calibration: Calibration,
    #[serde(default)]
    direction: KlDirection,
    heads: Vec<HeadAssignment>,
}

pub fn assignment_to_string(map: &AssignmentMap, path: &Path) -> Result<String> {
    let heads = map
        .heads
        .iter()
        .map(|h| {
            Ok(HeadOut {
                layer: h.layer,
                head: h.head,
                pattern: h.pattern,
                s_intra: score17(h.s_intra)?,
                s_window: score17(h.s_window)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = AssignmentOut {
        version: ASSIGNMENT_VERSION,
        rho: map.rho,
        window: map.window,
        eps: map.eps,
        calibration: map.calibration,
        direction: map.direction,
        heads,
    };
    let mut text = to_pretty(&out, path)?;
    text.push('\n');
    Ok(text)
}

pub fn assignment_from_str(text: &str, path: &Path) -> Result<AssignmentMap> {
    let a: AssignmentIn = parse_json(text, path)?;
    if a.version != ASSIGNMENT_VERSION {
        return Err(Error::format(path, format!("unsupported assignment version {}", a.version)));
    }
    if !(0.0..=1.0).contains(&a.rho) {
        return Err(Error::format(path, format!("rho {} outside [0, 1]", a.rho)));
    }
    let mut heads = a.heads;
    heads.sort_by_key(|h| (h.layer, h.head));
    if heads.windows(2).any(|w| (w[0].layer, w[0].head) == (w[1].layer, w[1].head)) {
        return Err(Error::format(path, "duplicate (layer, head) entry"));
    }
    Ok(AssignmentMap {
        rho: a.rho,
        window: a.window,
        eps: a.eps,
        calibration: a.calibration,
        direction: a.direction,
        heads,
    })
}

pub fn write_assignment(path: &Path, map: &AssignmentMap) -> Result<()> {
    write_file(path, assignment_to_string(map, path)?.as_bytes())
}

pub fn read_assignment(path: &Path) -> Result<AssignmentMap> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    assignment_from_str(text, path)
}

/// One line of the per-clip metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub psnr: f64,
    pub warp_error: f64,
    pub latent: f64,
    pub perceptual: f64,
    pub warp: f64,
    pub total: f64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        let line = serde_json::to_string(r).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| parse_json(l, path)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub stage: Stage,
    pub latent: f64,
    pub perceptual: f64,
    pub warp: f64,
    pub total: f64,
}

impl From<&StepRecord> for LossRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            iteration: r.iteration,
            stage: r.stage,
            latent: r.report.latent,
            perceptual: r.report.perceptual,
            warp: r.report.warp,
            total: r.report.total,
        }
    }
}

/// Serializes `rows` as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes text to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}
