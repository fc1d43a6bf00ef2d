//! Training objectives and evaluation metrics.
//!
//! Each loss has a plain evaluation on clips and latents, and a taped
//! version used by training; both share the same sparse warp and decode
//! maps so they agree to round-off.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::degrade::FlowField;
use crate::error::{Error, Result};
use crate::grid::{unshuffle_permutation, Frame, Grid3, LatentGrid, VideoClip};
use crate::rng;
use crate::tape::{ConvKernel, SparseRows, Tape, Var};

pub const DEFAULT_LAMBDA_WARP: f64 = 0.1;
/// Border (pixels) excluded from the temporal residual.
pub const WARP_BORDER: usize = 2;
pub const PSNR_CAP: f64 = 99.0;
const FEATURE_SEED: u64 = 0x6c70_6970_735f_7631;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub latent: f64,
    pub perceptual: f64,
    pub warp: f64,
    pub total: f64,
    pub lambda_warp: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y)) / a.len() as f64
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Mean squared error over all latent elements.
pub fn latent_loss(pred: &LatentGrid, target: &LatentGrid) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::dim("latent shapes differ"));
    }
    Ok(mse(&to_f64(pred.data()), &to_f64(target.data())))
}

/// Frozen random convolutional features standing in for a learned
/// perceptual network: three 3x3 conv + tanh layers, the middle one strided.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Arc<ConvKernel>>,
}

impl FeatureExtractor {
    pub const WIDTH: usize = 8;

    /// The extractor used by [`perceptual_loss`]; weights depend only on
    /// the channel count.
    pub fn fixed(channels: usize) -> Self {
        let shapes = [(channels, 1), (Self::WIDTH, 2), (Self::WIDTH, 1)];
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(l, &(cin, stride))| {
                let mut r = rng::stream(FEATURE_SEED, "feature-layer", l as u64);
                let fan_in = (cin * 9) as f64;
                let std = 2.0 / libm::sqrt(fan_in);
                Arc::new(ConvKernel {
                    in_channels: cin,
                    out_channels: Self::WIDTH,
                    size: 3,
                    stride,
                    pad: 1,
                    weight: (0..Self::WIDTH * cin * 9)
                        .map(|_| std * r.sample::<f64, _>(StandardNormal))
                        .collect(),
                    bias: (0..Self::WIDTH).map(|_| 0.1 * r.sample::<f64, _>(StandardNormal)).collect(),
                })
            })
            .collect();
        Self { layers }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].in_channels
    }

    /// Activations of every layer for one `C x h x w` frame.
    pub fn features(&self, frame: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut x, mut hh, mut ww) = (frame.to_vec(), h, w);
        for k in &self.layers {
            let y: Vec<f64> = k.forward(&x, hh, ww).iter().map(|&v| libm::tanh(v)).collect();
            (hh, ww) = k.output_dims(hh, ww);
            out.push(y.clone());
            x = y;
        }
        out
    }
}

fn frame_index(channels: usize, frames: usize, t: usize, h: usize, w: usize) -> Vec<usize> {
    (0..channels)
        .flat_map(|c| {
            let base = (c * frames + t) * h * w;
            base..base + h * w
        })
        .collect()
}

fn check_clips(pred: &VideoClip, target: &VideoClip) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::dim(format!(
            "clip shapes differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Pixel MSE plus, per feature layer, the frame-averaged feature MSE.
pub fn perceptual_loss_with(extractor: &FeatureExtractor, pred: &VideoClip, target: &VideoClip) -> Result<f64> {
    check_clips(pred, target)?;
    let (c, t, h, w) = pred.dims();
    if extractor.channels() != c {
        return Err(Error::dim("feature extractor channel count differs from clip"));
    }
    let (p, q) = (to_f64(pred.data()), to_f64(target.data()));
    let pixel = mse(&p, &q);
    let mut feat = 0.0;
    for k in 0..t {
        let idx = frame_index(c, t, k, h, w);
        let fp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let fq: Vec<f64> = idx.iter().map(|&i| q[i]).collect();
        for (a, b) in extractor.features(&fp, h, w).iter().zip(extractor.features(&fq, h, w)) {
            feat += mse(a, &b);
        }
    }
    Ok(pixel + feat * (1.0 / t as f64))
}

pub fn perceptual_loss(pred: &VideoClip, target: &VideoClip) -> Result<f64> {
    perceptual_loss_with(&FeatureExtractor::fixed(pred.channels()), pred, target)
}

/// Backward bilinear warp of frame `t` of a channel-major clip
/// (`channels x frames x h x w`): `out(x, y) = frame(x + u, y + v)` with
/// `(u, v)` read from the `2 x h x w` flow and samples clamped to the edge.
pub fn warp_rows(channels: usize, frames: usize, t: usize, h: usize, w: usize, flow: &[f32]) -> Result<SparseRows> {
    if flow.len() != 2 * h * w {
        return Err(Error::dim(format!("flow has {} values, expected {}", flow.len(), 2 * h * w)));
    }
    if flow.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("flow contains non-finite values"));
    }
    let mut offsets = vec![0];
    let mut cols = Vec::with_capacity(channels * h * w * 4);
    let mut weights = Vec::with_capacity(channels * h * w * 4);
    for c in 0..channels {
        let base = (c * frames + t) * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = (x as f64 + f64::from(flow[i])).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + f64::from(flow[h * w + i])).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (libm::floor(sx) as usize, libm::floor(sy) as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
                for (yy, xx, wt) in [
                    (y0, x0, (1.0 - tx) * (1.0 - ty)),
                    (y0, x1, tx * (1.0 - ty)),
                    (y1, x0, (1.0 - tx) * ty),
                    (y1, x1, tx * ty),
                ] {
                    if wt != 0.0 {
                        cols.push(base + yy * w + xx);
                        weights.push(wt);
                    }
                }
                offsets.push(cols.len());
            }
        }
    }
    Ok(SparseRows {
        offsets,
        cols,
        weights,
        in_len: channels * frames * h * w,
    })
}

pub fn warp(frame: &Frame, flow: &[f32]) -> Result<Frame> {
    let map = warp_rows(frame.channels, 1, 0, frame.height, frame.width, flow)?;
    let out = map.apply(&to_f64(&frame.data));
    Frame::new(frame.channels, frame.height, frame.width, out.iter().map(|&v| v as f32).collect())
}

/// `channels x h x w` mask that is false within `border` pixels of an edge.
pub fn border_mask(channels: usize, h: usize, w: usize, border: usize) -> Vec<bool> {
    let plane: Vec<bool> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            y >= border && x >= border && y + border < h && x + border < w
        })
        .collect();
    plane.iter().copied().cycle().take(channels * h * w).collect()
}

/// Sparse maps for every temporal residual term: `(warped, neighbor)`.
struct TemporalTerms {
    terms: Vec<(Arc<SparseRows>, Arc<SparseRows>)>,
    mask: Arc<Vec<bool>>,
}

fn temporal_terms(dims: (usize, usize, usize, usize), flow: &FlowField) -> Result<TemporalTerms> {
    let (c, t, h, w) = dims;
    if t < 2 {
        return Err(Error::arg("temporal loss needs at least two frames"));
    }
    flow.validate()?;
    if flow.pairs() != t - 1 || flow.height != h || flow.width != w {
        return Err(Error::dim(format!(
            "flow covers {} pairs of {}x{}, clip has {} frames of {h}x{w}",
            flow.pairs(),
            flow.height,
            flow.width,
            t
        )));
    }
    let mask = border_mask(c, h, w, WARP_BORDER);
    if !mask.iter().any(|&m| m) {
        return Err(Error::arg(format!("frames too small for a {WARP_BORDER}-pixel border")));
    }
    let n = c * t * h * w;
    let mut terms = Vec::with_capacity(2 * (t - 1));
    for p in 0..t - 1 {
        let next = Arc::new(SparseRows::select(&frame_index(c, t, p + 1, h, w), n));
        let this = Arc::new(SparseRows::select(&frame_index(c, t, p, h, w), n));
        terms.push((Arc::new(warp_rows(c, t, p, h, w, &flow.backward[p])?), next));
        terms.push((Arc::new(warp_rows(c, t, p + 1, h, w, &flow.forward[p])?), this));
    }
    Ok(TemporalTerms {
        terms,
        mask: Arc::new(mask),
    })
}

fn masked_mae(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for ((x, y), &m) in a.iter().zip(b).zip(mask) {
        if m {
            sum += (x - y).abs();
            count += 1;
        }
    }
    sum / count as f64
}

/// Sum over adjacent pairs of the border-masked mean absolute residuals
/// `warp(f_p, bw_p) - f_{p+1}` and `warp(f_{p+1}, fw_p) - f_p`.
pub fn temporal_loss(pred: &VideoClip, flow: &FlowField) -> Result<f64> {
    let terms = temporal_terms(pred.dims(), flow)?;
    let data = to_f64(pred.data());
    Ok(terms
        .terms
        .iter()
        .fold(0.0, |acc, (warp, nb)| acc + masked_mae(&warp.apply(&data), &nb.apply(&data), &terms.mask)))
}

/// Mean warped-neighbor residual scaled by 10^3.
pub fn warp_error_metric(pred: &VideoClip, flow: &FlowField) -> Result<f64> {
    let pairs = pred.frames().saturating_sub(1);
    Ok(temporal_loss(pred, flow)? / (2 * pairs) as f64 * 1e3)
}

pub fn total_loss(latent: f64, perceptual: f64, warp: f64, lambda_warp: f64) -> Result<LossReport> {
    for (name, v) in [("latent", latent), ("perceptual", perceptual), ("warp", warp), ("lambda_warp", lambda_warp)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("{name} loss is not finite")));
        }
    }
    Ok(LossReport {
        latent,
        perceptual,
        warp,
        total: latent + perceptual + lambda_warp * warp,
        lambda_warp,
    })
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &VideoClip, target: &VideoClip) -> Result<f64> {
    check_clips(pred, target)?;
    Ok(psnr_from_mse(mse(&to_f64(pred.data()), &to_f64(target.data()))))
}

/// Latent-to-clip rearrangement as a gather map (no clamping).
pub fn shuffle_rows(channels: usize, grid: Grid3, r: usize) -> SparseRows {
    let perm = unshuffle_permutation(channels, grid, r);
    let mut inv = vec![0; perm.len()];
    for (src, &dst) in perm.iter().enumerate() {
        inv[dst] = src;
    }
    SparseRows::select(&inv, perm.len())
}

/// Fixed inputs of the taped objective for one training sample.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub latent: Vec<f64>,
    pub clip: Vec<f64>,
    pub dims: (usize, usize, usize, usize),
    pub flow: FlowField,
}

/// Taped loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub latent: Var,
    pub perceptual: Var,
    pub warp: Var,
    pub total: Var,
}

/// Shared sparse maps and features reused across steps of one clip shape.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub extractor: FeatureExtractor,
    pub decode: Arc<SparseRows>,
    pub grid: Grid3,
    pub factor: usize,
    pub dims: (usize, usize, usize, usize),
    pub lambda_warp: f64,
}

impl LossContext {
    pub fn new(channels: usize, grid: Grid3, factor: usize, lambda_warp: f64) -> Self {
        Self {
            extractor: FeatureExtractor::fixed(channels),
            decode: Arc::new(shuffle_rows(channels, grid, factor)),
            grid,
            factor,
            dims: (channels, grid.frames, grid.height * factor, grid.width * factor),
            lambda_warp,
        }
    }

    /// Records latent, perceptual and temporal losses of a reconstructed
    /// latent (`S x C'`) and their weighted sum.
    pub fn record(&self, tape: &mut Tape, recon: Var, targets: &LossTargets) -> Result<LossVars> {
        if targets.dims != self.dims {
            return Err(Error::dim("loss targets do not match the context shape"));
        }
        let (c, t, h, w) = self.dims;
        let latent = tape.mse_const(recon, targets.latent.clone())?;
        let clip = tape.gather(recon, self.decode.clone(), c * t, h * w)?;
        let pixel = tape.mse_const(clip, targets.clip.clone())?;
        let mut feat: Option<Var> = None;
        for k in 0..t {
            let idx = frame_index(c, t, k, h, w);
            let target_frame: Vec<f64> = idx.iter().map(|&i| targets.clip[i]).collect();
            let target_feats = self.extractor.features(&target_frame, h, w);
            let sel = Arc::new(SparseRows::select(&idx, c * t * h * w));
            let mut x = tape.gather(clip, sel, c, h * w)?;
            let (mut hh, mut ww) = (h, w);
            for (kernel, tf) in self.extractor.layers.iter().zip(target_feats) {
                let y = tape.conv(x, kernel.clone(), hh, ww)?;
                x = tape.tanh(y);
                (hh, ww) = kernel.output_dims(hh, ww);
                let term = tape.mse_const(x, tf)?;
                feat = Some(match feat {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
        }
        let feat = tape.scale(feat.ok_or_else(|| Error::arg("clip has no frames"))?, 1.0 / t as f64);
        let perceptual = tape.add(pixel, feat)?;

        let terms = temporal_terms(self.dims, &targets.flow)?;
        let mut warp: Option<Var> = None;
        for (wmap, nmap) in &terms.terms {
            let a = tape.gather(clip, wmap.clone(), c, h * w)?;
            let b = tape.gather(clip, nmap.clone(), c, h * w)?;
            let term = tape.masked_l1(a, b, terms.mask.clone())?;
            warp = Some(match warp {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let warp = warp.ok_or_else(|| Error::arg("temporal loss needs at least two frames"))?;
        let lp = tape.add(latent, perceptual)?;
        let weighted = tape.scale(warp, self.lambda_warp);
        let total = tape.add(lp, weighted)?;
        Ok(LossVars {
            latent,
            perceptual,
            warp,
            total,
        })
    }

    pub fn report(&self, tape: &Tape, vars: &LossVars) -> Result<LossReport> {
        let r = total_loss(
            tape.scalar(vars.latent),
            tape.scalar(vars.perceptual),
            tape.scalar(vars.warp),
            self.lambda_warp,
        )?;
        Ok(LossReport {
            total: tape.scalar(vars.total),
            ..r
        })
    }
}

impl LossTargets {
    pub fn new(hq: &VideoClip, latent: &LatentGrid, flow: FlowField) -> Self {
        Self {
            latent: to_f64(latent.data()),
            clip: to_f64(hq.data()),
            dims: hq.dims(),
            flow,
        }
    }
}
