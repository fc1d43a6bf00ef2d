//! Synthetic clips with exact flow, and the two-stage degradation pipeline.
//!
//! Stage 1 applies one parameter set to every frame; stage 2 walks a Markov
//! chain over per-frame parameters. Each frame goes through blur, additive
//! Gaussian noise, bilinear down-up resampling and an 8x8 block-DCT
//! quantization proxy, `order` times.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, VideoClip};
use crate::rng::{self, StreamRng};

pub const MAX_BLUR: f64 = 3.0;
pub const MAX_NOISE: f64 = 0.2;
pub const MIN_QUALITY: u32 = 10;
/// Quality at or above this is treated as lossless.
pub const LOSSLESS_QUALITY: u32 = 95;
pub const DOWN_FACTORS: [u32; 3] = [1, 2, 4];
pub const MAX_MOTION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub down_factor: u32,
    pub jpeg_quality: u32,
    pub order: u32,
}

impl DegradationParams {
    pub const IDENTITY: Self = Self {
        blur_sigma: 0.0,
        noise_sigma: 0.0,
        down_factor: 1,
        jpeg_quality: LOSSLESS_QUALITY,
        order: 1,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_BLUR).contains(&self.blur_sigma) {
            return Err(Error::arg(format!("blur_sigma {} outside [0, {MAX_BLUR}]", self.blur_sigma)));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise_sigma) {
            return Err(Error::arg(format!("noise_sigma {} outside [0, {MAX_NOISE}]", self.noise_sigma)));
        }
        if !DOWN_FACTORS.contains(&self.down_factor) {
            return Err(Error::arg(format!("down_factor {} not in {{1,2,4}}", self.down_factor)));
        }
        if !(MIN_QUALITY..=LOSSLESS_QUALITY).contains(&self.jpeg_quality) {
            return Err(Error::arg(format!("jpeg_quality {} outside [10, 95]", self.jpeg_quality)));
        }
        if !(1..=2).contains(&self.order) {
            return Err(Error::arg(format!("order {} not in {{1,2}}", self.order)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0
            && self.noise_sigma == 0.0
            && self.down_factor == 1
            && self.jpeg_quality >= LOSSLESS_QUALITY
    }
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            noise_sigma: 0.03,
            down_factor: 2,
            jpeg_quality: 60,
            order: 2,
        }
    }
}

/// Sampling box for random initial parameters. The defaults are
/// noise-dominated: a short training run has little to gain on clips that
/// are already nearly clean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub blur_min: f64,
    pub blur_max: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub quality_min: u32,
    pub max_down: u32,
    pub max_order: u32,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            blur_min: 0.2,
            blur_max: 0.8,
            noise_min: 0.1,
            noise_max: 0.2,
            quality_min: 70,
            max_down: 1,
            max_order: 1,
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.blur_min && self.blur_min <= self.blur_max)
            || !(0.0 <= self.noise_min && self.noise_min <= self.noise_max)
        {
            return Err(Error::arg("degradation ranges need 0 <= min <= max"));
        }
        let probe = DegradationParams {
            blur_sigma: self.blur_max,
            noise_sigma: self.noise_max,
            down_factor: self.max_down,
            jpeg_quality: self.quality_min,
            order: self.max_order,
        };
        probe.validate()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DegradationParams {
        let downs: Vec<u32> = DOWN_FACTORS.iter().copied().filter(|&f| f <= self.max_down).collect();
        DegradationParams {
            blur_sigma: rng.random_range(self.blur_min..=self.blur_max),
            noise_sigma: rng.random_range(self.noise_min..=self.noise_max),
            down_factor: downs[rng.random_range(0..downs.len())],
            jpeg_quality: rng.random_range(self.quality_min..=LOSSLESS_QUALITY),
            order: rng.random_range(1..=self.max_order),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationTrace {
    pub stage: Stage,
    /// Perturbation probability (stage 2 only).
    pub p: Option<f64>,
    pub seed: u64,
    pub frames: Vec<DegradationParams>,
}

/// Per-pair displacement fields, `2 x H x W` each (x then y component).
/// `forward[i]` maps frame `i` toward frame `i + 1`, `backward[i]` the
/// reverse; warping frame `i + 1` with `forward[i]` reproduces frame `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub forward: Vec<Vec<f32>>,
    pub backward: Vec<Vec<f32>>,
}

impl FlowField {
    pub fn constant(pairs: usize, height: usize, width: usize, motion: (f64, f64)) -> Self {
        let plane = |dx: f64, dy: f64| {
            let mut v = vec![dx as f32; height * width];
            v.extend(core::iter::repeat_n(dy as f32, height * width));
            v
        };
        Self {
            height,
            width,
            forward: (0..pairs).map(|_| plane(motion.0, motion.1)).collect(),
            backward: (0..pairs).map(|_| plane(-motion.0, -motion.1)).collect(),
        }
    }

    pub fn pairs(&self) -> usize {
        self.forward.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.forward.len() != self.backward.len() {
            return Err(Error::dim("forward and backward flow counts differ"));
        }
        let n = 2 * self.height * self.width;
        for f in self.forward.iter().chain(&self.backward) {
            if f.len() != n {
                return Err(Error::dim(format!("flow plane has {} values, expected {n}", f.len())));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("flow contains non-finite values"));
            }
        }
        Ok(())
    }

    /// Forward and backward fields swapped and pair order reversed: the
    /// flow of the time-reversed clip.
    pub fn reversed(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            forward: self.backward.iter().rev().cloned().collect(),
            backward: self.forward.iter().rev().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    /// Mixed sinusoids plus Gaussian blobs squashed into `[0, 1]`.
    #[default]
    Texture,
    /// A diagonal linear ramp; handy for interpolation checks.
    Ramp,
}

struct Texture {
    waves: Vec<[f64; 4]>,
    blobs: Vec<[f64; 4]>,
}

impl Texture {
    fn new(rng: &mut StreamRng, height: usize, width: usize) -> Self {
        let waves = (0..4)
            .map(|_| {
                let period = rng.random_range(4.0..12.0);
                let angle = rng.random_range(0.0..PI);
                let k = 2.0 * PI / period;
                [k * libm::cos(angle), k * libm::sin(angle), rng.random_range(0.0..2.0 * PI), rng.random_range(0.2..0.5)]
            })
            .collect();
        let span = (height.max(width) as f64) * 2.0;
        let blobs = (0..6)
            .map(|_| {
                [
                    rng.random_range(-span / 2.0..span),
                    rng.random_range(-span / 2.0..span),
                    rng.random_range(1.5..4.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        Self { waves, blobs }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        for w in &self.waves {
            v += w[3] * libm::sin(w[0] * x + w[1] * y + w[2]);
        }
        for b in &self.blobs {
            let (dx, dy) = (x - b[0], y - b[1]);
            v += b[3] * libm::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
        }
        0.5 + 0.5 * libm::tanh(v)
    }
}

/// Deterministic clip whose content translates by `motion = (dx, dy)`
/// pixels per frame, with its exact flow.
pub fn gen_clip(
    kind: ClipKind,
    dims: (usize, usize, usize, usize),
    motion: (f64, f64),
    seed: u64,
) -> Result<(VideoClip, FlowField)> {
    let (c, t, h, w) = dims;
    if c == 0 || t == 0 || h == 0 || w == 0 {
        return Err(Error::arg("clip dims must be positive"));
    }
    if !(motion.0.abs() <= MAX_MOTION && motion.1.abs() <= MAX_MOTION) {
        return Err(Error::arg(format!("motion {motion:?} exceeds {MAX_MOTION} px/frame")));
    }
    let mut data = Vec::with_capacity(c * t * h * w);
    let textures: Vec<Texture> = (0..c)
        .map(|ch| Texture::new(&mut rng::stream(seed, "clip-texture", ch as u64), h, w))
        .collect();
    for tex in &textures {
        for k in 0..t {
            let (ox, oy) = (k as f64 * motion.0, k as f64 * motion.1);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = (x as f64 - ox, y as f64 - oy);
                    let v = match kind {
                        ClipKind::Texture => tex.eval(sx, sy),
                        ClipKind::Ramp => (sx + sy + (h + w) as f64 * 2.0) / ((h + w) as f64 * 4.0),
                    };
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let clip = VideoClip::new(c, t, h, w, data)?;
    Ok((clip, FlowField::constant(t.saturating_sub(1), h, w, motion)))
}

/// Normalized discrete Gaussian taps `k[-r..=r]`, `r = max(1, ceil(3 sigma))`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (libm::ceil(3.0 * sigma) as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let x = i as f64 - r as f64;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur_plane(p: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * p[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            p[y * w + x] = acc;
        }
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
fn resample(p: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = libm::floor(fy) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = libm::floor(fx) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
            let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
            out[y * nw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Bilinear down-then-up resampling of a frame by an integer factor.
pub fn down_up(frame: &Frame, factor: usize) -> Result<Frame> {
    let (h, w) = (frame.height, frame.width);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::arg(format!("frame {h}x{w} not divisible by factor {factor}")));
    }
    let mut data = Vec::with_capacity(frame.data.len());
    for c in 0..frame.channels {
        let p: Vec<f64> = frame.plane(c).iter().map(|&v| f64::from(v)).collect();
        let small = resample(&p, h, w, h / factor, w / factor);
        let big = resample(&small, h / factor, w / factor, h, w);
        data.extend(big.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
    }
    Frame::new(frame.channels, h, w, data)
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn quant_table(quality: u32) -> [f64; 64] {
    let q = f64::from(quality.clamp(1, 100));
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, base) in t.iter_mut().zip(LUMA_TABLE) {
        *o = libm::floor((base * scale + 50.0) / 100.0).max(1.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { libm::sqrt(1.0f64 / 8.0) } else { libm::sqrt(2.0f64 / 8.0) };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * libm::cos((2 * x + 1) as f64 * u as f64 * PI / 16.0);
        }
    }
    b
}

/// Quantizes one plane (values scaled to 0..255) in 8x8 DCT blocks.
/// Partial edge blocks are padded by edge replication.
fn quantize_plane(p: &mut [f64], h: usize, w: usize, quality: u32) {
    let table = quant_table(quality);
    let b = dct_basis();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                    *v = p[yy * w + xx] * 255.0 - 128.0;
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += b[u][y] * b[v][x] * block[y][x];
                        }
                    }
                    let q = table[u * 8 + v];
                    coef[u][v] = libm::round(acc / q) * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            acc += b[u][y] * b[v][x] * coef[u][v];
                        }
                    }
                    p[(by + y) * w + bx + x] = (acc + 128.0) / 255.0;
                }
            }
        }
    }
}

/// Block-DCT compression proxy. Three-channel frames quantize only luma
/// (BT.601 YCbCr); other channel counts quantize every channel.
pub fn compress(planes: &mut [Vec<f64>], h: usize, w: usize, quality: u32) {
    if quality >= LOSSLESS_QUALITY {
        return;
    }
    if planes.len() == 3 {
        let n = h * w;
        let mut luma = vec![0.0; n];
        let mut cb = vec![0.0; n];
        let mut cr = vec![0.0; n];
        for i in 0..n {
            let (r, g, b) = (planes[0][i], planes[1][i], planes[2][i]);
            luma[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
            cr[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        }
        quantize_plane(&mut luma, h, w, quality);
        for i in 0..n {
            planes[0][i] = luma[i] + 1.402 * cr[i];
            planes[1][i] = luma[i] - 0.344_136 * cb[i] - 0.714_136 * cr[i];
            planes[2][i] = luma[i] + 1.772 * cb[i];
        }
    } else {
        for p in planes.iter_mut() {
            quantize_plane(p, h, w, quality);
        }
    }
}

/// Blur, noise, down-up resampling and compression, `order` times, with
/// clamping to `[0, 1]` after each pass. Identity stages are skipped, so
/// identity parameters return the input unchanged.
pub fn apply_second_order<R: Rng>(frame: &Frame, params: &DegradationParams, rng: &mut R) -> Result<Frame> {
    params.validate()?;
    let (h, w) = (frame.height, frame.width);
    let f = params.down_factor as usize;
    if h % f != 0 || w % f != 0 {
        return Err(Error::arg(format!("frame {h}x{w} not divisible by down factor {f}")));
    }
    if frame.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("frame values outside [0, 1]".into()));
    }
    if params.is_identity() {
        return Ok(frame.clone());
    }
    let mut planes: Vec<Vec<f64>> = (0..frame.channels)
        .map(|c| frame.plane(c).iter().map(|&v| f64::from(v)).collect())
        .collect();
    for _ in 0..params.order {
        if params.blur_sigma > 0.0 {
            for p in planes.iter_mut() {
                blur_plane(p, h, w, params.blur_sigma);
            }
        }
        if params.noise_sigma > 0.0 {
            for p in planes.iter_mut() {
                for v in p.iter_mut() {
                    *v += params.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        if f > 1 {
            for p in planes.iter_mut() {
                let small = resample(p, h, w, h / f, w / f);
                *p = resample(&small, h / f, w / f, h, w);
            }
        }
        compress(&mut planes, h, w, params.jpeg_quality);
        for p in planes.iter_mut() {
            p.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    let data = planes.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
    Frame::new(frame.channels, h, w, data)
}

fn noise_stream(seed: u64, frame: usize) -> StreamRng {
    rng::stream(seed, "degrade-frame", frame as u64)
}

fn degrade_frames(clip: &VideoClip, params: &[DegradationParams], seed: u64) -> Result<VideoClip> {
    let frames = (0..clip.frames())
        .map(|k| apply_second_order(&clip.frame(k), &params[k], &mut noise_stream(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_frames(&frames)
}

/// Temporally consistent degradation: one parameter set for every frame,
/// independent noise per frame.
pub fn degrade_stage1(
    clip: &VideoClip,
    params: &DegradationParams,
    seed: u64,
) -> Result<(VideoClip, DegradationTrace)> {
    params.validate()?;
    let frames = vec![*params; clip.frames()];
    let out = degrade_frames(clip, &frames, seed)?;
    Ok((
        out,
        DegradationTrace {
            stage: Stage::S1,
            p: None,
            seed,
            frames,
        },
    ))
}

fn jitter(rng: &mut StreamRng, x: f64, max: f64) -> f64 {
    let u = rng.random_range(-0.25..=0.25);
    let base = if x > 0.0 { x } else { 0.25 * max };
    (x + u * base).clamp(0.0, max)
}

/// Parameters of frame `k` given frame `k - 1`: kept with probability
/// `1 - p`, otherwise perturbed (continuous fields by up to +-25%, quality
/// likewise, down factor occasionally resampled) until they differ.
pub fn next_params(prev: &DegradationParams, p: f64, seed: u64, k: usize) -> Result<DegradationParams> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("perturbation probability {p} outside [0, 1]")));
    }
    let mut r = rng::stream(seed, "degrade-chain", k as u64);
    if r.random::<f64>() >= p {
        return Ok(*prev);
    }
    for _ in 0..64 {
        let mut next = *prev;
        next.blur_sigma = jitter(&mut r, prev.blur_sigma, MAX_BLUR);
        next.noise_sigma = jitter(&mut r, prev.noise_sigma, MAX_NOISE);
        let q = f64::from(prev.jpeg_quality);
        next.jpeg_quality = libm::round(q + r.random_range(-0.25..=0.25) * q)
            .clamp(f64::from(MIN_QUALITY), f64::from(LOSSLESS_QUALITY)) as u32;
        if r.random::<f64>() < 0.25 {
            next.down_factor = DOWN_FACTORS[r.random_range(0..DOWN_FACTORS.len())];
        }
        if next != *prev {
            return Ok(next);
        }
    }
    Err(Error::Internal("could not perturb degradation parameters".into()))
}

/// The stage-2 parameter chain for `frames` frames.
pub fn stage2_chain(init: &DegradationParams, frames: usize, p: f64, seed: u64) -> Result<Vec<DegradationParams>> {
    init.validate()?;
    let mut out = Vec::with_capacity(frames);
    if frames > 0 {
        out.push(*init);
    }
    for k in 1..frames {
        let next = next_params(&out[k - 1], p, seed, k)?;
        out.push(next);
    }
    Ok(out)
}

/// Sequentially perturbed degradation along a Markov chain of parameters.
pub fn degrade_stage2(
    clip: &VideoClip,
    init: &DegradationParams,
    p: f64,
    seed: u64,
) -> Result<(VideoClip, DegradationTrace)> {
    let frames = stage2_chain(init, clip.frames(), p, seed)?;
    let out = degrade_frames(clip, &frames, seed)?;
    Ok((
        out,
        DegradationTrace {
            stage: Stage::S2,
            p: Some(p),
            seed,
            frames,
        },
    ))
}

/// Applies a recorded trace (either stage) to a clip.
pub fn replay(clip: &VideoClip, trace: &DegradationTrace) -> Result<VideoClip> {
    if trace.frames.len() != clip.frames() {
        return Err(Error::dim(format!(
            "trace has {} frames, clip has {}",
            trace.frames.len(),
            clip.frames()
        )));
    }
    degrade_frames(clip, &trace.frames, trace.seed)
}

/// Plain down-up resampling of every frame; the interpolation baseline.
pub fn resample_baseline(clip: &VideoClip, factor: usize) -> Result<VideoClip> {
    let frames = (0..clip.frames())
        .map(|k| down_up(&clip.frame(k), factor))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_frames(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texture(seed: u64) -> VideoClip {
        gen_clip(ClipKind::Texture, (3, 6, 16, 16), (1.0, 0.0), seed).unwrap().0
    }

    #[test]
    fn static_clip_and_zero_flow() {
        let (clip, flow) = gen_clip(ClipKind::Texture, (3, 4, 8, 8), (0.0, 0.0), 3).unwrap();
        for k in 1..4 {
            assert_eq!(clip.frame(k), clip.frame(0));
        }
        assert!(flow.forward.iter().chain(&flow.backward).all(|p| p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn translation_shifts_columns() {
        let (clip, flow) = gen_clip(ClipKind::Texture, (2, 3, 8, 10), (1.0, 0.0), 5).unwrap();
        for k in 0..2 {
            for c in 0..2 {
                for y in 0..8 {
                    for x in 1..10 {
                        assert_eq!(clip.get(c, k + 1, y, x), clip.get(c, k, y, x - 1));
                    }
                }
            }
        }
        assert!(flow.forward[0][..80].iter().all(|&v| v == 1.0));
        assert!(flow.forward[0][80..].iter().all(|&v| v == 0.0));
        assert!(flow.backward[1][..80].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let a = gen_clip(ClipKind::Texture, (3, 2, 8, 8), (0.5, -1.5), 9).unwrap();
        let b = gen_clip(ClipKind::Texture, (3, 2, 8, 8), (0.5, -1.5), 9).unwrap();
        assert_eq!(a, b);
        let c = gen_clip(ClipKind::Texture, (3, 2, 8, 8), (0.5, -1.5), 10).unwrap();
        assert_ne!(a.0, c.0);
        assert!(gen_clip(ClipKind::Texture, (3, 2, 8, 8), (3.5, 0.0), 9).is_err());
    }

    #[test]
    fn identity_params_are_fixed_point() {
        let clip = texture(1);
        let (out, trace) = degrade_stage1(&clip, &DegradationParams::IDENTITY, 4).unwrap();
        assert_eq!(out, clip);
        assert!(trace.frames.iter().all(|p| *p == DegradationParams::IDENTITY));
        let id2 = DegradationParams { order: 2, ..DegradationParams::IDENTITY };
        let mut r = rng::stream(0, "t", 0);
        assert_eq!(apply_second_order(&clip.frame(0), &id2, &mut r).unwrap(), clip.frame(0));
    }

    #[test]
    fn noise_standard_deviation() {
        let frame = Frame::new(1, 64, 64, vec![0.5; 64 * 64]).unwrap();
        let params = DegradationParams {
            noise_sigma: 0.05,
            ..DegradationParams::IDENTITY
        };
        let mut r = rng::stream(11, "noise-test", 0);
        let out = apply_second_order(&frame, &params, &mut r).unwrap();
        let n = out.data.len() as f64;
        let diffs: Vec<f64> = out.data.iter().map(|&v| f64::from(v) - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let std = libm::sqrt(diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n);
        assert!((std - 0.05).abs() < 0.01, "{std}");
    }

    #[test]
    fn blur_impulse_response() {
        let (h, w) = (21, 21);
        let mut data = vec![0.0f32; h * w];
        data[10 * w + 10] = 1.0;
        let frame = Frame::new(1, h, w, data).unwrap();
        let params = DegradationParams {
            blur_sigma: 1.0,
            ..DegradationParams::IDENTITY
        };
        let mut r = rng::stream(0, "t", 0);
        let out = apply_second_order(&frame, &params, &mut r).unwrap();
        // direct evaluation: g(x) = exp(-x^2/2) / sum_{|j|<=3} exp(-j^2/2)
        let norm: f64 = (-3i32..=3).map(|j| libm::exp(-(j * j) as f64 / 2.0)).sum();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as i32 - 10, x as i32 - 10);
                let expected = if dy.abs() <= 3 && dx.abs() <= 3 {
                    libm::exp(-(dx * dx + dy * dy) as f64 / 2.0) / (norm * norm)
                } else {
                    0.0
                };
                assert!((f64::from(out.at(0, y, x)) - expected).abs() < 1e-7, "({y},{x})");
            }
        }
    }

    #[test]
    fn down_up_of_constant_is_constant() {
        let frame = Frame::new(2, 8, 8, vec![0.3; 128]).unwrap();
        let out = down_up(&frame, 4).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(down_up(&frame, 3).is_err());
    }

    #[test]
    fn compression_blocks_and_lossless_flag() {
        let clip = texture(2);
        let frame = clip.frame(0);
        let mut planes: Vec<Vec<f64>> = (0..3).map(|c| frame.plane(c).iter().map(|&v| f64::from(v)).collect()).collect();
        let orig = planes.clone();
        compress(&mut planes, 16, 16, 95);
        assert_eq!(planes, orig);
        compress(&mut planes, 16, 16, 10);
        let err: f64 = planes.iter().flatten().zip(orig.iter().flatten()).map(|(a, b)| (a - b).abs()).sum();
        assert!(err > 1.0);
        // a constant block survives quantization (only DC is non-zero)
        let mut flat = vec![vec![0.5; 64]];
        compress(&mut flat, 8, 8, 10);
        let dc_q = quant_table(10)[0];
        let dc = libm::round((0.5 * 255.0 - 128.0) * 8.0 / dc_q) * dc_q / 8.0;
        for v in &flat[0] {
            assert!((v - (dc + 128.0) / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_shares_params_but_not_noise() {
        let (clip, _) = gen_clip(ClipKind::Texture, (3, 4, 8, 8), (0.0, 0.0), 6).unwrap();
        let params = DegradationParams::default();
        let (out, trace) = degrade_stage1(&clip, &params, 17).unwrap();
        assert_eq!(trace.stage, Stage::S1);
        assert!(trace.frames.iter().all(|p| *p == params));
        assert_ne!(out.frame(0), out.frame(1));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(degrade_stage1(&clip, &params, 17).unwrap().0, out);
        assert_eq!(replay(&clip, &trace).unwrap(), out);
    }

    #[test]
    fn stage2_degenerate_chains() {
        let clip = texture(3);
        let params = DegradationParams::default();
        let (s1, _) = degrade_stage1(&clip, &params, 8).unwrap();
        let (s2, trace) = degrade_stage2(&clip, &params, 0.0, 8).unwrap();
        assert!(trace.frames.iter().all(|p| *p == params));
        assert_eq!(s1, s2);
        let (_, t1) = degrade_stage2(&clip, &params, 1.0, 8).unwrap();
        for k in 1..t1.frames.len() {
            assert_ne!(t1.frames[k], t1.frames[k - 1]);
        }
        assert!(degrade_stage2(&clip, &params, 1.5, 8).is_err());
    }

    #[test]
    fn stage2_is_markov() {
        let clip = texture(4);
        let (_, trace) = degrade_stage2(&clip, &DegradationParams::default(), 0.5, 21).unwrap();
        for k in 1..trace.frames.len() {
            assert_eq!(next_params(&trace.frames[k - 1], 0.5, 21, k).unwrap(), trace.frames[k]);
        }
    }

    #[test]
    fn change_point_frequency() {
        // pooled over 20 seeds; single chains have a binomial spread of ~0.05
        let mut changes = 0;
        for seed in 0..20 {
            let chain = stage2_chain(&DegradationParams::default(), 100, 0.3, seed).unwrap();
            changes += chain.windows(2).filter(|w| w[0] != w[1]).count();
        }
        let freq = changes as f64 / (20.0 * 99.0);
        assert!((freq - 0.3).abs() <= 0.1, "{freq}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn chains_stay_in_range(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let chain = stage2_chain(&DegradationParams::default(), 30, p, seed).unwrap();
            for params in &chain {
                prop_assert!(params.validate().is_ok());
            }
        }

        #[test]
        fn outputs_stay_in_unit_range(seed in any::<u64>()) {
            let mut r = rng::stream(seed, "prop", 0);
            let params = DegradationRanges { max_down: 4, ..DegradationRanges::default() }.sample(&mut r);
            let clip = gen_clip(ClipKind::Texture, (3, 2, 8, 8), (1.0, 1.0), seed).unwrap().0;
            let (out, _) = degrade_stage1(&clip, &params, seed).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
