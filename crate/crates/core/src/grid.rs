//! Dense video tensors, 3D token grids and the space-to-depth mapping
//! between pixel space and latent space.
//!
//! Pixel clips are stored channel-major (`C, T, H, W`). Latent grids are
//! stored token-major: one row of `dim` channels per token, tokens flattened
//! row-major over `(t, h, w)`. Inside a token, channel `c` of the source clip
//! and sub-pixel offset `(dy, dx)` land at `c * r * r + dy * r + dx`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a token grid: frames, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid3 {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid3 {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    /// Number of tokens `S = T * H' * W'`.
    pub const fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Tokens per frame.
    pub const fn frame_tokens(&self) -> usize {
        self.height * self.width
    }

    /// Row-major flat index of `(t, h, w)`.
    pub fn index(&self, t: usize, h: usize, w: usize) -> Result<usize> {
        if t >= self.frames || h >= self.height || w >= self.width {
            return Err(Error::Index(format!(
                "({t},{h},{w}) outside grid ({},{},{})",
                self.frames, self.height, self.width
            )));
        }
        Ok(self.index_unchecked(t, h, w))
    }

    #[inline]
    pub(crate) const fn index_unchecked(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.height + h) * self.width + w
    }

    /// Inverse of [`Grid3::index`].
    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let w = idx % self.width;
        let rest = idx / self.width;
        (rest / self.height, rest % self.height, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens() == 0 {
            return Err(Error::dim("grid has a zero extent"));
        }
        Ok(())
    }
}

/// `token_index(t, h, w, grid)`.
pub fn token_index(t: usize, h: usize, w: usize, grid: &Grid3) -> Result<usize> {
    grid.index(t, h, w)
}

/// A `C x T x H x W` clip with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoClip {
    /// Validating constructor: length must match and every value must be a
    /// finite number inside `[0, 1]`.
    pub fn new(
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_len(channels, frames, height, width, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("clip value {i} is not finite")));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "clip value {i} = {} outside [0,1]",
                data[i]
            )));
        }
        Ok(Self {
            channels,
            frames,
            height,
            width,
            data,
        })
    }

    /// Builds a clip from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        check_len(channels, frames, height, width, data.len())?;
        for (i, v) in data.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(format!("clip value {i} is not finite")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            channels,
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
            data: vec![0.0; channels * frames * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.frames, self.height, self.width)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + t) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, t, y, x)]
    }

    /// Copies frame `t` out as a `C x H x W` image.
    pub fn frame(&self, t: usize) -> Frame {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let start = self.offset(c, t, 0, 0);
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        Frame {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Reassembles a clip from equally sized frames (values clamped).
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::arg("cannot build a clip from zero frames"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = vec![0.0f32; c * frames.len() * h * w];
        for (t, f) in frames.iter().enumerate() {
            if (f.channels, f.height, f.width) != (c, h, w) {
                return Err(Error::dim("frames differ in shape"));
            }
            for ch in 0..c {
                let dst = ((ch * frames.len() + t) * h) * w;
                data[dst..dst + h * w].copy_from_slice(&f.data[ch * h * w..(ch + 1) * h * w]);
            }
        }
        Self::from_clamped(c, frames.len(), h, w, data)
    }
}

fn check_len(c: usize, t: usize, h: usize, w: usize, len: usize) -> Result<()> {
    if c == 0 || t == 0 || h == 0 || w == 0 {
        return Err(Error::dim("clip has a zero extent"));
    }
    if c * t * h * w != len {
        return Err(Error::dim(format!(
            "clip {c}x{t}x{h}x{w} needs {} values, got {len}",
            c * t * h * w
        )));
    }
    Ok(())
}

/// A single `C x H x W` frame. Values are not range-checked, so frames can
/// carry intermediate results of the degradation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::dim("frame data length mismatch"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Token-major latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    dim: usize,
    grid: Grid3,
    factor: usize,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(dim: usize, grid: Grid3, factor: usize, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if dim == 0 || data.len() != dim * grid.tokens() {
            return Err(Error::dim(format!(
                "latent of {} tokens x {dim} channels needs {} values, got {}",
                grid.tokens(),
                dim * grid.tokens(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("latent contains non-finite values"));
        }
        Ok(Self {
            dim,
            grid,
            factor,
            data,
        })
    }

    pub fn zeros(dim: usize, grid: Grid3, factor: usize) -> Self {
        Self {
            dim,
            grid,
            factor,
            data: vec![0.0; dim * grid.tokens()],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn grid(&self) -> Grid3 {
        self.grid
    }
    pub fn spatial_factor(&self) -> usize {
        self.factor
    }
    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.dim == other.dim && self.grid == other.grid
    }

    /// Applies `f` elementwise against another latent of the same shape.
    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::dim("latent shapes differ"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        LatentGrid::new(self.dim, self.grid, self.factor, data)
    }
}

/// For every latent element (token-major order), the flat index of the pixel
/// it came from in a channel-major clip of shape `(channels, grid.frames,
/// grid.height * r, grid.width * r)`.
pub fn unshuffle_permutation(channels: usize, grid: Grid3, r: usize) -> Vec<usize> {
    let (h, w) = (grid.height * r, grid.width * r);
    let dim = channels * r * r;
    let mut perm = Vec::with_capacity(dim * grid.tokens());
    for t in 0..grid.frames {
        for gy in 0..grid.height {
            for gx in 0..grid.width {
                for c in 0..channels {
                    for dy in 0..r {
                        for dx in 0..r {
                            let (y, x) = (gy * r + dy, gx * r + dx);
                            perm.push(((c * grid.frames + t) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(perm.len(), dim * grid.tokens());
    perm
}

/// Space-to-depth: every `r x r` block of a frame becomes one token with
/// `C * r^2` channels.
pub fn pixel_unshuffle(clip: &VideoClip, r: usize) -> Result<LatentGrid> {
    if r == 0 {
        return Err(Error::arg("unshuffle factor must be at least 1"));
    }
    let (c, t, h, w) = clip.dims();
    if h % r != 0 || w % r != 0 {
        return Err(Error::dim(format!(
            "frame {h}x{w} not divisible by factor {r}"
        )));
    }
    let grid = Grid3::new(t, h / r, w / r);
    let perm = unshuffle_permutation(c, grid, r);
    let data = perm.iter().map(|&p| clip.data[p]).collect();
    Ok(LatentGrid {
        dim: c * r * r,
        grid,
        factor: r,
        data,
    })
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`]. Values are
/// clamped into `[0, 1]` so that the result is a valid clip; for latents
/// produced by `pixel_unshuffle` this is a no-op.
pub fn pixel_shuffle(latent: &LatentGrid, r: usize) -> Result<VideoClip> {
    if r == 0 {
        return Err(Error::arg("shuffle factor must be at least 1"));
    }
    if latent.dim % (r * r) != 0 {
        return Err(Error::dim(format!(
            "latent dim {} not divisible by r^2 = {}",
            latent.dim,
            r * r
        )));
    }
    let c = latent.dim / (r * r);
    let g = latent.grid;
    let perm = unshuffle_permutation(c, g, r);
    let mut data = vec![0.0f32; latent.data.len()];
    for (src, &dst) in perm.iter().enumerate() {
        data[dst] = latent.data[src];
    }
    VideoClip::from_clamped(c, g.frames, g.height * r, g.width * r, data)
}
