//! Global, intra-frame and window attention over flattened 3D token grids.
//!
//! All three patterns share one row kernel: a query attends to a [`KeySet`]
//! (all tokens, the tokens of its own frame, or a clipped spatio-temporal
//! box), logits are max-shifted before exponentiation and every reduction
//! runs left to right in `f64`. Localized patterns never touch keys outside
//! their set, so their cost scales with the key-set size rather than `S`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;

/// Scalar storage type accepted by the attention kernels. Accumulation is
/// always done in `f64`.
pub trait Elem: Copy + Default + PartialEq + core::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Global,
    Intra,
    Window,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Global, Pattern::Intra, Pattern::Window];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Global => "global",
            Pattern::Intra => "intra",
            Pattern::Window => "window",
        }
    }
}

/// Window extents `(P_t, P_h, P_w)`; each must be odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct WindowSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        for (name, p) in [("P_t", t), ("P_h", h), ("P_w", w)] {
            if p == 0 || p % 2 == 0 {
                return Err(Error::arg(format!(
                    "window extent {name} = {p} must be odd and positive"
                )));
            }
        }
        Ok(Self { t, h, w })
    }

    /// Smallest window that covers every token of `grid` from every query.
    pub fn covering(grid: &Grid3) -> Self {
        Self {
            t: 2 * grid.frames - 1,
            h: 2 * grid.height - 1,
            w: 2 * grid.width - 1,
        }
    }

    pub fn radii(&self) -> (usize, usize, usize) {
        (self.t / 2, self.h / 2, self.w / 2)
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { t: 3, h: 5, w: 5 }
    }
}

impl TryFrom<[usize; 3]> for WindowSpec {
    type Error = Error;
    fn try_from(v: [usize; 3]) -> Result<Self> {
        WindowSpec::new(v[0], v[1], v[2])
    }
}

impl From<WindowSpec> for [usize; 3] {
    fn from(s: WindowSpec) -> Self {
        [s.t, s.h, s.w]
    }
}

fn clipped(center: usize, radius: usize, extent: usize) -> Range<usize> {
    center.saturating_sub(radius)..(center + radius + 1).min(extent)
}

/// The keys a query may attend to, enumerated in ascending token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySet {
    Span(Range<usize>),
    Box {
        grid: Grid3,
        t: Range<usize>,
        h: Range<usize>,
        w: Range<usize>,
    },
}

impl KeySet {
    pub fn for_query(
        pattern: Pattern,
        spec: Option<&WindowSpec>,
        grid: &Grid3,
        query: usize,
    ) -> Result<Self> {
        if query >= grid.tokens() {
            return Err(Error::Index(format!(
                "query {query} outside {} tokens",
                grid.tokens()
            )));
        }
        Ok(match pattern {
            Pattern::Global => KeySet::Span(0..grid.tokens()),
            Pattern::Intra => {
                let f = grid.frame_tokens();
                let start = (query / f) * f;
                KeySet::Span(start..start + f)
            }
            Pattern::Window => {
                let spec = spec.ok_or_else(|| Error::arg("window pattern needs a window spec"))?;
                let (t, h, w) = grid.coords(query);
                let (rt, rh, rw) = spec.radii();
                KeySet::Box {
                    grid: *grid,
                    t: clipped(t, rt, grid.frames),
                    h: clipped(h, rh, grid.height),
                    w: clipped(w, rw, grid.width),
                }
            }
        })
    }

    pub fn len(&self) -> usize {
        match self {
            KeySet::Span(r) => r.len(),
            KeySet::Box { t, h, w, .. } => t.len() * h.len() * w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, j: usize) -> bool {
        match self {
            KeySet::Span(r) => r.contains(&j),
            KeySet::Box { grid, t, h, w } => {
                if j >= grid.tokens() {
                    return false;
                }
                let (jt, jh, jw) = grid.coords(j);
                t.contains(&jt) && h.contains(&jh) && w.contains(&jw)
            }
        }
    }

    pub fn iter(&self) -> KeyIter<'_> {
        match self {
            KeySet::Span(r) => KeyIter {
                set: self,
                t: 0,
                h: 0,
                w: r.start,
                done: r.is_empty(),
            },
            KeySet::Box { t, h, w, .. } => KeyIter {
                set: self,
                t: t.start,
                h: h.start,
                w: w.start,
                done: t.is_empty() || h.is_empty() || w.is_empty(),
            },
        }
    }
}

pub struct KeyIter<'a> {
    set: &'a KeySet,
    t: usize,
    h: usize,
    w: usize,
    done: bool,
}

impl Iterator for KeyIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.done {
            return None;
        }
        match self.set {
            KeySet::Span(r) => {
                let j = self.w;
                self.w += 1;
                self.done = self.w >= r.end;
                Some(j)
            }
            KeySet::Box { grid, t, h, w } => {
                let j = grid.index_unchecked(self.t, self.h, self.w);
                self.w += 1;
                if self.w == w.end {
                    self.w = w.start;
                    self.h += 1;
                    if self.h == h.end {
                        self.h = h.start;
                        self.t += 1;
                        self.done = self.t == t.end;
                    }
                }
                Some(j)
            }
        }
    }
}

/// Clipped window neighborhood of `(t, h, w)`, ordered by token index.
pub fn window_neighborhood(
    t: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
    grid: &Grid3,
) -> Result<Vec<usize>> {
    let q = grid.index(t, h, w)?;
    Ok(KeySet::for_query(Pattern::Window, Some(spec), grid, q)?
        .iter()
        .collect())
}

/// Row-major view of one head inside a wider `S x (heads * d)` buffer.
#[derive(Clone, Copy)]
pub(crate) struct HeadView<'a, F> {
    pub data: &'a [F],
    pub stride: usize,
    pub offset: usize,
}

impl<'a, F> HeadView<'a, F> {
    pub fn dense(data: &'a [F], d: usize) -> Self {
        Self {
            data,
            stride: d,
            offset: 0,
        }
    }

    #[inline]
    pub fn row(&self, i: usize, d: usize) -> &'a [F] {
        let s = i * self.stride + self.offset;
        &self.data[s..s + d]
    }
}

#[inline]
fn dot<F: Elem>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x.to_f64() * y.to_f64())
}

/// Softmax weights of query `i` over `keys`, written into `weights`.
pub(crate) fn softmax_row<F: Elem>(
    q: &HeadView<'_, F>,
    k: &HeadView<'_, F>,
    d: usize,
    i: usize,
    keys: &KeySet,
    weights: &mut Vec<f64>,
) {
    let scale = 1.0 / libm::sqrt(d as f64);
    let qi = q.row(i, d);
    weights.clear();
    let mut max = f64::NEG_INFINITY;
    for j in keys.iter() {
        let l = dot(qi, k.row(j, d)) * scale;
        max = max.max(l);
        weights.push(l);
    }
    let mut sum = 0.0;
    for w in weights.iter_mut() {
        *w = libm::exp(*w - max);
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
}

/// Runs one head for every query. `out` receives `S` rows of width `d`
/// at the view's offset and stride. When `probs` is given, the softmax
/// weights of every query are appended in query order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head<F: Elem>(
    q: HeadView<'_, F>,
    k: HeadView<'_, F>,
    v: HeadView<'_, F>,
    d: usize,
    grid: &Grid3,
    pattern: Pattern,
    spec: Option<&WindowSpec>,
    out: &mut [F],
    out_stride: usize,
    out_offset: usize,
    mut probs: Option<&mut Vec<f64>>,
) -> Result<()> {
    let mut weights = Vec::new();
    let mut acc = vec![0.0f64; d];
    for i in 0..grid.tokens() {
        let keys = KeySet::for_query(pattern, spec, grid, i)?;
        softmax_row(&q, &k, d, i, &keys, &mut weights);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &p) in keys.iter().zip(&weights) {
            for (a, &vj) in acc.iter_mut().zip(v.row(j, d)) {
                *a += p * vj.to_f64();
            }
        }
        let o = &mut out[i * out_stride + out_offset..i * out_stride + out_offset + d];
        for (dst, &a) in o.iter_mut().zip(&acc) {
            *dst = F::from_f64(a);
        }
        if let Some(p) = probs.as_deref_mut() {
            p.extend_from_slice(&weights);
        }
    }
    Ok(())
}

/// Per-head query, key and value matrices (`S x d`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors<F = f32> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    dim: usize,
    grid: Grid3,
}

impl<F: Elem> HeadTensors<F> {
    pub fn new(q: Vec<F>, k: Vec<F>, v: Vec<F>, dim: usize, grid: Grid3) -> Result<Self> {
        grid.validate()?;
        let n = grid.tokens() * dim;
        if dim == 0 || q.len() != n || k.len() != n || v.len() != n {
            return Err(Error::dim(format!(
                "Q/K/V must all be {} x {dim}",
                grid.tokens()
            )));
        }
        let finite = |x: &F| x.to_f64().is_finite();
        if !(q.iter().all(finite) && k.iter().all(finite) && v.iter().all(finite)) {
            return Err(Error::numeric("Q/K/V contain non-finite values"));
        }
        Ok(Self { q, k, v, dim, grid })
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }
    pub fn head_dim(&self) -> usize {
        self.dim
    }
    pub fn grid(&self) -> Grid3 {
        self.grid
    }
    pub fn q(&self) -> &[F] {
        &self.q
    }
    pub fn k(&self) -> &[F] {
        &self.k
    }
    pub fn v(&self) -> &[F] {
        &self.v
    }
}

/// Output of the given pattern for every query (`S x d`).
pub fn attend<F: Elem>(
    ht: &HeadTensors<F>,
    pattern: Pattern,
    spec: Option<&WindowSpec>,
) -> Result<Vec<F>> {
    let d = ht.dim;
    let mut out = vec![F::default(); ht.q.len()];
    attend_head(
        HeadView::dense(&ht.q, d),
        HeadView::dense(&ht.k, d),
        HeadView::dense(&ht.v, d),
        d,
        &ht.grid,
        pattern,
        spec,
        &mut out,
        d,
        0,
        None,
    )?;
    Ok(out)
}

pub fn global_attention<F: Elem>(ht: &HeadTensors<F>) -> Result<Vec<F>> {
    attend(ht, Pattern::Global, None)
}

pub fn intra_frame_attention<F: Elem>(ht: &HeadTensors<F>) -> Result<Vec<F>> {
    attend(ht, Pattern::Intra, None)
}

pub fn window_attention<F: Elem>(ht: &HeadTensors<F>, spec: &WindowSpec) -> Result<Vec<F>> {
    attend(ht, Pattern::Window, Some(spec))
}

/// Dense row-stochastic `S x S` attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    tokens: usize,
    pattern: Pattern,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn from_dense(tokens: usize, pattern: Pattern, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != tokens * tokens {
            return Err(Error::dim("attention map must be S x S"));
        }
        Ok(Self {
            tokens,
            pattern,
            weights,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn pattern(&self) -> Pattern {
        self.pattern
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.tokens..(i + 1) * self.tokens]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `map * V` for an `S x d` value matrix.
    pub fn apply<F: Elem>(&self, v: &[F], d: usize) -> Result<Vec<f64>> {
        if v.len() != self.tokens * d {
            return Err(Error::dim("value matrix does not match map"));
        }
        let mut out = vec![0.0; self.tokens * d];
        for i in 0..self.tokens {
            let o = &mut out[i * d..(i + 1) * d];
            for (j, &p) in self.row(i).iter().enumerate() {
                if p != 0.0 {
                    for (a, vj) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                        *a += p * vj.to_f64();
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn attention_map<F: Elem>(
    ht: &HeadTensors<F>,
    pattern: Pattern,
    spec: Option<&WindowSpec>,
) -> Result<AttentionMap> {
    if pattern == Pattern::Window && spec.is_none() {
        return Err(Error::arg("window attention map needs a window spec"));
    }
    let s = ht.tokens();
    let d = ht.dim;
    let (q, k) = (HeadView::dense(&ht.q, d), HeadView::dense(&ht.k, d));
    let mut weights = vec![0.0; s * s];
    let mut row = Vec::new();
    for i in 0..s {
        let keys = KeySet::for_query(pattern, spec, &ht.grid, i)?;
        softmax_row(&q, &k, d, i, &keys, &mut row);
        for (j, &p) in keys.iter().zip(&row) {
            weights[i * s + j] = p;
        }
    }
    AttentionMap::from_dense(s, pattern, weights)
}

/// Support mask of a pattern, `S x S` row-major.
pub fn pattern_mask(pattern: Pattern, spec: Option<&WindowSpec>, grid: &Grid3) -> Result<Vec<bool>> {
    let s = grid.tokens();
    let mut mask = vec![false; s * s];
    for i in 0..s {
        for j in KeySet::for_query(pattern, spec, grid, i)?.iter() {
            mask[i * s + j] = true;
        }
    }
    Ok(mask)
}

/// Brute-force reference: full `S x S` logits, masked entries set to
/// negative infinity, softmax, then multiplication by `V`.
pub fn masked_global_oracle<F: Elem>(ht: &HeadTensors<F>, mask: &[bool]) -> Result<Vec<F>> {
    let s = ht.tokens();
    let d = ht.dim;
    if mask.len() != s * s {
        return Err(Error::dim("mask must be S x S"));
    }
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut logits = vec![f64::NEG_INFINITY; s * s];
    for i in 0..s {
        if !mask[i * s..(i + 1) * s].iter().any(|&m| m) {
            return Err(Error::DegenerateMask { row: i });
        }
        for j in 0..s {
            if mask[i * s + j] {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += ht.q[i * d + c].to_f64() * ht.k[j * d + c].to_f64();
                }
                logits[i * s + j] = acc * scale;
            }
        }
    }
    let mut out = vec![F::default(); s * d];
    for i in 0..s {
        let row = &mut logits[i * s..(i + 1) * s];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in row.iter_mut() {
            *l = if l.is_finite() { libm::exp(*l - max) } else { 0.0 };
            z += *l;
        }
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..s {
                acc += row[j] / z * ht.v[j * d + c].to_f64();
            }
            out[i * d + c] = F::from_f64(acc);
        }
    }
    Ok(out)
}
