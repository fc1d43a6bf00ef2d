//! Attention specialization routing.
//!
//! Every head is scored by how far its global attention map is from the
//! intra-frame and window restrictions of the same logits. The cheaper
//! localized pattern with the smaller divergence becomes the head's
//! preference; heads are then sorted by score and all but the `ceil(rho * N)`
//! highest-scoring heads switch to their preferred localized pattern.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, Pattern, WindowSpec};
use crate::error::{Error, Result};
use crate::grid::VideoClip;
use crate::model::DiffusionTransformer;

/// Default mixing weight of the uniform distribution in the smoothed argument.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Which map sits in the first argument of the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(global || smoothed local)`.
    #[default]
    GlobalToLocal,
    /// `KL(local || smoothed global)`.
    LocalToGlobal,
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(i) = p.iter().position(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Domain(format!(
            "{name}[{i}] = {} is not a probability",
            p[i]
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Domain(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `KL(p || q~)` with `q~ = (1 - eps) q + eps / S`. Slightly negative
/// round-off results are clamped to zero.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::dim(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::arg(format!("smoothing eps = {eps} outside (0, 1e-3]")));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q, eps))
}

fn kl_unchecked(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let uniform = eps / p.len() as f64;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * libm::log(pi / ((1.0 - eps) * qi + uniform));
        }
    }
    acc.max(0.0)
}

/// The three maps of one head on one calibration clip.
#[derive(Debug, Clone)]
pub struct HeadMaps {
    pub global: AttentionMap,
    pub intra: AttentionMap,
    pub window: AttentionMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub s_intra: f64,
    pub s_window: f64,
}

impl HeadScore {
    pub fn new(layer: usize, head: usize, s_intra: f64, s_window: f64) -> Self {
        Self {
            layer,
            head,
            s_intra,
            s_window,
        }
    }

    /// `min(s_intra, s_window)`.
    pub fn score(&self) -> f64 {
        self.s_intra.min(self.s_window)
    }

    /// Localized pattern with the smaller divergence; ties go to intra-frame.
    pub fn preferred(&self) -> Pattern {
        if self.s_window < self.s_intra {
            Pattern::Window
        } else {
            Pattern::Intra
        }
    }
}

/// Mean row-wise divergence of one head over every query of every clip.
pub fn head_scores(
    layer: usize,
    head: usize,
    calibration: &[HeadMaps],
    eps: f64,
    direction: KlDirection,
) -> Result<HeadScore> {
    if calibration.is_empty() {
        return Err(Error::arg("calibration set is empty"));
    }
    let s = calibration[0].global.tokens();
    let (mut si, mut sw, mut rows) = (0.0, 0.0, 0usize);
    for maps in calibration {
        if maps.global.tokens() != s || maps.intra.tokens() != s || maps.window.tokens() != s {
            return Err(Error::dim("calibration maps differ in token count"));
        }
        for i in 0..s {
            let g = maps.global.row(i);
            let (a, b) = match direction {
                KlDirection::GlobalToLocal => (
                    kl_divergence(g, maps.intra.row(i), eps)?,
                    kl_divergence(g, maps.window.row(i), eps)?,
                ),
                KlDirection::LocalToGlobal => (
                    kl_divergence(maps.intra.row(i), g, eps)?,
                    kl_divergence(maps.window.row(i), g, eps)?,
                ),
            };
            si += a;
            sw += b;
            rows += 1;
        }
    }
    Ok(HeadScore::new(
        layer,
        head,
        si / rows as f64,
        sw / rows as f64,
    ))
}

/// `ceil(rho * n)`, ignoring float noise in the product.
pub fn global_head_count(rho: f64, n: usize) -> usize {
    let k = libm::ceil(rho * n as f64 - 1e-9);
    (k.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calibration {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub layer: usize,
    pub head: usize,
    pub pattern: Pattern,
    pub s_intra: f64,
    pub s_window: f64,
}

impl HeadAssignment {
    pub fn score(&self) -> HeadScore {
        HeadScore::new(self.layer, self.head, self.s_intra, self.s_window)
    }
}

/// Pattern of every head, plus the scores it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMap {
    pub rho: f64,
    pub window: WindowSpec,
    pub eps: f64,
    pub calibration: Calibration,
    #[serde(default)]
    pub direction: KlDirection,
    /// Sorted by `(layer, head)`.
    pub heads: Vec<HeadAssignment>,
}

impl AssignmentMap {
    /// Every head global, no scores: the unrouted model.
    pub fn all_global(layers: usize, heads: usize, window: WindowSpec) -> Self {
        Self::uniform(layers, heads, window, Pattern::Global)
    }

    /// Every head on the same pattern.
    pub fn uniform(layers: usize, heads: usize, window: WindowSpec, pattern: Pattern) -> Self {
        let heads = (0..layers)
            .flat_map(|layer| {
                (0..heads).map(move |head| HeadAssignment {
                    layer,
                    head,
                    pattern,
                    s_intra: 0.0,
                    s_window: 0.0,
                })
            })
            .collect();
        Self {
            rho: if pattern == Pattern::Global { 1.0 } else { 0.0 },
            window,
            eps: DEFAULT_EPS,
            calibration: Calibration { count: 0, seed: 0 },
            direction: KlDirection::GlobalToLocal,
            heads,
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn pattern(&self, layer: usize, head: usize) -> Option<Pattern> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.head == head)
            .map(|h| h.pattern)
    }

    /// Patterns of one layer, indexed by head.
    pub fn layer_patterns(&self, layer: usize, heads: usize) -> Result<Vec<Pattern>> {
        (0..heads)
            .map(|h| {
                self.pattern(layer, h).ok_or_else(|| {
                    Error::config(format!("assignment has no entry for layer {layer} head {h}"))
                })
            })
            .collect()
    }

    pub fn count(&self, pattern: Pattern) -> usize {
        self.heads.iter().filter(|h| h.pattern == pattern).count()
    }

    /// `(layer, head)` pairs that stay global.
    pub fn global_heads(&self) -> Vec<(usize, usize)> {
        self.heads
            .iter()
            .filter(|h| h.pattern == Pattern::Global)
            .map(|h| (h.layer, h.head))
            .collect()
    }

    /// Checks that every head of a `layers x heads` model appears exactly once.
    pub fn check_covers(&self, layers: usize, heads: usize) -> Result<()> {
        if self.heads.len() != layers * heads {
            return Err(Error::config(format!(
                "assignment has {} entries, model has {} heads",
                self.heads.len(),
                layers * heads
            )));
        }
        let mut seen = alloc::vec![false; layers * heads];
        for h in &self.heads {
            if h.layer >= layers || h.head >= heads || seen[h.layer * heads + h.head] {
                return Err(Error::config(format!(
                    "assignment entry ({}, {}) is out of range or duplicated",
                    h.layer, h.head
                )));
            }
            seen[h.layer * heads + h.head] = true;
        }
        Ok(())
    }

    pub fn scores(&self) -> Vec<HeadScore> {
        self.heads.iter().map(HeadAssignment::score).collect()
    }

    /// Routes the stored scores again at a new ratio.
    pub fn reroute(&self, rho: f64) -> Result<Self> {
        let mut out = route_heads(&self.scores(), rho, self.window, self.eps, self.calibration)?;
        out.direction = self.direction;
        Ok(out)
    }
}

/// Keeps the `ceil(rho * N)` highest-scoring heads global and assigns every
/// other head its preferred localized pattern. Equal scores are ordered by
/// `(layer, head)`.
pub fn route_heads(
    scores: &[HeadScore],
    rho: f64,
    window: WindowSpec,
    eps: f64,
    calibration: Calibration,
) -> Result<AssignmentMap> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::arg(format!("rho = {rho} outside [0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::arg("no heads to route"));
    }
    if let Some(s) = scores
        .iter()
        .find(|s| !(s.s_intra >= 0.0 && s.s_window >= 0.0))
    {
        return Err(Error::Domain(format!(
            "head ({}, {}) has a negative or NaN score",
            s.layer, s.head
        )));
    }
    let n = scores.len();
    let k = global_head_count(rho, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&scores[a], &scores[b]);
        x.score()
            .partial_cmp(&y.score())
            .unwrap_or(Ordering::Equal)
            .then((x.layer, x.head).cmp(&(y.layer, y.head)))
    });
    let mut heads: Vec<HeadAssignment> = scores
        .iter()
        .map(|s| HeadAssignment {
            layer: s.layer,
            head: s.head,
            pattern: Pattern::Global,
            s_intra: s.s_intra,
            s_window: s.s_window,
        })
        .collect();
    for &idx in &order[..n - k] {
        heads[idx].pattern = scores[idx].preferred();
    }
    heads.sort_by_key(|h| (h.layer, h.head));
    Ok(AssignmentMap {
        rho,
        window,
        eps,
        calibration,
        direction: KlDirection::GlobalToLocal,
        heads,
    })
}

/// Settings for [`profile_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSettings {
    pub window: WindowSpec,
    pub rho: f64,
    pub eps: f64,
    pub direction: KlDirection,
    /// Recorded in the output; the clips themselves are passed in.
    pub seed: u64,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            rho: 0.4,
            eps: DEFAULT_EPS,
            direction: KlDirection::GlobalToLocal,
            seed: 0,
        }
    }
}

/// Runs the model with every head global on each calibration clip, builds
/// the global, intra-frame and window maps of every head from the captured
/// queries and keys, scores the heads and routes them.
pub fn profile_model(
    model: &DiffusionTransformer,
    clips: &[VideoClip],
    settings: &ProfileSettings,
) -> Result<AssignmentMap> {
    if clips.is_empty() {
        return Err(Error::arg("calibration set is empty"));
    }
    let cfg = model.config();
    let n_heads = cfg.layers * cfg.heads;
    let mut per_head: Vec<Vec<HeadMaps>> = (0..n_heads).map(|_| Vec::with_capacity(clips.len())).collect();
    let all_global = AssignmentMap::all_global(cfg.layers, cfg.heads, settings.window);
    for clip in clips {
        let latent = cfg.encode(clip)?;
        let heads = model.capture_heads(&latent, &all_global)?;
        for (idx, ht) in heads.iter().enumerate() {
            per_head[idx].push(HeadMaps {
                global: crate::attention::attention_map(ht, Pattern::Global, None)?,
                intra: crate::attention::attention_map(ht, Pattern::Intra, None)?,
                window: crate::attention::attention_map(ht, Pattern::Window, Some(&settings.window))?,
            });
        }
    }
    let mut scores = Vec::with_capacity(n_heads);
    for (idx, maps) in per_head.iter().enumerate() {
        scores.push(head_scores(
            idx / cfg.heads,
            idx % cfg.heads,
            maps,
            settings.eps,
            settings.direction,
        )?);
    }
    let mut map = route_heads(
        &scores,
        settings.rho,
        settings.window,
        settings.eps,
        Calibration {
            count: clips.len(),
            seed: settings.seed,
        },
    )?;
    map.direction = settings.direction;
    Ok(map)
}
