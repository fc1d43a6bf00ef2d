//! Multiply-accumulate accounting for attention patterns and the model.
//!
//! Only matmul multiply-accumulates are counted (projections, scores,
//! value mixing, MLP); softmax and normalization are excluded, so every
//! count is an exact integer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{Pattern, WindowSpec};
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::model::ModelConfig;
use crate::routing::AssignmentMap;

/// `sum_i |[i - r, i + r] ∩ [0, n)|`.
fn axis_pairs(n: usize, r: usize) -> u64 {
    (0..n)
        .map(|i| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as u64)
        .sum()
}

/// Query-key pairs of one head under `pattern`.
pub fn attention_pairs(pattern: Pattern, grid: &Grid3, spec: Option<&WindowSpec>) -> Result<u64> {
    grid.validate()?;
    let s = grid.tokens() as u64;
    Ok(match pattern {
        Pattern::Global => s * s,
        Pattern::Intra => {
            let f = grid.frame_tokens() as u64;
            grid.frames as u64 * f * f
        }
        Pattern::Window => {
            let spec = spec.ok_or_else(|| Error::arg("window pattern needs a window spec"))?;
            let (rt, rh, rw) = spec.radii();
            axis_pairs(grid.frames, rt) * axis_pairs(grid.height, rh) * axis_pairs(grid.width, rw)
        }
    })
}

/// MACs of one head: `2 d` per query-key pair (scores plus value mixing).
pub fn attention_macs(pattern: Pattern, grid: &Grid3, d: usize, spec: Option<&WindowSpec>) -> Result<u64> {
    Ok(2 * d as u64 * attention_pairs(pattern, grid, spec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadCost {
    pub layer: usize,
    pub head: usize,
    pub pattern: Pattern,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub heads: Vec<HeadCost>,
    pub attention: u64,
    /// Q, K, V and output projections.
    pub projections: u64,
    pub mlp: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub label: String,
    pub macs: u64,
    pub median_seconds: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens: usize,
    pub head_dim: usize,
    pub grid: Grid3,
    pub window: WindowSpec,
    pub layers: Vec<LayerCost>,
    /// Input projection and timestep embedding.
    pub embedding: u64,
    pub output_head: u64,
    pub attention_total: u64,
    pub total: u64,
    pub timings: Vec<BenchTiming>,
}

impl CostReport {
    /// Checks that every total equals the sum of its parts.
    pub fn check_totals(&self) -> Result<()> {
        let mut attention = 0;
        let mut total = self.embedding + self.output_head;
        for l in &self.layers {
            let heads: u64 = l.heads.iter().map(|h| h.macs).sum();
            if heads != l.attention || l.total != l.attention + l.projections + l.mlp {
                return Err(Error::Internal("layer cost totals are inconsistent".into()));
            }
            attention += l.attention;
            total += l.total;
        }
        if attention != self.attention_total || total != self.total {
            return Err(Error::Internal("report totals are inconsistent".into()));
        }
        Ok(())
    }
}

/// Whole-model MACs for one forward pass under `assignment`.
pub fn model_macs(config: &ModelConfig, assignment: &AssignmentMap) -> Result<CostReport> {
    config.validate()?;
    assignment.check_covers(config.layers, config.heads)?;
    let grid = config.grid;
    let s = grid.tokens() as u64;
    let (dim, lat, hid) = (config.model_dim() as u64, config.latent_dim() as u64, config.hidden_dim() as u64);
    let window = assignment.window;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let heads = assignment
            .layer_patterns(l, config.heads)?
            .into_iter()
            .enumerate()
            .map(|(h, pattern)| {
                Ok(HeadCost {
                    layer: l,
                    head: h,
                    pattern,
                    macs: attention_macs(pattern, &grid, config.head_dim, Some(&window))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = heads.iter().map(|h| h.macs).sum();
        let projections = 4 * s * dim * dim;
        let mlp = 2 * s * dim * hid;
        layers.push(LayerCost {
            heads,
            attention,
            projections,
            mlp,
            total: attention + projections + mlp,
        });
    }
    let embedding = s * lat * dim + config.time_freqs as u64 * dim;
    let output_head = s * dim * lat;
    let attention_total = layers.iter().map(|l| l.attention).sum();
    let total = embedding + output_head + layers.iter().map(|l| l.total).sum::<u64>();
    Ok(CostReport {
        tokens: grid.tokens(),
        head_dim: config.head_dim,
        grid,
        window,
        layers,
        embedding,
        output_head,
        attention_total,
        total,
        timings: Vec::new(),
    })
}

/// Human-readable label for a pattern at a window size.
pub fn pattern_label(pattern: Pattern, spec: &WindowSpec) -> String {
    match pattern {
        Pattern::Window => format!("window({},{},{})", spec.t, spec.h, spec.w),
        p => String::from(p.name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::KeySet;
    use crate::routing::{route_heads, Calibration, HeadScore};
    use proptest::prelude::*;

    /// Independent count: test every query-key pair against the pattern's
    /// membership rule.
    fn brute_pairs(pattern: Pattern, grid: &Grid3, spec: &WindowSpec) -> u64 {
        let (rt, rh, rw) = spec.radii();
        let mut n = 0;
        for q in 0..grid.tokens() {
            let (qt, qh, qw) = grid.coords(q);
            for k in 0..grid.tokens() {
                let (kt, kh, kw) = grid.coords(k);
                let inside = match pattern {
                    Pattern::Global => true,
                    Pattern::Intra => kt == qt,
                    Pattern::Window => qt.abs_diff(kt) <= rt && qh.abs_diff(kh) <= rh && qw.abs_diff(kw) <= rw,
                };
                n += u64::from(inside);
            }
        }
        n
    }

    #[test]
    fn closed_forms() {
        let g = Grid3::new(3, 4, 4);
        assert_eq!(attention_macs(Pattern::Global, &g, 8, None).unwrap(), 36_864);
        assert_eq!(attention_macs(Pattern::Intra, &g, 8, None).unwrap(), 12_288);
        let spec = WindowSpec::new(3, 3, 3).unwrap();
        let enumerated: u64 = (0..g.tokens())
            .map(|q| KeySet::for_query(Pattern::Window, Some(&spec), &g, q).unwrap().len() as u64)
            .sum();
        assert_eq!(attention_macs(Pattern::Window, &g, 8, Some(&spec)).unwrap(), 16 * enumerated);
        assert_eq!(enumerated, brute_pairs(Pattern::Window, &g, &spec));
        assert!(attention_macs(Pattern::Window, &g, 8, None).is_err());
    }

    #[test]
    fn brute_force_on_small_grids() {
        let specs = [
            WindowSpec::new(1, 1, 1).unwrap(),
            WindowSpec::new(3, 3, 3).unwrap(),
            WindowSpec::new(3, 5, 5).unwrap(),
            WindowSpec::new(5, 3, 7).unwrap(),
        ];
        for t in 1..=4 {
            for h in [1, 3, 8] {
                for w in [2, 5, 8] {
                    let g = Grid3::new(t, h, w);
                    for spec in &specs {
                        for p in Pattern::ALL {
                            assert_eq!(
                                attention_pairs(p, &g, Some(spec)).unwrap(),
                                brute_pairs(p, &g, spec),
                                "{p:?} {g:?} {spec:?}"
                            );
                        }
                    }
                }
            }
        }
    }

    fn config(grid: Grid3) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 5,
            head_dim: 16,
            grid,
            ..ModelConfig::default()
        }
    }

    fn scores(n_heads: usize, layers: usize) -> Vec<HeadScore> {
        (0..layers * n_heads)
            .map(|i| HeadScore::new(i / n_heads, i % n_heads, ((i * 7) % 11) as f64, ((i * 5) % 13) as f64))
            .collect()
    }

    #[test]
    fn routed_totals_and_extremes() {
        let cfg = config(Grid3::new(4, 4, 6));
        let spec = WindowSpec::default();
        let sc = scores(5, 2);
        let cal = Calibration { count: 1, seed: 0 };
        let all_global = model_macs(&cfg, &AssignmentMap::all_global(2, 5, spec)).unwrap();
        let rho1 = model_macs(&cfg, &route_heads(&sc, 1.0, spec, 1e-6, cal).unwrap()).unwrap();
        assert_eq!(rho1.total, all_global.total);
        all_global.check_totals().unwrap();
        let intra_pref: Vec<HeadScore> = sc.iter().map(|s| HeadScore::new(s.layer, s.head, 0.1, 0.9)).collect();
        let rho0 = model_macs(&cfg, &route_heads(&intra_pref, 0.0, spec, 1e-6, cal).unwrap()).unwrap();
        let all_intra = model_macs(&cfg, &AssignmentMap::uniform(2, 5, spec, Pattern::Intra)).unwrap();
        assert_eq!(rho0.total, all_intra.total);
        let short = AssignmentMap::all_global(1, 5, spec);
        assert!(matches!(model_macs(&cfg, &short), Err(Error::Config(_))));
    }

    #[test]
    fn window_below_global_unless_covering() {
        let g = Grid3::new(4, 8, 8);
        let global = attention_macs(Pattern::Global, &g, 16, None).unwrap();
        for spec in [WindowSpec::new(3, 5, 5).unwrap(), WindowSpec::new(7, 15, 13).unwrap()] {
            assert!(attention_macs(Pattern::Window, &g, 16, Some(&spec)).unwrap() < global);
        }
        let cover = WindowSpec::covering(&g);
        assert_eq!(attention_macs(Pattern::Window, &g, 16, Some(&cover)).unwrap(), global);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn macs_monotone_in_rho(seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let cfg = config(Grid3::new(3, 4, 5));
            let spec = WindowSpec::new(1, 3, 3).unwrap();
            let sc: Vec<HeadScore> = (0..10)
                .map(|i| {
                    let x = crate::rng::derive_seed(seed, "macs", i as u64);
                    HeadScore::new(i / 5, i % 5, (x % 1000) as f64, ((x >> 20) % 1000) as f64)
                })
                .collect();
            let cal = Calibration { count: 1, seed: 0 };
            let m_lo = model_macs(&cfg, &route_heads(&sc, lo, spec, 1e-6, cal).unwrap()).unwrap();
            let m_hi = model_macs(&cfg, &route_heads(&sc, hi, spec, 1e-6, cal).unwrap()).unwrap();
            prop_assert!(m_lo.total <= m_hi.total);
            m_lo.check_totals().unwrap();
        }
    }
}
