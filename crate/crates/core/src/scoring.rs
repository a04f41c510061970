//! Global score, per-scale local maps, harmonic fusion and the combined image
//! score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{self, Prototypes};
use crate::embeddings::{ImageEmbeddings, Mask, TileOffset};
use crate::grid::Grid;
use crate::tensor_io::{Bundle, Tensor};
use crate::vector;

/// Guard added to every cell before taking reciprocals in harmonic fusion.
pub const HARMONIC_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("nothing to fuse")]
    Empty,
    #[error("image has no embeddings for scale {0}")]
    MissingScale(usize),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, ScoringError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    /// Softmax temperature dividing cosine similarities.
    pub tau: f64,
    /// Window sizes, in patches.
    pub scales: Vec<usize>,
    /// Gaussian smoothing of the fused grid, in patch units; 0 disables it.
    pub sigma: f64,
    /// Weight of the memory score when a bank refines the map.
    pub memory_weight: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            scales: vec![2, 3],
            sigma: 4.0,
            memory_weight: 0.5,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ScoringError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(ScoringError::InvalidConfig(
                "scales must be a non-empty list of positive integers".into(),
            ));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(ScoringError::InvalidConfig(
                "sigma must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.memory_weight) {
            return Err(ScoringError::InvalidConfig(
                "memory_weight must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Two-way softmax probability of the abnormal class from the two cosine
/// similarities: `exp(a/τ) / (exp(n/τ) + exp(a/τ))`.
///
/// The winning class is evaluated directly (its probability lies in
/// [0.5, 1]) and the other one as its complement, which is exact there, so
/// swapping the two similarities gives probabilities that sum to exactly 1.
pub fn softmax_abnormal(sim_normal: f64, sim_abnormal: f64, tau: f64) -> f64 {
    let winner = 1.0 / (1.0 + (-(sim_abnormal - sim_normal).abs() / tau).exp());
    if sim_abnormal >= sim_normal {
        winner
    } else {
        1.0 - winner
    }
}

/// Image-level score of an embedding against the global prototypes.
pub fn global_score<A: Copy + Into<f64>>(f_x: &[A], prototypes: &Prototypes, tau: f64) -> f64 {
    softmax_abnormal(
        vector::dot(f_x, &prototypes.normal),
        vector::dot(f_x, &prototypes.abnormal),
        tau,
    )
}

/// Position-specific prototypes for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPrototypes {
    pub h: usize,
    pub w: usize,
    pub prototypes: Vec<Prototypes>,
    /// Positions whose projection collapsed; these fall back to the global
    /// prototypes.
    pub degenerate: Vec<(usize, usize)>,
}

impl LocalPrototypes {
    pub fn at(&self, i: usize, j: usize) -> &Prototypes {
        &self.prototypes[i * self.w + j]
    }
}

/// Projects the global prototypes into every local semantic space of `scale`.
pub fn local_prototypes(
    image: &ImageEmbeddings,
    global: &Prototypes,
    scale: usize,
) -> Result<LocalPrototypes> {
    let values = image
        .value_grid(scale)
        .map_err(|_| ScoringError::MissingScale(scale))?;
    if global.normal.len() != image.dim {
        return Err(ScoringError::DimensionMismatch {
            expected: image.dim,
            actual: global.normal.len(),
        });
    }
    let (h, w, _) = values.shape();
    let mut prototypes = Vec::with_capacity(h * w);
    let mut degenerate = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let projected = aligner::solve_projection(&image.value_global, values.at(i, j))
                .and_then(|m| aligner::project_prototypes(&m, global));
            match projected {
                Ok(p) => prototypes.push(p),
                Err(_) => {
                    degenerate.push((i, j));
                    prototypes.push(global.clone());
                }
            }
        }
    }
    Ok(LocalPrototypes {
        h,
        w,
        prototypes,
        degenerate,
    })
}

/// Per-position abnormal probability of the local embeddings at `scale`.
pub fn local_map(
    image: &ImageEmbeddings,
    prototypes: &LocalPrototypes,
    scale: usize,
    tau: f64,
) -> Result<Grid> {
    let local = image
        .local_grid(scale)
        .map_err(|_| ScoringError::MissingScale(scale))?;
    let (h, w, _) = local.shape();
    if (h, w) != (prototypes.h, prototypes.w) {
        return Err(ScoringError::ShapeMismatch(
            (h, w),
            (prototypes.h, prototypes.w),
        ));
    }
    Ok(Grid::from_fn(h, w, |i, j| {
        global_score(local.at(i, j), prototypes.at(i, j), tau)
    }))
}

/// Cell-wise harmonic mean `n / Σ 1/(v + ε) − ε`, clamped to the cell's
/// input range.
pub fn harmonic_fuse(grids: &[Grid]) -> Result<Grid> {
    let first = grids.first().ok_or(ScoringError::Empty)?;
    if let Some(bad) = grids.iter().find(|g| g.shape() != first.shape()) {
        return Err(ScoringError::ShapeMismatch(first.shape(), bad.shape()));
    }
    let n = grids.len() as f64;
    let (h, w) = first.shape();
    Ok(Grid::from_fn(h, w, |i, j| {
        let (mut lo, mut hi, mut inv) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for g in grids {
            let v = g.get(i, j);
            lo = lo.min(v);
            hi = hi.max(v);
            inv += 1.0 / (v + HARMONIC_EPS);
        }
        (n / inv - HARMONIC_EPS).clamp(lo, hi)
    }))
}

/// Weighted combination of the language map and a memory-bank map:
/// `(1 − weight)·language + weight·memory`.
pub fn memory_refine(language: &Grid, memory: &Grid, weight: f64) -> Result<Grid> {
    if language.shape() != memory.shape() {
        return Err(ScoringError::ShapeMismatch(
            language.shape(),
            memory.shape(),
        ));
    }
    let (h, w) = language.shape();
    Ok(Grid::from_fn(h, w, |i, j| {
        (1.0 - weight) * language.get(i, j) + weight * memory.get(i, j)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    /// Smoothed patch grid; its maximum enters the image score.
    pub smoothed: Grid,
    /// Full-resolution map in [0, 1].
    pub pixels: Grid,
    pub max_local: f64,
    pub score: f64,
}

/// Smooths the fused grid, upsamples it to the image size and combines its
/// maximum with the global score: `S = (S_G + max) / 2`.
pub fn finalize(
    fused: &Grid,
    global: f64,
    image_h: usize,
    image_w: usize,
    config: &ScoringConfig,
) -> Finalized {
    let smoothed = fused.gaussian_smooth(config.sigma).clamp_unit();
    let max_local = smoothed.max();
    Finalized {
        pixels: smoothed.upsample_bilinear(image_h, image_w).clamp_unit(),
        score: 0.5 * (global + max_local),
        max_local,
        smoothed,
    }
}

/// The `k` descriptors most similar to `f_x`, most similar first; ties keep
/// input order.
pub fn rank_descriptors<'a, A: Copy + Into<f64>>(
    f_x: &[A],
    descriptors: impl IntoIterator<Item = (&'a str, &'a [f32])>,
    k: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = descriptors
        .into_iter()
        .map(|(text, emb)| (text.to_string(), vector::dot(f_x, emb)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptCounts {
    pub normal: usize,
    pub abnormal: usize,
}

/// Serializable per-image result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub score: f64,
    #[serde(rename = "S_G")]
    pub s_g: f64,
    pub max_local: f64,
    pub kept: KeptCounts,
    /// Grid positions scored with global prototypes because the local
    /// projection collapsed.
    #[serde(default)]
    pub degenerate_positions: usize,
    /// File name of the companion map bundle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
}

/// All maps produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub per_scale: BTreeMap<usize, Grid>,
    /// Harmonic fusion of `per_scale` (after memory refinement, if any).
    pub fused: Grid,
    pub smoothed: Grid,
    pub pixels: Grid,
}

impl AnomalyMap {
    /// Map bundle: `anomaly_map` `[H, W]`, `fused` and `grid/s{S}` `[h, w]`,
    /// plus the ground-truth mask when known.
    pub fn to_bundle(&self, source_path: &str, gt_mask: Option<&Mask>) -> Bundle {
        let mut b = Bundle::with_kind("map");
        b.set_meta("image_h", self.pixels.height());
        b.set_meta("image_w", self.pixels.width());
        b.set_meta("source_path", source_path);
        let grid_tensor = |g: &Grid| {
            Tensor::from_f32(vec![g.height(), g.width()], g.to_f32()).expect("grid shape")
        };
        b.insert("anomaly_map", grid_tensor(&self.pixels)).unwrap();
        b.insert("fused", grid_tensor(&self.fused)).unwrap();
        for (s, g) in &self.per_scale {
            b.insert(format!("grid/s{s}"), grid_tensor(g)).unwrap();
        }
        if let Some(m) = gt_mask {
            b.insert("gt_mask", m.to_tensor()).unwrap();
        }
        b
    }
}

/// Max-merges tile pixel maps into a full-size canvas. Pixels no tile covers
/// are 0. Returns the canvas and the maximum tile score.
pub fn merge_tiles(tiles: &[(TileOffset, &Grid, f64)]) -> Option<(Grid, f64)> {
    let (first, _, _) = tiles.first()?;
    let (full_h, full_w) = (first.full_h, first.full_w);
    let mut canvas = Grid::filled(full_h, full_w, f64::NEG_INFINITY);
    let mut score = f64::NEG_INFINITY;
    for (offset, map, s) in tiles {
        score = score.max(*s);
        for i in 0..map.height() {
            for j in 0..map.width() {
                let (y, x) = (offset.y + i, offset.x + j);
                if y < full_h && x < full_w {
                    canvas.set(y, x, canvas.get(y, x).max(map.get(i, j)));
                }
            }
        }
    }
    Some((canvas.map(|v| if v.is_finite() { v } else { 0.0 }), score))
}
