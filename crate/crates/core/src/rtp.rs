//! Run-time prompt adaptation: per-image filtering of the vanilla prompt pool
//! by contextual score.
//!
//! For a query image every prompt gets a cosine similarity. The similarities
//! of each polarity span an interval; a prompt whose similarity sits at
//! equal distance from both intervals (in particular, inside both) carries no
//! information for this image and is dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddedPrompt, EmbeddedPromptSet};
use crate::prompts::{AnomalyPrompt, Polarity};
use crate::vector;

/// Unit-norm tolerance applied to incoming embeddings.
pub const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RtpError {
    #[error("interval lower bound {lo} exceeds upper bound {hi}")]
    InvertedInterval { lo: f64, hi: f64 },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{0} is not unit-norm")]
    NotUnitNorm(String),
    #[error("prompt pool has no {0} prompts")]
    EmptyPolarity(&'static str),
    #[error("invalid rtp config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, RtpError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtpConfig {
    /// Slope of the logistic.
    pub k: f64,
    /// Prompts need a contextual score strictly above this to be kept.
    pub epsilon: f64,
}

impl Default for RtpConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl RtpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(RtpError::InvalidConfig(format!(
                "k must be positive, got {}",
                self.k
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(RtpError::InvalidConfig(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(RtpError::InvertedInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// Smallest interval containing every value; `None` for an empty slice.
    pub fn spanning(values: &[f64]) -> Option<Self> {
        let lo = values.iter().copied().reduce(f64::min)?;
        let hi = values.iter().copied().reduce(f64::max)?;
        Some(Self { lo, hi })
    }

    pub fn contains(&self, point: f64) -> bool {
        self.lo <= point && point <= self.hi
    }

    pub fn distance(&self, point: f64) -> f64 {
        (self.lo - point).max(point - self.hi).max(0.0)
    }
}

/// `max(0, max(lo - point, point - hi))`.
pub fn interval_distance(point: f64, lo: f64, hi: f64) -> Result<f64> {
    Ok(Interval::new(lo, hi)?.distance(point))
}

/// Per-image similarities of every pool prompt, split by polarity, with the
/// interval each polarity spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
    pub normal_interval: Interval,
    pub abnormal_interval: Interval,
}

impl SimilarityProfile {
    pub fn new(normal: Vec<f64>, abnormal: Vec<f64>) -> Result<Self> {
        let normal_interval =
            Interval::spanning(&normal).ok_or(RtpError::EmptyPolarity("normal"))?;
        let abnormal_interval =
            Interval::spanning(&abnormal).ok_or(RtpError::EmptyPolarity("abnormal"))?;
        Ok(Self {
            normal,
            abnormal,
            normal_interval,
            abnormal_interval,
        })
    }

    /// Gap between the distances from `point` to the two intervals.
    pub fn separation(&self, point: f64) -> f64 {
        (self.normal_interval.distance(point) - self.abnormal_interval.distance(point)).abs()
    }
}

/// Logistic of the interval-distance gap, shifted and rescaled so that a gap
/// of zero scores exactly 0 and the score tends to 1 as the gap grows:
/// `2 / (1 + exp(-k * gap)) - 1`.
pub fn contextual_score(similarity: f64, profile: &SimilarityProfile, config: &RtpConfig) -> f64 {
    logistic_score(profile.separation(similarity), config.k)
}

/// `2σ(k·gap) − 1`, evaluated as `tanh(k·gap / 2)`.
pub fn logistic_score(gap: f64, k: f64) -> f64 {
    (0.5 * k * gap).tanh()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub similarity: f64,
    pub contextual_score: f64,
    pub kept: bool,
    /// Kept only because its polarity would otherwise be empty.
    pub rescued: bool,
}

/// Scores for both polarities, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub profile: SimilarityProfile,
    pub normal: Vec<SimilarityScore>,
    pub abnormal: Vec<SimilarityScore>,
}

/// Filters raw similarities. Intervals are built once from the full pool.
/// If a polarity loses every prompt, its highest-scoring one (earliest on
/// ties) is kept so both prototypes stay defined.
pub fn select(normal: &[f64], abnormal: &[f64], config: &RtpConfig) -> Result<Selection> {
    config.validate()?;
    let profile = SimilarityProfile::new(normal.to_vec(), abnormal.to_vec())?;
    let score_all = |sims: &[f64]| -> Vec<SimilarityScore> {
        let mut scored: Vec<SimilarityScore> = sims
            .iter()
            .map(|&s| {
                let score = contextual_score(s, &profile, config);
                SimilarityScore {
                    similarity: s,
                    contextual_score: score,
                    kept: score > config.epsilon,
                    rescued: false,
                }
            })
            .collect();
        if !scored.iter().any(|s| s.kept) {
            let best = scored.iter().enumerate().fold(0, |best, (i, s)| {
                if s.contextual_score > scored[best].contextual_score {
                    i
                } else {
                    best
                }
            });
            scored[best].kept = true;
            scored[best].rescued = true;
        }
        scored
    };
    Ok(Selection {
        normal: score_all(normal),
        abnormal: score_all(abnormal),
        profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub prompt: AnomalyPrompt,
    pub similarity: f64,
    pub contextual_score: f64,
    pub kept: bool,
    pub rescued: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    /// Kept prompts, in pool order.
    pub adapted: EmbeddedPromptSet,
    /// One entry per pool prompt, in pool order.
    pub diagnostics: Vec<ScoredPrompt>,
    pub normal_interval: Interval,
    pub abnormal_interval: Interval,
}

impl Adaptation {
    pub fn kept_counts(&self) -> (usize, usize) {
        let n = self.adapted.of_polarity(Polarity::Normal).count();
        (n, self.adapted.prompts.len() - n)
    }
}

pub(crate) fn check_embedding(what: &str, v: &[f32], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(RtpError::DimensionMismatch {
            expected: dim,
            actual: v.len(),
        });
    }
    if !vector::is_unit(v, UNIT_TOLERANCE) {
        return Err(RtpError::NotUnitNorm(what.to_string()));
    }
    Ok(())
}

/// Similarity of every pool prompt to the image, clamped to [-1, 1].
pub fn prompt_similarities(image: &[f32], pool: &EmbeddedPromptSet) -> Result<Vec<f64>> {
    check_embedding("image embedding", image, pool.dim)?;
    pool.prompts
        .iter()
        .map(|p| {
            check_embedding(
                &format!("prompt {:?}", p.prompt.text),
                &p.embedding,
                pool.dim,
            )?;
            Ok(vector::dot(image, &p.embedding).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Adapts the vanilla pool to one image.
pub fn adapt_prompts(
    image_embedding: &[f32],
    pool: &EmbeddedPromptSet,
    config: &RtpConfig,
) -> Result<Adaptation> {
    let sims = prompt_similarities(image_embedding, pool)?;
    let split = |polarity: Polarity| -> Vec<f64> {
        pool.prompts
            .iter()
            .zip(&sims)
            .filter(|(p, _)| p.prompt.polarity == polarity)
            .map(|(_, &s)| s)
            .collect()
    };
    let selection = select(&split(Polarity::Normal), &split(Polarity::Abnormal), config)?;

    let mut normal_scores = selection.normal.iter();
    let mut abnormal_scores = selection.abnormal.iter();
    let mut kept: Vec<EmbeddedPrompt> = Vec::new();
    let mut diagnostics = Vec::with_capacity(pool.prompts.len());
    for p in &pool.prompts {
        let s = match p.prompt.polarity {
            Polarity::Normal => normal_scores.next(),
            Polarity::Abnormal => abnormal_scores.next(),
        }
        .expect("one score per prompt");
        if s.kept {
            kept.push(p.clone());
        }
        diagnostics.push(ScoredPrompt {
            prompt: p.prompt.clone(),
            similarity: s.similarity,
            contextual_score: s.contextual_score,
            kept: s.kept,
            rescued: s.rescued,
        });
    }
    Ok(Adaptation {
        adapted: EmbeddedPromptSet {
            class_name: pool.class_name.clone(),
            dim: pool.dim,
            prompts: kept,
        },
        diagnostics,
        normal_interval: selection.profile.normal_interval,
        abnormal_interval: selection.profile.abnormal_interval,
    })
}
