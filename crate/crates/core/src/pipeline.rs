//! Per-image scoring: prompt adaptation, prototypes, global score, aligned
//! local maps, fusion, optional memory refinement, and the final score.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aligner;
use crate::embeddings::{EmbeddedPromptSet, ImageEmbeddings};
use crate::memory::{self, MemoryBank};
use crate::prompts::Polarity;
use crate::rtp::{self, Adaptation, RtpConfig};
use crate::scoring::{self, AnomalyMap, AnomalyResult, KeptCounts, ScoringConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub rtp: RtpConfig,
    /// When false the whole vanilla pool is used for every image.
    pub adapt: bool,
    pub scoring: ScoringConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rtp: RtpConfig::default(),
            adapt: true,
            scoring: ScoringConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.rtp.validate()?;
        self.scoring.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ImageScore {
    pub result: AnomalyResult,
    pub map: AnomalyMap,
    /// `None` when adaptation is disabled.
    pub adaptation: Option<Adaptation>,
    /// Wall time of `score_image`; zero on targets without a clock.
    pub elapsed: Duration,
}

#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
struct Stopwatch(std::time::Instant);

#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
impl Stopwatch {
    fn start() -> Self {
        Self(std::time::Instant::now())
    }

    fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
}

#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
struct Stopwatch;

#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
impl Stopwatch {
    fn start() -> Self {
        Self
    }

    fn elapsed(&self) -> Duration {
        Duration::ZERO
    }
}

/// Scores one image against a vanilla prompt pool.
pub fn score_image(
    image: &ImageEmbeddings,
    pool: &EmbeddedPromptSet,
    config: &PipelineConfig,
    bank: Option<&MemoryBank>,
) -> Result<ImageScore> {
    let started = Stopwatch::start();
    config.validate()?;
    for &s in &config.scoring.scales {
        if !image.scales.contains(&s) {
            return Err(scoring::ScoringError::MissingScale(s).into());
        }
    }

    let (prompts, adaptation) = if config.adapt {
        let adaptation = rtp::adapt_prompts(&image.cls, pool, &config.rtp)?;
        (adaptation.adapted.clone(), Some(adaptation))
    } else {
        rtp::prompt_similarities(&image.cls, pool)?;
        (pool.clone(), None)
    };
    let global = aligner::make_prototypes(&prompts)?;
    let s_g = scoring::global_score(&image.cls, &global, config.scoring.tau);

    let mut per_scale = BTreeMap::new();
    let mut degenerate = 0;
    for &s in &config.scoring.scales {
        let local = scoring::local_prototypes(image, &global, s)?;
        degenerate += local.degenerate.len();
        per_scale.insert(s, scoring::local_map(image, &local, s, config.scoring.tau)?);
    }
    let grids: Vec<_> = per_scale.values().cloned().collect();
    let mut fused = scoring::harmonic_fuse(&grids)?;
    if let Some(bank) = bank {
        let mem = memory::memory_map(image, bank, &config.scoring.scales)?;
        fused = scoring::memory_refine(&fused, &mem, config.scoring.memory_weight)?;
    }
    let fin = scoring::finalize(&fused, s_g, image.image_h, image.image_w, &config.scoring);

    let kept = KeptCounts {
        normal: prompts.of_polarity(Polarity::Normal).count(),
        abnormal: prompts.of_polarity(Polarity::Abnormal).count(),
    };
    Ok(ImageScore {
        result: AnomalyResult {
            image: image.source_path.clone(),
            class: image.class_name.clone(),
            score: fin.score,
            s_g,
            max_local: fin.max_local,
            kept,
            degenerate_positions: degenerate,
            map: None,
        },
        map: AnomalyMap {
            per_scale,
            fused,
            smoothed: fin.smoothed,
            pixels: fin.pixels,
        },
        adaptation,
        elapsed: started.elapsed(),
    })
}

/// Scores a batch, in parallel when the `parallel` feature is enabled.
/// Output order matches input order.
pub fn score_batch(
    images: &[ImageEmbeddings],
    pool: &EmbeddedPromptSet,
    config: &PipelineConfig,
    bank: Option<&MemoryBank>,
) -> Result<Vec<ImageScore>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        images
            .par_iter()
            .map(|img| score_image(img, pool, config, bank))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        images
            .iter()
            .map(|img| score_image(img, pool, config, bank))
            .collect()
    }
}
