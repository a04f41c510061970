//! Deterministic synthetic embeddings for tests, demos and the end-to-end
//! acceptance run.
//!
//! Normal prompts and normal patches sit in a cone around axis `a`; abnormal
//! prompts and defect patches sit in a cone around axis `b`, which is rotated
//! away from `a` by `separation · 90°`. Abnormal images carry one rectangular
//! defect. Value summaries equal the global summary everywhere except in
//! windows touching a defect, where they are shifted along `b − a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddedPrompt, EmbeddedPromptSet, EmbeddingGrid, ImageEmbeddings, Mask};
use crate::prompts::{AnomalyPrompt, Polarity, PromptSource};
use crate::vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    /// Patch grid side length.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch_px: usize,
    pub scales: Vec<usize>,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// 0 puts both cones on the same axis, 1 makes them orthogonal.
    pub separation: f64,
    pub prompts_per_polarity: usize,
    pub prompt_spread: f64,
    /// Normal prompt `k` is offset by `prompt_arc · k/(n−1)` along a generic
    /// axis, spreading the pool from specific to generic descriptions.
    pub prompt_arc: f64,
    pub patch_noise: f64,
    pub image_noise: f64,
    /// Scale of a per-image, half-normal offset along a shared nuisance axis.
    pub nuisance: f64,
    /// Fraction of abnormal prompts placed inside the normal cone.
    pub overlap_fraction: f64,
    /// Offset of those prompts along the nuisance axis.
    pub overlap_offset: f64,
    /// Offset of those prompts along the generic axis.
    pub overlap_generic: f64,
    pub defect_min: usize,
    pub defect_max: usize,
    pub value_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            grid: 15,
            patch_px: 4,
            scales: vec![2, 3],
            n_normal: 100,
            n_abnormal: 100,
            separation: 1.0,
            prompts_per_polarity: 20,
            prompt_spread: 0.35,
            prompt_arc: 0.0,
            patch_noise: 0.6,
            image_noise: 0.3,
            nuisance: 0.0,
            overlap_fraction: 0.0,
            overlap_offset: 0.0,
            overlap_generic: 0.0,
            defect_min: 3,
            defect_max: 5,
            value_shift: 0.3,
        }
    }
}

impl SynthConfig {
    /// Weak, small defects plus a benign per-image attribute. A fifth of the
    /// abnormal prompts are generic descriptions of that attribute and sit
    /// inside the normal cone, between the specific and generic ends of the
    /// normal pool.
    pub fn ambiguous() -> Self {
        Self {
            patch_noise: 0.9,
            prompt_spread: 0.1,
            prompt_arc: 2.0,
            nuisance: 0.5,
            overlap_fraction: 0.2,
            overlap_offset: 0.8,
            overlap_generic: 1.6,
            defect_min: 1,
            defect_max: 3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub images: Vec<ImageEmbeddings>,
    /// `true` for abnormal images; parallel to `images`.
    pub labels: Vec<bool>,
    pub prompts: EmbeddedPromptSet,
}

struct Axes {
    normal: Vec<f64>,
    abnormal: Vec<f64>,
    value: Vec<f64>,
    nuisance: Vec<f64>,
    generic: Vec<f64>,
}

fn basis(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k % d] = 1.0;
    v
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = vector::normalize(&g) {
            return u;
        }
    }
}

fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += scale * x);
}

/// `normalize(center + magnitude · random_unit)`.
fn jitter(rng: &mut ChaCha8Rng, center: &[f64], magnitude: f64) -> Vec<f64> {
    let noise = random_unit(rng, center.len());
    let mut v = center.to_vec();
    axpy(&mut v, magnitude, &noise);
    vector::normalize(&v).unwrap_or_else(|| center.to_vec())
}

/// Start of an edge-clamped window of `size` cells around `center`.
pub fn window_start(center: usize, size: usize, n: usize) -> usize {
    let size = size.min(n);
    center.saturating_sub((size - 1) / 2).min(n - size)
}

#[derive(Clone, Copy)]
struct Defect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl Defect {
    fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.top + self.h).contains(&i) && (self.left..self.left + self.w).contains(&j)
    }
}

/// Generates a fixture. `dim` must be at least 2.
pub fn synth_fixture(config: &SynthConfig) -> Fixture {
    assert!(config.dim >= 2, "synthetic fixtures need dim >= 2");
    assert!(config.grid >= 1 && config.patch_px >= 1);
    let d = config.dim;
    let theta = config.separation.clamp(0.0, 1.0) * std::f64::consts::FRAC_PI_2;
    let normal_axis = basis(d, 0);
    let mut abnormal_axis = vec![0.0; d];
    axpy(&mut abnormal_axis, theta.cos(), &normal_axis);
    axpy(&mut abnormal_axis, theta.sin(), &basis(d, 1));
    let axes = Axes {
        normal: normal_axis,
        abnormal: abnormal_axis,
        value: basis(d, 2),
        nuisance: basis(d, 3),
        generic: basis(d, 4),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut prompts = Vec::new();
    let arc_steps = config.prompts_per_polarity.saturating_sub(1).max(1) as f64;
    for k in 0..config.prompts_per_polarity {
        let mut center = axes.normal.clone();
        axpy(
            &mut center,
            config.prompt_arc * k as f64 / arc_steps,
            &axes.generic,
        );
        prompts.push(EmbeddedPrompt {
            prompt: AnomalyPrompt {
                text: format!("a synthetic image of a normal object #{k}"),
                polarity: Polarity::Normal,
                source: PromptSource::Template,
            },
            embedding: vector::to_f32(&jitter(&mut rng, &center, config.prompt_spread)),
        });
    }
    let n_overlap = (config.overlap_fraction.clamp(0.0, 1.0) * config.prompts_per_polarity as f64)
        .round() as usize;
    for k in 0..config.prompts_per_polarity {
        let (text, center) = if k < n_overlap {
            let mut c = axes.normal.clone();
            axpy(&mut c, config.overlap_offset, &axes.nuisance);
            axpy(&mut c, config.overlap_generic, &axes.generic);
            (format!("a synthetic image of an ambiguous object #{k}"), c)
        } else {
            (
                format!("a synthetic image of a damaged object #{k}"),
                axes.abnormal.clone(),
            )
        };
        prompts.push(EmbeddedPrompt {
            prompt: AnomalyPrompt {
                text,
                polarity: Polarity::Abnormal,
                source: PromptSource::Template,
            },
            embedding: vector::to_f32(&jitter(&mut rng, &center, config.prompt_spread)),
        });
    }

    let mut images = Vec::with_capacity(config.n_normal + config.n_abnormal);
    let mut labels = Vec::with_capacity(images.capacity());
    for idx in 0..config.n_normal + config.n_abnormal {
        let abnormal = idx >= config.n_normal;
        images.push(synth_image(config, &axes, &mut rng, idx, abnormal));
        labels.push(abnormal);
    }
    Fixture {
        images,
        labels,
        prompts: EmbeddedPromptSet {
            class_name: "synthetic".into(),
            dim: d,
            prompts,
        },
    }
}

fn synth_image(
    config: &SynthConfig,
    axes: &Axes,
    rng: &mut ChaCha8Rng,
    idx: usize,
    abnormal: bool,
) -> ImageEmbeddings {
    let (d, n) = (config.dim, config.grid);
    let eta: f64 = config.nuisance * rng.sample::<f64, _>(StandardNormal).abs();
    let defect = abnormal.then(|| {
        let lo = config.defect_min.clamp(1, n);
        let hi = config.defect_max.clamp(lo, n);
        let h = rng.random_range(lo..=hi);
        let w = rng.random_range(lo..=hi);
        Defect {
            top: rng.random_range(0..=n - h),
            left: rng.random_range(0..=n - w),
            h,
            w,
        }
    });
    let in_defect = |i, j| defect.is_some_and(|df| df.contains(i, j));

    let mut patches = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut center = if in_defect(i, j) {
                axes.abnormal.clone()
            } else {
                axes.normal.clone()
            };
            axpy(&mut center, eta, &axes.nuisance);
            patches.push(jitter(rng, &center, config.patch_noise));
        }
    }

    let mut mean = vec![0.0; d];
    for p in &patches {
        axpy(&mut mean, 1.0 / patches.len() as f64, p);
    }
    let cls = jitter(rng, &mean, config.image_noise);
    let value_global = jitter(rng, &axes.value, 0.1);
    let mut shift = axes.abnormal.clone();
    axpy(&mut shift, -1.0, &axes.normal);

    let mut local = std::collections::BTreeMap::new();
    let mut value_local = std::collections::BTreeMap::new();
    for &s in &config.scales {
        let window = |i: usize, j: usize| {
            let (r0, c0) = (window_start(i, s, n), window_start(j, s, n));
            let size = s.min(n);
            (r0..r0 + size).flat_map(move |r| (c0..c0 + size).map(move |c| (r, c)))
        };
        local.insert(
            s,
            EmbeddingGrid::from_fn(n, n, d, |i, j| {
                let mut acc = vec![0.0; d];
                for (r, c) in window(i, j) {
                    axpy(&mut acc, 1.0, &patches[r * n + c]);
                }
                vector::to_f32(&vector::normalize(&acc).unwrap_or_else(|| axes.normal.clone()))
            }),
        );
        value_local.insert(
            s,
            EmbeddingGrid::from_fn(n, n, d, |i, j| {
                let cells: Vec<_> = window(i, j).collect();
                let frac = cells.iter().filter(|&&(r, c)| in_defect(r, c)).count() as f64
                    / cells.len() as f64;
                if frac == 0.0 {
                    vector::to_f32(&value_global)
                } else {
                    let mut v = value_global.clone();
                    axpy(&mut v, config.value_shift * frac, &shift);
                    vector::to_f32(&vector::normalize(&v).unwrap_or_else(|| value_global.clone()))
                }
            }),
        );
    }

    let px = n * config.patch_px;
    let mask = Mask {
        h: px,
        w: px,
        data: (0..px * px)
            .map(|p| {
                u8::from(in_defect(
                    p / px / config.patch_px,
                    p % px / config.patch_px,
                ))
            })
            .collect(),
    };
    let kind = if abnormal { "abnormal" } else { "normal" };
    ImageEmbeddings {
        source_path: format!("synthetic/{kind}_{idx:04}"),
        class_name: Some("synthetic".into()),
        dim: d,
        image_h: px,
        image_w: px,
        grid_h: n,
        grid_w: n,
        scales: config.scales.clone(),
        cls: vector::to_f32(&cls),
        local,
        value_global: vector::to_f32(&value_global),
        value_local,
        gt_mask: Some(mask),
        tile: None,
    }
}
