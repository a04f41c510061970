//! Brute-force reference implementations shared by the property and
//! acceptance tests. Each one is written directly from the definitions and
//! deliberately avoids the library's code paths.

#![allow(dead_code)]

use alfa_core::embeddings::{EmbeddedPrompt, EmbeddedPromptSet};
use alfa_core::prompts::{AnomalyPrompt, Polarity, PromptSource};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

// ---------- prompt adaptation ----------

fn point_to_interval(p: f64, lo: f64, hi: f64) -> f64 {
    if p < lo {
        lo - p
    } else if p > hi {
        p - hi
    } else {
        0.0
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    let mut lo = v[0];
    let mut hi = v[0];
    for &x in v {
        if x < lo {
            lo = x;
        }
        if x > hi {
            hi = x;
        }
    }
    (lo, hi)
}

/// Literal `2 / (1 + e^{-kΔ}) − 1` filter with the polarity-empty fallback.
/// Returns kept flags for the normal and abnormal sims.
pub fn rtp_oracle(normal: &[f64], abnormal: &[f64], k: f64, eps: f64) -> (Vec<bool>, Vec<bool>) {
    let (nlo, nhi) = min_max(normal);
    let (alo, ahi) = min_max(abnormal);
    let score = |s: f64| {
        let delta = (point_to_interval(s, nlo, nhi) - point_to_interval(s, alo, ahi)).abs();
        2.0 / (1.0 + (-k * delta).exp()) - 1.0
    };
    let filter = |sims: &[f64]| {
        let scores: Vec<f64> = sims.iter().map(|&s| score(s)).collect();
        let mut kept: Vec<bool> = scores.iter().map(|&s| s > eps).collect();
        if !kept.contains(&true) {
            let mut best = 0;
            for i in 1..scores.len() {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            kept[best] = true;
        }
        kept
    };
    (filter(normal), filter(abnormal))
}

/// A pool whose prompt similarities to the image `[1, 0, 0]` are the given
/// values (up to rounding), interleaving polarities by `order`.
pub fn pool_with_sims(normal: &[f64], abnormal: &[f64], rng: &mut ChaCha8Rng) -> EmbeddedPromptSet {
    let mut prompts = Vec::new();
    let embed = |s: f64, rng: &mut ChaCha8Rng| {
        let rest = (1.0 - s * s).max(0.0).sqrt();
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        vec![
            s as f32,
            (rest * phi.cos()) as f32,
            (rest * phi.sin()) as f32,
        ]
    };
    let (mut i, mut j) = (0, 0);
    while i < normal.len() || j < abnormal.len() {
        let take_normal = j >= abnormal.len() || (i < normal.len() && rng.random_bool(0.5));
        let (polarity, s, idx) = if take_normal {
            i += 1;
            (Polarity::Normal, normal[i - 1], i - 1)
        } else {
            j += 1;
            (Polarity::Abnormal, abnormal[j - 1], j - 1)
        };
        prompts.push(EmbeddedPrompt {
            prompt: AnomalyPrompt {
                text: format!("{} {idx}", polarity.as_str()),
                polarity,
                source: PromptSource::Template,
            },
            embedding: embed(s, rng),
        });
    }
    EmbeddedPromptSet {
        class_name: "pool".into(),
        dim: 3,
        prompts,
    }
}

// ---------- metrics ----------

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn confusion(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let tp = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l && s >= t)
        .count();
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| !l && s >= t)
        .count();
    (tp as f64, fp as f64)
}

/// Σ (R_k − R_{k−1}) P_k, recounting the confusion matrix at every threshold.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thresholds_desc(scores) {
        let (tp, fp) = confusion(scores, labels, t);
        let recall = tp / pos;
        ap += (recall - prev) * (tp / (tp + fp));
        prev = recall;
    }
    ap
}

pub fn f1_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut best: f64 = 0.0;
    for t in thresholds_desc(scores) {
        let (tp, fp) = confusion(scores, labels, t);
        let fn_ = pos - tp;
        if tp > 0.0 {
            best = best.max(2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }
    best
}

/// 8-connected labelling by repeated min-label propagation.
pub fn components_by_propagation(h: usize, w: usize, mask: &[u8]) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                if mask[p] == 0 {
                    continue;
                }
                for di in [-1i64, 0, 1] {
                    for dj in [-1i64, 0, 1] {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let q = ni as usize * w + nj as usize;
                        if mask[q] != 0 && label[q] < label[p] {
                            label[p] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..h * w)
        .filter(|&p| mask[p] != 0)
        .map(|p| label[p])
        .collect();
    roots.sort_unstable();
    roots.dedup();
    roots
        .iter()
        .map(|&r| {
            (0..h * w)
                .filter(|&p| mask[p] != 0 && label[p] == r)
                .collect()
        })
        .collect()
}

/// One image for the PRO oracle: `(h, w, scores, mask)`.
pub type PixelCase = (usize, usize, Vec<f64>, Vec<u8>);

/// PRO by a full threshold sweep: at each unique score, count the overlap of
/// every ground-truth region and the global FPR, then integrate with the
/// trapezoid rule up to `limit` and divide by it.
pub fn pro_sweep(cases: &[PixelCase], limit: f64) -> f64 {
    let regions: Vec<(usize, Vec<usize>)> = cases
        .iter()
        .enumerate()
        .flat_map(|(c, (h, w, _, m))| {
            components_by_propagation(*h, *w, m)
                .into_iter()
                .map(move |r| (c, r))
        })
        .collect();
    let all: Vec<f64> = cases.iter().flat_map(|c| c.2.iter().copied()).collect();
    let normals = cases
        .iter()
        .map(|c| c.3.iter().filter(|&&m| m == 0).count())
        .sum::<usize>() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for t in thresholds_desc(&all) {
        let fp = cases
            .iter()
            .map(|(_, _, s, m)| {
                s.iter()
                    .zip(m)
                    .filter(|(&v, &mm)| mm == 0 && v >= t)
                    .count()
            })
            .sum::<usize>() as f64;
        let overlap: f64 = regions
            .iter()
            .map(|(c, r)| {
                let s = &cases[*c].2;
                r.iter().filter(|&&p| s[p] >= t).count() as f64 / r.len() as f64
            })
            .sum::<f64>()
            / regions.len() as f64;
        xs.push(fp / normals);
        ys.push(overlap);
    }
    let mut area = 0.0;
    for k in 1..xs.len() {
        let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y_cut = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_cut) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area / limit
}

/// Random scores drawn from a small set of levels so ties are common.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect()
}

/// Random mask with a few filled rectangles.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.random_range(1..=3) {
        let (rh, rw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (r0, c0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
        for i in r0..r0 + rh {
            for j in c0..c0 + rw {
                m[i * w + j] = 1;
            }
        }
    }
    if m.iter().all(|&v| v == 1) {
        m[0] = 0;
    }
    m
}

// ---------- linear algebra ----------

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn unit_f32(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v = random_vec(rng, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Dense matrix-vector product, row-major `d × d`.
pub fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum())
        .collect()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random orthogonal matrix by Gram–Schmidt on random columns.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v = random_vec(rng, d);
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = l2(&v);
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn rotate(r: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    r.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
