//! Few-shot memory bank of normal patch embeddings.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::embeddings::ImageEmbeddings;
use crate::grid::Grid;
use crate::scoring;
use crate::tensor_io::{Bundle, BundleError, Tensor};
use crate::vector;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("no reference images")]
    NoReferences,
    #[error("bank has no rows for scale {0}")]
    EmptyBank(usize),
    #[error("reference {source_path:?} is inconsistent: {reason}")]
    Inconsistent { source_path: String, reason: String },
    #[error("query does not match bank: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

pub type Result<T> = std::result::Result<T, MemoryError>;

/// Immutable per-scale store of reference patch embeddings. Row
/// `r` of scale `s` comes from reference `r / (h·w)` at position
/// `(r % (h·w)) / w, r % w`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    sources: Vec<String>,
    rows: BTreeMap<usize, Vec<f32>>,
}

impl MemoryBank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scales(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn rows(&self, scale: usize) -> Option<&[f32]> {
        self.rows.get(&scale).map(Vec::as_slice)
    }

    pub fn row_count(&self, scale: usize) -> usize {
        self.rows.get(&scale).map_or(0, |r| r.len() / self.dim)
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    /// (source, i, j) of a bank row.
    pub fn provenance(&self, row: usize) -> Option<(&str, usize, usize)> {
        let per_image = self.grid_h * self.grid_w;
        let src = self.sources.get(row / per_image)?;
        let pos = row % per_image;
        Some((src, pos / self.grid_w, pos % self.grid_w))
    }

    /// Bank built from explicit rows, e.g. for tests. `rows[s]` is row-major
    /// `[n, dim]`.
    pub fn from_rows(dim: usize, rows: BTreeMap<usize, Vec<f32>>) -> Self {
        let n = rows.values().next().map_or(0, |r| r.len() / dim.max(1));
        Self {
            dim,
            grid_h: 1,
            grid_w: 1,
            sources: (0..n).map(|i| format!("row{i}")).collect(),
            rows,
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::with_kind("bank");
        b.set_meta("embed_dim", self.dim);
        b.set_meta("grid_h", self.grid_h);
        b.set_meta("grid_w", self.grid_w);
        b.set_meta(
            "scales",
            self.scales()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        b.set_meta(
            "sources",
            serde_json::to_string(&self.sources).expect("strings"),
        );
        for (s, rows) in &self.rows {
            let n = rows.len() / self.dim;
            b.insert(
                format!("bank/s{s}"),
                Tensor::from_f32(vec![n, self.dim], rows.clone()).expect("bank rows"),
            )
            .unwrap();
        }
        b
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.kind() != Some("bank") {
            return Err(BundleError::InvalidMeta {
                key: "kind".into(),
                reason: format!("expected \"bank\", got {:?}", bundle.kind()),
            }
            .into());
        }
        let dim = bundle.meta_usize("embed_dim")?;
        let sources: Vec<String> =
            serde_json::from_str(bundle.meta_str("sources")?).map_err(|e| {
                BundleError::InvalidMeta {
                    key: "sources".into(),
                    reason: e.to_string(),
                }
            })?;
        let grid_h = bundle.meta_usize("grid_h")?;
        let grid_w = bundle.meta_usize("grid_w")?;
        let n = sources.len() * grid_h * grid_w;
        let mut rows = BTreeMap::new();
        for s in bundle.meta_usize_list("scales")? {
            let data = bundle.f32_tensor(&format!("bank/s{s}"), &[n, dim])?;
            rows.insert(s, data.to_vec());
        }
        Ok(Self {
            dim,
            grid_h,
            grid_w,
            sources,
            rows,
        })
    }
}

/// Concatenates the local embeddings of every position of every reference,
/// per scale.
pub fn build_bank(references: &[ImageEmbeddings], scales: &[usize]) -> Result<MemoryBank> {
    let first = references.first().ok_or(MemoryError::NoReferences)?;
    let mut rows: BTreeMap<usize, Vec<f32>> = scales.iter().map(|&s| (s, Vec::new())).collect();
    for r in references {
        let inconsistent = |reason: String| MemoryError::Inconsistent {
            source_path: r.source_path.clone(),
            reason,
        };
        if r.dim != first.dim {
            return Err(inconsistent(format!(
                "embed_dim {} != {}",
                r.dim, first.dim
            )));
        }
        if (r.grid_h, r.grid_w) != (first.grid_h, first.grid_w) {
            return Err(inconsistent(format!(
                "grid {}x{} != {}x{}",
                r.grid_h, r.grid_w, first.grid_h, first.grid_w
            )));
        }
        for &s in scales {
            let grid = r
                .local_grid(s)
                .map_err(|_| inconsistent(format!("missing scale {s}")))?;
            rows.get_mut(&s).unwrap().extend_from_slice(grid.as_slice());
        }
    }
    Ok(MemoryBank {
        dim: first.dim,
        grid_h: first.grid_h,
        grid_w: first.grid_w,
        sources: references.iter().map(|r| r.source_path.clone()).collect(),
        rows,
    })
}

/// Largest cosine similarity between `query` and any bank row (exhaustive).
pub fn nearest_similarity(query: &[f32], rows: &[f32], dim: usize) -> f64 {
    rows.chunks_exact(dim)
        .map(|row| vector::dot(query, row))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `(1 − max cos) / 2` per position, clamped to [0, 1].
pub fn memory_score(query: &ImageEmbeddings, bank: &MemoryBank, scale: usize) -> Result<Grid> {
    if query.dim != bank.dim {
        return Err(MemoryError::Mismatch(format!(
            "embed_dim {} vs bank {}",
            query.dim, bank.dim
        )));
    }
    let rows = bank
        .rows(scale)
        .filter(|r| !r.is_empty())
        .ok_or(MemoryError::EmptyBank(scale))?;
    let grid = query.local_grid(scale)?;
    let (h, w, _) = grid.shape();
    Ok(Grid::from_fn(h, w, |i, j| {
        ((1.0 - nearest_similarity(grid.at(i, j), rows, bank.dim)) / 2.0).clamp(0.0, 1.0)
    }))
}

/// Memory scores for each scale, fused with the harmonic rule.
pub fn memory_map(query: &ImageEmbeddings, bank: &MemoryBank, scales: &[usize]) -> Result<Grid> {
    let grids = scales
        .iter()
        .map(|&s| memory_score(query, bank, s))
        .collect::<Result<Vec<_>>>()?;
    scoring::harmonic_fuse(&grids).map_err(|e| MemoryError::Mismatch(e.to_string()))
}
