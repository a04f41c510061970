//! Global-to-local alignment of text prototypes.
//!
//! For each grid position a matrix `W` with `W u_G = u_L` maps the global
//! value summary onto the local one. `W` is taken as the identity plus the
//! smallest rank-one correction satisfying that constraint,
//! `W = I + (u_L - u_G) u_Gᵀ / (u_Gᵀ u_G)`, and is applied to the global text
//! prototypes to obtain position-specific local prototypes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddedPromptSet;
use crate::prompts::Polarity;
use crate::vector::{self, ZERO_NORM};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("no {0} prompts to build a prototype from")]
    EmptyPolarity(&'static str),
    #[error("{0} prototype has zero mean and cannot be normalized")]
    DegenerateMean(&'static str),
    #[error("global value summary is zero")]
    SingularAnchor,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("projection maps the {0} prototype to zero")]
    DegenerateProjection(&'static str),
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// Unit-norm normal/abnormal text prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl Prototypes {
    pub fn get(&self, polarity: Polarity) -> &[f64] {
        match polarity {
            Polarity::Normal => &self.normal,
            Polarity::Abnormal => &self.abnormal,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            normal: self.abnormal.clone(),
            abnormal: self.normal.clone(),
        }
    }
}

/// Normalized mean of a set of embeddings.
pub fn mean_prototype<'a>(
    embeddings: impl IntoIterator<Item = &'a [f32]>,
    label: &'static str,
) -> Result<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for e in embeddings {
        let acc = sum.get_or_insert_with(|| vec![0.0; e.len()]);
        if acc.len() != e.len() {
            return Err(AlignError::DimensionMismatch(acc.len(), e.len()));
        }
        acc.iter_mut().zip(e).for_each(|(a, &x)| *a += x as f64);
        count += 1;
    }
    let sum = sum.ok_or(AlignError::EmptyPolarity(label))?;
    let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
    vector::normalize(&mean).ok_or(AlignError::DegenerateMean(label))
}

/// Per-polarity prototypes of an (adapted) prompt set.
pub fn make_prototypes(set: &EmbeddedPromptSet) -> Result<Prototypes> {
    let proto = |polarity: Polarity| {
        mean_prototype(
            set.of_polarity(polarity).map(|p| p.embedding.as_slice()),
            polarity.as_str(),
        )
    };
    Ok(Prototypes {
        normal: proto(Polarity::Normal)?,
        abnormal: proto(Polarity::Abnormal)?,
    })
}

/// `I + correction · anchorᵀ`, stored in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    /// `u_L - u_G`
    correction: Vec<f64>,
    /// `u_G / (u_Gᵀ u_G)`
    anchor: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            correction: vec![0.0; dim],
            anchor: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// `W v` in O(d).
    pub fn apply<A: Copy + Into<f64>>(&self, v: &[A]) -> Vec<f64> {
        let coef = vector::dot(&self.anchor, v);
        v.iter()
            .zip(&self.correction)
            .map(|(&x, c)| x.into() + coef * c)
            .collect()
    }

    /// Row-major dense `d × d` matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = f64::from(u8::from(i == j)) + self.correction[i] * self.anchor[j];
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.correction
            .iter()
            .chain(&self.anchor)
            .all(|v| v.is_finite())
    }
}

/// Identity-anchored minimum-correction solution of `W u_G = u_L`.
pub fn solve_projection<A, B>(u_global: &[A], u_local: &[B]) -> Result<ProjectionMatrix>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if u_global.len() != u_local.len() {
        return Err(AlignError::DimensionMismatch(u_global.len(), u_local.len()));
    }
    let g: Vec<f64> = u_global.iter().map(|&x| x.into()).collect();
    let l: Vec<f64> = u_local.iter().map(|&x| x.into()).collect();
    if g.iter().chain(&l).any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite);
    }
    let gg = vector::dot(&g, &g);
    if gg.sqrt() <= ZERO_NORM {
        return Err(AlignError::SingularAnchor);
    }
    Ok(ProjectionMatrix {
        correction: l.iter().zip(&g).map(|(a, b)| a - b).collect(),
        anchor: g.iter().map(|v| v / gg).collect(),
    })
}

/// `normalize(W f)` for both prototypes.
pub fn project_prototypes(w: &ProjectionMatrix, global: &Prototypes) -> Result<Prototypes> {
    if !w.is_finite() {
        return Err(AlignError::NonFinite);
    }
    let project = |v: &[f64], label: &'static str| {
        vector::normalize(&w.apply(v)).ok_or(AlignError::DegenerateProjection(label))
    };
    Ok(Prototypes {
        normal: project(&global.normal, "normal")?,
        abnormal: project(&global.abnormal, "abnormal")?,
    })
}
