//! Typed views over image and text bundles.

use std::collections::BTreeMap;

use crate::prompts::{AnomalyPrompt, Polarity, PromptSet};
use crate::tensor_io::{Bundle, BundleError, Result, Tensor};

/// A `[h, w, d]` grid of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl EmbeddingGrid {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == h * w * d).then_some(Self { h, w, d, data })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        d: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * d);
        for i in 0..h {
            for j in 0..w {
                let v = f(i, j);
                assert_eq!(v.len(), d, "embedding length");
                data.extend_from_slice(&v);
            }
        }
        Self { h, w, d, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn at(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.w + j) * self.d;
        &self.data[start..start + self.d]
    }

    /// Rows in row-major position order.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.h, self.w, self.d], self.data.clone()).expect("consistent grid")
    }
}

/// Binary ground-truth mask `[h, w]` with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn is_anomalous(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    pub fn from_bundle(bundle: &Bundle, name: &str) -> Result<Self> {
        let t = bundle.tensor(name)?;
        let data = t.as_u8().ok_or_else(|| BundleError::BadTensor {
            name: name.into(),
            reason: "expected dtype u8".into(),
        })?;
        let [h, w] = t.shape() else {
            return Err(BundleError::BadTensor {
                name: name.into(),
                reason: format!("expected 2-D mask, got shape {:?}", t.shape()),
            });
        };
        if data.iter().any(|&v| v > 1) {
            return Err(BundleError::BadTensor {
                name: name.into(),
                reason: "mask values must be 0 or 1".into(),
            });
        }
        Ok(Self {
            h: *h,
            w: *w,
            data: data.to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.h, self.w], self.data.clone()).expect("consistent mask")
    }
}

/// Placement of one square tile inside a larger non-square image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileOffset {
    pub y: usize,
    pub x: usize,
    pub full_h: usize,
    pub full_w: usize,
}

/// Everything the engine needs about one query (or reference) image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbeddings {
    pub source_path: String,
    pub class_name: Option<String>,
    pub dim: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub scales: Vec<usize>,
    pub cls: Vec<f32>,
    pub local: BTreeMap<usize, EmbeddingGrid>,
    pub value_global: Vec<f32>,
    pub value_local: BTreeMap<usize, EmbeddingGrid>,
    pub gt_mask: Option<Mask>,
    pub tile: Option<TileOffset>,
}

pub fn local_name(scale: usize) -> String {
    format!("local_cls/s{scale}")
}

pub fn value_local_name(scale: usize) -> String {
    format!("value_summary_local/s{scale}")
}

impl ImageEmbeddings {
    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.kind() != Some("image") {
            return Err(BundleError::InvalidMeta {
                key: "kind".into(),
                reason: format!("expected \"image\", got {:?}", bundle.kind()),
            });
        }
        let dim = bundle.meta_usize("embed_dim")?;
        let grid_h = bundle.meta_usize("grid_h")?;
        let grid_w = bundle.meta_usize("grid_w")?;
        let scales = bundle.meta_usize_list("scales")?;
        let grid = |name: String| -> Result<EmbeddingGrid> {
            let data = bundle.f32_tensor(&name, &[grid_h, grid_w, dim])?;
            Ok(EmbeddingGrid::new(grid_h, grid_w, dim, data.to_vec()).expect("shape checked"))
        };
        let mut local = BTreeMap::new();
        let mut value_local = BTreeMap::new();
        for &s in &scales {
            local.insert(s, grid(local_name(s))?);
            value_local.insert(s, grid(value_local_name(s))?);
        }
        let gt_mask = match bundle.get("gt_mask") {
            Some(_) => Some(Mask::from_bundle(bundle, "gt_mask")?),
            None => None,
        };
        let tile = match bundle.meta.get("tile_offset") {
            None => None,
            Some(raw) => {
                let parts: Vec<usize> = raw
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| BundleError::InvalidMeta {
                        key: "tile_offset".into(),
                        reason: format!("{raw:?} is not \"y,x\""),
                    })?;
                let [y, x] = parts[..] else {
                    return Err(BundleError::InvalidMeta {
                        key: "tile_offset".into(),
                        reason: format!("{raw:?} is not \"y,x\""),
                    });
                };
                Some(TileOffset {
                    y,
                    x,
                    full_h: bundle.meta_usize("full_image_h")?,
                    full_w: bundle.meta_usize("full_image_w")?,
                })
            }
        };
        Ok(Self {
            source_path: bundle.meta_str("source_path")?.to_string(),
            class_name: bundle.meta.get("class").cloned(),
            dim,
            image_h: bundle.meta_usize("image_h")?,
            image_w: bundle.meta_usize("image_w")?,
            grid_h,
            grid_w,
            cls: bundle.f32_tensor("cls_embedding", &[dim])?.to_vec(),
            local,
            value_global: bundle.f32_tensor("value_summary_global", &[dim])?.to_vec(),
            value_local,
            gt_mask,
            tile,
            scales,
        })
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::with_kind("image");
        b.set_meta("embed_dim", self.dim);
        b.set_meta("grid_h", self.grid_h);
        b.set_meta("grid_w", self.grid_w);
        b.set_meta("image_h", self.image_h);
        b.set_meta("image_w", self.image_w);
        b.set_meta(
            "scales",
            self.scales
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        b.set_meta("source_path", &self.source_path);
        if let Some(c) = &self.class_name {
            b.set_meta("class", c);
        }
        if let Some(t) = &self.tile {
            b.set_meta("tile_offset", format!("{},{}", t.y, t.x));
            b.set_meta("full_image_h", t.full_h);
            b.set_meta("full_image_w", t.full_w);
        }
        let vec_tensor = |v: &[f32]| Tensor::from_f32(vec![v.len()], v.to_vec()).expect("1-D");
        b.insert("cls_embedding", vec_tensor(&self.cls)).unwrap();
        for s in &self.scales {
            b.insert(local_name(*s), self.local[s].to_tensor()).unwrap();
        }
        b.insert("value_summary_global", vec_tensor(&self.value_global))
            .unwrap();
        for s in &self.scales {
            b.insert(value_local_name(*s), self.value_local[s].to_tensor())
                .unwrap();
        }
        if let Some(m) = &self.gt_mask {
            b.insert("gt_mask", m.to_tensor()).unwrap();
        }
        b
    }

    pub fn local_grid(&self, scale: usize) -> Result<&EmbeddingGrid> {
        self.local
            .get(&scale)
            .ok_or_else(|| BundleError::MissingTensor(local_name(scale)))
    }

    pub fn value_grid(&self, scale: usize) -> Result<&EmbeddingGrid> {
        self.value_local
            .get(&scale)
            .ok_or_else(|| BundleError::MissingTensor(value_local_name(scale)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPrompt {
    pub prompt: AnomalyPrompt,
    pub embedding: Vec<f32>,
}

/// A prompt set whose prompts carry text-encoder embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPromptSet {
    pub class_name: String,
    pub dim: usize,
    pub prompts: Vec<EmbeddedPrompt>,
}

impl EmbeddedPromptSet {
    pub fn of_polarity(&self, polarity: Polarity) -> impl Iterator<Item = &EmbeddedPrompt> {
        self.prompts
            .iter()
            .filter(move |p| p.prompt.polarity == polarity)
    }

    pub fn prompt_set(&self) -> PromptSet {
        PromptSet {
            class_name: self.class_name.clone(),
            prompts: self.prompts.iter().map(|p| p.prompt.clone()).collect(),
        }
    }

    /// Reads a text bundle: rows of `emb_normal` / `emb_abnormal` pair up, in
    /// order, with the prompts of that polarity in the `prompts` meta entry.
    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.kind() != Some("text") {
            return Err(BundleError::InvalidMeta {
                key: "kind".into(),
                reason: format!("expected \"text\", got {:?}", bundle.kind()),
            });
        }
        let dim = bundle.meta_usize("embed_dim")?;
        let set: PromptSet = serde_json::from_str(bundle.meta_str("prompts")?).map_err(|e| {
            BundleError::InvalidMeta {
                key: "prompts".into(),
                reason: e.to_string(),
            }
        })?;
        let mut rows = BTreeMap::new();
        for polarity in Polarity::BOTH {
            let name = format!("emb_{}", polarity.as_str());
            let n = set.of_polarity(polarity).count();
            let data = bundle.f32_tensor(&name, &[n, dim])?;
            rows.insert(polarity, data.chunks_exact(dim).map(<[f32]>::to_vec));
        }
        let mut prompts = Vec::with_capacity(set.prompts.len());
        for prompt in set.prompts {
            let embedding = rows
                .get_mut(&prompt.polarity)
                .and_then(Iterator::next)
                .expect("row count checked");
            prompts.push(EmbeddedPrompt { prompt, embedding });
        }
        Ok(Self {
            class_name: set.class_name,
            dim,
            prompts,
        })
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::with_kind("text");
        b.set_meta("embed_dim", self.dim);
        b.set_meta("class", &self.class_name);
        b.set_meta(
            "prompts",
            serde_json::to_string(&self.prompt_set()).expect("serializable"),
        );
        for polarity in Polarity::BOTH {
            let members: Vec<&EmbeddedPrompt> = self.of_polarity(polarity).collect();
            let data: Vec<f32> = members
                .iter()
                .flat_map(|p| p.embedding.iter().copied())
                .collect();
            b.insert(
                format!("emb_{}", polarity.as_str()),
                Tensor::from_f32(vec![members.len(), self.dim], data).expect("consistent rows"),
            )
            .unwrap();
        }
        b
    }
}
