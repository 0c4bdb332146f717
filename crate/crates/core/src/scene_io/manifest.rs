//! `manifest.json` schema for scene directories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::TensorRef;
use crate::error::{Error, Result};
use crate::tokenizer::GridIndex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Number of camera values per view: 3x3 intrinsics then 3x4 extrinsics,
/// both row-major.
pub const CAMERA_STRIDE: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub world_frame_note: String,
    /// Global attention layer count L.
    pub num_layers: usize,
    /// Token feature dimension, informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// "post" (post-softmax rows) is the only supported value.
    #[serde(default = "default_softmax")]
    pub attention_softmax: String,
    /// `[N, 21]` camera table.
    pub cameras: TensorRef,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub attention: Vec<AttentionEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn default_softmax() -> String {
    "post".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    /// `[H, W]`
    pub depth: TensorRef,
    /// `[H, W, 3]`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_map: Option<TensorRef>,
    #[serde(default)]
    pub masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub entity_id: u32,
    pub file: String,
}

/// Query-token rows of an attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenIds {
    /// Every grid token in row-major order.
    All(AllTokens),
    List(Vec<[usize; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTokens {
    All,
}

impl TokenIds {
    pub fn resolve(&self, grid_h: usize, grid_w: usize) -> Vec<GridIndex> {
        match self {
            TokenIds::All(_) => (0..grid_h * grid_w).map(|f| GridIndex::from_flat(f, grid_w)).collect(),
            TokenIds::List(v) => v.iter().map(|&[r, c]| GridIndex::new(r, c)).collect(),
        }
    }
}

/// One `(query view, reference view[, mask])` attention dump, shape
/// `[S, L, h, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub query_view: usize,
    pub reference_view: usize,
    /// `None` for a whole-grid dump.
    #[serde(default)]
    pub mask_id: Option<u32>,
    pub tensor: TensorRef,
    pub token_ids: TokenIds,
}

impl SceneManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::ManifestMissing(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        super::tensor::write_file(&path, text.as_bytes())
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

pub fn image_file(view: usize) -> String {
    format!("images/{view:04}.png")
}

pub fn depth_file(view: usize) -> String {
    format!("depth/{view:04}.bin")
}

pub fn point_map_file(view: usize) -> String {
    format!("points/{view:04}.bin")
}

pub fn mask_file(view: usize, entity: u32) -> String {
    format!("masks/{view:04}_{entity}.png")
}

pub fn attention_file(query: usize, reference: usize, mask: Option<u32>) -> String {
    match mask {
        Some(m) => format!("attention/{query}_{reference}_{m}.bin"),
        None => format!("attention/{query}_{reference}_all.bin"),
    }
}
