//! Attention dumps: loading, slicing, and row lookup.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::manifest::{AttentionEntry, SceneManifest};
use super::SceneBundle;
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::tokenizer::{tokens_for_mask, GridIndex};

/// Global-attention rows of `S` query tokens of view `query_view` over the
/// `h x w` token grid of `reference_view`, for each of `L` layers.
/// Rows are post-softmax and head-averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub query_view: usize,
    pub reference_view: usize,
    pub tokens: Vec<GridIndex>,
    pub num_layers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: Option<usize>,
    /// `[S, L, h, w]` row-major.
    pub data: Vec<f32>,
}

impl AttentionStack {
    pub fn new(
        query_view: usize,
        reference_view: usize,
        tokens: Vec<GridIndex>,
        num_layers: usize,
        grid_h: usize,
        grid_w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if query_view == reference_view {
            return Err(Error::SelfPair(query_view));
        }
        let expect = tokens.len() * num_layers * grid_h * grid_w;
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                what: "attention stack".into(),
                expected: format!("{expect} values"),
                actual: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(
                Some(query_view),
                "attention",
                "entries must be finite and non-negative",
            ));
        }
        Ok(AttentionStack {
            query_view,
            reference_view,
            tokens,
            num_layers,
            grid_h,
            grid_w,
            feature_dim: None,
            data,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Row of query token `s` in layer `l`, length `h * w`.
    pub fn row(&self, s: usize, l: usize) -> &[f32] {
        let k = self.cells();
        let start = (s * self.num_layers + l) * k;
        &self.data[start..start + k]
    }
}

/// Lazy, cached access to every attention dump of one loaded scene.
pub struct SceneAttention {
    root: PathBuf,
    entries: Vec<AttentionEntry>,
    grid_h: usize,
    grid_w: usize,
    num_layers: usize,
    feature_dim: Option<usize>,
    /// (query, reference) -> entry indices, mask-specific dumps first
    by_pair: HashMap<(usize, usize), Vec<usize>>,
    cache: Mutex<HashMap<usize, Arc<Vec<f32>>>>,
}

impl SceneAttention {
    pub fn new(root: &Path, manifest: &SceneManifest) -> Self {
        let (grid_h, grid_w) = manifest.grid_dims();
        let mut by_pair: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (k, e) in manifest.attention.iter().enumerate() {
            by_pair.entry((e.query_view, e.reference_view)).or_default().push(k);
        }
        for list in by_pair.values_mut() {
            list.sort_by_key(|&k| (manifest.attention[k].mask_id.is_none(), k));
        }
        SceneAttention {
            root: root.to_path_buf(),
            entries: manifest.attention.clone(),
            grid_h,
            grid_w,
            num_layers: manifest.num_layers,
            feature_dim: manifest.feature_dim,
            by_pair,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn for_scene(scene: &SceneBundle) -> Result<Self> {
        match (&scene.root, &scene.manifest) {
            (Some(root), Some(m)) => Ok(Self::new(root, m)),
            _ => Err(Error::InvalidArgument(
                "scene was not loaded from a directory; no attention dumps".into(),
            )),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_pair(&self, query: usize, reference: usize) -> bool {
        self.by_pair.contains_key(&(query, reference))
    }

    fn payload(&self, k: usize) -> Result<Arc<Vec<f32>>> {
        if let Some(p) = self.cache.lock().expect("attention cache").get(&k) {
            return Ok(p.clone());
        }
        let e = &self.entries[k];
        let data = e.tensor.read_f32(&self.root)?;
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(
                Some(e.query_view),
                "attention",
                format!("{}: entries must be finite and non-negative", e.tensor.file),
            ));
        }
        let data = Arc::new(data);
        self.cache
            .lock()
            .expect("attention cache")
            .insert(k, data.clone());
        Ok(data)
    }

    /// Stack for the given query tokens of `query` attending `reference`.
    /// Rows come from the dump of `prefer_mask` when present, otherwise
    /// from any dump of the pair that holds them.
    pub fn stack(
        &self,
        query: usize,
        reference: usize,
        tokens: &[GridIndex],
        prefer_mask: Option<u32>,
    ) -> Result<AttentionStack> {
        if query == reference {
            return Err(Error::SelfPair(query));
        }
        let unavailable = |reason: String| Error::AttentionUnavailable {
            query_view: query,
            reference_view: reference,
            reason,
        };
        let candidates = self
            .by_pair
            .get(&(query, reference))
            .ok_or_else(|| unavailable("no dump for pair".into()))?;
        let mut order: Vec<usize> = candidates.clone();
        if let Some(m) = prefer_mask {
            order.sort_by_key(|&k| self.entries[k].mask_id != Some(m));
        }

        let layers = self.num_layers;
        let row_len = layers * self.grid_h * self.grid_w;
        let mut data = vec![0f32; tokens.len() * row_len];
        let mut filled = vec![false; tokens.len()];
        for &k in &order {
            if filled.iter().all(|&f| f) {
                break;
            }
            let e = &self.entries[k];
            let ids = e.token_ids.resolve(self.grid_h, self.grid_w);
            let pos: HashMap<GridIndex, usize> = ids.iter().enumerate().map(|(r, &g)| (g, r)).collect();
            if !tokens.iter().zip(&filled).any(|(g, &f)| !f && pos.contains_key(g)) {
                continue;
            }
            let payload = self.payload(k)?;
            for (s, g) in tokens.iter().enumerate() {
                if filled[s] {
                    continue;
                }
                if let Some(&r) = pos.get(g) {
                    data[s * row_len..(s + 1) * row_len]
                        .copy_from_slice(&payload[r * row_len..(r + 1) * row_len]);
                    filled[s] = true;
                }
            }
        }
        if let Some(s) = filled.iter().position(|&f| !f) {
            return Err(unavailable(format!(
                "no row for query token ({}, {})",
                tokens[s].row, tokens[s].col
            )));
        }
        let mut stack = AttentionStack::new(
            query,
            reference,
            tokens.to_vec(),
            layers,
            self.grid_h,
            self.grid_w,
            data,
        )?;
        stack.feature_dim = self.feature_dim;
        Ok(stack)
    }
}

/// Loads the attention of mask `mask_id` of view `query` over view
/// `reference`. A mask-specific dump is returned as stored; otherwise the
/// whole-grid dump of the pair is sliced to the mask's tokens.
pub fn load_attention(
    scene_dir: &Path,
    query: usize,
    reference: usize,
    mask_id: u32,
    occupancy_frac: f64,
) -> Result<AttentionStack> {
    if query == reference {
        return Err(Error::SelfPair(query));
    }
    let manifest = SceneManifest::read(scene_dir)?;
    let (gh, gw) = manifest.grid_dims();
    let access = SceneAttention::new(scene_dir, &manifest);
    if let Some(e) = manifest
        .attention
        .iter()
        .find(|e| e.query_view == query && e.reference_view == reference && e.mask_id == Some(mask_id))
    {
        let tokens = e.token_ids.resolve(gh, gw);
        return access.stack(query, reference, &tokens, Some(mask_id));
    }
    let view = manifest.views.get(query).ok_or_else(|| {
        Error::InvalidArgument(format!("view {query} out of range"))
    })?;
    let entry = view
        .masks
        .iter()
        .find(|m| m.entity_id == mask_id)
        .ok_or_else(|| Error::InvalidArgument(format!("view {query} has no entity {mask_id}")))?;
    let mask = Mask::load_png(&scene_dir.join(&entry.file))?;
    let tokens = tokens_for_mask(query, &mask, manifest.patch_size, occupancy_frac)?;
    access.stack(query, reference, tokens.indices(), Some(mask_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_rejects_negative_and_self_pairs() {
        let t = vec![GridIndex::new(0, 0)];
        assert!(matches!(
            AttentionStack::new(1, 1, t.clone(), 1, 1, 2, vec![0.5, 0.5]),
            Err(Error::SelfPair(1))
        ));
        assert!(AttentionStack::new(0, 1, t.clone(), 1, 1, 2, vec![-0.1, 1.1]).is_err());
        assert!(AttentionStack::new(0, 1, t.clone(), 1, 1, 2, vec![f32::NAN, 1.0]).is_err());
        assert!(AttentionStack::new(0, 1, t, 1, 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn row_indexing_is_token_major() {
        let t = vec![GridIndex::new(0, 0), GridIndex::new(0, 1)];
        let data: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        let s = AttentionStack::new(0, 1, t, 3, 1, 2, data).unwrap();
        assert_eq!(s.row(0, 0), &[0.0, 1.0]);
        assert_eq!(s.row(0, 2), &[4.0, 5.0]);
        assert_eq!(s.row(1, 1), &[8.0, 9.0]);
    }
}
