//! Attention-guided cross-view entity matching.
//!
//! Query tokens of an entity mask in view `i` are projected into view `j` by
//! the argmax of their layer-averaged global attention, then reprojected
//! back into `i` the same way. A projected token is valid when its
//! reprojection lands inside the query mask's token set; recall is the valid
//! fraction.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject, PointSet};
use crate::grid::Mask;
use crate::scalar::Scalar;
use crate::scene_io::{AttentionStack, SceneAttention, SceneBundle};
use crate::tokenizer::{tokens_for_mask, GridIndex, TokenSet};

/// Anything that can serve attention rows for a query-token list.
pub trait AttentionSource: Sync {
    fn stack(
        &self,
        query: usize,
        reference: usize,
        tokens: &[GridIndex],
        prefer_mask: Option<u32>,
    ) -> Result<AttentionStack>;
}

impl AttentionSource for SceneAttention {
    fn stack(
        &self,
        query: usize,
        reference: usize,
        tokens: &[GridIndex],
        prefer_mask: Option<u32>,
    ) -> Result<AttentionStack> {
        SceneAttention::stack(self, query, reference, tokens, prefer_mask)
    }
}

/// Layer-averaged attention `[S, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention<T> {
    pub tokens: Vec<GridIndex>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> AggregatedAttention<T> {
    pub fn row(&self, s: usize) -> &[T] {
        let k = self.grid_h * self.grid_w;
        &self.data[s * k..(s + 1) * k]
    }
}

/// Mean over the layer axis. Each cell's layer values are summed in sorted
/// order, so the result does not depend on layer order.
pub fn aggregate_attention<T: Scalar>(stack: &AttentionStack) -> Result<AggregatedAttention<T>> {
    let layers = stack.num_layers;
    if layers == 0 {
        return Err(Error::NoLayers);
    }
    let k = stack.cells();
    let inv = T::one() / T::from_count(layers);
    let mut data = Vec::with_capacity(stack.num_tokens() * k);
    let mut cell = vec![0f32; layers];
    for s in 0..stack.num_tokens() {
        for c in 0..k {
            for (l, v) in cell.iter_mut().enumerate() {
                *v = stack.row(s, l)[c];
            }
            cell.sort_by(f32::total_cmp);
            let sum: T = cell.iter().map(|&v| T::lit(f64::from(v))).sum();
            data.push(sum * inv);
        }
    }
    Ok(AggregatedAttention {
        tokens: stack.tokens.clone(),
        grid_h: stack.grid_h,
        grid_w: stack.grid_w,
        data,
    })
}

/// Per query token, the reference cell with the highest aggregated
/// attention; ties go to the lowest row-major index.
pub fn project_tokens<T: Scalar>(agg: &AggregatedAttention<T>) -> Vec<GridIndex> {
    (0..agg.tokens.len())
        .map(|s| {
            let row = agg.row(s);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            GridIndex::from_flat(best, agg.grid_w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub query_view: usize,
    pub reference_view: usize,
    /// Tokens actually queried (the mask's token set, possibly capped).
    pub query_tokens: TokenSet,
    /// The mask's full token set, used for the validity test.
    pub mask_tokens: TokenSet,
    /// `projected[s]`: reference-view token of query token `s`.
    pub projected: Vec<GridIndex>,
    /// `reprojected[s]`: query-view token reached from `projected[s]`.
    pub reprojected: Vec<GridIndex>,
    pub valid: Vec<bool>,
}

impl ProjectionResult {
    pub fn num_tokens(&self) -> usize {
        self.projected.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(query token, projected token)` pairs.
    pub fn projected_pairs(&self) -> impl Iterator<Item = (GridIndex, GridIndex)> + '_ {
        self.query_tokens.indices().iter().copied().zip(self.projected.iter().copied())
    }

    /// `(projected token, reprojected token)` pairs.
    pub fn reprojected_pairs(&self) -> impl Iterator<Item = (GridIndex, GridIndex)> + '_ {
        self.projected.iter().copied().zip(self.reprojected.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub occupancy_frac: f64,
    pub max_query_tokens: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            occupancy_frac: 0.5,
            max_query_tokens: 256,
        }
    }
}

fn entity_mask<'a>(scene: &'a SceneBundle, view: usize, mask_id: u32) -> Result<&'a Mask> {
    scene
        .views
        .get(view)
        .ok_or_else(|| Error::InvalidArgument(format!("view {view} out of range")))?
        .entity(mask_id)
        .map(|m| &m.pixels)
        .ok_or_else(|| Error::InvalidArgument(format!("view {view} has no entity {mask_id}")))
}

/// Project the mask's tokens from view `i` into view `j` and back.
pub fn cycle_project<A: AttentionSource + ?Sized>(
    scene: &SceneBundle,
    source: &A,
    i: usize,
    mask_id: u32,
    j: usize,
    params: &MatchParams,
) -> Result<ProjectionResult> {
    if i == j {
        return Err(Error::SelfPair(i));
    }
    if j >= scene.num_views() {
        return Err(Error::InvalidArgument(format!("view {j} out of range")));
    }
    let mask = entity_mask(scene, i, mask_id)?;
    let mask_tokens = tokens_for_mask(i, mask, scene.patch_size, params.occupancy_frac)?;
    let query_tokens = mask_tokens.capped(params.max_query_tokens);
    if query_tokens.is_empty() {
        return Ok(ProjectionResult {
            query_view: i,
            reference_view: j,
            query_tokens,
            mask_tokens,
            projected: vec![],
            reprojected: vec![],
            valid: vec![],
        });
    }

    let forward = source.stack(i, j, query_tokens.indices(), Some(mask_id))?;
    let projected = project_tokens(&aggregate_attention::<f64>(&forward)?);

    let unique: Vec<GridIndex> = projected.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let backward = source.stack(j, i, &unique, None)?;
    let back = project_tokens(&aggregate_attention::<f64>(&backward)?);
    let lookup: BTreeMap<GridIndex, GridIndex> = unique.into_iter().zip(back).collect();
    let reprojected: Vec<GridIndex> = projected.iter().map(|g| lookup[g]).collect();
    let valid = reprojected.iter().map(|&g| mask_tokens.contains(g)).collect();

    Ok(ProjectionResult {
        query_view: i,
        reference_view: j,
        query_tokens,
        mask_tokens,
        projected,
        reprojected,
        valid,
    })
}

/// Fraction of projected tokens whose reprojection is valid, over all `S`
/// projected tokens.
pub fn recall(pr: &ProjectionResult) -> Result<f64> {
    if pr.num_tokens() == 0 {
        return Err(Error::EmptyTokenSet);
    }
    Ok(pr.valid_count() as f64 / pr.num_tokens() as f64)
}

/// Entity of view `j` containing the most valid projected-token patch
/// centers; ties go to the lowest entity id.
pub fn assign_reference_mask(scene: &SceneBundle, pr: &ProjectionResult) -> Option<u32> {
    let view = &scene.views[pr.reference_view];
    let p = scene.patch_size;
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    for (g, _) in pr.projected.iter().zip(&pr.valid).filter(|(_, &v)| v) {
        let (cx, cy) = (g.col * p + p / 2, g.row * p + p / 2);
        for m in &view.entity_masks {
            if *m.pixels.get(cx, cy) {
                *votes.entry(m.entity_id).or_default() += 1;
            }
        }
    }
    let mut best: Option<(u32, usize)> = None;
    for (id, n) in votes {
        if best.map_or(true, |(_, bn)| n > bn) {
            best = Some((id, n));
        }
    }
    best.map(|(id, _)| id)
}

/// Cycle projection of one (mask, reference view) pair with its recall and
/// reference-mask assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub projection: ProjectionResult,
    /// `None` when the mask has no tokens.
    pub recall: Option<f64>,
    pub ref_mask_id: Option<u32>,
}

pub fn evaluate_pair<A: AttentionSource + ?Sized>(
    scene: &SceneBundle,
    source: &A,
    i: usize,
    mask_id: u32,
    j: usize,
    params: &MatchParams,
) -> Result<PairEvaluation> {
    let projection = cycle_project(scene, source, i, mask_id, j, params)?;
    let recall = recall(&projection).ok();
    let ref_mask_id = assign_reference_mask(scene, &projection);
    Ok(PairEvaluation {
        projection,
        recall,
        ref_mask_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub reference_view: usize,
    pub projection: ProjectionResult,
    pub recall: f64,
    pub ref_mask_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Reference views skipped for lack of attention, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Reference views whose recall reaches `recall_threshold` (inclusive).
pub fn candidate_pairs<A: AttentionSource + ?Sized>(
    scene: &SceneBundle,
    source: &A,
    i: usize,
    mask_id: u32,
    recall_threshold: f64,
    params: &MatchParams,
) -> Result<CandidateSet> {
    let mut out = CandidateSet::default();
    for j in (0..scene.num_views()).filter(|&j| j != i) {
        match evaluate_pair(scene, source, i, mask_id, j, params) {
            Ok(ev) => {
                if let Some(r) = ev.recall.filter(|&r| r >= recall_threshold) {
                    out.candidates.push(Candidate {
                        reference_view: j,
                        projection: ev.projection,
                        recall: r,
                        ref_mask_id: ev.ref_mask_id,
                    });
                }
            }
            Err(e @ Error::AttentionUnavailable { .. }) => {
                debug!("skipping pair ({i}, {j}) for mask {mask_id}: {e}");
                out.skipped.push((j, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Point sets entering the Chamfer test: query-mask pixels inside patches of
/// validly projected query tokens, and reference pixels inside patches of
/// the valid projected tokens (restricted to the reference mask when one was
/// assigned).
pub fn match_point_sets<T: Scalar>(
    scene: &SceneBundle,
    pr: &ProjectionResult,
    query_mask_id: u32,
    ref_mask_id: Option<u32>,
) -> Result<(PointSet<T>, PointSet<T>)> {
    let p = scene.patch_size;
    let (w, h) = (scene.width, scene.height);
    let mut q_region = Mask::filled(w, h, false);
    let mut r_region = Mask::filled(w, h, false);
    let paint = |m: &mut Mask, g: GridIndex| {
        for y in g.row * p..(g.row + 1) * p {
            for x in g.col * p..(g.col + 1) * p {
                m.set(x, y, true);
            }
        }
    };
    for ((&q, &r), _) in pr
        .query_tokens
        .indices()
        .iter()
        .zip(&pr.projected)
        .zip(&pr.valid)
        .filter(|(_, &v)| v)
    {
        paint(&mut q_region, q);
        paint(&mut r_region, r);
    }
    let q_mask = entity_mask(scene, pr.query_view, query_mask_id)?;
    let q_region = q_region.intersection(q_mask);
    let r_region = match ref_mask_id {
        Some(id) => r_region.intersection(entity_mask(scene, pr.reference_view, id)?),
        None => r_region,
    };
    Ok((
        unproject(pr.query_view, &scene.views[pr.query_view], &q_region)?,
        unproject(pr.reference_view, &scene.views[pr.reference_view], &r_region)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    RejectedRecall,
    RejectedCd,
    Accepted,
}

/// Outcome of one (query mask, reference view) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub query_view: usize,
    pub query_mask_id: u32,
    pub ref_view: usize,
    pub ref_mask_id: Option<u32>,
    pub recall: f64,
    pub chamfer: Option<f64>,
    pub score: Option<f64>,
    pub status: MatchStatus,
}
