//! Score accumulation, per-entity classification, and prior composition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention_match::{MatchRecord, MatchStatus};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::grid::Mask;
use crate::scalar::Scalar;
use crate::scene_io::SceneBundle;

/// Normalized match confidence `(threshold - cd) / threshold`, or `None`
/// when `cd` is not strictly below the threshold.
pub fn match_score<T: Scalar>(cd: T, threshold_cd: T) -> Option<T> {
    if cd < threshold_cd {
        Some((threshold_cd - cd) / threshold_cd)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Static,
    TransientCandidate,
    VlmStatic,
    VlmTransient,
}

impl Classification {
    pub fn is_static(self) -> bool {
        matches!(self, Classification::Static | Classification::VlmStatic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Static,
    Transient,
}

/// Sum over reference views of the best accepted score in each view.
pub fn score_sum(records: &[MatchRecord]) -> f64 {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for r in records {
        if let (MatchStatus::Accepted, Some(s)) = (r.status, r.score) {
            let e = best.entry(r.ref_view).or_insert(0.0);
            if s > *e {
                *e = s;
            }
        }
    }
    best.values().sum()
}

/// Static iff the summed score is strictly above `score_frac * n`.
pub fn classify(records: &[MatchRecord], n: usize, score_frac: f64) -> (Classification, f64) {
    let sum = score_sum(records);
    let class = if sum > score_frac * n as f64 {
        Classification::Static
    } else {
        Classification::TransientCandidate
    };
    (class, sum)
}

/// Everything decided about one entity of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityDecision {
    pub classification: Classification,
    /// Classification from matching alone, before VLM adjudication.
    pub matching: Classification,
    pub score_sum: f64,
    pub pixel_count: usize,
    pub records: Vec<MatchRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm_verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm_rationale: Option<String>,
}

impl EntityDecision {
    pub fn from_matching(records: Vec<MatchRecord>, n: usize, score_frac: f64, pixel_count: usize) -> Self {
        let (class, sum) = classify(&records, n, score_frac);
        EntityDecision {
            classification: class,
            matching: class,
            score_sum: sum,
            pixel_count,
            records,
            vlm_verdict: None,
            vlm_rationale: None,
        }
    }
}

/// Per-image static mask plus per-entity decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask {
    pub view: usize,
    pub static_map: Mask,
    pub per_entity: BTreeMap<u32, EntityDecision>,
}

impl PriorMask {
    pub fn transient_map(&self) -> Mask {
        self.static_map.complement()
    }
}

/// VLM outcome for one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityVerdict {
    pub verdict: Verdict,
    pub rationale: String,
}

/// Builds one prior per view. Pixels of entities that end up non-static are
/// cleared; every other pixel, including unsegmented ones, is static. A VLM
/// verdict can only promote a transient candidate to static.
pub fn assemble_priors(
    scene: &SceneBundle,
    decisions: &BTreeMap<(usize, u32), EntityDecision>,
    verdicts: &BTreeMap<(usize, u32), EntityVerdict>,
) -> Result<Vec<PriorMask>> {
    let mut priors = Vec::with_capacity(scene.num_views());
    for (v, view) in scene.views.iter().enumerate() {
        let mut static_map = Mask::filled(scene.width, scene.height, true);
        let mut per_entity = BTreeMap::new();
        for m in &view.entity_masks {
            let mut d = decisions
                .get(&(v, m.entity_id))
                .cloned()
                .ok_or(Error::MissingClassification {
                    view: v,
                    entity: m.entity_id,
                })?;
            if let Some(ev) = verdicts.get(&(v, m.entity_id)) {
                d.vlm_verdict = Some(ev.verdict);
                d.vlm_rationale = Some(ev.rationale.clone());
                if d.matching == Classification::TransientCandidate {
                    d.classification = match ev.verdict {
                        Verdict::Static => Classification::VlmStatic,
                        Verdict::Transient => Classification::VlmTransient,
                    };
                }
            }
            if !d.classification.is_static() {
                for (x, y) in m.pixels.pixels() {
                    static_map.set(x, y, false);
                }
            }
            per_entity.insert(m.entity_id, d);
        }
        priors.push(PriorMask {
            view: v,
            static_map,
            per_entity,
        });
    }
    Ok(priors)
}

/// Keeps points whose source pixel is static in its view's prior.
pub fn filter_points<T: Scalar>(points: &PointSet<T>, priors: &[PriorMask]) -> Result<PointSet<T>> {
    if points.provenance.len() != points.len() {
        return Err(Error::InvalidArgument("points carry no pixel provenance".into()));
    }
    let by_view: BTreeMap<usize, &PriorMask> = priors.iter().map(|p| (p.view, p)).collect();
    let mut keep = Vec::new();
    for (k, src) in points.provenance.iter().enumerate() {
        let prior = by_view
            .get(&src.view)
            .ok_or_else(|| Error::InvalidArgument(format!("no prior for view {}", src.view)))?;
        let (w, h) = prior.static_map.dims();
        if src.x >= w || src.y >= h {
            return Err(Error::InvalidArgument(format!(
                "point source ({}, {}) outside view {}",
                src.x, src.y, src.view
            )));
        }
        if *prior.static_map.get(src.x, src.y) {
            keep.push(k);
        }
    }
    Ok(points.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelSource;
    use proptest::prelude::*;

    fn rec(ref_view: usize, score: Option<f64>) -> MatchRecord {
        MatchRecord {
            query_view: 0,
            query_mask_id: 1,
            ref_view,
            ref_mask_id: None,
            recall: 1.0,
            chamfer: score.map(|s| 0.2 * (1.0 - s)),
            score,
            status: if score.is_some() {
                MatchStatus::Accepted
            } else {
                MatchStatus::RejectedCd
            },
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(match_score(0.0f64, 0.2), Some(1.0));
        assert_eq!(match_score(0.1f64, 0.2), Some(0.5));
        assert_eq!(match_score(0.2f64, 0.2), None);
        assert_eq!(match_score(0.3f32, 0.2), None);
    }

    #[test]
    fn classify_examples() {
        let r = vec![rec(1, Some(1.0)), rec(2, Some(0.8)), rec(3, Some(0.9))];
        let (c, s) = classify(&r, 4, 0.5);
        assert_eq!(c, Classification::Static);
        assert!((s - 2.7).abs() < 1e-12);

        let r = vec![rec(1, Some(1.0)), rec(2, Some(0.5)), rec(3, Some(0.5))];
        assert_eq!(classify(&r, 4, 0.5), (Classification::TransientCandidate, 2.0));

        assert_eq!(classify(&[], 4, 0.5), (Classification::TransientCandidate, 0.0));
        assert_eq!(classify(&[rec(1, None)], 4, 0.5).1, 0.0);
    }

    #[test]
    fn only_best_pair_per_view_counts() {
        let r = vec![rec(1, Some(0.4)), rec(1, Some(0.9)), rec(2, Some(0.3))];
        assert!((score_sum(&r) - 1.2).abs() < 1e-12);
    }

    fn static_prior(view: usize, w: usize, h: usize, value: bool) -> PriorMask {
        PriorMask {
            view,
            static_map: Mask::filled(w, h, value),
            per_entity: BTreeMap::new(),
        }
    }

    #[test]
    fn filter_points_extremes() {
        let pts = PointSet::with_provenance(
            vec![[0.0f64, 0.0, 1.0], [1.0, 0.0, 1.0]],
            vec![PixelSource { view: 0, x: 0, y: 0 }, PixelSource { view: 1, x: 2, y: 1 }],
        );
        let all = [static_prior(0, 4, 4, true), static_prior(1, 4, 4, true)];
        assert_eq!(filter_points(&pts, &all).unwrap(), pts);
        let none = [static_prior(0, 4, 4, false), static_prior(1, 4, 4, false)];
        assert!(filter_points(&pts, &none).unwrap().is_empty());
        assert!(filter_points(&PointSet::new(vec![[0.0f64; 3]]), &all).is_err());
    }

    proptest! {
        #[test]
        fn adding_accepted_record_never_demotes(
            scores in proptest::collection::vec((1usize..8, proptest::option::of(0.0f64..=1.0)), 0..12),
            extra_view in 1usize..8,
            extra in 0.0f64..=1.0,
        ) {
            let recs: Vec<_> = scores.iter().map(|&(v, s)| rec(v, s)).collect();
            let (before, sb) = classify(&recs, 8, 0.5);
            let mut more = recs.clone();
            more.push(rec(extra_view, Some(extra)));
            let (after, sa) = classify(&more, 8, 0.5);
            prop_assert!(sa >= sb);
            if before == Classification::Static {
                prop_assert_eq!(after, Classification::Static);
            }
        }
    }
}
