//! End-to-end prior generation: load, match, score, adjudicate, assemble,
//! filter points, save, report.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention_match::{evaluate_pair, match_point_sets, AttentionSource, MatchParams, MatchRecord, MatchStatus};
use crate::config::{PipelineConfig, VlmMode};
use crate::error::{Error, Result};
use crate::eval::{load_gt_transient, report, EvalReport};
use crate::geometry::{chamfer, scene_points, subsample, PointSet};
use crate::prior::{assemble_priors, filter_points, match_score, Classification, EntityDecision, EntityVerdict, PriorMask};
use crate::scene_io::tensor::encode_f32;
use crate::scene_io::{load_scene, save_prior_masks, SceneAttention, SceneBundle};
use crate::vlm::{adjudicate_view, AuditLog, HttpVlm, VlmBackend};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const POINTS_FILE: &str = "points_filtered.bin";

/// A (query view, mask, reference view) pair dropped for lack of attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedPair {
    pub query_view: usize,
    pub mask_id: u32,
    pub reference_view: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct MatchOutcome {
    pub decisions: BTreeMap<(usize, u32), EntityDecision>,
    pub usable_pairs: usize,
    pub skipped: Vec<SkippedPair>,
}

/// Seed of the Chamfer subsampling for one pair.
pub fn pair_seed(seed: u64, i: usize, mask_id: u32, j: usize) -> u64 {
    let mut h = seed ^ 0xD6E8_FEB8_6659_FD93;
    for v in [i as u64, u64::from(mask_id), j as u64] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

enum PairOutcome {
    Record(MatchRecord),
    Skipped(SkippedPair),
}

fn match_one<A: AttentionSource + ?Sized>(
    scene: &SceneBundle,
    source: &A,
    cfg: &PipelineConfig,
    (i, m, j): (usize, u32, usize),
) -> Result<PairOutcome> {
    let params = MatchParams {
        occupancy_frac: cfg.occupancy_frac,
        max_query_tokens: cfg.max_query_tokens,
    };
    let ev = match evaluate_pair(scene, source, i, m, j, &params) {
        Ok(ev) => ev,
        Err(e @ Error::AttentionUnavailable { .. }) => {
            return Ok(PairOutcome::Skipped(SkippedPair {
                query_view: i,
                mask_id: m,
                reference_view: j,
                reason: e.to_string(),
            }))
        }
        Err(e) => return Err(e),
    };
    let recall = ev.recall.unwrap_or(0.0);
    let mut rec = MatchRecord {
        query_view: i,
        query_mask_id: m,
        ref_view: j,
        ref_mask_id: ev.ref_mask_id,
        recall,
        chamfer: None,
        score: None,
        status: MatchStatus::RejectedRecall,
    };
    if ev.recall.is_none() || recall < cfg.recall_threshold {
        return Ok(PairOutcome::Record(rec));
    }
    let (p, q) = match_point_sets::<f64>(scene, &ev.projection, m, ev.ref_mask_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, i, m, j));
    let p = subsample(&p, cfg.max_cd_points, &mut rng);
    let q = subsample(&q, cfg.max_cd_points, &mut rng);
    rec.status = MatchStatus::RejectedCd;
    match chamfer(&p, &q) {
        Ok(cd) => {
            rec.chamfer = Some(cd);
            if let Some(s) = match_score(cd, cfg.cd_threshold) {
                rec.score = Some(s);
                rec.status = MatchStatus::Accepted;
            }
        }
        Err(Error::EmptyPointSet) => {}
        Err(e) => return Err(e),
    }
    Ok(PairOutcome::Record(rec))
}

/// Matches every entity of every view against every other view and
/// classifies it. Fails with `AttentionUnavailable` when no pair at all has
/// attention.
pub fn match_entities<A: AttentionSource + ?Sized>(
    scene: &SceneBundle,
    source: &A,
    cfg: &PipelineConfig,
) -> Result<MatchOutcome> {
    let n = scene.num_views();
    let mut items = Vec::new();
    for (i, view) in scene.views.iter().enumerate() {
        for m in &view.entity_masks {
            for j in (0..n).filter(|&j| j != i) {
                items.push((i, m.entity_id, j));
            }
        }
    }
    let pool = thread_pool(cfg.jobs)?;
    let results: Vec<Result<PairOutcome>> =
        pool.install(|| items.par_iter().map(|&it| match_one(scene, source, cfg, it)).collect());

    let mut records: BTreeMap<(usize, u32), Vec<MatchRecord>> = BTreeMap::new();
    let mut out = MatchOutcome::default();
    for r in results {
        match r? {
            PairOutcome::Record(rec) => {
                out.usable_pairs += 1;
                records.entry((rec.query_view, rec.query_mask_id)).or_default().push(rec);
            }
            PairOutcome::Skipped(s) => out.skipped.push(s),
        }
    }
    if !items.is_empty() && out.usable_pairs == 0 {
        let s = &out.skipped[0];
        return Err(Error::AttentionUnavailable {
            query_view: s.query_view,
            reference_view: s.reference_view,
            reason: format!("no usable attention for any of {} pairs", items.len()),
        });
    }
    if !out.skipped.is_empty() {
        warn!("{} of {} pairs skipped for missing attention", out.skipped.len(), items.len());
    }
    for (i, view) in scene.views.iter().enumerate() {
        for m in &view.entity_masks {
            let recs = records.remove(&(i, m.entity_id)).unwrap_or_default();
            out.decisions.insert(
                (i, m.entity_id),
                EntityDecision::from_matching(recs, n, cfg.score_frac, m.pixel_count),
            );
        }
    }
    Ok(out)
}

/// Asks the VLM about each view's large transient candidates.
pub fn adjudicate(
    scene: &SceneBundle,
    decisions: &BTreeMap<(usize, u32), EntityDecision>,
    cfg: &PipelineConfig,
    backend: &dyn VlmBackend,
) -> Result<BTreeMap<(usize, u32), EntityVerdict>> {
    let pool = thread_pool(cfg.vlm.concurrency.max(1))?;
    let per_view: Vec<Result<BTreeMap<u32, EntityVerdict>>> = pool.install(|| {
        scene
            .views
            .par_iter()
            .enumerate()
            .map(|(v, view)| {
                let candidates: Vec<_> = view
                    .entity_masks
                    .iter()
                    .filter(|m| {
                        decisions
                            .get(&(v, m.entity_id))
                            .is_some_and(|d| d.matching == Classification::TransientCandidate)
                    })
                    .cloned()
                    .collect();
                adjudicate_view(
                    v,
                    &view.image,
                    &candidates,
                    cfg.min_region_pixels,
                    cfg.vlm.palette_seed,
                    cfg.vlm.overlay_alpha,
                    backend,
                )
            })
            .collect()
    });
    let mut out = BTreeMap::new();
    for (v, r) in per_view.into_iter().enumerate() {
        for (id, verdict) in r? {
            out.insert((v, id), verdict);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub priors: Vec<PriorMask>,
    pub matching: MatchOutcome,
    pub verdicts: BTreeMap<(usize, u32), EntityVerdict>,
    pub points_total: usize,
    pub points_kept: PointSet<f64>,
}

/// Runs every in-memory stage on a loaded scene. `backend` is consulted
/// only when the VLM stage is enabled.
pub fn run_scene<A: AttentionSource + ?Sized>(
    scene: &SceneBundle,
    source: &A,
    cfg: &PipelineConfig,
    backend: Option<&dyn VlmBackend>,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let matching = match_entities(scene, source, cfg)?;
    info!(
        "matched {} entities over {} pairs",
        matching.decisions.len(),
        matching.usable_pairs
    );
    let verdicts = match (cfg.vlm.mode, backend) {
        (VlmMode::Off, _) | (_, None) => BTreeMap::new(),
        (VlmMode::Endpoint, Some(b)) => adjudicate(scene, &matching.decisions, cfg, b)?,
    };
    let priors = assemble_priors(scene, &matching.decisions, &verdicts)?;
    let points = scene_points::<f64>(scene, cfg.point_stride)?;
    let points_kept = filter_points(&points, &priors)?;
    Ok(PipelineResult {
        priors,
        matching,
        verdicts,
        points_total: points.len(),
        points_kept,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub scene: String,
    pub num_views: usize,
    pub config: PipelineConfig,
    pub score_threshold: f64,
    pub usable_pairs: usize,
    pub skipped_pairs: Vec<SkippedPair>,
    pub vlm_verdicts: usize,
    pub points_total: usize,
    pub points_kept: usize,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub result: PipelineResult,
    pub manifest: RunManifest,
    pub report: Option<EvalReport>,
}

/// Loads `scene_dir`, runs the pipeline, and writes priors, the filtered
/// point cloud, the run manifest and, when the scene carries ground truth,
/// the evaluation report into `out_dir`. With `backend` unset and the VLM
/// enabled, an HTTP client is built from the config and the environment.
pub fn run(scene_dir: &Path, out_dir: &Path, cfg: &PipelineConfig, backend: Option<&dyn VlmBackend>) -> Result<RunSummary> {
    cfg.validate()?;
    let scene = load_scene(scene_dir)?;
    let attention = SceneAttention::for_scene(&scene)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let http;
    let backend: Option<&dyn VlmBackend> = match (cfg.vlm.mode, backend) {
        (VlmMode::Off, _) => None,
        (VlmMode::Endpoint, Some(b)) => Some(b),
        (VlmMode::Endpoint, None) => {
            http = HttpVlm::from_env(cfg.vlm.clone(), Some(AuditLog::create(out_dir)?))?;
            Some(&http)
        }
    };
    let result = run_scene(&scene, &attention, cfg, backend)?;

    save_prior_masks(out_dir, &result.priors)?;
    let flat: Vec<f32> = result
        .points_kept
        .points
        .iter()
        .flat_map(|p| p.map(|c| c as f32))
        .collect();
    let pts = out_dir.join(POINTS_FILE);
    std::fs::write(&pts, encode_f32(&flat)).map_err(|e| Error::io(&pts, e))?;

    let n = scene.num_views();
    let mut outputs = vec![
        format!("{}/", crate::scene_io::PRIORS_DIR),
        POINTS_FILE.to_string(),
    ];
    let scene_name = scene_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| scene_dir.display().to_string());
    let report = match load_gt_transient(scene_dir, n)? {
        Some(gt) => {
            let r = report(&scene_name, &result.priors, Some(&gt), None, cfg.score_threshold(n), cfg.cd_threshold)?;
            r.write(out_dir)?;
            outputs.extend(["report.csv", "report.json", "report.txt"].map(String::from));
            Some(r)
        }
        None => None,
    };
    if cfg.vlm.mode == VlmMode::Endpoint {
        outputs.push(crate::vlm::AUDIT_FILE.to_string());
    }
    let manifest = RunManifest {
        tool: "maskprior".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scene: scene_name,
        num_views: n,
        config: cfg.clone(),
        score_threshold: cfg.score_threshold(n),
        usable_pairs: result.matching.usable_pairs,
        skipped_pairs: result.matching.skipped.clone(),
        vlm_verdicts: result.verdicts.len(),
        points_total: result.points_total,
        points_kept: result.points_kept.len(),
        outputs,
    };
    let path = out_dir.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(RunSummary {
        result,
        manifest,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    #[test]
    fn pair_seeds_differ() {
        assert_ne!(pair_seed(0, 0, 1, 2), pair_seed(0, 0, 2, 1));
        assert_ne!(pair_seed(0, 1, 1, 2), pair_seed(1, 1, 1, 2));
    }

    #[test]
    fn noise_free_synth_matches_labels() {
        let s = generate(&SynthSpec {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let r = run_scene(&s.scene, &s.attention, &PipelineConfig::default(), None).unwrap();
        for ((v, id), d) in &r.matching.decisions {
            let truth = s.truth.entity(*id).unwrap();
            assert_eq!(d.classification.is_static(), truth.is_static, "view {v} entity {id}: {d:?}");
        }
    }
}
