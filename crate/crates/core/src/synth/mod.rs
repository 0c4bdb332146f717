//! Deterministic synthetic scenes with ground-truth labels.
//!
//! Boxes on a finite ground plane are ray-cast from cameras on an arc.
//! Static boxes appear in every view; each transient box appears in exactly
//! one. Attention rows are built from the true correspondences, so a static
//! entity's tokens form a closed project/reproject cycle while transient
//! tokens have no co-visible target and get flat rows.

mod attention;
mod render;
mod warmup;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{RowTarget, SynthAttention};
pub use render::{render, BoxShape, Rendered, Surface};
pub use warmup::{generate_warmup_frames, WarmupSpec};

use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::eval::{gt_transient_file, GT_DIR};
use crate::grid::{Grid, Mask};
use crate::scene_io::{write_scene, EntityMask, SceneBundle, SceneManifest, ViewRecord};
use crate::tokenizer::{occupied_tokens, tokens_for_mask, GridIndex};

pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_views: usize,
    pub num_static: usize,
    pub num_transient: usize,
    /// Static boxes whose attention never matches (stand-ins for
    /// featureless walls); ground truth counts them as static.
    pub num_textureless: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    /// Scale of the half-normal noise added to every attention entry.
    pub noise: f64,
    pub focal: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Total angular span of the camera arc.
    pub arc_degrees: f64,
    /// Box centers lie in `|x|, |y| <= layout_extent`.
    pub layout_extent: f64,
    pub ground_extent: f64,
    pub footprint: [f64; 2],
    pub box_height: [f64; 2],
    pub max_attempts: usize,
    /// Also write per-mask attention dumps next to the whole-grid ones.
    pub mask_dumps: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            num_views: 4,
            num_static: 5,
            num_transient: 1,
            num_textureless: 0,
            width: 160,
            height: 120,
            patch_size: 8,
            num_layers: 2,
            noise: 0.0,
            focal: 150.0,
            camera_radius: 1.6,
            camera_height: 0.6,
            arc_degrees: 60.0,
            layout_extent: 0.55,
            ground_extent: 1.5,
            footprint: [0.15, 0.3],
            box_height: [0.12, 0.35],
            max_attempts: 500,
            mask_dumps: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_static == 0 {
            return bad("at least one static entity is required");
        }
        if self.num_views < 2 {
            return bad("at least two views are required");
        }
        if self.patch_size == 0 || self.width % self.patch_size != 0 || self.height % self.patch_size != 0 {
            return bad("image dimensions must be divisible by the patch size");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be positive");
        }
        if self.num_layers == 0 {
            return bad("at least one attention layer is required");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        let pos = [self.focal, self.camera_radius, self.layout_extent, self.ground_extent];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("focal, camera radius and extents must be positive");
        }
        for r in [self.footprint, self.box_height] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad("size ranges must be positive and ordered");
            }
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }

    fn num_entities(&self) -> usize {
        self.num_static + self.num_textureless + self.num_transient
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Static,
    Textureless,
    Transient,
}

impl EntityKind {
    pub fn is_static(self) -> bool {
        !matches!(self, EntityKind::Transient)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTruth {
    pub entity_id: u32,
    pub kind: EntityKind,
    pub is_static: bool,
    /// Views in which the entity has a non-empty mask.
    pub views: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub num_views: usize,
    pub entities: Vec<EntityTruth>,
}

impl GroundTruth {
    pub fn entity(&self, id: u32) -> Option<&EntityTruth> {
        self.entities.iter().find(|e| e.entity_id == id)
    }

    pub fn transient_ids(&self, view: usize) -> Vec<u32> {
        self.entities
            .iter()
            .filter(|e| !e.is_static && e.views.contains(&view))
            .map(|e| e.entity_id)
            .collect()
    }

    pub fn load(scene_dir: &Path) -> Result<Option<GroundTruth>> {
        let path = scene_dir.join(GT_DIR).join(LABELS_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|source| Error::Json { path, source })
    }
}

/// A generated scene held in memory.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub scene: SceneBundle,
    pub attention: SynthAttention,
    pub truth: GroundTruth,
    pub transient_masks: Vec<Mask>,
}

struct Layout {
    boxes: Vec<BoxShape>,
    kinds: Vec<EntityKind>,
    /// View of each entity that is transient.
    transient_view: Vec<Option<usize>>,
}

fn sample_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let mut boxes: Vec<BoxShape> = Vec::new();
    let mut kinds = Vec::new();
    let mut transient_view = Vec::new();
    let gap = 0.04;
    for k in 0..spec.num_entities() {
        let kind = if k < spec.num_static {
            EntityKind::Static
        } else if k < spec.num_static + spec.num_textureless {
            EntityKind::Textureless
        } else {
            EntityKind::Transient
        };
        let mut placed = None;
        for _ in 0..200 {
            let sx = rng.gen_range(spec.footprint[0]..=spec.footprint[1]);
            let sy = rng.gen_range(spec.footprint[0]..=spec.footprint[1]);
            let h = rng.gen_range(spec.box_height[0]..=spec.box_height[1]);
            let cx = rng.gen_range(-spec.layout_extent..=spec.layout_extent);
            let cy = rng.gen_range(-spec.layout_extent..=spec.layout_extent);
            let min = [cx - sx / 2.0, cy - sy / 2.0, 0.0];
            let max = [cx + sx / 2.0, cy + sy / 2.0, h];
            let clear = boxes.iter().all(|b| {
                min[0] > b.max[0] + gap || max[0] < b.min[0] - gap || min[1] > b.max[1] + gap || max[1] < b.min[1] - gap
            });
            if clear {
                let color = [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)];
                placed = Some(BoxShape { min, max, color });
                break;
            }
        }
        boxes.push(placed?);
        kinds.push(kind);
        transient_view.push((kind == EntityKind::Transient).then(|| rng.gen_range(0..spec.num_views)));
    }
    Some(Layout {
        boxes,
        kinds,
        transient_view,
    })
}

fn layout_cameras(spec: &SynthSpec) -> Vec<CameraParams<f64>> {
    let n = spec.num_views;
    (0..n)
        .map(|v| {
            let frac = if n == 1 { 0.5 } else { v as f64 / (n - 1) as f64 };
            let theta = (frac - 0.5) * spec.arc_degrees.to_radians();
            let eye = [
                spec.camera_radius * theta.cos(),
                spec.camera_radius * theta.sin(),
                spec.camera_height,
            ];
            CameraParams::look_at(
                spec.focal,
                spec.focal,
                spec.width as f64 / 2.0,
                spec.height as f64 / 2.0,
                eye,
                [0.0, 0.0, 0.1],
                [0.0, 0.0, 1.0],
            )
        })
        .collect()
}

/// Per view: rendered surfaces, entity masks, the owner of each token
/// (occupancy at least one half) and each entity's anchor tokens (owned
/// tokens whose patch-center pixel is on the entity).
struct ViewData {
    rendered: Rendered,
    masks: Vec<EntityMask>,
    anchors: BTreeMap<u32, Vec<GridIndex>>,
    owner: Grid<Option<u32>>,
}

fn entity_id(k: usize) -> u32 {
    k as u32 + 1
}

fn build_view(spec: &SynthSpec, layout: &Layout, cam: &CameraParams<f64>, v: usize) -> Result<Option<ViewData>> {
    let visible: Vec<usize> = (0..layout.boxes.len())
        .filter(|&k| layout.transient_view[k].map_or(true, |tv| tv == v))
        .collect();
    let shapes: Vec<BoxShape> = visible.iter().map(|&k| layout.boxes[k]).collect();
    let mut rendered = render(cam, &shapes, spec.width, spec.height, spec.ground_extent);
    // map local object indices back to entity indices
    rendered.surface = rendered.surface.map(|s| match *s {
        Surface::Object(i) => Surface::Object(visible[i]),
        other => other,
    });
    let p = spec.patch_size;
    let (gh, gw) = (spec.height / p, spec.width / p);
    let mut masks = Vec::new();
    let mut anchors_by_id = BTreeMap::new();
    let mut owner: Grid<Option<u32>> = Grid::filled(gw, gh, None);
    for &k in &visible {
        let pixels = rendered.surface.map(|s| *s == Surface::Object(k));
        if pixels.count() == 0 {
            if layout.kinds[k].is_static() || layout.transient_view[k] == Some(v) {
                return Ok(None);
            }
            continue;
        }
        let id = entity_id(k);
        let tokens = occupied_tokens(v, &pixels, p, 0.5)?;
        if tokens.is_empty() {
            return Ok(None);
        }
        for g in tokens.indices() {
            if owner.get(g.col, g.row).is_some() {
                return Ok(None);
            }
            owner.set(g.col, g.row, Some(id));
        }
        let anchors: Vec<GridIndex> = tokens
            .indices()
            .iter()
            .copied()
            .filter(|g| *rendered.surface.get(g.col * p + p / 2, g.row * p + p / 2) == Surface::Object(k))
            .collect();
        if anchors.is_empty() {
            return Ok(None);
        }
        anchors_by_id.insert(id, anchors);
        masks.push(EntityMask::new(id, pixels));
    }
    // the top-left token must be pure sky so flat rows land off every entity
    for y in 0..p {
        for x in 0..p {
            if *rendered.surface.get(x, y) != Surface::Sky {
                return Ok(None);
            }
        }
    }
    Ok(Some(ViewData {
        rendered,
        masks,
        anchors: anchors_by_id,
        owner,
    }))
}

fn patch_center(g: GridIndex, p: usize) -> (f64, f64) {
    ((g.col * p) as f64 + p as f64 / 2.0, (g.row * p) as f64 + p as f64 / 2.0)
}

fn nearest_token(tokens: &[GridIndex], u: f64, v: f64, p: usize) -> GridIndex {
    let mut best = tokens[0];
    let mut best_d = f64::INFINITY;
    for &g in tokens {
        let (cx, cy) = patch_center(g, p);
        let d = (cx - u).powi(2) + (cy - v).powi(2);
        if d < best_d {
            best_d = d;
            best = g;
        }
    }
    best
}

fn pair_targets(
    spec: &SynthSpec,
    layout: &Layout,
    cams: &[CameraParams<f64>],
    views: &[ViewData],
    i: usize,
    j: usize,
) -> Vec<RowTarget> {
    let p = spec.patch_size;
    let (gh, gw) = (spec.height / p, spec.width / p);
    let (src, dst) = (&views[i], &views[j]);
    let mut out = Vec::with_capacity(gh * gw);
    for flat in 0..gh * gw {
        let g = GridIndex::from_flat(flat, gw);
        let target = match *src.owner.get(g.col, g.row) {
            Some(id) => {
                let k = id as usize - 1;
                if layout.kinds[k] != EntityKind::Static {
                    RowTarget::Uniform
                } else {
                    let (cx, cy) = patch_center(g, p);
                    let mut best: Option<(f64, usize, usize)> = None;
                    for y in g.row * p..(g.row + 1) * p {
                        for x in g.col * p..(g.col + 1) * p {
                            if *src.rendered.surface.get(x, y) == Surface::Object(k) {
                                let d = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                                if best.map_or(true, |(bd, _, _)| d < bd) {
                                    best = Some((d, x, y));
                                }
                            }
                        }
                    }
                    let (_, x, y) = best.expect("owned token contains entity pixels");
                    let world = cams[i]
                        .unproject(x as f64 + 0.5, y as f64 + 0.5, *src.rendered.depth.get(x, y))
                        .expect("regular intrinsics");
                    let (u, v) = cams[j]
                        .project(world)
                        .map(|(u, v, _)| (u, v))
                        .unwrap_or((spec.width as f64 / 2.0, spec.height as f64 / 2.0));
                    RowTarget::Peak(nearest_token(&dst.anchors[&id], u, v, p))
                }
            }
            None => {
                let (x, y) = (g.col * p + p / 2, g.row * p + p / 2);
                let d = *src.rendered.depth.get(x, y);
                if d <= 0.0 {
                    RowTarget::Uniform
                } else {
                    let world = cams[i].unproject(x as f64 + 0.5, y as f64 + 0.5, d).expect("regular intrinsics");
                    match cams[j].project(world) {
                        Some((u, v, z)) if CameraParams::<f64>::in_image(u, v, spec.width, spec.height) => {
                            let (px, py) = (u.floor() as usize, v.floor() as usize);
                            let dj = *dst.rendered.depth.get(px, py);
                            if dj > 0.0 && (dj - z).abs() <= 0.02 * z {
                                RowTarget::Peak(GridIndex::new(py / p, px / p))
                            } else {
                                RowTarget::Uniform
                            }
                        }
                        _ => RowTarget::Uniform,
                    }
                }
            }
        };
        out.push(target);
    }
    out
}

/// Generates a scene satisfying every construction constraint, resampling
/// the layout until one does.
pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cams = layout_cameras(spec);
    for _ in 0..spec.max_attempts {
        let Some(layout) = sample_layout(spec, &mut rng) else { continue };
        let mut views = Vec::with_capacity(spec.num_views);
        for (v, cam) in cams.iter().enumerate() {
            match build_view(spec, &layout, cam, v)? {
                Some(vd) => views.push(vd),
                None => break,
            }
        }
        if views.len() != spec.num_views {
            continue;
        }
        return Ok(assemble(spec, &layout, &cams, views));
    }
    Err(Error::InvalidSpec(format!(
        "no layout satisfied the constraints after {} attempts",
        spec.max_attempts
    )))
}

fn assemble(spec: &SynthSpec, layout: &Layout, cams: &[CameraParams<f64>], views: Vec<ViewData>) -> SynthScene {
    let n = spec.num_views;
    let p = spec.patch_size;
    let mut targets = BTreeMap::new();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            targets.insert((i, j), pair_targets(spec, layout, cams, &views, i, j));
        }
    }
    let attention = SynthAttention {
        seed: spec.seed,
        noise: spec.noise,
        num_layers: spec.num_layers,
        grid_h: spec.height / p,
        grid_w: spec.width / p,
        targets,
    };

    // normalize so the mean depth of view 0 is 1, then re-anchor on camera 0
    let d0: Vec<f64> = views[0].rendered.depth.as_slice().iter().copied().filter(|&d| d > 0.0).collect();
    let scale = d0.len() as f64 / d0.iter().sum::<f64>();
    let scaled: Vec<CameraParams<f64>> = cams
        .iter()
        .map(|c| {
            let mut c = *c;
            for r in 0..3 {
                c.extrinsics[r][3] *= scale;
            }
            c
        })
        .collect();
    let mut records = Vec::with_capacity(n);
    let mut transient_masks = Vec::with_capacity(n);
    for (v, vd) in views.into_iter().enumerate() {
        let mut camera = scaled[v].relative_to(&scaled[0]);
        if v == 0 {
            camera.extrinsics = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        }
        let mut tm = Mask::filled(spec.width, spec.height, false);
        for m in &vd.masks {
            if !layout.kinds[m.entity_id as usize - 1].is_static() {
                tm.union_with(&m.pixels);
            }
        }
        transient_masks.push(tm);
        records.push(ViewRecord {
            image: vd.rendered.image,
            camera,
            depth: vd.rendered.depth.map(|&d| (d * scale) as f32),
            entity_masks: vd.masks,
            point_map: None,
        });
    }
    let entities = (0..layout.boxes.len())
        .map(|k| {
            let id = entity_id(k);
            EntityTruth {
                entity_id: id,
                kind: layout.kinds[k],
                is_static: layout.kinds[k].is_static(),
                views: (0..n).filter(|&v| records[v].entity(id).is_some()).collect(),
            }
        })
        .collect();
    let scene = SceneBundle {
        views: records,
        patch_size: p,
        height: spec.height,
        width: spec.width,
        world_frame_note: "camera 0 frame (x right, y down, z forward), scaled so view 0 has mean depth 1".into(),
        num_layers: spec.num_layers,
        feature_dim: None,
        root: None,
        manifest: None,
    };
    SynthScene {
        spec: spec.clone(),
        scene,
        attention,
        truth: GroundTruth {
            seed: spec.seed,
            num_views: n,
            entities,
        },
        transient_masks,
    }
}

impl SynthScene {
    /// Writes the scene directory, attention dumps, and `gt/`.
    pub fn write(&self, dir: &Path) -> Result<SceneManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = self.attention.write_dumps(dir)?;
        if self.spec.mask_dumps {
            for (i, view) in self.scene.views.iter().enumerate() {
                for m in &view.entity_masks {
                    let tokens = tokens_for_mask(i, &m.pixels, self.spec.patch_size, 0.5)?;
                    for j in (0..self.scene.num_views()).filter(|&j| j != i) {
                        entries.push(self.attention.write_mask_dump(dir, i, j, m.entity_id, tokens.indices())?);
                    }
                }
            }
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("generator".to_string(), serde_json::json!("maskprior synth"));
        metadata.insert(
            "spec".to_string(),
            serde_json::to_value(&self.spec).expect("spec serializes"),
        );
        let manifest = write_scene(dir, &self.scene, entries, metadata)?;

        let gt = dir.join(GT_DIR);
        std::fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
        let labels = gt.join(LABELS_FILE);
        let text = serde_json::to_string_pretty(&self.truth).map_err(|source| Error::Json {
            path: labels.clone(),
            source,
        })?;
        std::fs::write(&labels, text).map_err(|e| Error::io(&labels, e))?;
        for (v, m) in self.transient_masks.iter().enumerate() {
            m.save_png(&dir.join(gt_transient_file(v)))?;
        }
        Ok(manifest)
    }
}

/// Generates `spec` and writes it to `dir`.
pub fn generate_to_dir(spec: &SynthSpec, dir: &Path) -> Result<SynthScene> {
    let s = generate(spec)?;
    s.write(dir)?;
    Ok(s)
}
