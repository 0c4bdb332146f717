//! On-disk scene interchange and the in-memory scene model.
//!
//! Layout of a scene directory:
//!
//! ```text
//! manifest.json
//! cameras.bin              [N, 21] intrinsics (3x3) + extrinsics (3x4)
//! images/####.png          8-bit RGB
//! depth/####.bin           [H, W] float32
//! points/####.bin          optional [H, W, 3]
//! masks/####_<entity>.png  8-bit, non-zero = entity pixel
//! attention/<i>_<j>_<mask>.bin or <i>_<j>_all.bin   [S, L, h, w]
//! ```
//!
//! All binaries are little-endian and row-major.

mod attention;
pub mod manifest;
mod output;
pub mod tensor;

use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;

pub use attention::{load_attention, AttentionStack, SceneAttention};
pub use manifest::{AttentionEntry, MaskEntry, SceneManifest, TokenIds, ViewEntry};
pub use tensor::{DType, TensorRef};
pub use output::{load_prior_masks, save_prior_masks, PriorSummary, PRIORS_DIR, SUMMARY_FILE};

use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use manifest::CAMERA_STRIDE;
use tensor::{encode_f32, encode_f64, write_file};

/// Tolerance on rotation orthonormality and the first-camera frame.
pub const CAMERA_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EntityMask {
    pub entity_id: u32,
    pub pixels: Mask,
    pub pixel_count: usize,
}

impl EntityMask {
    pub fn new(entity_id: u32, pixels: Mask) -> Self {
        let pixel_count = pixels.count();
        EntityMask {
            entity_id,
            pixels,
            pixel_count,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub image: RgbImage,
    pub camera: CameraParams<f64>,
    /// Camera-frame depth, 0 where nothing was observed.
    pub depth: Grid<f32>,
    pub entity_masks: Vec<EntityMask>,
    pub point_map: Option<Grid<[f32; 3]>>,
}

impl ViewRecord {
    pub fn entity(&self, id: u32) -> Option<&EntityMask> {
        self.entity_masks.iter().find(|m| m.entity_id == id)
    }
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub views: Vec<ViewRecord>,
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub world_frame_note: String,
    pub num_layers: usize,
    pub feature_dim: Option<usize>,
    /// Directory the scene was loaded from, if any.
    pub root: Option<PathBuf>,
    pub manifest: Option<SceneManifest>,
}

impl SceneBundle {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

/// Makes masks within one view pairwise disjoint: a pixel claimed by several
/// masks stays with the smallest (ties: lowest id). Masks left empty are
/// dropped.
pub fn resolve_overlaps(masks: Vec<EntityMask>) -> Vec<EntityMask> {
    if masks.len() < 2 {
        return masks;
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&k| (masks[k].pixel_count, masks[k].entity_id));
    let (w, h) = masks[0].pixels.dims();
    let mut claimed = Mask::filled(w, h, false);
    let mut resolved: Vec<Option<EntityMask>> = vec![None; masks.len()];
    for &k in &order {
        let m = &masks[k];
        let kept = Mask::from_fn(w, h, |x, y| *m.pixels.get(x, y) && !*claimed.get(x, y));
        claimed.union_with(&kept);
        let e = EntityMask::new(m.entity_id, kept);
        if e.pixel_count < m.pixel_count {
            warn!(
                "entity {} lost {} overlapping pixels",
                m.entity_id,
                m.pixel_count - e.pixel_count
            );
        }
        resolved[k] = Some(e);
    }
    resolved
        .into_iter()
        .flatten()
        .filter(|m| {
            if m.pixel_count == 0 {
                warn!("entity {} empty after overlap resolution, dropped", m.entity_id);
            }
            m.pixel_count > 0
        })
        .collect()
}

/// Loads and validates a scene directory.
pub fn load_scene(scene_dir: &Path) -> Result<SceneBundle> {
    let manifest = SceneManifest::read(scene_dir)?;
    let n = manifest.num_views;
    let (h, w, p) = (manifest.height, manifest.width, manifest.patch_size);
    if n == 0 || manifest.views.len() != n {
        return Err(Error::validation(
            None,
            "num_views",
            format!("num_views {n} with {} view entries", manifest.views.len()),
        ));
    }
    if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::validation(
            None,
            "patch_size",
            format!("image {w}x{h} not divisible into {p}px patches"),
        ));
    }
    if manifest.attention_softmax != "post" {
        return Err(Error::validation(
            None,
            "attention_softmax",
            format!("unsupported '{}', expected 'post'", manifest.attention_softmax),
        ));
    }
    if manifest.cameras.shape != [n, CAMERA_STRIDE] {
        return Err(Error::validation(
            None,
            "cameras",
            format!("shape {:?}, expected [{n}, {CAMERA_STRIDE}]", manifest.cameras.shape),
        ));
    }
    let cam_values = manifest.cameras.read_f64(scene_dir)?;
    let mut views = Vec::with_capacity(n);
    for (v, entry) in manifest.views.iter().enumerate() {
        let c = &cam_values[v * CAMERA_STRIDE..(v + 1) * CAMERA_STRIDE];
        let camera = camera_from_slice(c);
        camera
            .validate(CAMERA_TOL)
            .map_err(|msg| Error::validation(Some(v), "camera", msg))?;
        views.push(load_view(scene_dir, v, entry, camera, w, h)?);
    }
    check_first_camera_frame(&views[0].camera)?;

    let (gh, gw) = manifest.grid_dims();
    for a in &manifest.attention {
        validate_attention_entry(scene_dir, a, n, manifest.num_layers, gh, gw)?;
    }

    Ok(SceneBundle {
        views,
        patch_size: p,
        height: h,
        width: w,
        world_frame_note: manifest.world_frame_note.clone(),
        num_layers: manifest.num_layers,
        feature_dim: manifest.feature_dim,
        root: Some(scene_dir.to_path_buf()),
        manifest: Some(manifest),
    })
}

fn camera_from_slice(c: &[f64]) -> CameraParams<f64> {
    let mut k = [[0.0; 3]; 3];
    let mut e = [[0.0; 4]; 3];
    for r in 0..3 {
        k[r].copy_from_slice(&c[r * 3..r * 3 + 3]);
        e[r].copy_from_slice(&c[9 + r * 4..9 + r * 4 + 4]);
    }
    CameraParams::new(k, e)
}

fn camera_to_slice(cam: &CameraParams<f64>) -> Vec<f64> {
    cam.intrinsics
        .iter()
        .flatten()
        .chain(cam.extrinsics.iter().flatten())
        .copied()
        .collect()
}

fn check_first_camera_frame(cam: &CameraParams<f64>) -> Result<()> {
    for r in 0..3 {
        for c in 0..4 {
            let expect = if r == c { 1.0 } else { 0.0 };
            if (cam.extrinsics[r][c] - expect).abs() > CAMERA_TOL {
                return Err(Error::validation(
                    Some(0),
                    "camera",
                    "world frame must be the first camera's frame (identity extrinsics)",
                ));
            }
        }
    }
    Ok(())
}

fn load_view(
    root: &Path,
    v: usize,
    entry: &ViewEntry,
    camera: CameraParams<f64>,
    w: usize,
    h: usize,
) -> Result<ViewRecord> {
    let image = crate::grid::load_rgb(&root.join(&entry.image))?;
    if (image.width() as usize, image.height() as usize) != (w, h) {
        return Err(Error::validation(
            Some(v),
            "image",
            format!("{}x{}, expected {w}x{h}", image.width(), image.height()),
        ));
    }

    if entry.depth.shape != [h, w] {
        return Err(Error::validation(
            Some(v),
            "depth",
            format!("shape {:?}, expected [{h}, {w}]", entry.depth.shape),
        ));
    }
    let depth_values = entry.depth.read_f32(root).map_err(|e| retag(e, v, "depth"))?;
    if depth_values.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::validation(Some(v), "depth", "values must be finite and >= 0"));
    }
    let depth = Grid::from_vec(w, h, depth_values)?;

    let point_map = match &entry.point_map {
        None => None,
        Some(t) => {
            if t.shape != [h, w, 3] {
                return Err(Error::validation(
                    Some(v),
                    "point_map",
                    format!("shape {:?}, expected [{h}, {w}, 3]", t.shape),
                ));
            }
            let vals = t.read_f32(root).map_err(|e| retag(e, v, "point_map"))?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(Some(v), "point_map", "non-finite values"));
            }
            let pts = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            Some(Grid::from_vec(w, h, pts)?)
        }
    };

    let mut masks = Vec::with_capacity(entry.masks.len());
    for m in &entry.masks {
        if masks.iter().any(|e: &EntityMask| e.entity_id == m.entity_id) {
            return Err(Error::validation(
                Some(v),
                "masks",
                format!("duplicate entity id {}", m.entity_id),
            ));
        }
        let pixels = Mask::load_png(&root.join(&m.file))?;
        if pixels.dims() != (w, h) {
            return Err(Error::validation(
                Some(v),
                "masks",
                format!("mask {} is {:?}, expected {w}x{h}", m.file, pixels.dims()),
            ));
        }
        masks.push(EntityMask::new(m.entity_id, pixels));
    }

    Ok(ViewRecord {
        image,
        camera,
        depth,
        entity_masks: resolve_overlaps(masks),
        point_map,
    })
}

fn retag(e: Error, view: usize, field: &str) -> Error {
    match e {
        Error::Validation { message, .. } => Error::validation(Some(view), field, message),
        other => other,
    }
}

fn validate_attention_entry(
    root: &Path,
    a: &AttentionEntry,
    n: usize,
    layers: usize,
    gh: usize,
    gw: usize,
) -> Result<()> {
    let bad = |msg: String| Error::validation(Some(a.query_view), "attention", msg);
    if a.query_view >= n || a.reference_view >= n {
        return Err(bad(format!(
            "pair ({}, {}) out of range for {n} views",
            a.query_view, a.reference_view
        )));
    }
    if a.query_view == a.reference_view {
        return Err(bad(format!("self-pair ({0}, {0})", a.query_view)));
    }
    if !root.join(&a.tensor.file).is_file() {
        return Err(Error::AttentionUnavailable {
            query_view: a.query_view,
            reference_view: a.reference_view,
            reason: format!("dump {} is missing", a.tensor.file),
        });
    }
    let tokens = a.token_ids.resolve(gh, gw);
    if tokens.iter().any(|g| g.row >= gh || g.col >= gw) {
        return Err(bad(format!("{}: token index outside {gh}x{gw} grid", a.tensor.file)));
    }
    let expect = [tokens.len(), layers, gh, gw];
    if a.tensor.shape != expect {
        return Err(bad(format!(
            "{}: shape {:?}, expected {:?}",
            a.tensor.file, a.tensor.shape, expect
        )));
    }
    a.tensor.check_size(root)
}

/// Writes a scene directory: images, depth, cameras, masks, optional point
/// maps, then `manifest.json`. Attention payloads must already be written
/// under `dir`; their entries are recorded in the manifest as given.
pub fn write_scene(
    dir: &Path,
    scene: &SceneBundle,
    attention: Vec<AttentionEntry>,
    metadata: std::collections::BTreeMap<String, serde_json::Value>,
) -> Result<SceneManifest> {
    let n = scene.num_views();
    let (w, h) = (scene.width, scene.height);
    let mut cams = Vec::with_capacity(n * CAMERA_STRIDE);
    let mut entries = Vec::with_capacity(n);
    for (v, view) in scene.views.iter().enumerate() {
        cams.extend(camera_to_slice(&view.camera));

        let image = manifest::image_file(v);
        let ip = dir.join(&image);
        create_parent(&ip)?;
        crate::grid::save_image(&view.image, &ip)?;

        let depth = TensorRef::float32(manifest::depth_file(v), vec![h, w]);
        write_file(&dir.join(&depth.file), &encode_f32(view.depth.as_slice()))?;

        let point_map = match &view.point_map {
            None => None,
            Some(pm) => {
                let t = TensorRef::float32(manifest::point_map_file(v), vec![h, w, 3]);
                let flat: Vec<f32> = pm.as_slice().iter().flatten().copied().collect();
                write_file(&dir.join(&t.file), &encode_f32(&flat))?;
                Some(t)
            }
        };

        let mut masks = Vec::with_capacity(view.entity_masks.len());
        for m in &view.entity_masks {
            let file = manifest::mask_file(v, m.entity_id);
            let mp = dir.join(&file);
            create_parent(&mp)?;
            m.pixels.save_png(&mp)?;
            masks.push(MaskEntry {
                entity_id: m.entity_id,
                file,
            });
        }
        entries.push(ViewEntry {
            image,
            depth,
            point_map,
            masks,
        });
    }
    let cameras = TensorRef::float64("cameras.bin", vec![n, CAMERA_STRIDE]);
    write_file(&dir.join(&cameras.file), &encode_f64(&cams))?;

    let manifest = SceneManifest {
        format_version: manifest::FORMAT_VERSION,
        num_views: n,
        height: h,
        width: w,
        patch_size: scene.patch_size,
        world_frame_note: scene.world_frame_note.clone(),
        num_layers: scene.num_layers,
        feature_dim: scene.feature_dim,
        attention_softmax: "post".into(),
        cameras,
        views: entries,
        attention,
        metadata,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}
