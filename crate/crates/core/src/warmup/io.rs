//! On-disk warm-up sequences and the loss-curve simulator behind
//! `maskprior warmup-sim`.

use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{effective_mask, image_loss, update_mask_model, ImageF, ResidualFrame, WarmupState};
use crate::config::WarmupConfig;
use crate::error::{Error, Result};
use crate::grid::{load_rgb, save_image, Grid, Mask};
use crate::prior::PriorMask;
use crate::scene_io::EntityMask;

pub const WARMUP_MANIFEST: &str = "warmup.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameEntry {
    render: String,
    gt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntityEntry {
    entity_id: u32,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SequenceManifest {
    width: usize,
    height: usize,
    frames: Vec<FrameEntry>,
    prior: String,
    distractor: String,
    entities: Vec<EntityEntry>,
}

/// A (render, ground truth) pair sequence with its labeled distractor
/// region, the static prior for the view and the entity segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSequence {
    pub frames: Vec<(ImageF<f64>, ImageF<f64>)>,
    pub prior: Mask,
    pub distractor: Mask,
    pub entities: Vec<EntityMask>,
}

fn to_rgb(img: &ImageF<f64>) -> RgbImage {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let p = img.get(x as usize, y as usize);
        image::Rgb([q(p[0]), q(p[1]), q(p[2])])
    })
}

fn from_rgb(img: &RgbImage) -> ImageF<f64> {
    Grid::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    })
}

impl WarmupSequence {
    /// Writes 8-bit PNGs plus `warmup.json`. Frames are quantized on save.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (width, height) = self.prior.dims();
        let mut frames = Vec::with_capacity(self.frames.len());
        for (k, (render, gt)) in self.frames.iter().enumerate() {
            let entry = FrameEntry {
                render: format!("render_{k:04}.png"),
                gt: format!("gt_{k:04}.png"),
            };
            save_image(&to_rgb(render), &dir.join(&entry.render))?;
            save_image(&to_rgb(gt), &dir.join(&entry.gt))?;
            frames.push(entry);
        }
        self.prior.save_png(&dir.join("prior.png"))?;
        self.distractor.save_png(&dir.join("distractor.png"))?;
        let mut entities = Vec::new();
        for e in &self.entities {
            let file = format!("entity_{}.png", e.entity_id);
            e.pixels.save_png(&dir.join(&file))?;
            entities.push(EntityEntry {
                entity_id: e.entity_id,
                file,
            });
        }
        let manifest = SequenceManifest {
            width,
            height,
            frames,
            prior: "prior.png".into(),
            distractor: "distractor.png".into(),
            entities,
        };
        let path = dir.join(WARMUP_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(WARMUP_MANIFEST);
        if !path.exists() {
            return Err(Error::ManifestMissing(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SequenceManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        let check = |what: &str, w: usize, h: usize| {
            if (w, h) != (m.width, m.height) {
                Err(Error::validation(
                    None,
                    what,
                    format!("{w}x{h} does not match {}x{}", m.width, m.height),
                ))
            } else {
                Ok(())
            }
        };
        let mut frames = Vec::new();
        for f in &m.frames {
            let r = from_rgb(&load_rgb(&dir.join(&f.render))?);
            let g = from_rgb(&load_rgb(&dir.join(&f.gt))?);
            check(&f.render, r.width(), r.height())?;
            check(&f.gt, g.width(), g.height())?;
            frames.push((r, g));
        }
        let prior = Mask::load_png(&dir.join(&m.prior))?;
        check("prior", prior.width(), prior.height())?;
        let distractor = Mask::load_png(&dir.join(&m.distractor))?;
        check("distractor", distractor.width(), distractor.height())?;
        let mut entities = Vec::new();
        for e in &m.entities {
            let px = Mask::load_png(&dir.join(&e.file))?;
            check(&e.file, px.width(), px.height())?;
            entities.push(EntityMask::new(e.entity_id, px));
        }
        Ok(WarmupSequence {
            frames,
            prior,
            distractor,
            entities,
        })
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub iteration: u64,
    pub mask_loss: f64,
    pub image_loss: f64,
    pub distractor_m_hat: f64,
    pub background_m_hat: f64,
    pub effective_inlier_frac: f64,
    pub using_prior: bool,
}

#[derive(Debug, Clone)]
pub struct WarmupRun {
    pub rows: Vec<LossRow>,
    /// `(iteration, trainer mask)` for every iteration.
    pub masks: Vec<(u64, Mask)>,
    pub final_state: WarmupState<f64>,
}

impl WarmupRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,mask_loss,image_loss,distractor_m_hat,background_m_hat,effective_inlier_frac,using_prior\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.iteration,
                r.mask_loss,
                r.image_loss,
                r.distractor_m_hat,
                r.background_m_hat,
                r.effective_inlier_frac,
                r.using_prior
            ));
        }
        out
    }
}

fn region_mean(g: &Grid<f64>, sel: &Mask, want: bool) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (v, &m) in g.as_slice().iter().zip(sel.as_slice()) {
        if m == want {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Replays the sequence cyclically for `iterations` steps. At each step
/// the trainer mask comes from `effective_mask`, the image loss is
/// evaluated under it, and the mask model takes one step on the frame.
pub fn simulate(seq: &WarmupSequence, cfg: &WarmupConfig, warmup_iters: u64, iterations: u64) -> Result<WarmupRun> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument("warm-up sequence has no frames".into()));
    }
    let (w, h) = seq.prior.dims();
    let prior = PriorMask {
        view: 0,
        static_map: seq.prior.clone(),
        per_entity: Default::default(),
    };
    let frames = seq
        .frames
        .iter()
        .map(|(r, g)| ResidualFrame::new(r.clone(), g.clone(), cfg.blur_radius))
        .collect::<Result<Vec<_>>>()?;
    let mut state = WarmupState::<f64>::new(w, h);
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    for it in 1..=iterations {
        let frame = &frames[((it - 1) as usize) % frames.len()];
        let mask = effective_mask(&state, Some(&prior), &seq.entities, warmup_iters)?;
        let img = image_loss(&frame.render, &frame.ground_truth, &mask, cfg.ssim_lambda)?;
        let mut next = update_mask_model(&state, frame, cfg.reg_weight, cfg.learning_rate)?;
        next.losses.1 = img;
        next.m_effective = mask.clone();
        rows.push(LossRow {
            iteration: it,
            mask_loss: next.losses.0,
            image_loss: img,
            distractor_m_hat: region_mean(&next.m_hat, &seq.distractor, true),
            background_m_hat: region_mean(&next.m_hat, &seq.distractor, false),
            effective_inlier_frac: mask.count() as f64 / mask.len() as f64,
            using_prior: it <= warmup_iters,
        });
        masks.push((it, mask));
        state = next;
    }
    Ok(WarmupRun {
        rows,
        masks,
        final_state: state,
    })
}
