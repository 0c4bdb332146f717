//! Render/ground-truth pair sequences with a labeled distractor block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::scene_io::EntityMask;
use crate::warmup::WarmupSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    /// Distractor rectangle `[x0, y0, x1, y1)`; `None` for a clean sequence.
    pub distractor: Option<[usize; 4]>,
    /// Per-channel residual range inside the distractor.
    pub distractor_residual: [f64; 2],
    /// Per-channel residual range elsewhere.
    pub background_residual: [f64; 2],
    /// Additional static entity rectangles in the segmentation.
    pub num_static_entities: usize,
}

impl Default for WarmupSpec {
    fn default() -> Self {
        WarmupSpec {
            seed: 0,
            width: 64,
            height: 48,
            num_frames: 4,
            distractor: Some([18, 12, 42, 34]),
            distractor_residual: [0.6, 0.75],
            background_residual: [0.0, 0.02],
            num_static_entities: 2,
        }
    }
}

impl WarmupSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return bad("warm-up sequence needs positive dimensions and at least one frame");
        }
        if let Some([x0, y0, x1, y1]) = self.distractor {
            if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
                return bad("distractor rectangle must be non-empty and inside the image");
            }
        }
        for r in [self.distractor_residual, self.background_residual] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1] <= 0.75) {
                return bad("residual ranges must be ordered within [0, 0.75]");
            }
        }
        Ok(())
    }
}

/// Clean images live in `[0.1, 0.25]` per channel so a residual of up to
/// 0.75 never clips.
fn clean_image(spec: &WarmupSpec, rng: &mut ChaCha8Rng) -> Grid<[f64; 3]> {
    let phase: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let (w, h) = (spec.width as f64, spec.height as f64);
    Grid::from_fn(spec.width, spec.height, |x, y| {
        std::array::from_fn(|c| {
            let a = (x as f64 / w * 3.0 + phase[2 * c]).sin();
            let b = (y as f64 / h * 2.0 + phase[2 * c + 1]).cos();
            0.175 + 0.0375 * (a + b)
        })
    })
}

/// Generates the sequence: ground truth is a smooth clean image, the render
/// adds a per-channel residual drawn from the distractor range inside the
/// labeled block and from the background range elsewhere.
pub fn generate_warmup_frames(spec: &WarmupSpec) -> Result<WarmupSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let distractor = match spec.distractor {
        Some([x0, y0, x1, y1]) => Mask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1),
        None => Mask::filled(w, h, false),
    };
    let gt = clean_image(spec, &mut rng);
    let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) };
    let mut frames = Vec::with_capacity(spec.num_frames);
    for _ in 0..spec.num_frames {
        let mut render = gt.clone();
        for y in 0..h {
            for x in 0..w {
                let range = if *distractor.get(x, y) {
                    spec.distractor_residual
                } else {
                    spec.background_residual
                };
                let px = render.get_mut(x, y);
                for c in px.iter_mut() {
                    *c += draw(&mut rng, range);
                }
            }
        }
        frames.push((render, gt.clone()));
    }

    let mut entities = Vec::new();
    let mut taken = distractor.clone();
    if distractor.count() > 0 {
        entities.push(EntityMask::new(1, distractor.clone()));
    }
    for k in 0..spec.num_static_entities {
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        let x1 = (x0 + rng.gen_range(4..=w.max(5) / 2)).min(w);
        let y1 = (y0 + rng.gen_range(4..=h.max(5) / 2)).min(h);
        let m = Mask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1 && !*taken.get(x, y));
        if m.count() > 0 {
            taken.union_with(&m);
            entities.push(EntityMask::new(k as u32 + 2, m));
        }
    }
    Ok(WarmupSequence {
        frames,
        prior: distractor.complement(),
        distractor,
        entities,
    })
}
