//! VLM adjudication of large transient candidates.
//!
//! Candidates above a pixel floor are overlaid on the view with a seeded
//! color and a numeric label at their centroid; one prompt per view asks a
//! vision-language model for a static/transient verdict per label.

mod client;
mod font;
mod prompt;
mod verdict;

use std::collections::BTreeMap;

use image::RgbImage;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use client::{extract_content, query_vlm, AuditLog, DisabledVlm, HttpVlm, VlmBackend, AUDIT_FILE, VLM_DISABLED};
pub use prompt::{build_prompt, prompt_text, Prompt};
pub use verdict::{parse_verdict, LabelVerdict, VlmVerdict};

use crate::error::{Error, Result};
use crate::prior::EntityVerdict;
use crate::scene_io::EntityMask;

/// One labeled region of a query image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Identifier drawn on the image, `1..=n` within the query.
    pub label: u32,
    pub entity_id: u32,
    /// Label anchor `(x, y)`, always a pixel of the region.
    pub centroid: (usize, usize),
    pub pixel_count: usize,
    pub color: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct RegionQuery {
    pub view: usize,
    pub regions: Vec<Region>,
    pub annotated_image: RgbImage,
}

impl RegionQuery {
    pub fn entity_for_label(&self, label: u32) -> Option<u32> {
        self.regions.iter().find(|r| r.label == label).map(|r| r.entity_id)
    }
}

/// Keeps candidates with at least `min_region_pixels` pixels.
pub fn select_regions(candidates: &[EntityMask], min_region_pixels: usize) -> Vec<EntityMask> {
    candidates
        .iter()
        .filter(|m| m.pixel_count >= min_region_pixels)
        .cloned()
        .collect()
}

/// Mean pixel position, moved to the nearest region pixel (lowest
/// row-major on ties) when it falls outside the region.
pub fn label_anchor(mask: &EntityMask) -> Option<(usize, usize)> {
    let n = mask.pixels.count();
    if n == 0 {
        return None;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in mask.pixels.pixels() {
        sx += x as f64;
        sy += y as f64;
    }
    let cx = (sx / n as f64).round() as usize;
    let cy = (sy / n as f64).round() as usize;
    if *mask.pixels.get(cx, cy) {
        return Some((cx, cy));
    }
    mask.pixels.pixels().min_by_key(|&(x, y)| {
        let dx = x as i64 - cx as i64;
        let dy = y as i64 - cy as i64;
        dx * dx + dy * dy
    })
}

/// Deterministic palette for `n` regions of `view`.
pub fn palette(seed: u64, view: usize, n: usize) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (view as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..n)
        .map(|_| [rng.gen_range(40..=255), rng.gen_range(40..=255), rng.gen_range(40..=255)])
        .collect()
}

/// Overlays each region with its palette color at `alpha` and draws its
/// label at the anchor, clipped to the region's bounding box. Regions are
/// labeled `1..=n` in the given order.
pub fn annotate(view: usize, image: &RgbImage, regions: &[EntityMask], palette_seed: u64, alpha: f64) -> Result<RegionQuery> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let colors = palette(palette_seed, view, regions.len());
    let mut out = image.clone();
    let mut labeled = Vec::with_capacity(regions.len());
    for (k, (m, color)) in regions.iter().zip(&colors).enumerate() {
        if m.pixels.dims() != (w, h) {
            return Err(Error::ShapeMismatch {
                what: format!("region mask {}", m.entity_id),
                expected: format!("{w}x{h}"),
                actual: format!("{:?}", m.pixels.dims()),
            });
        }
        let Some(anchor) = label_anchor(m) else {
            warn!("skipping empty region {} in view {view}", m.entity_id);
            continue;
        };
        for (x, y) in m.pixels.pixels() {
            let p = out.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                let v = (1.0 - alpha) * p.0[c] as f64 + alpha * color[c] as f64;
                p.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        let label = (k + 1) as u32;
        draw_label(&mut out, m, anchor, &label.to_string());
        labeled.push(Region {
            label,
            entity_id: m.entity_id,
            centroid: anchor,
            pixel_count: m.pixel_count,
            color: *color,
        });
    }
    Ok(RegionQuery {
        view,
        regions: labeled,
        annotated_image: out,
    })
}

fn draw_label(img: &mut RgbImage, m: &EntityMask, anchor: (usize, usize), text: &str) {
    let Some((x0, y0, x1, y1)) = m.pixels.bounding_box() else { return };
    let (tw, th) = font::text_size(text);
    let left = anchor.0 as i64 - (tw / 2) as i64;
    let top = anchor.1 as i64 - (th / 2) as i64;
    for (dx, dy) in font::lit_pixels(text) {
        let x = left + dx as i64;
        let y = top + dy as i64;
        if x < x0 as i64 || y < y0 as i64 || x > x1 as i64 || y > y1 as i64 {
            continue;
        }
        img.put_pixel(x as u32, y as u32, image::Rgb([0, 0, 0]));
    }
}

/// Runs the full adjudication for one view's transient candidates and
/// returns verdicts keyed by entity id. An unparsable reply keeps every
/// candidate transient.
pub fn adjudicate_view(
    view: usize,
    image: &RgbImage,
    candidates: &[EntityMask],
    min_region_pixels: usize,
    palette_seed: u64,
    alpha: f64,
    backend: &dyn VlmBackend,
) -> Result<BTreeMap<u32, EntityVerdict>> {
    let regions = select_regions(candidates, min_region_pixels);
    if regions.is_empty() {
        return Ok(BTreeMap::new());
    }
    let query = annotate(view, image, &regions, palette_seed, alpha)?;
    if query.regions.is_empty() {
        return Ok(BTreeMap::new());
    }
    let prompt = build_prompt(&query);
    let reply = backend.query(view, &prompt)?;
    let labels: Vec<u32> = query.regions.iter().map(|r| r.label).collect();
    let parsed = match parse_verdict(&reply, &labels) {
        Ok(v) => v,
        Err(Error::VerdictParse) => {
            if reply != VLM_DISABLED {
                warn!("no verdict lines in vlm reply for view {view}; keeping candidates transient");
            }
            return Ok(BTreeMap::new());
        }
        Err(e) => return Err(e),
    };
    Ok(parsed
        .labels
        .into_iter()
        .filter_map(|(label, lv)| {
            query.entity_for_label(label).map(|id| {
                (
                    id,
                    EntityVerdict {
                        verdict: lv.verdict,
                        rationale: lv.rationale,
                    },
                )
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Mask;

    fn rect(id: u32, w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> EntityMask {
        EntityMask::new(id, Mask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1))
    }

    fn gray(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([128, 128, 128]))
    }

    #[test]
    fn floor_is_inclusive() {
        let small = EntityMask {
            entity_id: 1,
            pixels: Mask::filled(1, 1, true),
            pixel_count: 19_999,
        };
        let big = EntityMask {
            entity_id: 2,
            pixel_count: 20_000,
            ..small.clone()
        };
        let kept = select_regions(&[small, big], 20_000);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].entity_id, 2);
        assert!(select_regions(&[], 20_000).is_empty());
    }

    #[test]
    fn zero_regions_is_identity() {
        let img = gray(20, 10);
        let q = annotate(0, &img, &[], 1, 0.4).unwrap();
        assert_eq!(q.annotated_image, img);
    }

    #[test]
    fn only_region_pixels_change() {
        let img = gray(40, 30);
        let m = rect(5, 40, 30, 10, 5, 30, 25);
        let q = annotate(0, &img, std::slice::from_ref(&m), 3, 0.4).unwrap();
        for (x, y, p) in q.annotated_image.enumerate_pixels() {
            let inside = *m.pixels.get(x as usize, y as usize);
            assert_eq!(inside, p != img.get_pixel(x, y), "pixel ({x}, {y})");
        }
        let r = &q.regions[0];
        assert_eq!((r.label, r.entity_id), (1, 5));
        assert!(*m.pixels.get(r.centroid.0, r.centroid.1));
    }

    #[test]
    fn ring_anchor_moves_inside() {
        let ring = EntityMask::new(
            1,
            Mask::from_fn(41, 41, |x, y| {
                let d = ((x as f64 - 20.0).powi(2) + (y as f64 - 20.0).powi(2)).sqrt();
                (12.0..18.0).contains(&d)
            }),
        );
        let (x, y) = label_anchor(&ring).unwrap();
        assert!(*ring.pixels.get(x, y));
        assert_ne!((x, y), (20, 20));
    }

    #[test]
    fn palette_is_seeded() {
        assert_eq!(palette(4, 1, 3), palette(4, 1, 3));
        assert_ne!(palette(4, 1, 3), palette(5, 1, 3));
    }

    struct Canned(&'static str);
    impl VlmBackend for Canned {
        fn query(&self, _view: usize, _prompt: &Prompt) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn adjudication_maps_labels_to_entities() {
        let img = gray(40, 30);
        let a = rect(7, 40, 30, 0, 0, 20, 30);
        let b = rect(9, 40, 30, 20, 0, 40, 30);
        let v = adjudicate_view(2, &img, &[a, b], 10, 0, 0.4, &Canned("1: static - sky\n2: transient - person")).unwrap();
        assert_eq!(v[&7].verdict, crate::prior::Verdict::Static);
        assert_eq!(v[&9].verdict, crate::prior::Verdict::Transient);
        let none = adjudicate_view(2, &img, &[rect(7, 40, 30, 0, 0, 20, 30)], 10, 0, 0.4, &DisabledVlm).unwrap();
        assert!(none.is_empty());
    }
}
