//! Mask IoU, PSNR, and run reports.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::prior::{Classification, PriorMask};
use crate::scalar::Scalar;

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            what: what.into(),
            expected: format!("{}x{}", a.0, a.1),
            actual: format!("{}x{}", b.0, b.1),
        });
    }
    Ok(())
}

/// Exact `|pred ∩ gt| / |pred ∪ gt|`; 1 when both are empty.
pub fn iou_exact(pred: &Mask, gt: &Mask) -> Result<Ratio<u64>> {
    check_dims("iou", pred.dims(), gt.dims())?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += u64::from(a && b);
        union += u64::from(a || b);
    }
    if union == 0 {
        return Ok(Ratio::from_integer(1));
    }
    Ok(Ratio::new(inter, union))
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let r = iou_exact(pred, gt)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// `10 log10(255^2 / MSE)` over all channels; `+inf` for identical images.
pub fn psnr<T: Scalar>(a: &RgbImage, b: &RgbImage) -> Result<T> {
    check_dims(
        "psnr",
        (a.width() as usize, a.height() as usize),
        (b.width() as usize, b.height() as usize),
    )?;
    let mut sq: u64 = 0;
    for (&x, &y) in a.as_raw().iter().zip(b.as_raw()) {
        let d = i64::from(x) - i64::from(y);
        sq += (d * d) as u64;
    }
    if sq == 0 {
        return Ok(T::infinity());
    }
    let mse = T::from_u64(sq).expect("u64 sum") / T::from_count(a.as_raw().len());
    let peak = T::lit(255.0 * 255.0);
    Ok(T::lit(10.0) * (peak / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub view: usize,
    pub entity_count: usize,
    pub iou: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAuditRow {
    pub view: usize,
    pub entity_id: u32,
    pub classification: Classification,
    pub matching: Classification,
    pub score_sum: f64,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub score_threshold: f64,
    pub cd_threshold: f64,
    pub rows: Vec<ViewRow>,
    pub mean_iou: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub entities: Vec<EntityAuditRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Builds a report. IoU compares each prior's transient map (complement of
/// the static map) with the ground-truth transient mask of the same view.
pub fn report(
    scene: &str,
    priors: &[PriorMask],
    gt_transient: Option<&[Mask]>,
    renders: Option<&[(RgbImage, RgbImage)]>,
    score_threshold: f64,
    cd_threshold: f64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(priors.len());
    let mut entities = Vec::new();
    for (k, p) in priors.iter().enumerate() {
        let iou = match gt_transient {
            Some(gt) => {
                let g = gt.get(k).ok_or_else(|| {
                    Error::InvalidArgument(format!("no ground truth for view {}", p.view))
                })?;
                Some(iou(&p.transient_map(), g)?)
            }
            None => None,
        };
        let psnr = match renders {
            Some(r) => {
                let (a, b) = r.get(k).ok_or_else(|| {
                    Error::InvalidArgument(format!("no render pair for view {}", p.view))
                })?;
                Some(psnr::<f64>(a, b)?)
            }
            None => None,
        };
        rows.push(ViewRow {
            view: p.view,
            entity_count: p.per_entity.len(),
            iou,
            psnr,
        });
        for (&id, d) in &p.per_entity {
            entities.push(EntityAuditRow {
                view: p.view,
                entity_id: id,
                classification: d.classification,
                matching: d.matching,
                score_sum: d.score_sum,
                pixel_count: d.pixel_count,
            });
        }
    }
    Ok(EvalReport {
        scene: scene.to_string(),
        score_threshold,
        cd_threshold,
        mean_iou: mean(rows.iter().filter_map(|r| r.iou)),
        mean_psnr: mean(rows.iter().filter_map(|r| r.psnr)),
        rows,
        entities,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => "n/a".to_string(),
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x:.6}"),
    }
}

impl EvalReport {
    /// CSV with columns `scene,view,entity_count,iou,psnr,score_threshold,cd_threshold`;
    /// the last row holds the means with view `mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,view,entity_count,iou,psnr,score_threshold,cd_threshold\n");
        let thr = format!("{:.6},{:.6}", self.score_threshold, self.cd_threshold);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.scene,
                r.view,
                r.entity_count,
                fmt_opt(r.iou),
                fmt_opt(r.psnr),
                thr
            );
        }
        let total: usize = self.rows.iter().map(|r| r.entity_count).sum();
        let _ = writeln!(
            s,
            "{},mean,{},{},{},{}",
            self.scene,
            total,
            fmt_opt(self.mean_iou),
            fmt_opt(self.mean_psnr),
            thr
        );
        s
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["view", "entities", "iou", "psnr"];
        let mut cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.view.to_string(),
                    r.entity_count.to_string(),
                    fmt_opt(r.iou),
                    fmt_opt(r.psnr),
                ]
            })
            .collect();
        cells.push([
            "mean".into(),
            self.rows.iter().map(|r| r.entity_count).sum::<usize>().to_string(),
            fmt_opt(self.mean_iou),
            fmt_opt(self.mean_psnr),
        ]);
        let mut width = header.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: [&str; 4]| -> String {
            let parts: Vec<String> = row
                .iter()
                .zip(width)
                .enumerate()
                .map(|(k, (c, w))| if k == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ")
        };
        let mut out = format!(
            "scene {}  (score threshold {:.3}, cd threshold {:.3})\n",
            self.scene, self.score_threshold, self.cd_threshold
        );
        out.push_str(&line(header));
        out.push('\n');
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&rule.join("  "));
        out.push('\n');
        let last = cells.len() - 1;
        for (k, row) in cells.iter().enumerate() {
            if k == last {
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
            out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
            out.push('\n');
        }
        out
    }

    /// Writes `report.csv`, `report.json`, and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        w("report.csv", self.to_csv())?;
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: dir.join("report.json"),
            source,
        })?;
        w("report.json", json)?;
        w("report.txt", self.to_table())
    }
}

/// Directory of a scene holding ground truth, when present.
pub const GT_DIR: &str = "gt";

/// Relative path of view `view`'s ground-truth transient mask.
pub fn gt_transient_file(view: usize) -> String {
    format!("{GT_DIR}/transient_{view:04}.png")
}

/// Loads `gt/transient_####.png` for every view, or `None` when the scene
/// carries no ground truth.
pub fn load_gt_transient(scene_dir: &Path, num_views: usize) -> Result<Option<Vec<Mask>>> {
    if !scene_dir.join(GT_DIR).is_dir() {
        return Ok(None);
    }
    (0..num_views)
        .map(|v| Mask::load_png(&scene_dir.join(gt_transient_file(v))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn iou_examples() {
        let a = Mask::from_fn(8, 8, |x, _| x < 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(8, 8, |x, _| x >= 4);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let top = Mask::from_fn(8, 8, |_, y| y < 4);
        assert_eq!(iou_exact(&a, &top).unwrap(), Ratio::new(1, 3));
        let empty = Mask::filled(8, 8, false);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(iou(&a, &Mask::filled(4, 8, false)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = RgbImage::from_pixel(4, 3, Rgb([10, 20, 30]));
        assert_eq!(psnr::<f64>(&a, &a).unwrap(), f64::INFINITY);
        let black = RgbImage::from_pixel(4, 3, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(4, 3, Rgb([255, 255, 255]));
        assert_eq!(psnr::<f64>(&black, &white).unwrap(), 0.0);
        assert!(psnr::<f32>(&a, &RgbImage::new(3, 3)).is_err());
    }

    #[test]
    fn report_without_ground_truth_says_na() {
        let p = PriorMask {
            view: 0,
            static_map: Mask::filled(4, 4, true),
            per_entity: Default::default(),
        };
        let r = report("s", &[p], None, None, 2.0, 0.2).unwrap();
        assert_eq!(r.rows[0].iou, None);
        assert!(r.to_csv().contains("s,0,0,n/a,n/a,2.000000,0.200000"));
        assert!(r.to_table().contains("n/a"));
    }
}
