use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use maskprior::eval::report;
use maskprior::prior::{EntityDecision, PriorMask};
use maskprior::Mask;

fn decision(score_sum: f64, pixel_count: usize) -> EntityDecision {
    let mut d = EntityDecision::from_matching(Vec::new(), 3, 0.5, pixel_count);
    d.score_sum = score_sum;
    d
}

/// Three 8x6 views: a perfect prior, a half-overlapping one, and one with
/// nothing flagged against an empty ground truth.
fn fixture() -> (Vec<PriorMask>, Vec<Mask>, Vec<(RgbImage, RgbImage)>) {
    let (w, h) = (8, 6);
    let block = Mask::from_fn(w, h, |x, y| x < 4 && y < 3);
    let left = Mask::from_fn(w, h, |x, _| x < 4);
    let top = Mask::from_fn(w, h, |_, y| y < 3);
    let none = Mask::filled(w, h, false);
    let mut ents = BTreeMap::new();
    ents.insert(3, decision(0.0, 12));
    ents.insert(5, decision(2.4, 36));
    let priors = vec![
        PriorMask { view: 0, static_map: block.complement(), per_entity: ents.clone() },
        PriorMask { view: 1, static_map: left.complement(), per_entity: ents },
        PriorMask { view: 2, static_map: none.complement(), per_entity: BTreeMap::new() },
    ];
    let gt = vec![block, top, none];
    let a = RgbImage::from_pixel(w as u32, h as u32, Rgb([100, 100, 100]));
    let mut b = a.clone();
    b.put_pixel(0, 0, Rgb([110, 100, 100]));
    let renders = vec![(a.clone(), a.clone()), (a.clone(), b), (a.clone(), RgbImage::from_pixel(8, 6, Rgb([0, 0, 0])))];
    (priors, gt, renders)
}

#[test]
fn table_matches_golden() {
    let (priors, gt, renders) = fixture();
    let r = report("courtyard", &priors, Some(&gt), Some(&renders), 1.5, 0.2).unwrap();
    assert_eq!(r.to_table(), include_str!("data/report_table.txt"));
    assert_eq!(r.to_csv(), include_str!("data/report.csv"));
}

#[test]
fn report_values() {
    let (priors, gt, renders) = fixture();
    let r = report("courtyard", &priors, Some(&gt), Some(&renders), 1.5, 0.2).unwrap();
    let ious: Vec<f64> = r.rows.iter().map(|row| row.iou.unwrap()).collect();
    assert_eq!(ious, [1.0, 1.0 / 3.0, 1.0]);
    assert_eq!(r.rows[0].psnr, Some(f64::INFINITY));
    // one channel of one pixel off by 10 over 144 samples
    let expect = 10.0 * (255.0f64 * 255.0 / (100.0 / 144.0)).log10();
    assert!((r.rows[1].psnr.unwrap() - expect).abs() < 1e-9);
    assert_eq!(r.mean_psnr, Some(f64::INFINITY));
    assert_eq!(r.entities.len(), 4);
    assert_eq!(r.entities[1].score_sum, 2.4);
}

#[test]
fn json_report_round_trips() {
    let (priors, gt, _) = fixture();
    let r = report("courtyard", &priors, Some(&gt), None, 1.5, 0.2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    r.write(tmp.path()).unwrap();
    let back: maskprior::eval::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(std::fs::read_to_string(tmp.path().join("report.txt")).unwrap(), r.to_table());
}
