//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion that was run failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskprior::eval::{iou, iou_exact, psnr};
use maskprior::geometry::{chamfer, least_squares_fit, ransac_align, PointSet, RansacConfig};
use maskprior::pipeline::run_scene;
use maskprior::prior::{match_score, PriorMask};
use maskprior::synth::{generate, generate_warmup_frames, SynthSpec, WarmupSpec};
use maskprior::warmup::{effective_mask, simulate, WarmupState};
use maskprior::{EntityMask, Grid, Mask, PipelineConfig, WarmupConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Fixture parameters for scene `k` of the classification sweep.
fn sweep_spec(k: u64, noise: f64) -> SynthSpec {
    let num_views = [4, 6, 8][(k % 3) as usize];
    let entities = 5 + (k % 6) as usize;
    let transients = 1 + (k % 3) as usize;
    SynthSpec {
        seed: 100 + k,
        num_views,
        num_static: entities - transients,
        num_transient: transients,
        noise,
        ..Default::default()
    }
}

struct SweepStats {
    correct: usize,
    total: usize,
    slowest: Duration,
    min_static_recall: f64,
    max_transient_recall: f64,
}

fn sweep(noise: f64) -> SweepStats {
    let cfg = PipelineConfig::default();
    let mut s = SweepStats {
        correct: 0,
        total: 0,
        slowest: Duration::ZERO,
        min_static_recall: f64::INFINITY,
        max_transient_recall: f64::NEG_INFINITY,
    };
    for k in 0..20 {
        let scene = generate(&sweep_spec(k, noise)).expect("fixture generates");
        let t0 = Instant::now();
        let r = run_scene(&scene.scene, &scene.attention, &cfg, None).expect("pipeline runs");
        s.slowest = s.slowest.max(t0.elapsed());
        for ((_, id), d) in &r.matching.decisions {
            let is_static = scene.truth.entity(*id).expect("known entity").is_static;
            s.total += 1;
            s.correct += usize::from(d.classification.is_static() == is_static);
            for rec in &d.records {
                if is_static {
                    s.min_static_recall = s.min_static_recall.min(rec.recall);
                } else {
                    s.max_transient_recall = s.max_transient_recall.max(rec.recall);
                }
            }
        }
    }
    s
}

fn criteria_1_and_2() -> (Outcome, Outcome) {
    let clean = sweep(0.0);
    let noisy = sweep(0.2);
    let acc0 = clean.correct as f64 / clean.total as f64;
    let acc2 = noisy.correct as f64 / noisy.total as f64;
    let slowest = clean.slowest.max(noisy.slowest);
    let c1 = check(
        acc0 == 1.0 && acc2 >= 0.95 && slowest < Duration::from_secs(10),
        format!(
            "noise 0: {}/{}, noise 0.2: {}/{} ({:.1}%), slowest scene {:.2}s",
            clean.correct,
            clean.total,
            noisy.correct,
            noisy.total,
            100.0 * acc2,
            slowest.as_secs_f64()
        ),
    );
    let c2 = check(
        clean.min_static_recall >= 0.9 && clean.max_transient_recall <= 0.2,
        format!(
            "min static recall {:.3}, max transient recall {:.3}",
            clean.min_static_recall, clean.max_transient_recall
        ),
    );
    (c1, c2)
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for cd in [0.0f64, 0.05, 0.1, 0.15] {
        match match_score(cd, 0.2) {
            Some(s) => worst = worst.max((s - (0.2 - cd) / 0.2).abs()),
            None => return Outcome::Fail(format!("cd {cd} rejected")),
        }
    }
    let rejects = match_score(0.2, 0.2).is_none();
    check(worst <= 1e-9 && rejects, format!("max abs error {worst:e}, cd 0.2 rejected: {rejects}"))
}

fn brute_directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut sum = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            best = best.min(d);
        }
        sum += best;
    }
    sum / from.len() as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..100 {
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            let n = rng.gen_range(1..=512);
            (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
        };
        let p = cloud(&mut rng);
        let q = cloud(&mut rng);
        let oracle = 0.5 * (brute_directed(&p, &q) + brute_directed(&q, &p));
        let got = chamfer(&PointSet::new(p), &PointSet::new(q)).expect("non-empty");
        mismatches += usize::from(got != oracle);
    }
    check(mismatches == 0, format!("{mismatches}/100 pairs differ from the exhaustive oracle"))
}

fn normal_equations(samples: &[(f64, f64)]) -> (f64, f64) {
    let n = samples.len() as f64;
    let (sx, sy) = samples.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = samples
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + (x - mx) * (y - my), b + (x - mx) * (x - mx)));
    let s = sxy / sxx;
    (s, my - s * mx)
}

fn criterion_5() -> Outcome {
    let mut recovered = 0;
    let mut clean_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.gen_range(0.5..2.0);
        let shift = rng.gen_range(-0.5..0.5);
        let n = 400;
        let mut samples: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x: f64 = rng.gen_range(0.5..5.0);
                (x, scale * x + shift)
            })
            .collect();
        let clean = samples.clone();
        for s in samples.iter_mut().take(n * 3 / 10) {
            s.1 = rng.gen_range(0.0..12.0);
        }
        let cfg = RansacConfig { seed, ..Default::default() };
        if let Ok(m) = ransac_align(&samples, &cfg) {
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
            if rel(m.scale, scale) <= 0.01 && (m.shift - shift).abs() <= 0.01 * shift.abs().max(scale) {
                recovered += 1;
            }
        }
        // outlier-free: consensus on every sample equals closed-form least squares
        let noisy: Vec<(f64, f64)> = clean
            .iter()
            .map(|&(x, y)| (x, y + rng.gen_range(-1e-3..1e-3)))
            .collect();
        let m = ransac_align(&noisy, &cfg).expect("fit");
        let (s, t) = normal_equations(&noisy);
        clean_err = clean_err.max((m.scale - s).abs()).max((m.shift - t).abs());
        let (ls, lt) = least_squares_fit(&noisy).expect("fit");
        clean_err = clean_err.max((ls - s).abs()).max((lt - t).abs());
    }
    check(
        recovered >= 99 && clean_err <= 1e-9,
        format!("{recovered}/100 seeds recovered under 30% outliers, outlier-free max deviation {clean_err:e}"),
    )
}

fn snapped_oracle(m_hat: &Grid<f64>, entities: &[EntityMask]) -> Mask {
    let mut out = m_hat.map(|&m| m >= 0.5);
    let bin = out.clone();
    for e in entities {
        let (mut on, mut total) = (0usize, 0usize);
        for (x, y) in e.pixels.pixels() {
            total += 1;
            on += usize::from(*bin.get(x, y));
        }
        let value = 2 * on >= total;
        for (x, y) in e.pixels.pixels() {
            out.set(x, y, value);
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let (w, h) = (40, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prior_map = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.7));
    let prior = PriorMask { view: 0, static_map: prior_map.clone(), per_entity: BTreeMap::new() };
    let entities = vec![
        EntityMask::new(1, Mask::from_fn(w, h, |x, y| x < 10 && y < 10)),
        EntityMask::new(2, Mask::from_fn(w, h, |x, y| (20..35).contains(&x) && (5..25).contains(&y))),
    ];
    let mut state = WarmupState::<f64>::new(w, h);
    state.m_hat = Grid::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0));
    let expected_after = snapped_oracle(&state.m_hat, &entities);
    let mut bad = Vec::new();
    for it in 1..=1000u64 {
        state.iteration = it;
        let got = effective_mask(&state, Some(&prior), &entities, 500).expect("mask");
        let want = if it <= 500 { &prior_map } else { &expected_after };
        if &got != want {
            bad.push(it);
        }
    }
    check(
        bad.is_empty(),
        format!("iterations 1-1000 checked, {} mismatches{}", bad.len(), bad.first().map(|i| format!(" (first {i})")).unwrap_or_default()),
    )
}

fn criterion_7() -> Outcome {
    let cfg = WarmupConfig::default();
    let seq = generate_warmup_frames(&WarmupSpec::default()).expect("fixture");
    let run = simulate(&seq, &cfg, 500, 200).expect("simulate");
    let last = run.rows.last().expect("rows");
    let uniform = generate_warmup_frames(&WarmupSpec {
        distractor: None,
        background_residual: [0.05, 0.05],
        ..Default::default()
    })
    .expect("fixture");
    let urun = simulate(&uniform, &cfg, 500, 200).expect("simulate");
    let u = urun.rows.last().expect("rows").background_m_hat;
    check(
        last.distractor_m_hat < 0.3 && last.background_m_hat > 0.7 && u > 0.9,
        format!(
            "distractor {:.4}, background {:.4}, uniform {:.4}",
            last.distractor_m_hat, last.background_m_hat, u
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut iou_bad = 0;
    let mut psnr_err = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(1..32), rng.gen_range(1..32));
        let pa = rng.gen_range(0.0..1.0);
        let pb = rng.gen_range(0.0..1.0);
        let a = Mask::from_fn(w, h, |_, _| rng.gen_bool(pa));
        let b = Mask::from_fn(w, h, |_, _| rng.gen_bool(pb));
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (*a.get(x, y), *b.get(x, y));
                inter += u64::from(u && v);
                union += u64::from(u || v);
            }
        }
        let want = if union == 0 { Ratio::from_integer(1) } else { Ratio::new(inter, union) };
        iou_bad += usize::from(iou_exact(&a, &b).expect("dims") != want);

        let ia = RgbImage::from_fn(w as u32, h as u32, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let ib = RgbImage::from_fn(w as u32, h as u32, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let mse = ia
            .as_raw()
            .iter()
            .zip(ib.as_raw())
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            / ia.as_raw().len() as f64;
        let oracle = 10.0 * (255.0f64 * 255.0 / mse).log10();
        psnr_err = psnr_err.max((psnr::<f64>(&ia, &ib).expect("dims") - oracle).abs());
    }
    let left = Mask::from_fn(8, 8, |x, _| x < 4);
    let top = Mask::from_fn(8, 8, |_, y| y < 4);
    let third = iou_exact(&left, &top).expect("dims") == Ratio::new(1, 3) && iou(&left, &top).expect("dims") == 1.0 / 3.0;
    check(
        iou_bad == 0 && psnr_err <= 1e-9 && third,
        format!("iou mismatches {iou_bad}/100, max psnr error {psnr_err:e} dB, half-overlap 1/3: {third}"),
    )
}

fn criterion_9() -> Outcome {
    let c = PipelineConfig::default();
    let ok = c.recall_threshold == 0.5
        && c.cd_threshold == 0.2
        && c.score_frac == 0.5
        && c.score_threshold(8) == 4.0
        && c.min_region_pixels == 20_000
        && c.warmup_iters == 500;
    check(
        ok,
        format!(
            "recall {}, cd {}, score {}*N, vlm floor {} px, warm-up {}",
            c.recall_threshold, c.cd_threshold, c.score_frac, c.min_region_pixels, c.warmup_iters
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_maskprior");
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"seed": 11, "num_views": 5, "noise": 0.2}"#).expect("write spec");
    let mut trees = Vec::new();
    for k in 0..2 {
        let scene = tmp.path().join(format!("run_{k}")).join("scene");
        let out = tmp.path().join(format!("run_{k}")).join("out");
        let st = Command::new(bin)
            .args(["synth", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(&scene)
            .status()
            .expect("spawn");
        if !st.success() {
            return Outcome::Fail(format!("synth exited with {st}"));
        }
        let st = Command::new(bin)
            .arg("run")
            .arg(&scene)
            .arg(&out)
            .args(["--seed", "3"])
            .output()
            .expect("spawn");
        if !st.status.success() {
            return Outcome::Fail(format!("run exited with {}", st.status));
        }
        trees.push((tree(&scene), tree(&out)));
    }
    let files = trees[0].0.len() + trees[0].1.len();
    check(
        trees[0] == trees[1],
        format!("two synth+run invocations ({files} files) byte-identical: {}", trees[0] == trees[1]),
    )
}

fn criterion_11() -> Outcome {
    Outcome::NotRun(
        "needs the pretrained foundation model, entity segmenter, a hosted VLM and a GPU splatting trainer".into(),
    )
}

fn main() {
    let names = [
        "oracle classification",
        "recall separation",
        "match score exactness",
        "chamfer oracle equivalence",
        "ransac recovery",
        "warm-up boundary",
        "mask-model separation",
        "metric exactness",
        "config defaults",
        "determinism",
        "real-scene psnr/iou",
    ];
    let (c1, c2) = criteria_1_and_2();
    let outcomes = vec![
        c1,
        c2,
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
        criterion_11(),
    ];
    let mut failed = 0;
    for (k, (name, o)) in names.iter().zip(&outcomes).enumerate() {
        let (tag, detail) = match o {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {:>2} [{tag}] {name}: {detail}", k + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
