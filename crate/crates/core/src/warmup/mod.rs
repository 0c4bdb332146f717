//! Prior-guided warm-up for a residual-driven distractor mask.
//!
//! A per-pixel logistic model predicts inlier probabilities from the last
//! iteration's photometric residuals and is trained with the masked
//! residual loss plus a regularizer. The trainer's image loss uses a
//! separate non-learnable binary mask; during the first `warmup_iters`
//! iterations that mask is the static prior, afterwards it is the model's
//! binarized prediction snapped to entity segments.

mod io;
pub mod ssim;

pub use io::{simulate, LossRow, WarmupRun, WarmupSequence, WARMUP_MANIFEST};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::prior::PriorMask;
use crate::scalar::Scalar;
use crate::scene_io::EntityMask;

/// RGB image with channels in `[0, 1]`.
pub type ImageF<T> = Grid<[T; 3]>;

/// Terms of the mask-model objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    /// `mean(M_hat * residual)`
    MaskedResidual,
    /// `reg_weight * mean(1 - M_hat)`
    Regularizer,
    /// `(1 - lambda) L1 + lambda (1 - SSIM)` under the binary mask
    MaskedImage,
}

/// The mask model's loss. Nothing ties `M_hat` to the prior.
pub const MASK_MODEL_TERMS: &[LossTerm] = &[LossTerm::MaskedResidual, LossTerm::Regularizer];
/// The trainer-side loss under the non-learnable mask.
pub const TRAINING_TERMS: &[LossTerm] = &[LossTerm::MaskedImage];

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFrame<T> {
    pub render: ImageF<T>,
    pub ground_truth: ImageF<T>,
    /// Per-pixel mean absolute channel difference.
    pub residual: Grid<T>,
    pub blurred_residual: Grid<T>,
}

impl<T: Scalar> ResidualFrame<T> {
    pub fn new(render: ImageF<T>, ground_truth: ImageF<T>, blur_radius: usize) -> Result<Self> {
        if !render.same_dims(&ground_truth) {
            return Err(Error::ShapeMismatch {
                what: "residual frame".into(),
                expected: format!("{:?}", render.dims()),
                actual: format!("{:?}", ground_truth.dims()),
            });
        }
        let third = T::one() / T::lit(3.0);
        let data = render
            .as_slice()
            .iter()
            .zip(ground_truth.as_slice())
            .map(|(r, g)| ((r[0] - g[0]).abs() + (r[1] - g[1]).abs() + (r[2] - g[2]).abs()) * third)
            .collect();
        let residual = Grid::from_vec(render.width(), render.height(), data)?;
        let blurred_residual = box_blur(&residual, blur_radius);
        Ok(ResidualFrame {
            render,
            ground_truth,
            residual,
            blurred_residual,
        })
    }
}

/// Mean over the `(2r+1)^2` window clipped to the image.
pub fn box_blur<T: Scalar>(src: &Grid<T>, radius: usize) -> Grid<T> {
    let (w, h) = src.dims();
    // summed-area table with a zero border row/column
    let mut sat = vec![T::zero(); (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = T::zero();
        for x in 0..w {
            row = row + *src.get(x, y);
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    Grid::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(radius);
        let y0 = y.saturating_sub(radius);
        let x1 = (x + radius + 1).min(w);
        let y1 = (y + radius + 1).min(h);
        let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0];
        s / T::from_count((x1 - x0) * (y1 - y0))
    })
}

/// Masked trainer loss `(1 - lambda) mean(M |render - gt|) + lambda (1 - SSIM(M render, M gt))`.
pub fn image_loss<T: Scalar>(render: &ImageF<T>, gt: &ImageF<T>, mask: &Mask, lambda: T) -> Result<T> {
    if !render.same_dims(gt) || !render.same_dims(mask) {
        return Err(Error::ShapeMismatch {
            what: "image loss".into(),
            expected: format!("{:?}", render.dims()),
            actual: format!("{:?} / {:?}", gt.dims(), mask.dims()),
        });
    }
    let apply = |img: &ImageF<T>| -> ImageF<T> {
        let data = img
            .as_slice()
            .iter()
            .zip(mask.as_slice())
            .map(|(p, &m)| if m { *p } else { [T::zero(); 3] })
            .collect();
        Grid::from_vec(img.width(), img.height(), data).expect("same dims")
    };
    let mr = apply(render);
    let mg = apply(gt);
    let l1 = mr
        .as_slice()
        .iter()
        .zip(mg.as_slice())
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum::<T>()
        / T::from_count(3 * render.len());
    let s = ssim::ssim(&mr, &mg);
    Ok((T::one() - lambda) * l1 + lambda * (T::one() - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupState<T> {
    /// 1-based training iteration the state belongs to.
    pub iteration: u64,
    /// Logistic weights over (residual, blurred residual, bias).
    pub weights: [T; 3],
    /// Adam first and second moment estimates for `weights`.
    pub moments: [[T; 3]; 2],
    pub m_hat: Grid<T>,
    pub m_effective: Mask,
    /// `(L_mask, L'_mask)` of the latest iteration.
    pub losses: (T, T),
}

impl<T: Scalar> WarmupState<T> {
    pub fn new(width: usize, height: usize) -> Self {
        WarmupState {
            iteration: 1,
            weights: [T::zero(); 3],
            moments: [[T::zero(); 3]; 2],
            m_hat: Grid::filled(width, height, T::lit(0.5)),
            m_effective: Mask::filled(width, height, true),
            losses: (T::zero(), T::zero()),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn predict<T: Scalar>(weights: &[T; 3], frame: &ResidualFrame<T>) -> Grid<T> {
    let data = frame
        .residual
        .as_slice()
        .iter()
        .zip(frame.blurred_residual.as_slice())
        .map(|(&r, &b)| sigmoid(weights[0] * r + weights[1] * b + weights[2]))
        .collect();
    Grid::from_vec(frame.residual.width(), frame.residual.height(), data).expect("same dims")
}

/// `mean(M_hat * residual) + reg_weight * mean(1 - M_hat)`.
pub fn mask_model_loss<T: Scalar>(m_hat: &Grid<T>, frame: &ResidualFrame<T>, reg_weight: T) -> T {
    let n = T::from_count(m_hat.len());
    let masked = m_hat
        .as_slice()
        .iter()
        .zip(frame.residual.as_slice())
        .map(|(&m, &r)| m * r)
        .sum::<T>()
        / n;
    let reg = m_hat.as_slice().iter().map(|&m| T::one() - m).sum::<T>() / n;
    masked + reg_weight * reg
}

/// One Adam step of the logistic mask model on `frame`. Returns the
/// state for the next iteration; `losses.0` is the loss before the step.
pub fn update_mask_model<T: Scalar>(
    state: &WarmupState<T>,
    frame: &ResidualFrame<T>,
    reg_weight: T,
    learning_rate: T,
) -> Result<WarmupState<T>> {
    if !state.m_hat.same_dims(&frame.residual) {
        return Err(Error::ShapeMismatch {
            what: "warm-up frame".into(),
            expected: format!("{:?}", state.m_hat.dims()),
            actual: format!("{:?}", frame.residual.dims()),
        });
    }
    let finite = |g: &Grid<T>| g.as_slice().iter().all(|v| v.is_finite());
    if !finite(&frame.residual) || !finite(&frame.blurred_residual) {
        return Err(Error::NonFinite("residual frame".into()));
    }
    let current = predict(&state.weights, frame);
    let loss = mask_model_loss(&current, frame, reg_weight);

    // d/dz of the per-pixel loss is (r - reg) * m * (1 - m)
    let mut grad = [T::zero(); 3];
    for ((&m, &r), &b) in current
        .as_slice()
        .iter()
        .zip(frame.residual.as_slice())
        .zip(frame.blurred_residual.as_slice())
    {
        let g = (r - reg_weight) * m * (T::one() - m);
        grad[0] = grad[0] + g * r;
        grad[1] = grad[1] + g * b;
        grad[2] = grad[2] + g;
    }
    let n = T::from_count(current.len());
    let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(1e-8));
    let step = i32::try_from(state.iteration).unwrap_or(i32::MAX);
    let (c1, c2) = (T::one() - b1.powi(step), T::one() - b2.powi(step));
    let mut weights = state.weights;
    let mut moments = state.moments;
    for k in 0..3 {
        let g = grad[k] / n;
        moments[0][k] = b1 * moments[0][k] + (T::one() - b1) * g;
        moments[1][k] = b2 * moments[1][k] + (T::one() - b2) * g * g;
        let m = moments[0][k] / c1;
        let v = moments[1][k] / c2;
        weights[k] = weights[k] - learning_rate * m / (v.sqrt() + eps);
    }
    Ok(WarmupState {
        iteration: state.iteration + 1,
        weights,
        moments,
        m_hat: predict(&weights, frame),
        m_effective: state.m_effective.clone(),
        losses: (loss, state.losses.1),
    })
}

/// The trainer mask for `state.iteration`: the prior's static map during
/// warm-up (iterations `1..=warmup_iters`), afterwards `M_hat` binarized at
/// 0.5 with every entity set to its majority value (ties count as inlier).
pub fn effective_mask<T: Scalar>(
    state: &WarmupState<T>,
    prior: Option<&PriorMask>,
    entity_masks: &[EntityMask],
    warmup_iters: u64,
) -> Result<Mask> {
    if state.iteration == 0 {
        return Err(Error::InvalidArgument("iterations are 1-based".into()));
    }
    if state.iteration <= warmup_iters {
        return prior
            .map(|p| p.static_map.clone())
            .ok_or(Error::MissingPrior(state.iteration));
    }
    let half = T::lit(0.5);
    let mut mask = state.m_hat.map(|&m| m >= half);
    let binarized = mask.clone();
    for e in entity_masks {
        let (mut on, mut total) = (0usize, 0usize);
        for (x, y) in e.pixels.pixels() {
            total += 1;
            on += usize::from(*binarized.get(x, y));
        }
        let value = 2 * on >= total;
        for (x, y) in e.pixels.pixels() {
            mask.set(x, y, value);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: usize, h: usize, v: f64) -> ImageF<f64> {
        Grid::filled(w, h, [v; 3])
    }

    fn frame_from_residual(res: Grid<f64>, radius: usize) -> ResidualFrame<f64> {
        let (w, h) = res.dims();
        let gt = flat(w, h, 0.0);
        let render = res.map(|&r| [r; 3]);
        ResidualFrame::new(render, gt, radius).unwrap()
    }

    fn run(frame: &ResidualFrame<f64>, reg: f64, steps: usize) -> WarmupState<f64> {
        let (w, h) = frame.residual.dims();
        let mut s = WarmupState::new(w, h);
        for _ in 0..steps {
            s = update_mask_model(&s, frame, reg, 0.1).unwrap();
        }
        s
    }

    fn mean_over(g: &Grid<f64>, sel: impl Fn(usize, usize) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..g.height() {
            for x in 0..g.width() {
                if sel(x, y) {
                    sum += *g.get(x, y);
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut img = flat(16, 12, 0.3);
        img.set(3, 4, [0.9, 0.1, 0.5]);
        let mask = Mask::from_fn(16, 12, |x, _| x > 5);
        assert!(image_loss(&img, &img, &mask, 0.2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_mask_has_zero_loss() {
        let a = flat(16, 12, 0.3);
        let b = flat(16, 12, 0.8);
        assert_eq!(image_loss(&a, &b, &Mask::filled(16, 12, false), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = flat(16, 12, 0.3);
        assert!(image_loss(&a, &flat(16, 11, 0.3), &Mask::filled(16, 12, true), 0.2).is_err());
        assert!(image_loss(&a, &a, &Mask::filled(15, 12, true), 0.2).is_err());
    }

    #[test]
    fn uniform_residuals_converge_to_inliers() {
        let f = frame_from_residual(Grid::filled(32, 24, 0.05), 8);
        let s = run(&f, 0.5, 200);
        assert!(mean_over(&s.m_hat, |_, _| true) > 0.9);
    }

    #[test]
    fn zero_regularizer_collapses_on_high_residuals() {
        let f = frame_from_residual(Grid::filled(32, 24, 0.6), 8);
        let s = run(&f, 0.0, 200);
        assert!(mean_over(&s.m_hat, |_, _| true) < 0.1);
    }

    #[test]
    fn bimodal_residuals_separate() {
        // the per-pixel equilibrium of the mask objective sits where the
        // residual equals reg_weight, so the distractor level must exceed it
        let block = |x: usize, y: usize| (8..20).contains(&x) && (6..16).contains(&y);
        let res = Grid::from_fn(48, 32, |x, y| if block(x, y) { 0.5 } else { 0.01 });
        let f = frame_from_residual(res, 8);
        let s = run(&f, 0.25, 200);
        let d = mean_over(&s.m_hat, block);
        let b = mean_over(&s.m_hat, |x, y| !block(x, y));
        assert!(d < b, "distractor {d} background {b}");
    }

    #[test]
    fn non_finite_residuals_rejected() {
        let mut res = Grid::filled(8, 8, 0.1);
        res.set(2, 2, f64::NAN);
        let f = ResidualFrame {
            render: flat(8, 8, 0.0),
            ground_truth: flat(8, 8, 0.0),
            residual: res.clone(),
            blurred_residual: res,
        };
        assert!(matches!(
            update_mask_model(&WarmupState::new(8, 8), &f, 0.5, 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mask_objective_has_no_prior_term() {
        assert_eq!(MASK_MODEL_TERMS, &[LossTerm::MaskedResidual, LossTerm::Regularizer]);
        assert_eq!(TRAINING_TERMS, &[LossTerm::MaskedImage]);
        let f = frame_from_residual(Grid::from_fn(8, 8, |x, _| x as f64 * 0.1), 2);
        let m = Grid::from_fn(8, 8, |_, y| y as f64 / 8.0);
        let masked: f64 = (0..64).map(|i| m.as_slice()[i] * f.residual.as_slice()[i]).sum::<f64>() / 64.0;
        let reg: f64 = m.as_slice().iter().map(|v| 1.0 - v).sum::<f64>() / 64.0;
        assert!((mask_model_loss(&m, &f, 0.5) - (masked + 0.5 * reg)).abs() < 1e-12);
    }

    #[test]
    fn update_leaves_frame_untouched() {
        let f = frame_from_residual(Grid::from_fn(8, 8, |x, y| ((x * y) % 5) as f64 * 0.1), 2);
        let before = f.clone();
        let _ = update_mask_model(&WarmupState::new(8, 8), &f, 0.5, 5.0).unwrap();
        assert_eq!(f, before);
    }

    fn prior(w: usize, h: usize) -> PriorMask {
        PriorMask {
            view: 0,
            static_map: Mask::from_fn(w, h, |x, y| (x + y) % 3 != 0),
            per_entity: Default::default(),
        }
    }

    #[test]
    fn warmup_boundary() {
        let p = prior(8, 8);
        let mut s = WarmupState::<f64>::new(8, 8);
        s.m_hat = Grid::filled(8, 8, 0.9);
        s.iteration = 500;
        assert_eq!(effective_mask(&s, Some(&p), &[], 500).unwrap(), p.static_map);
        s.iteration = 501;
        assert_eq!(effective_mask(&s, Some(&p), &[], 500).unwrap(), Mask::filled(8, 8, true));
        s.iteration = 3;
        assert!(matches!(effective_mask(&s, None, &[], 500), Err(Error::MissingPrior(3))));
    }

    #[test]
    fn entities_snap_to_majority() {
        let mut s = WarmupState::<f64>::new(6, 1);
        s.iteration = 10;
        s.m_hat = Grid::from_vec(6, 1, vec![0.9, 0.9, 0.1, 0.2, 0.8, 0.3]).unwrap();
        let e1 = EntityMask::new(1, Mask::from_fn(6, 1, |x, _| x < 3));
        let e2 = EntityMask::new(2, Mask::from_fn(6, 1, |x, _| x == 3 || x == 4));
        let m = effective_mask(&s, None, &[e1, e2], 5).unwrap();
        // entity 1: 2 of 3 on; entity 2: tie -> on; pixel 5 unsegmented stays off
        assert_eq!(m.as_slice(), &[true, true, true, true, true, false]);
    }

    #[test]
    fn box_blur_matches_direct_mean() {
        let g = Grid::from_fn(9, 7, |x, y| ((x * 7 + y * 3) % 11) as f64);
        let b = box_blur(&g, 2);
        for y in 0..7usize {
            for x in 0..9usize {
                let mut s = 0.0;
                let mut n = 0;
                for yy in y.saturating_sub(2)..(y + 3).min(7) {
                    for xx in x.saturating_sub(2)..(x + 3).min(9) {
                        s += *g.get(xx, yy);
                        n += 1;
                    }
                }
                assert!((b.get(x, y) - s / n as f64).abs() < 1e-12);
            }
        }
    }
}
