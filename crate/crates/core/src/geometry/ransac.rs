//! RANSAC scale/shift alignment of predicted depth to reference depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `target ~= scale * predicted + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel<T> {
    pub scale: T,
    pub shift: T,
    pub inlier_mask: Vec<bool>,
    pub inlier_rmse: T,
}

impl<T: Scalar> AlignmentModel<T> {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }

    pub fn apply(&self, predicted: T) -> T {
        self.scale * predicted + self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig<T> {
    pub iterations: usize,
    /// Absolute residual tolerance; `None` means 2% of the median absolute target.
    pub inlier_tol: Option<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for RansacConfig<T> {
    fn default() -> Self {
        RansacConfig {
            iterations: 500,
            inlier_tol: None,
            seed: 0,
        }
    }
}

/// Closed-form least-squares line through `(predicted, target)` pairs.
pub fn least_squares_fit<T: Scalar>(samples: &[(T, T)]) -> Result<(T, T)> {
    if samples.len() < 2 {
        return Err(Error::TooFewCorrespondences(samples.len()));
    }
    let n = T::from_count(samples.len());
    let mx = samples.iter().map(|s| s.0).sum::<T>() / n;
    let my = samples.iter().map(|s| s.1).sum::<T>() / n;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    for &(x, y) in samples {
        sxx = sxx + (x - mx) * (x - mx);
        sxy = sxy + (x - mx) * (y - my);
    }
    if sxx <= T::epsilon() * T::epsilon() * n * (mx * mx + T::one()) {
        return Err(Error::RankDeficient("predicted depths are all identical".into()));
    }
    let scale = sxy / sxx;
    Ok((scale, my - scale * mx))
}

fn median<T: Scalar>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite depth"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// Robust scale/shift fit with two-point hypotheses. The winning hypothesis
/// (most inliers, first found on ties) is refit by least squares on its
/// inliers until the inlier set stops changing.
pub fn ransac_align<T: Scalar>(samples: &[(T, T)], cfg: &RansacConfig<T>) -> Result<AlignmentModel<T>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewCorrespondences(n));
    }
    if samples.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("depth correspondences".into()));
    }
    let first = samples[0].0;
    if samples.iter().all(|s| s.0 == first) {
        return Err(Error::RankDeficient("predicted depths are all identical".into()));
    }
    let tol = match cfg.inlier_tol {
        Some(t) => t,
        None => median(samples.iter().map(|s| s.1.abs()).collect()) * T::lit(0.02),
    };
    let inliers_of = |scale: T, shift: T| -> Vec<bool> {
        samples
            .iter()
            .map(|&(x, y)| (y - (scale * x + shift)).abs() <= tol)
            .collect()
    };
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, T, T)> = None;
    for _ in 0..cfg.iterations {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (x1, y1) = samples[a];
        let (x2, y2) = samples[b];
        if x1 == x2 {
            continue;
        }
        let scale = (y2 - y1) / (x2 - x1);
        if !(scale > T::zero()) || !scale.is_finite() {
            continue;
        }
        let shift = y1 - scale * x1;
        let c = count(&inliers_of(scale, shift));
        if best.map_or(true, |(bc, _, _)| c > bc) {
            best = Some((c, scale, shift));
        }
    }
    let (_, mut scale, mut shift) = best.ok_or_else(|| {
        Error::RankDeficient("no positive-scale hypothesis found".into())
    })?;

    let mut mask = inliers_of(scale, shift);
    for _ in 0..10 {
        let inl: Vec<(T, T)> = samples
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| *s)
            .collect();
        match least_squares_fit(&inl) {
            Ok((s, b)) if s > T::zero() => {
                scale = s;
                shift = b;
            }
            _ => break,
        }
        let next = inliers_of(scale, shift);
        if count(&next) < 2 || next == mask {
            break;
        }
        mask = next;
    }
    if !(scale > T::zero()) {
        return Err(Error::RankDeficient("non-positive scale".into()));
    }
    let (sq, k) = samples
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((T::zero(), 0usize), |(acc, k), (&(x, y), _)| {
            let r = y - (scale * x + shift);
            (acc + r * r, k + 1)
        });
    let inlier_rmse = if k == 0 {
        T::zero()
    } else {
        (sq / T::from_count(k)).sqrt()
    };
    Ok(AlignmentModel {
        scale,
        shift,
        inlier_mask: mask,
        inlier_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_data_gives_identity() {
        let s: Vec<(f64, f64)> = (1..20).map(|i| (i as f64 * 0.3, i as f64 * 0.3)).collect();
        let m = ransac_align(&s, &RansacConfig::default()).unwrap();
        assert!((m.scale - 1.0).abs() < 1e-12);
        assert!(m.shift.abs() < 1e-12);
        assert_eq!(m.inlier_count(), s.len());
        assert!(m.inlier_rmse < 1e-12);
    }

    #[test]
    fn single_correspondence_is_an_error() {
        assert!(matches!(
            ransac_align(&[(1.0f64, 2.0)], &RansacConfig::default()),
            Err(Error::TooFewCorrespondences(1))
        ));
    }

    #[test]
    fn identical_predictions_are_rank_deficient() {
        let s = vec![(2.0f32, 1.0), (2.0, 3.0), (2.0, 5.0)];
        assert!(matches!(
            ransac_align(&s, &RansacConfig::default()),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn seeded_runs_repeat() {
        let s: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let x = 0.5 + i as f64 * 0.1;
                (x, if i % 4 == 0 { 9.0 - x } else { 1.5 * x + 0.2 })
            })
            .collect();
        let cfg = RansacConfig { seed: 11, ..Default::default() };
        assert_eq!(ransac_align(&s, &cfg).unwrap(), ransac_align(&s, &cfg).unwrap());
    }
}
